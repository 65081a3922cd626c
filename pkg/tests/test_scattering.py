import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sat.model import ChannelParams, transparency_detuning
from sat.scattering import (
    PROFILE_COLUMNS,
    EvanescentModeError,
    amplitudes,
    dilute_gas_current,
    max_transmission_resonant,
    transmission,
    transmission_profile,
)

interior_k = st.floats(min_value=1e-3, max_value=math.pi - 1e-3)
coupling = st.floats(min_value=-5, max_value=5)


def test_free_particle():
    a = amplitudes(math.pi / 2, ChannelParams())
    assert a.f_plus == 1 and a.f_minus == 0 and a.T == 1


def test_fano_zero_at_band_centre():
    a = amplitudes(math.pi / 2, ChannelParams(Omega=1))
    assert a.T == 0 and a.f_plus == 0 and a.f_minus == 1


def test_three_quarters_at_pi_over_three():
    a = amplitudes(math.pi / 3, ChannelParams(Omega=1))
    assert a.T == pytest.approx(0.75, abs=1e-14)


@pytest.mark.parametrize("k", [0.0, math.pi, -0.3, 4.0])
def test_evanescent(k):
    with pytest.raises(EvanescentModeError):
        amplitudes(k, ChannelParams(Omega=1))


@given(interior_k, st.floats(min_value=0, max_value=10), coupling, coupling)
def test_unitarity(k, Om, D, U):
    a = amplitudes(k, ChannelParams(Omega=Om, Delta=D, U_qb=U))
    assert abs(a.f_plus + a.f_minus - 1) <= 1e-12
    assert abs(a.T + a.R - 1) <= 1e-12
    assert 0 <= a.T <= 1
    assert a.T == pytest.approx(abs(a.f_plus) ** 2, abs=1e-14)


@given(interior_k, st.floats(min_value=0, max_value=10))
def test_particle_hole_symmetry_at_resonance(k, Om):
    p = ChannelParams(Omega=Om)
    assert float(transmission(k, p)) == pytest.approx(float(transmission(math.pi - k, p)), abs=1e-12)


@given(interior_k, st.floats(min_value=0, max_value=10), coupling, coupling)
def test_vectorised_matches_scalar(k, Om, D, U):
    p = ChannelParams(Omega=Om, Delta=D, U_qb=U)
    assert float(transmission(k, p)) == pytest.approx(amplitudes(k, p).T, abs=1e-12)


def test_profile_band_blocking():
    prof = transmission_profile(ChannelParams(Omega=4), 400)
    assert prof.T.max() <= 0.016
    assert max_transmission_resonant(ChannelParams(Omega=4)) == pytest.approx(4 / 260)


@pytest.mark.parametrize("n", [50, 51])
def test_profile_zero_and_unity_points(n):
    prof = transmission_profile(ChannelParams(Omega=1, U_qb=2), n)
    assert np.any((prof.epsilon == 0.0) & (prof.T == 0))
    i = np.argmin(np.abs(prof.epsilon + 0.5))
    assert prof.epsilon[i] == -0.5 and prof.T[i] == 1.0


def test_profile_shifted_zero_follows_detuning():
    prof = transmission_profile(ChannelParams(Omega=1, Delta=0.7), 20)
    i = np.argmin(prof.T)
    assert prof.T[i] == 0 and prof.epsilon[i] == -0.7


def test_profile_free():
    prof = transmission_profile(ChannelParams(), 30)
    assert np.all(prof.T == 1)
    assert len(prof.k) == 30


@given(st.integers(min_value=2, max_value=200), st.floats(min_value=0, max_value=8), coupling, coupling)
def test_profile_invariants(n, Om, D, U):
    prof = transmission_profile(ChannelParams(Omega=Om, Delta=D, U_qb=U), n)
    assert np.all(np.diff(prof.epsilon) > 0)
    assert np.all((prof.T >= 0) & (prof.T <= 1))
    assert len(next(prof.rows())) == len(PROFILE_COLUMNS)


def test_profile_needs_two_samples():
    with pytest.raises(ValueError):
        transmission_profile(ChannelParams(), 1)


def test_transparent_channel_is_nearly_flat():
    p = ChannelParams(Omega=8, U_qb=2)
    p = p.with_(Delta=transparency_detuning(p))
    prof = transmission_profile(p, 200)
    assert prof.T[np.abs(prof.epsilon) <= 1.5].min() > 0.98


def test_dilute_gas_current():
    assert dilute_gas_current(math.pi / 2, 10, ChannelParams(), 10) == pytest.approx(2.0)
    assert dilute_gas_current(math.pi / 3, 10, ChannelParams(Omega=1), 10) == pytest.approx(0.75 * math.sqrt(3))
    assert dilute_gas_current(math.pi / 2, 10, ChannelParams(Omega=1), 10) == 0
