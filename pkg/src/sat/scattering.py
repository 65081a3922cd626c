"""Exact single-particle scattering off the dressed impurity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sat.model import (
    POLE,
    ChannelParams,
    dispersion,
    fano_unity_energy,
    fano_zero_energy,
    group_velocity,
    in_band,
    u_eff,
)


class EvanescentModeError(ValueError):
    """Raised for wavenumbers at or beyond the band edges where v(k) <= 0."""


@dataclass(frozen=True)
class ScatteringAmplitudes:
    k: float
    f_plus: complex
    f_minus: complex
    T: float
    R: float


def _from_interaction(k: float, v: float, u) -> ScatteringAmplitudes:
    if u is POLE:
        return ScatteringAmplitudes(k=k, f_plus=0j, f_minus=1 + 0j, T=0.0, R=1.0)
    denom = v + 1j * u
    f_plus = v / denom
    f_minus = 1j * u / denom
    w = v * v + u * u
    return ScatteringAmplitudes(k=k, f_plus=complex(f_plus), f_minus=complex(f_minus), T=v * v / w, R=u * u / w)


def amplitudes(k: float, params: ChannelParams) -> ScatteringAmplitudes:
    """Forward and backward amplitudes ``f+ = [1 + i U_eff/v]^-1``, ``f- = [1 + v/(i U_eff)]^-1``.

    Raises:
        EvanescentModeError: if ``k`` is not strictly inside ``(0, pi)``.
    """
    k = float(k)
    if not 0.0 < k < np.pi:
        raise EvanescentModeError(f"k={k} is not a right-moving propagating mode in (0, pi)")
    v = float(group_velocity(k, params))
    if v <= 0.0:
        raise EvanescentModeError(f"k={k} has vanishing group velocity")
    return _from_interaction(k, v, u_eff(k, params))


def transmission(k, params: ChannelParams) -> np.ndarray:
    """Vectorised ``T(k)`` for arrays of propagating wavenumbers."""
    k = np.asarray(k, dtype=float)
    eps = dispersion(k, params)
    v = group_velocity(k, params)
    if params.Omega == 0:
        u = np.full_like(k, params.U_qb)
    else:
        with np.errstate(divide="ignore"):
            u = params.U_qb + params.Omega**2 / (eps + params.Delta)
    with np.errstate(invalid="ignore"):
        T = v * v / (v * v + u * u)
    return np.where(np.isfinite(u), T, 0.0)


@dataclass(frozen=True)
class TransmissionProfile:
    """``T`` versus band energy for one channel, sampled uniformly in ``k``."""

    k: np.ndarray
    epsilon: np.ndarray
    T: np.ndarray
    R: np.ndarray
    f_plus: np.ndarray
    channel: ChannelParams

    def rows(self):
        for i in range(len(self.k)):
            yield (self.k[i], self.epsilon[i], self.T[i], self.R[i], self.f_plus[i].real, self.f_plus[i].imag)


PROFILE_COLUMNS = ("k", "epsilon", "T", "R", "re_f_plus", "im_f_plus")


def transmission_profile(params: ChannelParams, n_samples: int) -> TransmissionProfile:
    """Sample the band at ``n_samples`` uniform interior ``k`` values.

    The Fano zero and the complete-transmission point are inserted as exact
    samples (exact energy, exact T) whenever they fall inside the band; a grid
    point at the same ``k`` is replaced.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    ks = np.pi * np.arange(1, n_samples + 1) / (n_samples + 1)
    samples = {float(k): (float(dispersion(k, params)), amplitudes(k, params)) for k in ks}

    J = params.J
    for eps, u in ((fano_zero_energy(params), POLE), (fano_unity_energy(params), 0.0)):
        if not in_band(eps, params):
            continue
        k_star = float(np.arccos(-eps / (2 * J)))
        for k in [k for k in samples if abs(k - k_star) <= 1e-12]:
            del samples[k]
        samples[k_star] = (eps, _from_interaction(k_star, float(group_velocity(k_star, params)), u))

    ordered = [samples[k] for k in sorted(samples)]
    return TransmissionProfile(
        k=np.array(sorted(samples)),
        epsilon=np.array([e for e, _ in ordered]),
        T=np.array([a.T for _, a in ordered]),
        R=np.array([a.R for _, a in ordered]),
        f_plus=np.array([a.f_plus for _, a in ordered]),
        channel=params,
    )


def max_transmission_resonant(params: ChannelParams) -> float:
    """Analytic band maximum of T for ``Delta = U_qb = 0``: ``4J^4 / (4J^4 + Omega^4)``."""
    J4 = params.J**4
    return 4 * J4 / (4 * J4 + params.Omega**4)


def dilute_gas_current(k: float, N: int, params: ChannelParams, M_left: int) -> float:
    """Current of a narrow-momentum gas boosted to ``k``: ``N T(k) v(k) / M_left``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    amp = amplitudes(k, params)
    return N * amp.T * float(group_velocity(k, params)) / M_left
