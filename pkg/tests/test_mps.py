import math

import numpy as np
import pytest

from sat import fermiflow, mps, observables, oracle
from sat.model import ChannelParams, LatticeGeometry, Species

SMALL = ChannelParams(Omega=1.0, U_bb=4.0, n_max=2)
SMALL_GEO = LatticeGeometry(4, 3, 3)


@pytest.fixture(scope="module")
def small_reference():
    H, _ = oracle.exact_hamiltonian(SMALL, SMALL_GEO)
    _, psi = oracle.exact_ground_state(SMALL, SMALL_GEO)
    return oracle.exact_evolve(psi, H, 0.1, 10)


def small_run(dt=0.002, chi=None, T=1.0):
    state = mps.ground_state(SMALL, SMALL_GEO, chi_max=chi, discard_tol=0.0, tol=1e-13)
    return mps.evolve_quench(state, SMALL, SMALL_GEO, dt=dt, T_final=T, obs_interval=0.1, truncation_budget=1.0)


def max_error(traj, ref):
    dens = max(np.max(np.abs(d - r.densities())) for d, r in zip(traj.densities, ref))
    mol = max(abs(m - r.molecule()) for m, r in zip(traj.n_mol, ref))
    return max(dens, mol)


def test_site_bases():
    b = mps.SiteBasis("impurity", 2)
    assert b.local_dim == 6
    assert list(b.occupations()) == [0, 1, 2, 0, 1, 2]
    assert list(b.charges()) == [0, 1, 2, 1, 2, 3]
    assert mps.SiteBasis("bulk", 3).local_dim == 4


def test_conversion_rule():
    b = mps.SiteBasis("impurity", 2)
    c = mps.conversion_operator(b)
    assert c[b.index(0, 1), b.index(1, 0)] == 1
    assert c[b.index(1, 1), b.index(2, 0)] == pytest.approx(math.sqrt(2))
    assert not c[:, b.index(0, 0)].any()
    assert not c[:, b.index(2, 1)].any() and not c.T[:, b.index(2, 1)].any()
    # particle number (molecule counts one) is conserved
    q = b.charges()
    rows, cols = np.nonzero(c)
    assert np.all(q[rows] == q[cols])


@pytest.mark.parametrize(
    "params, geometry",
    [
        (ChannelParams(Omega=0.8, Delta=0.3, U_qb=0.5, U_bm=-0.2, n_max=1), LatticeGeometry(2, 1, 2)),
        (ChannelParams(Omega=1.1, Delta=-0.4, U_qb=0.2, U_bm=0.6, U_bb=3.0, n_max=2), LatticeGeometry(2, 1, 2)),
    ],
)
def test_bond_terms_rebuild_oracle_hamiltonian(params, geometry):
    bases = mps.site_bases(params, geometry)
    dense = mps.assemble_dense(mps.bond_hamiltonians(params, bases), [b.local_dim for b in bases])
    H, basis = oracle.exact_hamiltonian(params, geometry)
    idx = oracle.product_indices(basis)
    assert np.max(np.abs(dense[np.ix_(idx, idx)] - H.toarray())) <= 1e-12
    # nothing couples the sector to the rest of the product space
    others = np.setdiff1d(np.arange(dense.shape[0]), idx)
    assert np.max(np.abs(dense[np.ix_(others, idx)])) == 0


def test_gates_small_dt_and_errors():
    gs = mps.build_gates(SMALL, SMALL_GEO, 1e-7)
    terms = mps.bond_hamiltonians(SMALL, mps.site_bases(SMALL, SMALL_GEO))
    for g, h in zip(gs.gates, terms):
        assert np.max(np.abs(g - (np.eye(len(g)) - 1e-7j * h))) < 1e-12
    with pytest.raises(ValueError):
        mps.build_gates(SMALL, SMALL_GEO, 0.0)
    with pytest.raises(ValueError):
        mps.build_gates(SMALL, SMALL_GEO, 0.1, mode="complex")


def test_isolated_rabi_gate():
    b = mps.SiteBasis("impurity", 1)
    h = mps.onsite_hamiltonian(ChannelParams(Omega=1.0), b)
    g = mps.exponentiate(h, 1j * math.pi / 2)
    out = g[:, b.index(1, 0)]
    assert out[b.index(0, 1)] == pytest.approx(-1j, abs=1e-14)
    assert np.sum(np.abs(out) ** 2) == pytest.approx(1, abs=1e-14)


def test_mott_state_is_a_product():
    p = ChannelParams(n_max=1)
    state = mps.ground_state(p, LatticeGeometry(6, 4, 6))
    assert all(len(s) == 1 and s[0] == pytest.approx(1) for s in state.S)
    assert np.allclose(state.densities(), [1] * 6 + [0] * 5)


def test_single_particle_box_energy():
    res = mps.box_ground_state(ChannelParams(n_max=1), 4, 1)
    assert res.energy == pytest.approx(-2 * math.cos(math.pi / 5), abs=1e-7)


def test_ground_state_matches_exact_diagonalization():
    geo = LatticeGeometry(8, 1, 3)
    p = ChannelParams(U_bb=4.0, n_max=2)
    res = mps.box_ground_state(p, 8, 3, tol=1e-10)
    e_exact, _ = oracle.exact_ground_state(p, geo)
    assert res.energy == pytest.approx(e_exact, abs=1e-6)
    assert res.state.densities().sum() == pytest.approx(3, abs=1e-10)


def test_ground_state_rejects_fermions_and_overfill():
    with pytest.raises(ValueError):
        mps.ground_state(ChannelParams(species="fermion"), LatticeGeometry(3, 2, 2))
    with pytest.raises(ValueError):
        mps.ground_state(ChannelParams(n_max=1), LatticeGeometry(3, 2, 4))


def test_convergence_error():
    with pytest.raises(mps.ConvergenceError):
        mps.box_ground_state(ChannelParams(U_bb=1.0, n_max=2), 6, 3, dt_ladder=(0.01,), max_steps=20, tol=1e-14)


def test_canonical_form_and_spectra():
    s = mps.ground_state(SMALL, SMALL_GEO, chi_max=None, discard_tol=0.0)
    mps.evolve_quench(s, SMALL, SMALL_GEO, dt=0.01, T_final=1.0, obs_interval=0.5)
    for i in range(s.L):
        b = s.B[i]
        gram = np.einsum("asb,csb->ac", b, b.conj())
        assert np.allclose(gram, np.eye(len(gram)), atol=1e-8)
        assert np.sum(s.S[i] ** 2) == pytest.approx(1, abs=1e-10)
        assert np.all(np.diff(s.S[i]) <= 1e-14) or len(s.S[i]) == 1
    assert s.norm() == pytest.approx(1, abs=1e-8)


def test_matches_exact_evolution(small_reference):
    traj = small_run(dt=0.002)
    assert max_error(traj, small_reference) <= 1e-6
    assert max(abs(n - 3) for n in traj.n_total) <= 1e-10


def test_second_order_trotter(small_reference):
    e1 = max_error(small_run(dt=0.004), small_reference)
    e2 = max_error(small_run(dt=0.002), small_reference)
    assert 3.0 <= e1 / e2 <= 5.0


def test_truncation_monotonicity(small_reference):
    errors = [max_error(small_run(dt=0.004, chi=chi), small_reference) for chi in (2, 4, 8, None)]
    assert all(b <= a * (1 + 1e-6) for a, b in zip(errors, errors[1:]))


def test_hard_core_bosons_follow_fermions_without_coupling():
    geo = LatticeGeometry(8, 8, 8)
    p = ChannelParams(n_max=1)
    traj = mps.evolve_quench(mps.ground_state(p, geo), p, geo, dt=0.02, T_final=3.2, obs_interval=0.1)
    system = fermiflow.build_system(p.with_(species=Species.FERMION), geo)
    series = fermiflow.evolve(fermiflow.prepare_fermi_sea(system, geo), system, 0.1, 32)
    assert np.max(np.abs(np.array(traj.n_right) - series.n_right)) <= 0.05


def test_strong_blocking_preserves_mott_state():
    geo = LatticeGeometry(8, 8, 8)
    p = ChannelParams(Omega=50.0, n_max=1)
    start = mps.ground_state(p, geo)
    state = start.copy()
    traj = mps.evolve_quench(state, p, geo, dt=0.01, T_final=10.0, obs_interval=0.5)
    assert abs(mps.overlap(start, state)) ** 2 >= 0.99
    assert max(traj.n_right) <= 0.01 * geo.N


def test_long_run_conservation():
    geo = LatticeGeometry(6, 5, 4)
    p = ChannelParams(Omega=1.0, U_bb=4.0, n_max=2)
    state = mps.ground_state(p, geo)
    traj = mps.evolve_quench(state, p, geo, dt=0.02, T_final=20.0, obs_interval=1.0)
    assert traj.status == "ok"
    assert len(traj.times) == 21
    assert abs(state.norm() - 1) <= 1e-6
    assert max(abs(n - 4) for n in traj.n_total) <= 1e-6
    e = np.array(traj.energy)
    assert np.max(np.abs(e - e[0])) / abs(e[0]) <= 1e-4


def test_truncation_budget_stops_run():
    geo = LatticeGeometry(6, 5, 6)
    p = ChannelParams(Omega=1.0, n_max=1)
    state = mps.ground_state(p, geo, chi_max=2)
    traj = mps.evolve_quench(state, p, geo, dt=0.05, T_final=5.0, truncation_budget=1e-6)
    assert traj.status == "truncation-budget-exceeded"
    assert traj.times[-1] < 5.0


def test_ramp_schedule():
    s = mps.OmegaSchedule.slow(1.0)
    assert s(0) == 8.0 and s(2.5) == pytest.approx(4.5) and s(5.0) == 1.0 and s(9.0) == 1.0
    assert not s.constant and mps.OmegaSchedule.sudden(2.0).constant
    geo = LatticeGeometry(4, 3, 4)
    p = ChannelParams(Omega=1.0, n_max=1)
    traj = mps.evolve_quench(mps.ground_state(p, geo), p, geo, dt=0.05, T_final=6.0, schedule=s, obs_interval=0.5)
    assert traj.omega[0] == 8.0 and traj.omega[-1] == 1.0
    assert max(abs(n - 4) for n in traj.n_total) <= 1e-6


def test_boost_keeps_densities_and_shifts_momentum():
    p = ChannelParams(n_max=1)
    geo = LatticeGeometry(12, 1, 1)
    state = mps.ground_state(p, geo, tol=1e-6)
    assert mps.boost_state(state, 0.0).to_dense() == pytest.approx(state.to_dense())
    boosted = mps.boost_state(state, math.pi / 2)
    assert np.max(np.abs(boosted.densities() - state.densities())) <= 1e-12
    before = observables.momentum_distribution(observables.spdm(state))
    after = observables.momentum_distribution(observables.spdm(boosted))
    step = 2 * math.pi / before.k_grid.size
    assert before.peak() == pytest.approx(0, abs=step)
    assert after.peak() == pytest.approx(math.pi / 2, abs=step)


def test_dense_round_trip():
    state = mps.ground_state(SMALL, SMALL_GEO, chi_max=None, discard_tol=0.0)
    psi = state.to_dense()
    again = mps.from_dense(psi, state.bases, 3)
    assert abs(abs(np.vdot(again.to_dense(), psi)) - 1) < 1e-12


def test_checkpoint_round_trip(tmp_path):
    state = mps.ground_state(SMALL, SMALL_GEO)
    path = tmp_path / "state.npz"
    mps.save_checkpoint(path, state, {"t": 0.0, "note": "ground"})
    loaded, meta = mps.load_checkpoint(path)
    assert meta == {"t": 0.0, "note": "ground"}
    assert abs(mps.overlap(state, loaded) - 1) < 1e-14
    assert loaded.chi_max == state.chi_max and loaded.bases == state.bases
