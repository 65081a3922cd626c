import math

import numpy as np
import pytest
import scipy.sparse as sp

from sat import fermiflow, oracle
from sat.model import ChannelParams, LatticeGeometry, Species
from sat.scattering import transmission


def reference_hamiltonian(params, geometry, basis):
    """Dictionary-based H|c> for every basis configuration."""
    L, imp = geometry.n_sites, geometry.impurity_index
    index = {tuple(c): i for i, c in enumerate(basis.configs)}
    H = np.zeros((basis.dim, basis.dim))
    for col, c in enumerate(basis.configs):
        occ, s = list(c[:-1]), c[-1]
        H[col, col] += 0.5 * params.U_bb * sum(n * (n - 1) for n in occ)
        H[col, col] += (params.U_bm * occ[imp] - params.Delta) if s else params.U_qb * occ[imp]
        for i in range(L - 1):
            for a, b in ((i, i + 1), (i + 1, i)):
                if occ[b] > 0 and occ[a] < params.n_max:
                    new = occ.copy()
                    amp = math.sqrt(new[b] * (new[a] + 1))
                    new[b] -= 1
                    new[a] += 1
                    H[index[tuple(new) + (s,)], col] += -params.J * amp
        if s == 0 and occ[imp] > 0:
            new = occ.copy()
            amp = params.Omega * math.sqrt(new[imp])
            new[imp] -= 1
            row = index[tuple(new) + (1,)]
            H[row, col] += amp
            H[col, row] += amp
    return H


def test_two_site_hopping_block():
    H, basis = oracle.exact_hamiltonian(ChannelParams(), LatticeGeometry(1, 0, 1))
    atoms = np.nonzero(basis.configs[:, -1] == 0)[0]
    assert np.array_equal(H.toarray()[np.ix_(atoms, atoms)], [[0, -1], [-1, 0]])


def test_single_impurity_block():
    p = ChannelParams(Omega=0.7, Delta=0.3, U_qb=1.1)
    H, basis = oracle.exact_hamiltonian(p, LatticeGeometry(1, 0, 1))
    empty_box = np.nonzero(basis.configs[:, 0] == 0)[0]
    block = H.toarray()[np.ix_(empty_box, empty_box)]
    order = np.argsort(basis.configs[empty_box, -1])  # |1,q> then |0,m>
    assert np.allclose(block[np.ix_(order, order)], [[1.1, 0.7], [0.7, -0.3]], atol=1e-15)


@pytest.mark.parametrize(
    "params, geometry",
    [
        (ChannelParams(Omega=0.8, Delta=0.2, U_qb=0.5, U_bm=-0.4, U_bb=3.0, n_max=2), LatticeGeometry(2, 1, 2)),
        (ChannelParams(Omega=1.3, U_bb=4.0, n_max=2), LatticeGeometry(2, 2, 3)),
        (ChannelParams(Omega=1.0, Delta=-0.5, n_max=1), LatticeGeometry(3, 2, 3)),
    ],
)
def test_hamiltonian_against_enumeration(params, geometry):
    H, basis = oracle.exact_hamiltonian(params, geometry)
    dense = H.toarray()
    assert np.allclose(dense, dense.T.conj(), atol=0)
    assert np.allclose(dense, reference_hamiltonian(params, geometry, basis), atol=1e-14)


def test_sector_constraint():
    _, basis = oracle.exact_hamiltonian(ChannelParams(Omega=1, n_max=2), LatticeGeometry(3, 2, 3))
    assert np.all(basis.configs[:, :-1].sum(axis=1) + basis.configs[:, -1] == 3)
    assert basis.configs[:, :-1].max() <= 2


def test_sector_cap(monkeypatch):
    monkeypatch.setattr(oracle, "MAX_SECTOR_DIM", 10)
    with pytest.raises(oracle.SectorSizeError):
        oracle.exact_hamiltonian(ChannelParams(n_max=2), LatticeGeometry(4, 3, 3))


def test_fermions_rejected():
    with pytest.raises(ValueError):
        oracle.exact_hamiltonian(ChannelParams(species="fermion"), LatticeGeometry(2, 2, 1))


def test_zero_hamiltonian_leaves_state():
    geo = LatticeGeometry(2, 1, 1)
    state = oracle.product_state([1, 0, 0, 0], geo, 1)
    H = sp.csr_matrix((state.basis.dim, state.basis.dim))
    traj = oracle.exact_evolve(state, H, 0.3, 4)
    assert all(np.array_equal(s.amplitudes, state.amplitudes) for s in traj)


def test_rabi_transfer():
    p = ChannelParams(Omega=1.0)
    basis = oracle.sector_basis(1, 1, 1, impurity=0)
    H = oracle._impurity_terms(basis, p)
    start = oracle.DenseState(np.array([1.0 + 0j, 0.0]) if basis.configs[0, -1] == 0 else np.array([0j, 1.0]), basis)
    final = oracle.exact_evolve(start, H, math.pi / 2, 1)[-1]
    mol = int(np.nonzero(basis.configs[:, -1] == 1)[0][0])
    assert final.amplitudes[mol] == pytest.approx(-1j, abs=1e-14)


def test_norm_drift():
    p = ChannelParams(Omega=1.0, U_bb=4.0, n_max=2)
    geo = LatticeGeometry(4, 3, 3)
    H, _ = oracle.exact_hamiltonian(p, geo)
    _, psi = oracle.exact_ground_state(p, geo)
    assert psi.norm() == pytest.approx(1, abs=1e-12)
    assert max(abs(s.norm() - 1) for s in oracle.exact_evolve(psi, H, 0.5, 10)) <= 1e-10




def test_single_particle_agrees_with_orbital_evolution():
    p = ChannelParams(Omega=0.7, Delta=0.3, U_qb=0.4)
    geo = LatticeGeometry(4, 4, 1)
    H, _ = oracle.exact_hamiltonian(p, geo)
    _, psi = oracle.exact_ground_state(p, geo)
    dense = oracle.exact_evolve(psi, H, 0.2, 25)
    system = fermiflow.build_system(p.with_(species=Species.FERMION), geo)
    series = fermiflow.evolve(fermiflow.prepare_fermi_sea(system, geo), system, 0.2, 25)
    assert np.max(np.abs(series.n_right - [s.n_right() for s in dense])) <= 1e-10
    assert np.max(np.abs(series.n_mol - [s.molecule() for s in dense])) <= 1e-10


def test_ground_state_of_single_particle_box():
    e, _ = oracle.exact_ground_state(ChannelParams(), LatticeGeometry(4, 1, 1))
    assert e == pytest.approx(-2 * math.cos(math.pi / 5), abs=1e-12)


def test_spdm_is_hermitian_with_density_diagonal():
    p = ChannelParams(Omega=1.0, U_bb=4.0, n_max=2)
    geo = LatticeGeometry(4, 3, 3)
    H, _ = oracle.exact_hamiltonian(p, geo)
    _, psi = oracle.exact_ground_state(p, geo)
    psi = oracle.exact_evolve(psi, H, 1.0, 1)[-1]
    rho = psi.spdm()
    assert np.allclose(rho, rho.conj().T, atol=1e-14)
    assert np.allclose(np.diag(rho).real, psi.densities(), atol=1e-14)
    assert np.trace(rho).real + psi.molecule() == pytest.approx(3, abs=1e-10)


def test_wavepacket_free():
    res = oracle.wavepacket_transmission(math.pi / 2, ChannelParams())
    assert res.transmitted == pytest.approx(1.0, abs=1e-6)


def test_wavepacket_fano_zero():
    res = oracle.wavepacket_transmission(math.pi / 2, ChannelParams(Omega=1.0))
    assert res.transmitted <= 0.02


def test_wavepacket_three_quarters():
    res = oracle.wavepacket_transmission(math.pi / 3, ChannelParams(Omega=1.0))
    assert res.transmitted == pytest.approx(0.75, abs=0.02)
    assert res.transmitted + res.reflected + res.molecule + res.bound == pytest.approx(1.0, abs=1e-9)


def test_wavepacket_shifted_zero():
    p = ChannelParams(Omega=1.0, Delta=0.3)
    k0 = math.acos(0.3 / 2)  # eps(k0) = -0.3
    assert oracle.wavepacket_transmission(k0, p).transmitted <= 0.02
    assert float(transmission(k0, p)) < 1e-30


def test_wavepacket_preconditions():
    with pytest.raises(ValueError):
        oracle.wavepacket_transmission(1.0, ChannelParams(), width=20)
    with pytest.raises(ValueError):
        oracle.wavepacket_transmission(1.0, ChannelParams(), lattice_size=300)


def test_wavepacket_contamination():
    with pytest.raises(oracle.ReflectionContaminationError):
        oracle.wavepacket_transmission(0.05, ChannelParams(Omega=1.0), lattice_size=400, width=40)


def test_krylov_path_matches_eigen_path():
    p = ChannelParams(Omega=0.9, U_bb=2.0, n_max=2)
    geo = LatticeGeometry(8, 7, 4)  # sector above the dense-eigensolver threshold
    H, basis = oracle.exact_hamiltonian(p, geo)
    assert basis.dim > 3000
    _, psi = oracle.exact_ground_state(p, geo)
    krylov = oracle.exact_evolve(psi, H, 0.25, 4)
    w, v = np.linalg.eigh(H.toarray())
    c = v.conj().T @ psi.amplitudes
    for m, s in enumerate(krylov):
        assert np.max(np.abs(s.amplitudes - v @ (np.exp(-1j * w * 0.25 * m) * c))) < 1e-10
