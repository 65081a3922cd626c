"""Brute-force references: sector-restricted exact diagonalization and wave-packet scattering.

The dense basis holds every occupation pattern ``(n_0, ..., n_{L-1}, s)`` with
``sum(n) + s = N``, where ``s = 1`` flags the molecule on the impurity site.
Not a performance path; the sector dimension is capped.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse import linalg as spla

from sat.fermiflow import SpectralPropagator, build_system
from sat.model import ChannelParams, LatticeGeometry, Species

MAX_SECTOR_DIM = 2_000_000


class SectorSizeError(ValueError):
    pass


class ReflectionContaminationError(RuntimeError):
    """The wave packet reached the lattice boundary before leaving the impurity."""


@dataclass
class SectorBasis:
    """Fixed-particle-number basis of bulk occupations plus the impurity register.

    ``configs[:, j]`` is the occupation of site ``j``; the last column is ``s``.
    ``impurity`` is None for a plain Bose-Hubbard chain without impurity.
    """

    configs: np.ndarray
    n_max: int
    impurity: int | None

    def __post_init__(self) -> None:
        radix = self.n_max + 1
        L = self.configs.shape[1] - 1
        if np.log2(radix) * L + 1 > 62:
            raise SectorSizeError("basis too long for integer key encoding")
        self._weights = np.append(radix ** np.arange(L, dtype=np.int64), radix**L).astype(np.int64)
        keys = self.configs @ self._weights
        self._order = np.argsort(keys)
        self._sorted_keys = keys[self._order]

    @property
    def dim(self) -> int:
        return self.configs.shape[0]

    @property
    def n_sites(self) -> int:
        return self.configs.shape[1] - 1

    def index(self, configs: np.ndarray) -> np.ndarray:
        keys = np.atleast_2d(configs) @ self._weights
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, self.dim - 1)
        if not np.all(self._sorted_keys[pos] == keys):
            raise KeyError("configuration outside the sector")
        return self._order[pos]

    def particle_numbers(self) -> np.ndarray:
        return self.configs.sum(axis=1)


def _compositions(n_sites: int, total: int, n_max: int):
    if n_sites == 0:
        if total == 0:
            yield ()
        return
    for first in range(min(n_max, total), -1, -1):
        for rest in _compositions(n_sites - 1, total - first, n_max):
            yield (first,) + rest


def sector_basis(n_sites: int, N: int, n_max: int, impurity: int | None) -> SectorBasis:
    rows = []
    s_values = (0, 1) if impurity is not None else (0,)
    for s in s_values:
        for occ in _compositions(n_sites, N - s, n_max):
            rows.append(occ + (s,))
            if len(rows) > MAX_SECTOR_DIM:
                raise SectorSizeError(f"sector dimension exceeds {MAX_SECTOR_DIM}")
    if not rows:
        raise SectorSizeError("empty sector")
    return SectorBasis(configs=np.array(rows, dtype=np.int64), n_max=n_max, impurity=impurity)


def _hop_matrix(basis: SectorBasis, i: int, j: int) -> sp.csr_matrix:
    """Matrix of ``b_i^dag b_j`` (i != j) in the sector basis."""
    c = basis.configs
    ok = (c[:, j] > 0) & (c[:, i] < basis.n_max)
    src = np.nonzero(ok)[0]
    new = c[src].copy()
    amp = np.sqrt(new[:, j] * (new[:, i] + 1.0))
    new[:, j] -= 1
    new[:, i] += 1
    dst = basis.index(new)
    return sp.csr_matrix((amp, (dst, src)), shape=(basis.dim, basis.dim))


def _bose_hubbard_terms(basis: SectorBasis, J: float, U_bb: float, cut_bond: int | None = None) -> sp.csr_matrix:
    L = basis.n_sites
    H = sp.csr_matrix((basis.dim, basis.dim))
    for i in range(L - 1):
        if i == cut_bond:
            continue
        hop = _hop_matrix(basis, i, i + 1)
        H = H - J * (hop + hop.T)
    n = basis.configs[:, :L].astype(float)
    diag = 0.5 * U_bb * np.sum(n * (n - 1.0), axis=1)
    return H + sp.diags(diag)


def _impurity_terms(basis: SectorBasis, params: ChannelParams) -> sp.csr_matrix:
    imp = basis.impurity
    c = basis.configs
    n0 = c[:, imp].astype(float)
    s = c[:, -1]
    diag = np.where(s == 0, params.U_qb * n0, params.U_bm * n0 - params.Delta)
    H = sp.diags(diag).tocsr()
    if params.Omega != 0:
        src = np.nonzero((s == 0) & (c[:, imp] > 0))[0]
        new = c[src].copy()
        amp = params.Omega * np.sqrt(new[:, imp].astype(float))
        new[:, imp] -= 1
        new[:, -1] = 1
        dst = basis.index(new)
        conv = sp.csr_matrix((amp, (dst, src)), shape=(basis.dim, basis.dim))
        H = H + conv + conv.T
    return H


def _check_species(params: ChannelParams) -> None:
    if params.species is Species.FERMION:
        raise ValueError("dense oracle models bosons; use n_max=1 bosons for hard-core/fermion comparisons")


def exact_hamiltonian(params: ChannelParams, geometry: LatticeGeometry) -> tuple[sp.csr_matrix, SectorBasis]:
    """Full lattice Hamiltonian with the composite impurity, in the ``N``-particle sector."""
    _check_species(params)
    basis = sector_basis(geometry.n_sites, geometry.N, params.n_max, geometry.impurity_index)
    H = _bose_hubbard_terms(basis, params.J, params.U_bb) + _impurity_terms(basis, params)
    return H.tocsr(), basis


def box_hamiltonian(params: ChannelParams, M: int, N: int) -> tuple[sp.csr_matrix, SectorBasis]:
    """Isolated left-box Bose-Hubbard Hamiltonian used for state preparation."""
    basis = sector_basis(M, N, params.n_max, None)
    return _bose_hubbard_terms(basis, params.J, params.U_bb).tocsr(), basis


def _lowest_eigenpair(H: sp.csr_matrix) -> tuple[float, np.ndarray]:
    if H.shape[0] <= 400:
        w, v = np.linalg.eigh(H.toarray())
        return float(w[0]), v[:, 0]
    w, v = spla.eigsh(H, k=1, which="SA", tol=1e-14, v0=np.ones(H.shape[0]))
    return float(w[0]), v[:, 0]


@dataclass
class DenseState:
    amplitudes: np.ndarray
    basis: SectorBasis

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def densities(self) -> np.ndarray:
        p = np.abs(self.amplitudes) ** 2
        return p @ self.basis.configs[:, :-1]

    def molecule(self) -> float:
        p = np.abs(self.amplitudes) ** 2
        return float(p @ self.basis.configs[:, -1])

    def n_right(self) -> float:
        return float(self.densities()[self.basis.impurity + 1 :].sum())

    def spdm(self) -> np.ndarray:
        L = self.basis.n_sites
        psi = self.amplitudes
        rho = np.diag(self.densities()).astype(complex)
        for i, j in itertools.combinations(range(L), 2):
            # <b_i^dag b_j> = <psi| hop(i, j) |psi>
            val = np.vdot(psi, _hop_matrix(self.basis, i, j) @ psi)
            rho[i, j] = val
            rho[j, i] = np.conj(val)
        return rho

    def overlap(self, other: DenseState) -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))


def product_indices(basis: SectorBasis) -> np.ndarray:
    """Position of each sector state in the full product space (C order, impurity index ``n + (n_max+1) s``)."""
    radix = basis.n_max + 1
    local = basis.configs[:, :-1].copy()
    dims = np.full(basis.n_sites, radix)
    if basis.impurity is not None:
        local[:, basis.impurity] += radix * basis.configs[:, -1]
        dims[basis.impurity] = 2 * radix
    strides = np.append(np.cumprod(dims[::-1])[::-1][1:], 1)
    return local @ strides


def exact_ground_state(params: ChannelParams, geometry: LatticeGeometry) -> tuple[float, DenseState]:
    """Box ground state embedded with an empty, undressed impurity and empty right side."""
    _check_species(params)
    geometry.check_capacity(params.n_max)
    Hb, bb = box_hamiltonian(params, geometry.M_left, geometry.N)
    energy, vec = _lowest_eigenpair(Hb)
    basis = sector_basis(geometry.n_sites, geometry.N, params.n_max, geometry.impurity_index)
    full = np.zeros((bb.dim, basis.n_sites + 1), dtype=np.int64)
    full[:, : geometry.M_left] = bb.configs[:, :-1]
    amps = np.zeros(basis.dim, dtype=complex)
    amps[basis.index(full)] = vec
    return energy, DenseState(amps, basis)


def product_state(occupations, geometry: LatticeGeometry, n_max: int, s: int = 0) -> DenseState:
    basis = sector_basis(geometry.n_sites, geometry.N, n_max, geometry.impurity_index)
    cfg = np.array(list(occupations) + [s], dtype=np.int64)
    amps = np.zeros(basis.dim, dtype=complex)
    amps[basis.index(cfg)] = 1.0
    return DenseState(amps, basis)


def exact_evolve(state: DenseState, H: sp.spmatrix, dt: float, steps: int) -> list[DenseState]:
    """States at ``t = 0, dt, ..., steps*dt`` under ``exp(-i H t)``."""
    if steps == 0:
        return [DenseState(state.amplitudes.copy(), state.basis)]
    A = (-1j * H).tocsc()
    if H.shape[0] <= 3000:
        w, v = np.linalg.eigh(H.toarray())
        c = v.conj().T @ state.amplitudes
        return [DenseState(v @ (np.exp(-1j * w * dt * m) * c), state.basis) for m in range(steps + 1)]
    traj = spla.expm_multiply(A, state.amplitudes, start=0.0, stop=dt * steps, num=steps + 1, endpoint=True)
    return [DenseState(np.asarray(traj[m]), state.basis) for m in range(steps + 1)]


@dataclass(frozen=True)
class WavepacketResult:
    transmitted: float
    reflected: float
    molecule: float
    bound: float
    t_final: float


def default_lattice_size(k0: float, J: float = 1.0, width: float = 40.0) -> int:
    """Lattice long enough for a packet to clear the impurity before dispersing onto the walls."""
    base = max(400, int(np.ceil(10 * width)))
    return base if 2 * J * abs(np.sin(k0)) >= 1.5 * J else 3 * base


def wavepacket_transmission(
    k0: float,
    params: ChannelParams,
    lattice_size: int | None = None,
    width: float = 40.0,
    residue_tol: float = 1e-6,
    boundary_tol: float = 1e-5,
) -> WavepacketResult:
    """Scatter one Gaussian packet off the impurity and measure the transmitted weight.

    ``width`` is the full width at half maximum of the initial density. The
    packet starts one quarter of the lattice to the left of the impurity
    (lattice centre) and is propagated exactly until the weight near the
    impurity and on the molecule drops below ``residue_tol``.

    Raises:
        ReflectionContaminationError: if weight reaches the outer boundary first.
    """
    if lattice_size is None:
        lattice_size = default_lattice_size(k0, params.J, width)
    if width < 40:
        raise ValueError("packet width must be at least 40 sites")
    if lattice_size < 10 * width:
        raise ValueError("lattice must span at least ten packet widths")
    M_left = lattice_size // 2
    geo = LatticeGeometry(M_left=M_left, M_right=lattice_size - M_left - 1, N=1)
    system = build_system(params, geo)
    imp = geo.impurity_index
    x = np.arange(geo.n_sites)
    x0 = imp - lattice_size / 4
    psi0 = np.zeros(system.dim, dtype=complex)
    sigma = width / (2 * np.sqrt(2 * np.log(2)))
    psi0[: geo.n_sites] = np.exp(-((x - x0) ** 2) / (4 * sigma**2) + 1j * k0 * x)
    psi0[imp:] = 0.0
    psi0 /= np.linalg.norm(psi0)

    prop = SpectralPropagator(system.h)
    coeffs = prop.coefficients(psi0)
    # Out-of-band eigenstates are impurity-bound and never leave.
    bound_mask = np.abs(prop.energies) >= 2 * params.J
    bound = float(np.sum(np.abs(coeffs[bound_mask]) ** 2))
    coeffs[bound_mask] = 0.0
    v = max(2 * params.J * abs(np.sin(k0)), 1e-3)
    t = (imp - x0) / v
    dt = width / (4 * v)
    edge = max(3, lattice_size // 100)
    near = slice(max(imp - int(width) // 2, 0), imp + int(width) // 2 + 1)
    for _ in range(200):
        psi = prop.at(coeffs, t)
        p = np.abs(psi) ** 2
        if p[:edge].sum() + p[geo.n_sites - edge : geo.n_sites].sum() > boundary_tol:
            raise ReflectionContaminationError(f"packet reached the boundary at t={t:.1f}")
        if p[near].sum() + p[-1] < residue_tol:
            break
        t += dt
    else:
        raise ReflectionContaminationError("packet did not clear the impurity")
    return WavepacketResult(
        transmitted=float(p[imp + 1 : geo.n_sites].sum()),
        reflected=float(p[:imp].sum()),
        molecule=float(p[-1]),
        bound=bound,
        t_final=float(t),
    )
