"""Matrix-product-state engine for interacting bosons passing the composite impurity site.

States are kept in right-canonical form: ``psi = B[0] B[1] ... B[L-1]`` with
Schmidt values ``S[i]`` on the bond left of site ``i``. Every bond also
carries an integer label per Schmidt vector, the number of particles to its
left; all factorizations are done block by block in these labels, so the
total particle number (a molecule counts as one particle) is exact.

Bulk sites hold ``|n>``, ``n = 0..n_max``. The impurity holds ``|n, s>`` with
``s = 0`` (impurity atom q present) or ``s = 1`` (molecule m present), stored at
local index ``n + (n_max + 1) * s``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from sat.model import ChannelParams, LatticeGeometry, Species

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# local operators


@dataclass(frozen=True)
class SiteBasis:
    kind: str  # "bulk" or "impurity"
    n_max: int

    @property
    def local_dim(self) -> int:
        return (self.n_max + 1) * (2 if self.kind == "impurity" else 1)

    def occupations(self) -> np.ndarray:
        """Lattice-atom count of each local state."""
        n = np.arange(self.n_max + 1)
        return np.tile(n, 2) if self.kind == "impurity" else n

    def molecule(self) -> np.ndarray:
        m = np.zeros(self.local_dim)
        if self.kind == "impurity":
            m[self.n_max + 1 :] = 1
        return m

    def charges(self) -> np.ndarray:
        return (self.occupations() + self.molecule()).astype(np.int64)

    def annihilator(self) -> np.ndarray:
        a = np.diag(np.sqrt(np.arange(1, self.n_max + 1, dtype=float)), 1)
        return np.kron(np.eye(2), a) if self.kind == "impurity" else a

    def index(self, n: int, s: int = 0) -> int:
        return n + (self.n_max + 1) * s


def conversion_operator(basis: SiteBasis) -> np.ndarray:
    """``m^dag q b`` on the impurity: ``|n, q> -> sqrt(n) |n-1, m>``."""
    d = basis.local_dim
    op = np.zeros((d, d))
    for n in range(1, basis.n_max + 1):
        op[basis.index(n - 1, 1), basis.index(n, 0)] = math.sqrt(n)
    return op


def onsite_hamiltonian(params: ChannelParams, basis: SiteBasis, omega: float | None = None) -> np.ndarray:
    """Interaction plus (on the impurity) the dressing terms of one site."""
    omega = params.Omega if omega is None else omega
    n = basis.occupations().astype(float)
    h = np.diag(0.5 * params.U_bb * n * (n - 1.0))
    if basis.kind == "impurity":
        m = basis.molecule()
        h += np.diag((1 - m) * params.U_qb * n + m * (params.U_bm * n - params.Delta))
        conv = conversion_operator(basis)
        h += omega * (conv + conv.T)
    return h


def site_bases(params: ChannelParams, geometry: LatticeGeometry) -> list[SiteBasis]:
    return [
        SiteBasis("impurity" if j == geometry.impurity_index else "bulk", params.n_max)
        for j in range(geometry.n_sites)
    ]


def bond_hamiltonians(
    params: ChannelParams, bases: list[SiteBasis], omega: float | None = None, cut_bond: int | None = None
) -> list[np.ndarray]:
    """Two-site terms whose sum is the lattice Hamiltonian.

    Each on-site term is shared equally between the bonds touching that site.
    ``cut_bond`` removes the hopping on one bond (box walls).
    """
    L = len(bases)
    terms = []
    for i in range(L - 1):
        bl, br = bases[i], bases[i + 1]
        al, ar = bl.annihilator(), br.annihilator()
        dl, dr = bl.local_dim, br.local_dim
        hop = np.kron(al.T, ar) + np.kron(al, ar.T)
        h = np.zeros((dl * dr, dl * dr)) if i == cut_bond else -params.J * hop
        wl = 1.0 if i == 0 else 0.5
        wr = 1.0 if i + 1 == L - 1 else 0.5
        h = h + wl * np.kron(onsite_hamiltonian(params, bl, omega), np.eye(dr))
        h = h + wr * np.kron(np.eye(dl), onsite_hamiltonian(params, br, omega))
        terms.append(h)
    return terms


def exponentiate(h: np.ndarray, step: complex) -> np.ndarray:
    """``exp(-step * h)`` for Hermitian ``h``; ``step = i dt`` in real time, ``dt`` in imaginary time."""
    w, v = np.linalg.eigh(h)
    return (v * np.exp(-step * w)) @ v.conj().T


@dataclass
class GateSet:
    gates: list[np.ndarray]
    dims: list[int]
    dt: float
    mode: str


def build_gates(
    params: ChannelParams,
    geometry: LatticeGeometry,
    dt: float,
    mode: str = "real",
    omega: float | None = None,
) -> GateSet:
    """Bond propagators ``exp(-i h_bond dt)`` (real) or ``exp(-h_bond dt)`` (imaginary)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if mode not in ("real", "imaginary"):
        raise ValueError(f"unknown mode {mode!r}")
    bases = site_bases(params, geometry)
    step = 1j * dt if mode == "real" else dt
    gates = [exponentiate(h, step) for h in bond_hamiltonians(params, bases, omega)]
    return GateSet(gates=gates, dims=[b.local_dim for b in bases], dt=dt, mode=mode)


def assemble_dense(terms: list[np.ndarray], dims: list[int]) -> np.ndarray:
    """Sum of bond terms as a dense matrix on the full product space (small chains only)."""
    total = int(np.prod(dims))
    H = np.zeros((total, total), dtype=np.result_type(*terms))
    for i, h in enumerate(terms):
        left = int(np.prod(dims[:i]))
        right = int(np.prod(dims[i + 2 :]))
        H += np.kron(np.kron(np.eye(left), h), np.eye(right))
    return H


# ---------------------------------------------------------------------------
# charge-blocked factorization


@dataclass
class _Blocks:
    charges: list[int]
    rows: list[np.ndarray]
    cols: list[np.ndarray]
    u: list[np.ndarray]
    s: list[np.ndarray]
    vh: list[np.ndarray]


def _block_svd(mat: np.ndarray, row_q: np.ndarray, col_q: np.ndarray) -> _Blocks:
    out = _Blocks([], [], [], [], [], [])
    for c in np.intersect1d(row_q, col_q):
        r = np.nonzero(row_q == c)[0]
        k = np.nonzero(col_q == c)[0]
        sub = mat[np.ix_(r, k)]
        try:
            u, s, vh = linalg.svd(sub, full_matrices=False, lapack_driver="gesdd")
        except linalg.LinAlgError:
            u, s, vh = linalg.svd(sub, full_matrices=False, lapack_driver="gesvd")
        out.charges.append(int(c))
        out.rows.append(r)
        out.cols.append(k)
        out.u.append(u)
        out.s.append(s)
        out.vh.append(vh)
    return out


def _select(blocks: _Blocks, chi_max: int | None, discard_tol: float) -> tuple[list[tuple[int, int]], float]:
    """Pick the kept singular values globally; returns (block, index) pairs and discarded weight."""
    entries = [(-sv, c, b, i) for b, (c, s) in enumerate(zip(blocks.charges, blocks.s)) for i, sv in enumerate(s)]
    entries.sort()
    weights = np.array([e[0] ** 2 for e in entries])
    total = weights.sum()
    if total == 0:
        raise FloatingPointError("zero state encountered in factorization")
    floor = 1e-28 * total  # numerically zero Schmidt weight
    keep = int(np.count_nonzero(weights > floor))
    if discard_tol > 0:
        tail = np.cumsum(weights[::-1])[::-1] / total  # tail[k] = weight discarded if keeping k
        ok = np.nonzero(np.append(tail, 0.0)[1:] <= discard_tol)[0]
        keep = min(keep, int(ok[0]) + 1 if len(ok) else keep)
    if chi_max is not None:
        keep = min(keep, chi_max)
    keep = max(keep, 1)
    discarded = float(weights[keep:].sum() / total)
    return [(e[2], e[3]) for e in entries[:keep]], discarded


def _assemble(blocks: _Blocks, kept, n_rows: int, n_cols: int):
    k = len(kept)
    dtype = np.result_type(*blocks.u) if blocks.u else complex
    U = np.zeros((n_rows, k), dtype=dtype)
    V = np.zeros((k, n_cols), dtype=dtype)
    S = np.empty(k)
    q = np.empty(k, dtype=np.int64)
    for col, (b, i) in enumerate(kept):
        U[blocks.rows[b], col] = blocks.u[b][:, i]
        V[col, blocks.cols[b]] = blocks.vh[b][i, :]
        S[col] = blocks.s[b][i]
        q[col] = blocks.charges[b]
    return U, S, V, q


def split(mat, row_q, col_q, chi_max=None, discard_tol=0.0):
    """Charge-blocked truncated SVD ``mat ~ U diag(S) V``; returns ``U, S, V, charges, discarded``."""
    blocks = _block_svd(mat, row_q, col_q)
    kept, discarded = _select(blocks, chi_max, discard_tol)
    U, S, V, q = _assemble(blocks, kept, mat.shape[0], mat.shape[1])
    return U, S, V, q, discarded


# ---------------------------------------------------------------------------
# state


@dataclass
class MPSState:
    """Right-canonical MPS with particle-number labels on every bond.

    Attributes:
        B: Site tensors of shape ``(chi_left, d, chi_right)``.
        S: Schmidt values; ``S[i]`` lives on the bond left of site ``i``
            (``S[0] = S[L] = [1]``).
        Q: Particle count left of each bond, one label per Schmidt vector.
        bases: Local basis of every site.
        chi_max: Bond-dimension cap (None = unrestricted).
        discard_tol: Largest discarded Schmidt weight tolerated per cut.
        truncated_weight: Accumulated discarded weight.
    """

    B: list[np.ndarray]
    S: list[np.ndarray]
    Q: list[np.ndarray]
    bases: list[SiteBasis]
    chi_max: int | None = 128
    discard_tol: float = 1e-8
    truncated_weight: float = 0.0

    @property
    def L(self) -> int:
        return len(self.B)

    @property
    def N(self) -> int:
        return int(self.Q[-1][0])

    def copy(self) -> MPSState:
        return MPSState(
            B=[b.copy() for b in self.B],
            S=[s.copy() for s in self.S],
            Q=[q.copy() for q in self.Q],
            bases=list(self.bases),
            chi_max=self.chi_max,
            discard_tol=self.discard_tol,
            truncated_weight=self.truncated_weight,
        )

    def bond_dims(self) -> list[int]:
        return [len(s) for s in self.S]

    def site_charges(self, i: int) -> np.ndarray:
        return self.bases[i].charges()

    # -- measurement ----------------------------------------------------

    def theta(self, i: int) -> np.ndarray:
        return self.S[i][:, None, None] * self.B[i]

    def site_probabilities(self, i: int) -> np.ndarray:
        t = self.theta(i)
        return np.einsum("asb,asb->s", t.conj(), t).real

    def densities(self) -> np.ndarray:
        return np.array([self.site_probabilities(i) @ self.bases[i].occupations() for i in range(self.L)])

    def molecule(self) -> float:
        return float(sum(self.site_probabilities(i) @ b.molecule() for i, b in enumerate(self.bases) if b.kind == "impurity"))

    def norm(self) -> float:
        """Norm computed by full contraction (does not assume canonical form)."""
        return math.sqrt(abs(overlap(self, self)))

    def bond_expectation(self, i: int, op: np.ndarray) -> complex:
        t = np.tensordot(self.theta(i), self.B[i + 1], axes=(2, 0))
        chl, d1, d2, chr_ = t.shape
        tv = t.transpose(1, 2, 0, 3).reshape(d1 * d2, chl * chr_)
        return complex(np.vdot(tv, op @ tv))

    def energy(self, terms: list[np.ndarray]) -> float:
        return float(sum(self.bond_expectation(i, h).real for i, h in enumerate(terms)))

    def entanglement_entropy(self) -> np.ndarray:
        out = []
        for s in self.S[1:-1]:
            p = s[s > 0] ** 2
            out.append(float(-(p * np.log(p)).sum()))
        return np.array(out)

    def to_dense(self) -> np.ndarray:
        """Full product-space vector (small chains only)."""
        psi = self.B[0][0]
        for b in self.B[1:]:
            psi = np.tensordot(psi, b, axes=(-1, 0))
        return psi.reshape(-1)

    # -- canonical form -------------------------------------------------

    def canonicalize(self, normalize: bool = True) -> float:
        """Restore exact right-canonical form with truncation; returns the pre-normalization norm."""
        L = self.L
        # left-to-right: left-orthonormalize, carrying remainders rightwards
        carry = np.ones((1, 1))
        for i in range(L):
            M = np.tensordot(carry, self.B[i], axes=(1, 0))
            chl, d, chr_ = M.shape
            rq = (self.Q[i][:, None] + self.site_charges(i)[None, :]).reshape(-1)
            U, S, V, q, _ = split(M.reshape(chl * d, chr_), rq, self.Q[i + 1])
            self.B[i] = U.reshape(chl, d, -1)
            self.Q[i + 1] = q
            carry = S[:, None] * V
        norm = float(abs(carry[0, 0]))
        self.B[L - 1] = self.B[L - 1] * (carry[0, 0] / norm if normalize else carry[0, 0])
        # right-to-left: Schmidt decomposition at every cut
        carry = np.ones((1, 1))
        discarded = 0.0
        for i in range(L - 1, -1, -1):
            M = np.tensordot(self.B[i], carry, axes=(2, 0))
            chl, d, chr_ = M.shape
            cq = (self.Q[i + 1][None, :] - self.site_charges(i)[:, None]).reshape(-1)
            if i == 0:
                self.B[0] = M
                break
            U, S, V, q, disc = split(
                M.reshape(chl, d * chr_), self.Q[i], cq, self.chi_max, self.discard_tol
            )
            discarded += disc
            self.B[i] = V.reshape(-1, d, chr_)
            self.S[i] = S / np.linalg.norm(S)
            self.Q[i] = q
            carry = U * S[None, :]
        if normalize:
            self.B[0] = self.B[0] / np.linalg.norm(self.B[0])
        self.S[0] = np.ones(1)
        self.S[L] = np.ones(1)
        self.truncated_weight += discarded
        return norm

    # -- updates --------------------------------------------------------

    def apply_bond_unitary(self, i: int, gate: np.ndarray) -> float:
        """Apply a unitary two-site gate on bond ``(i, i+1)`` preserving right-canonical form."""
        Bl, Br = self.B[i], self.B[i + 1]
        chl, d1, _ = Bl.shape
        _, d2, chr_ = Br.shape
        t = np.tensordot(Bl, Br, axes=(2, 0))  # (chl, d1, d2, chr)
        g = gate.reshape(d1, d2, d1, d2)
        t = np.tensordot(t, g, axes=([1, 2], [2, 3])).transpose(0, 2, 3, 1)  # (chl, d1', d2', chr)
        ts = self.S[i][:, None, None, None] * t
        rq = (self.Q[i][:, None] + self.site_charges(i)[None, :]).reshape(-1)
        cq = (self.Q[i + 2][None, :] - self.site_charges(i + 1)[:, None]).reshape(-1)
        _, S, V, q, disc = split(ts.reshape(chl * d1, d2 * chr_), rq, cq, self.chi_max, self.discard_tol)
        Bn = V.reshape(-1, d2, chr_)
        kept = np.linalg.norm(S)  # truncated-state norm; rescale back to one
        self.B[i] = np.tensordot(t, Bn.conj(), axes=([2, 3], [1, 2])) / kept
        self.B[i + 1] = Bn
        self.S[i + 1] = S / kept
        self.Q[i + 1] = q
        self.truncated_weight += disc
        return disc

    def apply_bond_general(self, i: int, gate: np.ndarray) -> None:
        """Apply any two-site gate exactly, without truncation; canonical form must be restored after."""
        Bl, Br = self.B[i], self.B[i + 1]
        chl, d1, _ = Bl.shape
        _, d2, chr_ = Br.shape
        t = np.tensordot(Bl, Br, axes=(2, 0))
        g = gate.reshape(d1, d2, d1, d2)
        t = np.tensordot(t, g, axes=([1, 2], [2, 3])).transpose(0, 2, 3, 1)
        rq = (self.Q[i][:, None] + self.site_charges(i)[None, :]).reshape(-1)
        cq = (self.Q[i + 2][None, :] - self.site_charges(i + 1)[:, None]).reshape(-1)
        U, S, V, q, _ = split(t.reshape(chl * d1, d2 * chr_), rq, cq)
        self.B[i] = (U * S[None, :]).reshape(chl, d1, -1)
        self.B[i + 1] = V.reshape(-1, d2, chr_)
        self.Q[i + 1] = q

    def apply_site_diagonal(self, i: int, phases: np.ndarray) -> None:
        self.B[i] = self.B[i] * phases[None, :, None]


def overlap(a: MPSState, b: MPSState) -> complex:
    """``<a|b>`` by full contraction."""
    env = np.ones((1, 1), dtype=complex)
    for Ba, Bb in zip(a.B, b.B):
        env = np.tensordot(env, Bb, axes=(1, 0))  # (ca, d, cb)
        env = np.tensordot(Ba.conj(), env, axes=([0, 1], [0, 1]))
    return complex(env[0, 0])


def product_state(bases: list[SiteBasis], local_states: list[int], chi_max=128, discard_tol=1e-8) -> MPSState:
    """Basis product state; ``local_states[i]`` is the local index on site ``i``."""
    B, S, Q = [], [np.ones(1)], [np.zeros(1, dtype=np.int64)]
    count = 0
    for basis, idx in zip(bases, local_states):
        t = np.zeros((1, basis.local_dim, 1), dtype=complex)
        t[0, idx, 0] = 1.0
        B.append(t)
        count += int(basis.charges()[idx])
        S.append(np.ones(1))
        Q.append(np.array([count], dtype=np.int64))
    return MPSState(B=B, S=S, Q=Q, bases=list(bases), chi_max=chi_max, discard_tol=discard_tol)


def from_dense(psi: np.ndarray, bases: list[SiteBasis], N: int, chi_max=None, discard_tol=0.0) -> MPSState:
    """Exact MPS of a product-space vector with definite particle number ``N``."""
    dims = [b.local_dim for b in bases]
    L = len(bases)
    state = MPSState(
        B=[], S=[np.ones(1) for _ in range(L + 1)], Q=[np.zeros(1, dtype=np.int64)] + [None] * L,
        bases=list(bases), chi_max=chi_max, discard_tol=discard_tol,
    )
    rest = np.asarray(psi, dtype=complex).reshape(1, -1)
    for i in range(L - 1):
        chl = rest.shape[0]
        d = dims[i]
        mat = rest.reshape(chl * d, -1)
        rq = (state.Q[i][:, None] + bases[i].charges()[None, :]).reshape(-1)
        # column charge: particles left of the cut = N - particles in the remainder
        rem_q = _remainder_charges(bases[i + 1 :])
        U, S, V, q, _ = split(mat, rq, N - rem_q)
        state.B.append(U.reshape(chl, d, -1))
        state.Q[i + 1] = q
        rest = S[:, None] * V
    state.B.append(rest.reshape(rest.shape[0], dims[-1], 1))
    state.Q[L] = np.array([N], dtype=np.int64)
    state.canonicalize()
    return state


def _remainder_charges(bases: list[SiteBasis]) -> np.ndarray:
    q = np.zeros(1, dtype=np.int64)
    for b in bases:
        q = (q[:, None] + b.charges()[None, :]).reshape(-1)
    return q


def correlation_matrix(state: MPSState) -> np.ndarray:
    """Single-particle density matrix ``<b_i^dag b_j>`` over all lattice sites (molecule excluded)."""
    L = state.L
    rho = np.zeros((L, L), dtype=complex)
    ann = [b.annihilator() for b in state.bases]
    dens = state.densities()
    for i in range(L):
        rho[i, i] = dens[i]
        if i == L - 1:
            break
        t = state.theta(i)
        # env[b, b'] = sum conj(t[a, s, b]) (b^dag)[s, s'] t[a, s', b']
        op_t = np.tensordot(ann[i].T, t, axes=(1, 1))  # (s, a, b')
        env = np.tensordot(t.conj(), op_t, axes=([0, 1], [1, 0]))
        for j in range(i + 1, L):
            Bj = state.B[j]
            tmp = np.tensordot(env, Bj, axes=(1, 0))  # (b, s', c)
            op_tmp = np.tensordot(tmp, ann[j], axes=(1, 1))  # (b, c, s)
            rho[i, j] = np.tensordot(Bj.conj(), op_tmp, axes=([0, 2, 1], [0, 1, 2]))
            rho[j, i] = np.conj(rho[i, j])
            if j < L - 1:
                env = np.tensordot(Bj.conj(), tmp, axes=([0, 1], [0, 1]))
    return rho


def number_variance(state: MPSState, sites: range) -> float:
    """Variance of the lattice-atom number on a contiguous block of sites."""
    sites = list(sites)
    if not sites:
        return 0.0
    first, last = sites[0], sites[-1]
    # moments E_p[b, b'] = <.. (sum n)^p ..> carried left to right, p = 0, 1, 2
    s = state.S[first]
    env = [np.diag(s * s).astype(complex), None, None]
    env[1] = np.zeros_like(env[0])
    env[2] = np.zeros_like(env[0])
    for j in range(first, last + 1):
        B = state.B[j]
        n = state.bases[j].occupations().astype(float)
        out = []
        for p in range(3):
            acc = 0
            for r in range(p + 1):
                coeff = math.comb(p, r)
                weight = coeff * n ** (p - r)
                tmp = np.tensordot(env[r], B * weight[None, :, None], axes=(1, 0))
                acc = acc + np.tensordot(B.conj(), tmp, axes=([0, 1], [0, 1]))
            out.append(acc)
        env = out
    m1 = np.trace(env[1]).real
    m2 = np.trace(env[2]).real
    return float(m2 - m1 * m1)


# ---------------------------------------------------------------------------
# time evolution


def _bond_layers(L: int) -> tuple[list[int], list[int]]:
    return list(range(0, L - 1, 2)), list(range(1, L - 1, 2))


def trotter_step_imaginary(state: MPSState, gates_half: list[np.ndarray], gates_full: list[np.ndarray]) -> None:
    even, odd = _bond_layers(state.L)
    for i in even:
        state.apply_bond_general(i, gates_half[i])
    for i in odd:
        state.apply_bond_general(i, gates_full[i])
    for i in even:
        state.apply_bond_general(i, gates_half[i])
    state.canonicalize()


def apply_layer(state: MPSState, gates: list[np.ndarray], bonds: list[int]) -> None:
    for i in bonds:
        state.apply_bond_unitary(i, gates[i])


@dataclass
class GroundStateResult:
    state: MPSState
    energy: float
    energies: list[float]
    sweeps: int


def _initial_occupations(M: int, N: int, n_max: int) -> list[int]:
    """Spread N bosons as evenly as possible over M sites."""
    base, extra = divmod(N, M)
    occ = [base] * M
    for j in np.linspace(0, M - 1, extra, endpoint=True).round().astype(int) if extra else []:
        occ[j] += 1
    if max(occ) > n_max:
        raise ValueError("occupation exceeds n_max")
    return occ


def box_ground_state(
    params: ChannelParams,
    M: int,
    N: int,
    chi_max: int | None = 128,
    discard_tol: float = 1e-12,
    dt_ladder=(0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001),
    tol: float = 1e-8,
    check_every: int = 10,
    max_steps: int = 20000,
) -> GroundStateResult:
    """Imaginary-time ground state of ``N`` bosons in an isolated box of ``M`` sites."""
    if N > M * params.n_max:
        raise ValueError(f"N={N} exceeds box capacity {M * params.n_max}")
    bases = [SiteBasis("bulk", params.n_max)] * M
    occ = _initial_occupations(M, N, params.n_max)
    state = product_state(bases, occ, chi_max=chi_max, discard_tol=discard_tol)
    terms = bond_hamiltonians(params, bases)
    energy = state.energy(terms)
    energies = [energy]
    if M == 1 or (params.n_max == 1 and N == M) or N == 0:
        return GroundStateResult(state=state, energy=energy, energies=energies, sweeps=0)
    steps = 0
    converged = False
    for stage, dt in enumerate(dt_ladder):
        final = stage == len(dt_ladder) - 1
        half = [exponentiate(h, dt / 2) for h in terms]
        full = [exponentiate(h, dt) for h in terms]
        budget = max_steps if final else max_steps // 4
        converged = False
        stage_steps = 0
        while stage_steps < budget:
            for _ in range(check_every):
                trotter_step_imaginary(state, half, full)
            stage_steps += check_every
            e = state.energy(terms)
            energies.append(e)
            change = abs(e - energy) / M
            energy = e
            if change <= tol:
                converged = True
                break
        steps += stage_steps
    if not converged:
        raise ConvergenceError(
            f"imaginary-time evolution not converged after {steps} steps; last energies {energies[-3:]}"
        )
    return GroundStateResult(state=state, energy=energy, energies=energies, sweeps=steps)


def embed_box_state(box: MPSState, params: ChannelParams, geometry: LatticeGeometry) -> MPSState:
    """Append an empty, undressed impurity and an empty right reservoir to a box state."""
    bases = site_bases(params, geometry)
    N = box.N
    B = [b.copy() for b in box.B]
    S = [s.copy() for s in box.S[:-1]]
    Q = [q.copy() for q in box.Q]
    for j in range(geometry.M_left, geometry.n_sites):
        t = np.zeros((1, bases[j].local_dim, 1), dtype=complex)
        t[0, 0, 0] = 1.0  # |0> bulk or |0, q> impurity
        B.append(t)
        S.append(np.ones(1))
        Q.append(np.array([N], dtype=np.int64))
    S.append(np.ones(1))
    return MPSState(B=B, S=S, Q=Q, bases=bases, chi_max=box.chi_max, discard_tol=box.discard_tol,
                    truncated_weight=box.truncated_weight)


def ground_state(
    params: ChannelParams,
    geometry: LatticeGeometry,
    chi_max: int | None = 128,
    discard_tol: float = 1e-8,
    tol: float = 1e-8,
) -> MPSState:
    """Box ground state on the left, impurity ``|0, q>`` and empty sites to the right."""
    if params.species is not Species.BOSON:
        raise ValueError("the MPS engine simulates bosons; fermions are handled by fermiflow")
    geometry.check_capacity(params.n_max)
    res = box_ground_state(params, geometry.M_left, geometry.N, chi_max=chi_max,
                           discard_tol=min(discard_tol, 1e-12), tol=tol)
    state = embed_box_state(res.state, params, geometry)
    state.discard_tol = discard_tol
    return state


def boost_state(state: MPSState, k0: float, origin: int = 0) -> MPSState:
    """Imprint ``exp(i k0 j n_j)`` on every site; densities are untouched."""
    out = state.copy()
    if k0 == 0:
        return out
    for j, basis in enumerate(out.bases):
        out.apply_site_diagonal(j, np.exp(1j * k0 * (j - origin) * basis.occupations()))
    return out


# ---------------------------------------------------------------------------
# schedules and trajectories


@dataclass(frozen=True)
class OmegaSchedule:
    """Rabi frequency versus time: sudden switch-on or linear ramp from ``start`` to the target."""

    target: float
    ramp_time: float = 0.0
    start: float = 8.0

    def __call__(self, t: float) -> float:
        if self.ramp_time <= 0 or t >= self.ramp_time:
            return self.target
        return self.start + (self.target - self.start) * max(t, 0.0) / self.ramp_time

    @property
    def constant(self) -> bool:
        return self.ramp_time <= 0

    @classmethod
    def sudden(cls, omega: float) -> OmegaSchedule:
        return cls(target=omega)

    @classmethod
    def slow(cls, omega: float, J: float = 1.0) -> OmegaSchedule:
        return cls(target=omega, ramp_time=5.0 / J, start=8.0 * J)


@dataclass
class Trajectory:
    times: list[float] = field(default_factory=list)
    n_right: list[float] = field(default_factory=list)
    n_mol: list[float] = field(default_factory=list)
    n_total: list[float] = field(default_factory=list)
    energy: list[float] = field(default_factory=list)
    omega: list[float] = field(default_factory=list)
    truncated_weight: list[float] = field(default_factory=list)
    max_bond: list[int] = field(default_factory=list)
    densities: list[np.ndarray] = field(default_factory=list)
    snapshots: dict[float, object] = field(default_factory=dict)
    status: str = "ok"
    J: float = 1.0
    M_right: int | None = None
    impurity_index: int = 0

    def reflection_bound(self) -> float:
        if self.M_right is None:
            return np.inf
        return 0.8 * self.M_right / (2.0 * self.J)

    COLUMNS = ("t", "n_right", "n_mol", "n_total", "energy", "omega", "truncated_weight", "max_bond")

    def rows(self):
        for r in zip(self.times, self.n_right, self.n_mol, self.n_total, self.energy, self.omega,
                     self.truncated_weight, self.max_bond):
            yield r


def _record(traj: Trajectory, state: MPSState, t: float, omega: float, terms, impurity: int, observer) -> None:
    dens = state.densities()
    mol = state.molecule()
    traj.times.append(t)
    traj.densities.append(dens)
    traj.n_right.append(float(dens[impurity + 1 :].sum()))
    traj.n_mol.append(mol)
    traj.n_total.append(float(dens.sum() + mol))
    traj.energy.append(state.energy(terms) if terms is not None else float("nan"))
    traj.omega.append(omega)
    traj.truncated_weight.append(state.truncated_weight)
    traj.max_bond.append(max(state.bond_dims()))
    if observer is not None:
        result = observer(t, state)
        if result is not None:
            traj.snapshots[round(t, 10)] = result


def evolve_quench(
    state: MPSState,
    params: ChannelParams,
    geometry: LatticeGeometry,
    dt: float = 0.02,
    T_final: float = 10.0,
    schedule: OmegaSchedule | None = None,
    obs_interval: float = 0.1,
    truncation_budget: float = 1e-3,
    observer=None,
    record_energy: bool = True,
) -> Trajectory:
    """Second-order Trotter evolution of ``state`` in place.

    Even bonds take half steps around a full odd-bond step; consecutive half
    steps are fused while the Rabi frequency is constant. Observables are
    recorded every ``obs_interval``; ``observer(t, state)`` may return an
    extra snapshot stored under ``t``.

    The run stops early with ``status = "truncation-budget-exceeded"`` if the
    accumulated discarded weight passes ``truncation_budget``.
    """
    schedule = schedule or OmegaSchedule.sudden(params.Omega)
    bases = state.bases
    L = state.L
    even, odd = _bond_layers(L)
    imp = geometry.impurity_index
    impurity_bonds = [b for b in (imp - 1, imp) if 0 <= b < L - 1]
    steps_per_obs = max(1, int(round(obs_interval / dt)))
    n_obs = int(round(T_final / (dt * steps_per_obs)))

    static_terms = bond_hamiltonians(params, bases, omega=0.0)
    cache: dict = {}

    def gates_for(omega: float, tau: float) -> list[np.ndarray]:
        key = (omega, tau)
        if key not in cache:
            if len(cache) > 64:
                cache.clear()
            terms = list(static_terms)
            if omega != 0.0:
                dressed = bond_hamiltonians(params, bases, omega=omega)
                for b in impurity_bonds:
                    terms[b] = dressed[b]
            cache[key] = [exponentiate(h, 1j * tau) for h in terms]
        return cache[key]

    def energy_terms(omega: float):
        return bond_hamiltonians(params, bases, omega=omega) if record_energy else None

    traj = Trajectory(J=params.J, M_right=geometry.M_right, impurity_index=imp)
    t0 = 0.0
    _record(traj, state, t0, schedule(t0), energy_terms(schedule(t0)), imp, observer)
    step = 0
    for _ in range(n_obs):
        if schedule.constant:
            om = schedule(0.0)
            half, full = gates_for(om, dt / 2), gates_for(om, dt)
            apply_layer(state, half, even)
            for s in range(steps_per_obs):
                apply_layer(state, full, odd)
                apply_layer(state, full if s < steps_per_obs - 1 else half, even)
        else:
            for s in range(steps_per_obs):
                om = schedule((step + s + 0.5) * dt)
                half, full = gates_for(om, dt / 2), gates_for(om, dt)
                apply_layer(state, half, even)
                apply_layer(state, full, odd)
                apply_layer(state, half, even)
        step += steps_per_obs
        t = step * dt
        _record(traj, state, t, schedule(t), energy_terms(schedule(t)), imp, observer)
        if state.truncated_weight > truncation_budget:
            traj.status = "truncation-budget-exceeded"
            logger.warning("truncation budget %.2e exceeded at t=%.3f (%.2e)", truncation_budget, t,
                           state.truncated_weight)
            break
    return traj


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: MPSState, metadata: dict | None = None) -> None:
    """Write tensors, spectra, labels and metadata to a compressed ``.npz`` file."""
    arrays = {}
    for i, b in enumerate(state.B):
        arrays[f"B{i}"] = b
    for i, (s, q) in enumerate(zip(state.S, state.Q)):
        arrays[f"S{i}"] = s
        arrays[f"Q{i}"] = q
    meta = {
        "format_version": FORMAT_VERSION,
        "L": state.L,
        "bases": [[b.kind, b.n_max] for b in state.bases],
        "chi_max": state.chi_max,
        "discard_tol": state.discard_tol,
        "truncated_weight": state.truncated_weight,
        "metadata": metadata or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path) -> tuple[MPSState, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        L = meta["L"]
        state = MPSState(
            B=[data[f"B{i}"] for i in range(L)],
            S=[data[f"S{i}"] for i in range(L + 1)],
            Q=[data[f"Q{i}"] for i in range(L + 1)],
            bases=[SiteBasis(k, n) for k, n in meta["bases"]],
            chi_max=meta["chi_max"],
            discard_tol=meta["discard_tol"],
            truncated_weight=meta["truncated_weight"],
        )
    return state, meta["metadata"]
