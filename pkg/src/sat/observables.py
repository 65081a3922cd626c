"""Measurements shared by the fermion, MPS and dense engines.

Conventions: ``N_R`` counts lattice atoms strictly right of the impurity site
(impurity-site atoms and the molecule are excluded); the single-particle
density matrix is ``rho[i, j] = <b_i^dag b_j>`` over lattice sites only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sat import mps
from sat.fermiflow import FermiSeaState
from sat.model import LatticeGeometry
from sat.oracle import DenseState


class AlignmentError(ValueError):
    """Two runs do not share a time grid or snapshot times."""


@dataclass(frozen=True)
class SPDM:
    rho: np.ndarray

    @property
    def L(self) -> int:
        return self.rho.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.rho).real)


@dataclass(frozen=True)
class MomentumDistribution:
    k_grid: np.ndarray
    n_k: np.ndarray

    def peak(self) -> float:
        return float(self.k_grid[int(np.argmax(self.n_k))])

    def contrast(self) -> float:
        hi, lo = self.n_k.max(), self.n_k.min()
        return float((hi - lo) / (hi + lo)) if hi + lo > 0 else 0.0


@dataclass(frozen=True)
class EigenmodeReport:
    lambdas: np.ndarray
    modes: np.ndarray
    degenerate: bool
    total: float
    peak_lambda_history: tuple = ()


def n_right(obj, geometry: LatticeGeometry | None = None):
    """Expected atom number right of the impurity; arrays for trajectories."""
    if hasattr(obj, "n_right") and not callable(obj.n_right):
        return np.asarray(obj.n_right)
    if isinstance(obj, mps.MPSState):
        if geometry is None:
            raise ValueError("geometry required for an MPS state")
        return float(obj.densities()[geometry.impurity_index + 1 :].sum())
    if isinstance(obj, FermiSeaState):
        if geometry is None:
            raise ValueError("geometry required for a Fermi sea")
        return float(obj.density()[geometry.right_slice()].sum())
    if isinstance(obj, DenseState):
        return obj.n_right()
    raise TypeError(f"cannot measure N_R on {type(obj).__name__}")


def fidelity(a, b) -> float:
    """``|<a|b>|^2`` for two MPS or two dense states."""
    if isinstance(a, mps.MPSState) and isinstance(b, mps.MPSState):
        return float(abs(mps.overlap(a, b)) ** 2)
    if isinstance(a, DenseState) and isinstance(b, DenseState):
        return float(abs(a.overlap(b)) ** 2)
    raise TypeError(f"cannot compare {type(a).__name__} with {type(b).__name__}")


def spdm(state) -> SPDM:
    if isinstance(state, mps.MPSState):
        return SPDM(mps.correlation_matrix(state))
    if isinstance(state, FermiSeaState):
        phi = state.orbitals[:-1]
        return SPDM(phi.conj() @ phi.T)
    if isinstance(state, DenseState):
        return SPDM(state.spdm())
    raise TypeError(f"cannot build an SPDM from {type(state).__name__}")


def momentum_distribution(s: SPDM) -> MomentumDistribution:
    """``n(k) = (1/L) sum_jl exp(ik(j-l)) rho_jl`` on the grid ``k = 2 pi q / L``."""
    L = s.L
    k = 2 * np.pi * np.arange(L) / L
    j = np.arange(L)
    phase = np.exp(1j * np.outer(k, j))  # (k, j)
    n_k = np.einsum("kj,jl,kl->k", phase, s.rho, phase.conj()).real / L
    return MomentumDistribution(k_grid=k, n_k=n_k)


def condensate_modes(s: SPDM, m: int = 5, degeneracy_tol: float = 1e-8) -> EigenmodeReport:
    """Largest ``m`` natural-orbital occupations and orbitals, descending."""
    if m > s.L:
        raise ValueError(f"m={m} exceeds the lattice size {s.L}")
    w, v = np.linalg.eigh(0.5 * (s.rho + s.rho.conj().T))
    order = np.argsort(w)[::-1][:m]
    lambdas = w[order]
    modes = v[:, order]
    for c in range(modes.shape[1]):
        pivot = modes[np.argmax(np.abs(modes[:, c])), c]
        modes[:, c] *= np.abs(pivot) / pivot
    degenerate = bool(m > 1 and lambdas[0] - lambdas[1] <= degeneracy_tol * max(1.0, abs(lambdas[0])))
    return EigenmodeReport(lambdas=lambdas, modes=modes, degenerate=degenerate, total=float(w.sum()))


@dataclass
class Snapshot:
    t: float
    spdm: SPDM
    momentum: MomentumDistribution
    modes: EigenmodeReport
    n_right_variance: float


@dataclass
class SnapshotObserver:
    """Observer for ``mps.evolve_quench`` collecting SPDM-derived data every ``interval``."""

    geometry: LatticeGeometry
    interval: float = 1.0
    n_modes: int = 5
    _next: float = field(default=0.0, init=False)

    def __call__(self, t: float, state: mps.MPSState):
        if t + 1e-9 < self._next:
            return None
        self._next = t + self.interval
        return take_snapshot(t, state, self.geometry, self.n_modes)


def take_snapshot(t: float, state, geometry: LatticeGeometry, n_modes: int = 5) -> Snapshot:
    s = spdm(state)
    var = 0.0
    if isinstance(state, mps.MPSState):
        var = mps.number_variance(state, range(geometry.impurity_index + 1, geometry.n_sites))
    return Snapshot(
        t=t,
        spdm=s,
        momentum=momentum_distribution(s),
        modes=condensate_modes(s, min(n_modes, s.L)),
        n_right_variance=var,
    )


def peak_lambda_history(snapshots: dict) -> tuple[np.ndarray, np.ndarray]:
    times = np.array(sorted(snapshots))
    return times, np.array([snapshots[t].modes.lambdas[0] for t in times])


@dataclass(frozen=True)
class ChannelProxies:
    n_right: float
    condensate_fraction: float
    momentum_contrast: float
    n_right_std: float
    condensate_growth: float


@dataclass(frozen=True)
class ReadoutReport:
    t: float
    up: ChannelProxies
    down: ChannelProxies
    separation: dict
    score: dict


def _snapshot_at(run, t: float) -> Snapshot:
    key = round(t, 10)
    if key not in run.snapshots:
        raise AlignmentError(f"no snapshot at t={t}")
    return run.snapshots[key]


def _proxies(run, t: float, N: int) -> ChannelProxies:
    times = np.asarray(run.times)
    idx = int(np.argmin(np.abs(times - t)))
    snap = _snapshot_at(run, t)
    first = run.snapshots[min(run.snapshots)]
    frac = snap.modes.lambdas[0] / N
    frac0 = first.modes.lambdas[0] / N
    return ChannelProxies(
        n_right=float(run.n_right[idx]),
        condensate_fraction=float(frac),
        momentum_contrast=snap.momentum.contrast(),
        n_right_std=float(np.sqrt(max(snap.n_right_variance, 0.0))),
        condensate_growth=float(frac / frac0 - 1.0),
    )


def _temporal_std(run, attr_fn, t: float, window: float) -> float:
    keys = [k for k in sorted(run.snapshots) if t - window - 1e-9 <= k <= t + 1e-9]
    vals = [attr_fn(run.snapshots[k]) for k in keys]
    return float(np.std(vals)) if len(vals) > 1 else 0.0


def readout_visibility(run_up, run_down, t: float, N: int, window: float = 2.0) -> ReadoutReport:
    """Compare a transparent and a blocking spin channel at time ``t``.

    Separations are absolute proxy differences. The score divides each by a
    pooled fluctuation scale: the quantum spread of ``N_R`` for the atom count,
    the temporal spread over the preceding ``window`` for the SPDM proxies.

    Raises:
        AlignmentError: if the runs were sampled on different time grids.
    """
    tu, td = np.asarray(run_up.times), np.asarray(run_down.times)
    if tu.shape != td.shape or not np.allclose(tu, td, atol=1e-9):
        raise AlignmentError("runs do not share a time grid")
    if sorted(run_up.snapshots) != sorted(run_down.snapshots):
        raise AlignmentError("runs do not share snapshot times")
    up, down = _proxies(run_up, t, N), _proxies(run_down, t, N)
    sep = {
        "n_right": abs(up.n_right - down.n_right),
        "condensate_fraction": abs(up.condensate_fraction - down.condensate_fraction),
        "momentum_contrast": abs(up.momentum_contrast - down.momentum_contrast),
    }
    scales = {
        "n_right": np.sqrt(0.5 * (up.n_right_std**2 + down.n_right_std**2)),
        "condensate_fraction": np.sqrt(
            0.5 * sum(_temporal_std(r, lambda s: s.modes.lambdas[0] / N, t, window) ** 2 for r in (run_up, run_down))
        ),
        "momentum_contrast": np.sqrt(
            0.5 * sum(_temporal_std(r, lambda s: s.momentum.contrast(), t, window) ** 2 for r in (run_up, run_down))
        ),
    }
    score = {k: (sep[k] / scales[k] if scales[k] > 1e-12 else (0.0 if sep[k] == 0 else np.inf)) for k in sep}
    return ReadoutReport(t=t, up=up, down=down, separation=sep, score=score)
