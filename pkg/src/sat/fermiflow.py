"""Exact dynamics of non-interacting fermions passing the dressed impurity.

Every particle of the initial Fermi sea scatters independently, so the
many-body state is a Slater determinant of orbitals evolving under the
``(L + 1)``-level single-particle Hamiltonian: ``L`` lattice sites plus one
molecule level attached to the impurity site.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from sat.model import ChannelParams, LatticeGeometry, fano_unity_energy, fano_zero_energy, in_band
from sat.scattering import transmission


class InsufficientWindowError(ValueError):
    """Raised when a current fit window is too short or violates the transient/reflection bounds."""


TRANSIENT_CUT = 4.0  # in units of 1/J
REFLECTION_SAFETY = 0.8


@dataclass
class SingleParticleSystem:
    """Single-particle Hamiltonian; lattice sites ``0..L-1``, molecule level at index ``L``."""

    h: np.ndarray
    geometry: LatticeGeometry
    params: ChannelParams
    box_mask: bool = False

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    @property
    def n_lattice(self) -> int:
        return self.dim - 1

    @property
    def molecule_index(self) -> int:
        return self.dim - 1


def build_system(params: ChannelParams, geometry: LatticeGeometry, box_mask: bool = False) -> SingleParticleSystem:
    """Assemble the single-particle matrix.

    With ``box_mask`` the bond between the box and the impurity is cut and the
    impurity is left undressed; this is the preparation Hamiltonian.
    """
    L = geometry.n_sites
    h = np.zeros((L + 1, L + 1))
    hop = -params.J * np.ones(L - 1)
    if box_mask:
        hop[geometry.M_left - 1] = 0.0
    idx = np.arange(L - 1)
    h[idx, idx + 1] = hop
    h[idx + 1, idx] = hop
    imp, mol = geometry.impurity_index, L
    h[imp, imp] = params.U_qb
    h[mol, mol] = -params.Delta
    if not box_mask:
        h[imp, mol] = h[mol, imp] = params.Omega
    return SingleParticleSystem(h=h, geometry=geometry, params=params, box_mask=box_mask)


@dataclass
class FermiSeaState:
    """Occupied orbitals as columns of a ``dim x N`` matrix."""

    orbitals: np.ndarray
    t: float = 0.0
    box_energies: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.orbitals.shape[1]

    def density(self) -> np.ndarray:
        return np.sum(np.abs(self.orbitals) ** 2, axis=1)

    def gram(self) -> np.ndarray:
        return self.orbitals.conj().T @ self.orbitals

    def correlation_matrix(self) -> np.ndarray:
        """``<c_i^dag c_j>`` over all levels including the molecule."""
        return self.orbitals.conj() @ self.orbitals.T


def box_orbitals(M: int, J: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of an open chain of ``M`` sites, ascending in energy."""
    h = np.diag(-J * np.ones(M - 1), 1)
    h = h + h.T
    return np.linalg.eigh(h)


def prepare_fermi_sea(system: SingleParticleSystem, geometry: LatticeGeometry) -> FermiSeaState:
    """Fill the lowest ``N`` standing waves of the isolated left box."""
    if geometry.N > geometry.M_left:
        raise ValueError(f"cannot place N={geometry.N} fermions into M_left={geometry.M_left} sites")
    energies, vecs = box_orbitals(geometry.M_left, system.params.J)
    orbitals = np.zeros((system.dim, geometry.N), dtype=complex)
    orbitals[: geometry.M_left] = vecs[:, : geometry.N]
    return FermiSeaState(orbitals=orbitals, t=0.0, box_energies=energies[: geometry.N])


@dataclass
class CurrentSeries:
    times: np.ndarray
    n_right: np.ndarray
    n_mol: np.ndarray
    n_left: np.ndarray
    n_impurity: np.ndarray
    J: float = 1.0
    M_right: int | None = None
    densities: np.ndarray | None = field(default=None, repr=False)

    @property
    def total(self) -> np.ndarray:
        return self.n_left + self.n_right + self.n_impurity + self.n_mol

    def reflection_bound(self) -> float:
        if self.M_right is None:
            return np.inf
        return REFLECTION_SAFETY * self.M_right / (2.0 * self.J)


class SpectralPropagator:
    """Exact propagator ``exp(-i h t)`` from a once-off eigendecomposition."""

    def __init__(self, h: np.ndarray):
        self.energies, self.vectors = np.linalg.eigh(h)

    def coefficients(self, psi: np.ndarray) -> np.ndarray:
        return self.vectors.conj().T @ psi

    def at(self, coeffs: np.ndarray, t: float) -> np.ndarray:
        phases = np.exp(-1j * self.energies * t)
        return self.vectors @ (phases[:, None] * coeffs if coeffs.ndim == 2 else phases * coeffs)


def evolve(
    state: FermiSeaState,
    system: SingleParticleSystem,
    dt: float,
    n_steps: int,
    keep_densities: bool = False,
) -> CurrentSeries:
    """Advance the sea for ``n_steps`` of ``dt`` and record N_R, molecule weight and box weight.

    The state is updated in place to the final time.
    """
    if system.box_mask:
        raise ValueError("evolution requires the coupled (box_mask=False) Hamiltonian")
    geo = system.geometry
    prop = SpectralPropagator(system.h)
    coeffs = prop.coefficients(state.orbitals)
    imp = geo.impurity_index
    right = geo.right_slice()

    times = state.t + dt * np.arange(n_steps + 1)
    n_right = np.empty(n_steps + 1)
    n_left = np.empty(n_steps + 1)
    n_imp = np.empty(n_steps + 1)
    n_mol = np.empty(n_steps + 1)
    densities = np.empty((n_steps + 1, system.dim)) if keep_densities else None
    orbitals = state.orbitals
    for step in range(n_steps + 1):
        orbitals = prop.at(coeffs, dt * step)
        dens = np.sum(orbitals.real**2 + orbitals.imag**2, axis=1)
        n_left[step] = dens[:imp].sum()
        n_imp[step] = dens[imp]
        n_right[step] = dens[right].sum()
        n_mol[step] = dens[-1]
        if densities is not None:
            densities[step] = dens
    state.orbitals = orbitals
    state.t = float(times[-1])
    return CurrentSeries(
        times=times,
        n_right=n_right,
        n_mol=n_mol,
        n_left=n_left,
        n_impurity=n_imp,
        J=system.params.J,
        M_right=geo.M_right,
        densities=densities,
    )


@dataclass(frozen=True)
class CurrentFit:
    current: float
    stderr: float
    window: tuple[float, float]
    n_samples: int


def steady_current(
    series,
    window: tuple[float, float] | None = None,
    min_samples: int = 10,
    transient: float = TRANSIENT_CUT,
) -> CurrentFit:
    """Least-squares slope of ``N_R(t)`` over a window after the transient.

    ``series`` needs ``times`` and ``n_right`` arrays; ``J`` and
    ``reflection_bound()`` are honoured when present.

    Raises:
        InsufficientWindowError: if the window starts inside the transient,
            ends after the reflected wavefront could matter, or holds fewer
            than ``min_samples`` samples.
    """
    J = getattr(series, "J", 1.0)
    bound = series.reflection_bound() if hasattr(series, "reflection_bound") else np.inf
    times = np.asarray(series.times)
    if window is None:
        window = (transient / J, min(bound, times[-1]))
    t1, t2 = window
    if t1 < transient / J - 1e-12:
        raise InsufficientWindowError(f"window start {t1} lies inside the {transient}/J transient")
    if t2 > bound + 1e-12:
        raise InsufficientWindowError(f"window end {t2} exceeds the reflection bound {bound:.3f}")
    mask = (times >= t1 - 1e-12) & (times <= t2 + 1e-12)
    if mask.sum() < min_samples:
        raise InsufficientWindowError(f"only {int(mask.sum())} samples in window {window}, need {min_samples}")
    fit = stats.linregress(times[mask], np.asarray(series.n_right)[mask])
    return CurrentFit(current=float(fit.slope), stderr=float(fit.stderr), window=(t1, t2), n_samples=int(mask.sum()))


def free_current(n: float, J: float = 1.0) -> float:
    """Current without impurity coupling, ``2 J sin^2(n pi / 2) / pi``."""
    return 2.0 * J * np.sin(n * np.pi / 2) ** 2 / np.pi


def analytic_current_integral(params: ChannelParams, n: float, rtol: float = 1e-9) -> float:
    """Independent-scattering current ``(1/2pi) int_0^{pi n} T(k) v(k) dk`` of a filled Fermi sea."""
    if not 0.0 <= n <= 1.0:
        raise ValueError(f"filling must lie in [0, 1], got {n}")
    if n == 0:
        return 0.0
    J = params.J
    kF = np.pi * n
    breaks = []
    for eps in (fano_zero_energy(params), fano_unity_energy(params)):
        if in_band(eps, params):
            kb = float(np.arccos(-eps / (2 * J)))
            if 0 < kb < kF:
                breaks.append(kb)

    def integrand(k):
        return float(transmission(k, params)) * 2 * J * np.sin(k)

    value, _ = integrate.quad(
        integrand, 0.0, kF, points=sorted(breaks) or None, epsabs=0.0, epsrel=rtol * 1e-2, limit=400
    )
    return value / (2 * np.pi)


@dataclass(frozen=True)
class ClosedFormCurrent:
    value: float
    integral: float
    ratio: float
    consistent: bool


def _g_factors(omega_over_J: float) -> tuple[float, float]:
    r = np.sqrt(1.0 + omega_over_J**4 / 4.0)
    return np.sqrt((r + 1.0) / 2.0), np.sqrt((r - 1.0) / 2.0)


def closed_form_value(params: ChannelParams, n: float, verbatim: bool = False) -> float:
    """Resonant-driving current in closed form.

    ``verbatim=True`` evaluates a commonly quoted variant with
    ``V = sin^2(n pi/2)``, a minus sign in front of the arctanh term and the
    principal arctan branch; it does not track the integral. The default
    equals the k-space integral identically:

        I0 = (J/pi) [V - G+ G- (G+ atan2(V G-, G+^2 - V) + G- artanh(V G+ / (G-^2 + V))) / (G+^2 + G-^2)]

    with ``V = eps_F / 2J = 2 sin^2(n pi / 2)`` (Fermi energy above the band
    bottom) and ``2 G+-^2 = sqrt(1 + Omega^4 / 4J^4) +- 1``.
    """
    if params.Delta != 0 or params.U_qb != 0:
        raise ValueError("closed form only holds for Delta = 0 and U_qb = 0")
    J = params.J
    s2 = np.sin(n * np.pi / 2) ** 2
    V = s2 if verbatim else 2.0 * s2
    if n == 0:
        return 0.0
    if params.Omega == 0:
        return J / np.pi * V
    gp, gm = _g_factors(params.Omega / J)
    weight = gp * gm / (gp**2 + gm**2)
    if verbatim:
        bracket = gp * np.arctan(V * gm / (gp**2 - V)) - gm * np.arctanh(V * gp / (gm**2 + V))
    else:
        bracket = gp * np.arctan2(V * gm, gp**2 - V) + gm * np.arctanh(V * gp / (gm**2 + V))
    return J / np.pi * (V - weight * bracket)


def analytic_current_closed_form(
    params: ChannelParams, n: float, verbatim: bool = False, rtol: float = 1e-8
) -> ClosedFormCurrent:
    """Closed-form current together with its agreement against the quadrature."""
    value = closed_form_value(params, n, verbatim=verbatim)
    ref = analytic_current_integral(params, n)
    ratio = value / ref if ref != 0 else (1.0 if value == 0 else np.inf)
    return ClosedFormCurrent(value=value, integral=ref, ratio=ratio, consistent=bool(abs(ratio - 1.0) <= rtol))
