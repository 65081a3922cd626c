"""Channel parameters and closed-form single-site physics of the dressed impurity.

Detuning convention: the molecule level carries the on-site energy ``-Delta``
exactly as written in the lattice Hamiltonian. Eliminating the molecule from a
single-particle problem then gives an energy-dependent impurity interaction

    U_eff(eps) = U_qb + Omega**2 / (eps + Delta),

so the resonant reflection (Fano zero) sits at ``eps = -Delta`` and complete
transmission at ``eps = -Delta - Omega**2/U_qb``. At resonance (``Delta = 0``)
the sign of ``Delta`` is irrelevant.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np


class Species(str, enum.Enum):
    BOSON = "boson"
    FERMION = "fermion"


class DegenerateResonanceError(ZeroDivisionError):
    """Raised when an energy sits exactly on a dressed-state pole."""


class UndefinedTransparencyError(ValueError):
    """Raised when no detuning can screen a vanishing background interaction."""


class _Pole:
    """Marker for a divergent effective interaction (complete reflection)."""

    _instance: _Pole | None = None

    def __new__(cls) -> _Pole:
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "POLE"

    def __reduce__(self):
        return (_Pole, ())


POLE = _Pole()


@dataclass(frozen=True)
class ChannelParams:
    """All couplings of a single impurity spin channel.

    Attributes:
        J: Nearest-neighbour tunnelling energy; sets the energy scale.
        Omega: Effective two-photon Rabi frequency of the atom-molecule conversion.
        Delta: Two-photon detuning; the molecule level sits at ``-Delta``.
        U_qb: Background interaction between a probe atom and the impurity atom.
        U_bm: Background interaction between a probe atom and the molecule.
        U_bb: On-site boson-boson interaction (unused for fermions).
        species: Statistics of the probe atoms.
        n_max: Maximum number of bosons per site (forced to 1 for fermions).
    """

    J: float = 1.0
    Omega: float = 0.0
    Delta: float = 0.0
    U_qb: float = 0.0
    U_bm: float = 0.0
    U_bb: float = 0.0
    species: Species = Species.BOSON
    n_max: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "species", Species(self.species))
        if not self.J > 0:
            raise ValueError(f"J must be positive, got {self.J}")
        if self.Omega < 0:
            raise ValueError(f"Omega must be non-negative, got {self.Omega}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError(f"n_max must be an integer >= 1, got {self.n_max}")
        object.__setattr__(self, "n_max", int(self.n_max))
        if self.species is Species.FERMION:
            object.__setattr__(self, "n_max", 1)
            object.__setattr__(self, "U_bb", 0.0)

    @property
    def hard_core(self) -> bool:
        return self.n_max == 1

    def with_(self, **changes) -> ChannelParams:
        return replace(self, **changes)


@dataclass(frozen=True)
class LatticeGeometry:
    """Left box, impurity site and right reservoir.

    Sites are indexed ``0 .. M_left + M_right``; the box occupies
    ``0 .. M_left - 1`` and the impurity sits at ``M_left``.
    """

    M_left: int
    M_right: int
    N: int
    impurity_index: int = field(init=False)

    def __post_init__(self) -> None:
        if self.M_left < 1:
            raise ValueError(f"M_left must be >= 1, got {self.M_left}")
        if self.M_right < 0:
            raise ValueError(f"M_right must be >= 0, got {self.M_right}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        object.__setattr__(self, "impurity_index", self.M_left)

    @property
    def n_sites(self) -> int:
        return self.M_left + self.M_right + 1

    @property
    def filling(self) -> float:
        return self.N / self.M_left

    def right_slice(self) -> slice:
        return slice(self.impurity_index + 1, self.n_sites)

    def check_capacity(self, n_max: int) -> None:
        if self.N > self.M_left * n_max:
            raise ValueError(
                f"N={self.N} particles do not fit into M_left={self.M_left} sites with n_max={n_max}"
            )


@dataclass(frozen=True)
class DressedPair:
    eps_plus: float
    eps_minus: float


def dispersion(k, params: ChannelParams):
    """Bloch-band energy ``-2 J cos k``; accepts scalars or arrays."""
    return -2.0 * params.J * np.cos(k)


def group_velocity(k, params: ChannelParams):
    return 2.0 * params.J * np.sin(k)


def _is_on_pole(eps: float, params: ChannelParams) -> bool:
    scale = max(1.0, abs(params.Delta), 2.0 * params.J)
    return abs(eps + params.Delta) <= 8.0 * np.finfo(float).eps * scale


def u_eff_at_energy(eps: float, params: ChannelParams):
    """Energy-dependent impurity interaction, or ``POLE`` at the Fano zero."""
    if params.Omega == 0:
        return float(params.U_qb)
    if _is_on_pole(eps, params):
        return POLE
    return params.U_qb + params.Omega**2 / (eps + params.Delta)


def u_eff(k: float, params: ChannelParams):
    return u_eff_at_energy(float(dispersion(k, params)), params)


def j_eff(eps: float, params: ChannelParams) -> float:
    """Two-path effective tunnelling past a resonantly dressed impurity (U_qb = 0)."""
    J, Om = params.J, params.Omega
    if eps + Om == 0 or eps - Om == 0:
        raise DegenerateResonanceError(f"energy {eps} coincides with a dressed state at +-{Om}")
    return -(J**2) / (eps + Om) - J**2 / (eps - Om)


def dressed_energies(params: ChannelParams) -> DressedPair:
    half = 0.5 * params.U_qb
    root = math.sqrt(half * half + params.Omega**2)
    return DressedPair(eps_plus=half + root, eps_minus=half - root)


def transparency_detuning(params: ChannelParams) -> float:
    """Detuning that screens the background interaction at the band centre.

    With ``Delta = -Omega**2 / U_qb`` the effective interaction vanishes at
    ``eps = 0`` and, for ``Omega >> J``, stays small across the whole band.
    """
    if params.U_qb == 0:
        raise UndefinedTransparencyError("U_qb = 0: there is no background interaction to screen")
    return -(params.Omega**2) / params.U_qb


def fano_zero_energy(params: ChannelParams) -> float | None:
    """Energy of complete reflection, or None when the impurity is undressed."""
    if params.Omega == 0:
        return None
    return -params.Delta


def fano_unity_energy(params: ChannelParams) -> float | None:
    """Energy of complete transmission, or None when it does not exist."""
    if params.Omega == 0 or params.U_qb == 0:
        return None
    return -params.Delta - params.Omega**2 / params.U_qb


def in_band(eps: float | None, params: ChannelParams) -> bool:
    return eps is not None and -2.0 * params.J < eps < 2.0 * params.J
