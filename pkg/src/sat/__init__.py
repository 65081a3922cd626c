"""Coherent transport of a 1D lattice gas through a laser-dressed impurity site.

Units throughout: hbar = 1, lattice constant = 1, energies in units of the
tunnelling J (default J = 1), times in units of 1/J.
"""

from sat.model import ChannelParams, DressedPair, LatticeGeometry, Species

__version__ = "0.1.0"

__all__ = ["ChannelParams", "DressedPair", "LatticeGeometry", "Species", "__version__"]
