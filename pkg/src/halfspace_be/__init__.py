"""Resolvent and maximal-regularity toolkit for the linearized Beris-Edwards
system on the half-space."""
from .spectral_symbols import ModelParams

__version__ = "0.1.0"
__all__ = ["ModelParams", "__version__"]
