"""Quasi-Toeplitz KAM machinery.

Exact integer-lattice geometry (sign-lex optimal presentations, cuts,
good portions), majorant-normed Taylor-Fourier Hamiltonian series with
Poisson brackets, quasi-Toeplitz decompositions of bilinear parts, and a
desk-scale KAM iteration for NLS-type normal forms.
"""

from qtkam.params import (
    AnalysisParams,
    CutParams,
    LatticeParams,
    Problem,
    ValidationReport,
    load_config,
    save_config,
    validate,
)

__all__ = [
    "AnalysisParams",
    "CutParams",
    "LatticeParams",
    "Problem",
    "ValidationReport",
    "load_config",
    "save_config",
    "validate",
]

__version__ = "0.1.0"
