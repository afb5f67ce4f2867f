"""
branchdiff Package

Quasi-stationary and stationary laws of the diffusion limit of neutral
multi-type branching processes, checked against a discrete
Bienayme-Galton-Watson oracle.

Modules:
    specfun: exponential integrals, modified Bessel I1, harmonic numbers
    feller: single-type Feller diffusion laws and their asymptotic limits
    rates: mutation-rate matrices, stationary vectors, spectral data
    qsd_moments: QSD moments and sampling distributions
    qsd_density: small-theta QSD density and its quadrature checks
    bgw: discrete transition operator, eigenvector QSD and Monte Carlo
    cli: batch command line producing CSV grids and JSON summaries

Features:
    - Poisson-Gamma and Bessel forms of the Feller transition density
    - Exact second moments by linear solve, spectral sum or PIM closed form
    - O(theta) QSD density with surface and line components
    - Matrix-free power and Arnoldi eigen-solvers for the truncated chain
    - Seeded, thread-count independent Monte Carlo
"""

__version__ = "1.0.0"
__author__ = "branchdiff developers"
__description__ = "Quasi-stationary laws of multi-type branching diffusions"

from .errors import (BranchDiffError, ConfigError, ConvergenceError, DomainError, ModelError,
                     NumericalError)
from .rates import RateMatrix, ThetaP, pim
from .feller import FellerLaw
from .qsd_moments import MomentReport, SampleCounts, moment_report
from .qsd_density import SmallThetaQsd
from .bgw import DiscreteModel, QsdVector, qsd_eigenvector, simulate

__all__ = [
    "BranchDiffError",
    "ConfigError",
    "ConvergenceError",
    "DomainError",
    "ModelError",
    "NumericalError",
    "RateMatrix",
    "ThetaP",
    "pim",
    "FellerLaw",
    "MomentReport",
    "SampleCounts",
    "moment_report",
    "SmallThetaQsd",
    "DiscreteModel",
    "QsdVector",
    "qsd_eigenvector",
    "simulate",
]
