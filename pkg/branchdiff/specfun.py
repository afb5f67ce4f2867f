"""
Special functions used by the density and moment formulas

Exponential integrals E1 and E2, the modified Bessel function I1 and its
exponentially scaled form, harmonic numbers and the Euler-Mascheroni
constant. Scalars return floats; numpy arrays are evaluated elementwise.
"""

import functools
import logging
import math
from typing import Callable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import DomainError, NumericalError

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.57721566490153286

# Below this E2 uses its small-x expansion instead of the recurrence
E2_SMALL_X = 1e-8
# Scaled I1 uses the large-argument expansion from here on
I1_ASYMPTOTIC_Z = 30.0
# Harmonic numbers switch to the asymptotic expansion above this n
HARMONIC_DIRECT_MAX = 10_000

_FPMIN = 1e-300


class SpecFunConfig(BaseModel):
    """Truncation controls for series and continued fractions"""

    model_config = ConfigDict(frozen=True)

    series_tol: float = Field(default=1e-15, gt=0, le=1e-10)
    max_terms: int = Field(default=500, ge=50)


DEFAULT_SPECFUN = SpecFunConfig()


def _elementwise(func: Callable) -> Callable:
    """Evaluate a scalar special function over numpy arrays"""

    vectorized = np.vectorize(func, otypes=[float], excluded={"config"})

    @functools.wraps(func)
    def wrapper(x, config: SpecFunConfig = DEFAULT_SPECFUN):
        if np.ndim(x) == 0:
            return func(float(x), config=config)
        return vectorized(np.asarray(x, dtype=float), config=config)

    return wrapper


def _e1_series(x: float, config: SpecFunConfig) -> float:
    total = 0.0
    term = 1.0
    for k in range(1, config.max_terms + 1):
        term *= -x / k
        contribution = term / k
        total += contribution
        if abs(contribution) <= config.series_tol * abs(total):
            return -EULER_GAMMA - math.log(x) - total
    raise NumericalError(f"E1 series did not converge at x={x} within {config.max_terms} terms")


def _e1_continued_fraction(x: float, config: SpecFunConfig) -> float:
    # Modified Lentz evaluation of the E_n continued fraction with n = 1
    b = x + 1.0
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, config.max_terms + 1):
        a = -float(i * i)
        b += 2.0
        d = 1.0 / (a * d + b)
        c = b + a / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) <= config.series_tol:
            return h * math.exp(-x)
    raise NumericalError(f"E1 continued fraction did not converge at x={x} within {config.max_terms} terms")


@_elementwise
def exp_integral_e1(x: float, config: SpecFunConfig = DEFAULT_SPECFUN) -> float:
    """E1(x) = integral over t > 1 of exp(-x t)/t, for x > 0"""
    if not x > 0:
        raise DomainError(f"exp_integral_e1 requires x > 0, got {x}")
    if x < 1.0:
        return _e1_series(x, config)
    return _e1_continued_fraction(x, config)


@_elementwise
def exp_integral_e2(x: float, config: SpecFunConfig = DEFAULT_SPECFUN) -> float:
    """E2(x) = integral over t > 1 of exp(-x t)/t^2, for x >= 0

    Uses E2(x) = exp(-x) - x E1(x), switching to 1 + x(ln x + gamma - 1)
    below E2_SMALL_X where the recurrence cancels.
    """
    if not x >= 0:
        raise DomainError(f"exp_integral_e2 requires x >= 0, got {x}")
    if x == 0.0:
        return 1.0
    if x < E2_SMALL_X:
        return 1.0 + x * (math.log(x) + EULER_GAMMA - 1.0)
    return math.exp(-x) - x * exp_integral_e1(x, config=config)


@_elementwise
def bessel_i1(z: float, config: SpecFunConfig = DEFAULT_SPECFUN) -> float:
    """Modified Bessel function I1 by its power series"""
    if not z >= 0:
        raise DomainError(f"bessel_i1 requires z >= 0, got {z}")
    if z == 0.0:
        return 0.0
    half = 0.5 * z
    q = half * half
    term = half
    total = term
    for k in range(config.max_terms):
        term *= q / ((k + 1) * (k + 2))
        total += term
        if not math.isfinite(total):
            raise NumericalError(f"bessel_i1 overflowed at z={z}")
        # terms rise until k ~ z/2, so only stop on the falling side
        if term <= config.series_tol * total and (k + 1) > half:
            return total
    raise NumericalError(f"bessel_i1 series did not converge at z={z} within {config.max_terms} terms")


def _i1e_asymptotic(z: float, config: SpecFunConfig) -> float:
    # Hankel expansion with 4 nu^2 = 4
    term = 1.0
    total = 1.0
    for k in range(1, config.max_terms + 1):
        term *= -(4.0 - (2 * k - 1) ** 2) / (8.0 * k * z)
        total += term
        if abs(term) <= config.series_tol * abs(total):
            return total / math.sqrt(2.0 * math.pi * z)
    raise NumericalError(f"I1 asymptotic expansion did not converge at z={z} within {config.max_terms} terms")


@_elementwise
def bessel_i1e(z: float, config: SpecFunConfig = DEFAULT_SPECFUN) -> float:
    """Exponentially scaled exp(-z) I1(z), finite for every z >= 0"""
    if not z >= 0:
        raise DomainError(f"bessel_i1e requires z >= 0, got {z}")
    if z < I1_ASYMPTOTIC_Z:
        return math.exp(-z) * bessel_i1(z, config=config)
    return _i1e_asymptotic(z, config)


def harmonic(n: int) -> float:
    """n-th harmonic number, H_0 = 0"""
    n = int(n)
    if n < 0:
        raise DomainError(f"harmonic requires n >= 0, got {n}")
    if n <= HARMONIC_DIRECT_MAX:
        return math.fsum(1.0 / k for k in range(1, n + 1))
    inv = 1.0 / n
    inv2 = inv * inv
    return math.log(n) + EULER_GAMMA + 0.5 * inv - inv2 / 12.0 + inv2 * inv2 / 120.0 - inv2 ** 3 / 252.0
