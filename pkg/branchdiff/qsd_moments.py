"""
Moments of the subcritical quasi-stationary law

Exact first and second moments (linear solve, spectral and PIM closed forms),
the small-theta moments of X and of the relative frequencies U, and the
finite-sample sampling distribution. Small-theta formulas are stated at the
reference scale alpha = -1/2; other alpha go through rescale_moments.
"""

import itertools
import logging
import math
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import linalg

from .errors import DomainError, ModelError, NumericalError
from .rates import RateMatrix, ThetaP, spectral_decompose
from .specfun import harmonic

logger = logging.getLogger(__name__)

REFERENCE_ALPHA = -0.5
CONDITION_LIMIT = 1e12

MomentMethod = Literal["linear-solve", "spectral", "pim", "small-theta"]


class MomentReport(BaseModel):
    """First moments mu_i and second moments mu_ij of the QSD"""

    model_config = ConfigDict(frozen=True)

    alpha: float
    theta: Optional[float] = None
    method: MomentMethod
    mu: List[float]
    mu2: List[List[float]]

    @property
    def mean(self) -> np.ndarray:
        return np.array(self.mu)

    @property
    def second(self) -> np.ndarray:
        return np.array(self.mu2)


class SampleCounts(BaseModel):
    """Occupancy vector n = (n_1, ..., n_d) of a finite sample"""

    model_config = ConfigDict(frozen=True)

    n: Tuple[int, ...]

    @field_validator("n")
    @classmethod
    def _nonempty(cls, n: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(k < 0 for k in n):
            raise ValueError(f"counts must be nonnegative, got {n}")
        if not any(k > 0 for k in n):
            raise ValueError("sample is empty")
        return n

    @classmethod
    def of(cls, counts: Sequence[int]) -> "SampleCounts":
        return cls(n=tuple(int(k) for k in counts))

    @property
    def n_total(self) -> int:
        return sum(self.n)

    @property
    def nonzero(self) -> List[int]:
        return [i for i, k in enumerate(self.n) if k > 0]


def _check_subcritical(alpha: float) -> float:
    if not alpha < 0:
        raise DomainError(f"quasi-stationary moments need alpha < 0, got {alpha}")
    return abs(alpha)


def mean_vector(alpha: float, rates: RateMatrix) -> np.ndarray:
    """mu = pi / (2|alpha|)"""
    a = _check_subcritical(alpha)
    return rates.pi / (2.0 * a)


def second_moments_linear_solve(alpha: float, rates: RateMatrix) -> np.ndarray:
    """Solve delta_rs mu_r - |alpha| mu_rs + sum_i (gamma_ir mu_is + gamma_is mu_ir) = 0 over r <= s"""
    a = _check_subcritical(alpha)
    d = rates.d
    gamma = rates.gamma
    mu = mean_vector(alpha, rates)
    pairs = [(r, s) for r in range(d) for s in range(r, d)]
    index: Dict[Tuple[int, int], int] = {}
    for k, (r, s) in enumerate(pairs):
        index[(r, s)] = index[(s, r)] = k

    A = np.zeros((len(pairs), len(pairs)))
    b = np.zeros(len(pairs))
    for row, (r, s) in enumerate(pairs):
        A[row, index[(r, s)]] -= a
        for i in range(d):
            A[row, index[(i, s)]] += gamma[i, r]
            A[row, index[(i, r)]] += gamma[i, s]
        if r == s:
            b[row] = -mu[r]

    condition = np.linalg.cond(A)
    if not condition < CONDITION_LIMIT:
        raise NumericalError(f"second-moment system is ill-conditioned (cond {condition:.3g})")
    solution = linalg.lu_solve(linalg.lu_factor(A), b)
    mu2 = np.empty((d, d))
    for (r, s), k in index.items():
        mu2[r, s] = solution[k]
    return mu2


def second_moments_spectral(alpha: float, rates: RateMatrix) -> np.ndarray:
    """Closed form for reversible gamma through its spectral decomposition"""
    a = _check_subcritical(alpha)
    spectral = spectral_decompose(rates)
    weights = a / (a - 2.0 * spectral.nu[1:])
    correction = (spectral.u[:, 1:] * weights[None, :]) @ spectral.u[:, 1:].T
    return np.outer(spectral.pi, spectral.pi) / (2.0 * a * a) * (1.0 + correction)


def second_moments_pim(alpha: float, theta: float, pi) -> np.ndarray:
    """mu_ij = pi_i (|alpha| delta_ij + theta pi_j) / (2 alpha^2 (|alpha| + theta))"""
    a = _check_subcritical(alpha)
    pi = np.asarray(pi, dtype=float)
    return pi[:, None] * (a * np.eye(len(pi)) + theta * pi[None, :]) / (2.0 * a * a * (a + theta))


def second_moments_small_theta(theta_p: ThetaP) -> np.ndarray:
    """Second moments to first order in theta at alpha = -1/2"""
    pi, P, theta = theta_p.pi, theta_p.P, theta_p.theta
    flux = pi[:, None] * P
    diag = np.diag(pi)
    return 2.0 * diag + 2.0 * theta * (flux + flux.T - 2.0 * diag)


def _type_index(theta_p: ThetaP, *indices: int) -> None:
    for r in indices:
        if not 0 <= r < theta_p.d:
            raise DomainError(f"type index {r} outside 0..{theta_p.d - 1}")


def moment_x_power(r: int, n: int, theta_p: ThetaP) -> float:
    """E[X_r^n] to first order in theta at alpha = -1/2"""
    _type_index(theta_p, r)
    if n < 1:
        raise DomainError(f"moment order must be positive, got {n}")
    pi_r, p_rr, theta = theta_p.pi[r], theta_p.P[r, r], theta_p.theta
    leading = pi_r * math.factorial(n)
    correction = theta * pi_r * (1.0 - p_rr) * (n * n - n - 1 + n * harmonic(n)) * math.factorial(n - 1)
    return leading - correction


def moment_x_cross(r: int, s: int, n_r: int, n_s: int, theta_p: ThetaP) -> float:
    """E[X_r^n_r X_s^n_s] for r != s to first order in theta at alpha = -1/2"""
    _type_index(theta_p, r, s)
    if r == s:
        raise DomainError("cross moments need two distinct types")
    if n_r < 1 or n_s < 1:
        raise DomainError(f"cross-moment orders must be positive, got ({n_r}, {n_s})")
    pi, P, theta = theta_p.pi, theta_p.P, theta_p.theta

    def half(r_, s_, a, b):
        return pi[r_] * P[r_, s_] * math.factorial(a) * math.factorial(b - 1) / (b + 1) * (a + 2 * b + 1)

    return theta * (half(r, s, n_r, n_s) + half(s, r, n_s, n_r))


def moment_mixed(exponents: Sequence[int], theta_p: ThetaP) -> float:
    """E[prod_r X_r^n_r] at first order; zero once three or more types appear"""
    nonzero = [(r, n) for r, n in enumerate(exponents) if n > 0]
    if not nonzero:
        return 1.0
    if len(nonzero) == 1:
        return moment_x_power(nonzero[0][0], nonzero[0][1], theta_p)
    if len(nonzero) == 2:
        (r, n_r), (s, n_s) = nonzero
        return moment_x_cross(r, s, n_r, n_s, theta_p)
    return 0.0


def moment_u(r: int, n: int, theta_p: ThetaP) -> float:
    """E[U_r^n] = pi_r (1 - theta (1 - P_rr) H_{n-1})"""
    _type_index(theta_p, r)
    if n < 1:
        raise DomainError(f"moment order must be positive, got {n}")
    return theta_p.pi[r] * (1.0 - theta_p.theta * (1.0 - theta_p.P[r, r]) * harmonic(n - 1))


def moment_u_cross(r: int, s: int, n_r: int, n_s: int, theta_p: ThetaP) -> float:
    """E[U_r^n_r U_s^n_s] for r != s to first order in theta"""
    _type_index(theta_p, r, s)
    if r == s:
        raise DomainError("cross moments need two distinct types")
    if n_r < 1 or n_s < 1:
        raise DomainError(f"cross-moment orders must be positive, got ({n_r}, {n_s})")
    pi, P, theta = theta_p.pi, theta_p.P, theta_p.theta
    total = math.factorial(n_r + n_s)
    return theta * (pi[s] * P[s, r] * math.factorial(n_r - 1) * math.factorial(n_s)
                    + pi[r] * P[r, s] * math.factorial(n_s - 1) * math.factorial(n_r)) / total


def _clamp(value: float, counts: SampleCounts, clamp: bool) -> float:
    if value < 0 and clamp:
        logger.warning(f"Sampling probability {value:.4g} for n={counts.n} is negative; "
                       f"theta is outside the small-theta regime, clamping to 0")
        return 0.0
    return value


def sampling_distribution(counts: SampleCounts, theta_p: ThetaP, clamp: bool = True) -> float:
    """Probability that a sample of n_total is distributed over types as counts"""
    if len(counts.n) != theta_p.d:
        raise DomainError(f"counts have {len(counts.n)} types, model has {theta_p.d}")
    pi, P, theta = theta_p.pi, theta_p.P, theta_p.theta
    nonzero = counts.nonzero
    if len(nonzero) == 1:
        r = nonzero[0]
        value = pi[r] * (1.0 - theta * (1.0 - P[r, r]) * harmonic(counts.n[r] - 1))
    elif len(nonzero) == 2:
        r, s = nonzero
        n_r, n_s = counts.n[r], counts.n[s]
        value = theta * (pi[r] * P[r, s] / n_s + pi[s] * P[s, r] / n_r)
    else:
        value = 0.0
    return _clamp(value, counts, clamp)


def sampling_via_u_moments(counts: SampleCounts, theta_p: ThetaP) -> float:
    """Multinomial coefficient times the matching U-moment"""
    nonzero = counts.nonzero
    coefficient = math.factorial(counts.n_total)
    for k in counts.n:
        coefficient //= math.factorial(k)
    if len(nonzero) == 1:
        return coefficient * moment_u(nonzero[0], counts.n_total, theta_p)
    if len(nonzero) == 2:
        r, s = nonzero
        return coefficient * moment_u_cross(r, s, counts.n[r], counts.n[s], theta_p)
    return 0.0


def compositions(n_total: int, d: int) -> List[SampleCounts]:
    """All occupancy vectors of d types with the given total"""
    if n_total < 1 or d < 1:
        raise DomainError(f"need n_total >= 1 and d >= 1, got ({n_total}, {d})")
    result = []
    for bars in itertools.combinations(range(n_total + d - 1), d - 1):
        edges = (-1,) + bars + (n_total + d - 1,)
        result.append(SampleCounts.of([edges[k + 1] - edges[k] - 1 for k in range(d)]))
    return result


def sampling_table(n_total: int, theta_p: ThetaP, clamp: bool = True) -> Tuple[List[Tuple[SampleCounts, float]], float]:
    """Sampling probabilities over all compositions and their sum"""
    rows = [(counts, sampling_distribution(counts, theta_p, clamp)) for counts in compositions(n_total, theta_p.d)]
    total = math.fsum(p for _, p in rows)
    logger.debug(f"Sampling table n_total={n_total}, d={theta_p.d}: {len(rows)} rows, sum {total:.15g}")
    return rows, total


def rescale_moment(value: float, order: int, target_alpha: float) -> float:
    """An order-n X-moment at alpha = -1/2 carried to target_alpha"""
    a = _check_subcritical(target_alpha)
    return value * (2.0 * a) ** (-order)


def rescale_moments(report: MomentReport, target_alpha: float) -> MomentReport:
    """Carry a report from alpha = -1/2 (theta_ref) to target_alpha (theta = 2|alpha| theta_ref)"""
    a = _check_subcritical(target_alpha)
    if report.alpha != REFERENCE_ALPHA:
        raise DomainError(f"rescaling starts from alpha = -1/2, got {report.alpha}")
    factor = 2.0 * a
    return MomentReport(
        alpha=target_alpha,
        theta=None if report.theta is None else report.theta * factor,
        method=report.method,
        mu=(report.mean / factor).tolist(),
        mu2=(report.second / factor ** 2).tolist(),
    )


def moment_report(alpha: float, rates: RateMatrix, method: MomentMethod = "linear-solve",
                  theta_p: Optional[ThetaP] = None) -> MomentReport:
    """First and second moments at alpha by the requested method"""
    a = _check_subcritical(alpha)
    if theta_p is None and (method in ("pim", "small-theta") or rates.canonical_theta() > 0):
        theta_p = rates.to_theta_p()
    theta = None if theta_p is None else theta_p.theta

    if method == "linear-solve":
        mu2 = second_moments_linear_solve(alpha, rates)
    elif method == "spectral":
        mu2 = second_moments_spectral(alpha, rates)
    elif method == "pim":
        if not rates.is_pim():
            raise ModelError("the PIM closed form needs a parent-independent rate matrix")
        mu2 = second_moments_pim(alpha, theta_p.theta, rates.pi)
    elif method == "small-theta":
        reference = theta_p.with_theta(theta_p.theta / (2.0 * a))
        ref_report = MomentReport(alpha=REFERENCE_ALPHA, theta=reference.theta, method=method,
                                  mu=reference.pi.tolist(), mu2=second_moments_small_theta(reference).tolist())
        return rescale_moments(ref_report, alpha)
    else:
        raise DomainError(f"unknown moment method {method!r}")
    logger.debug(f"Second moments by {method} at alpha={alpha}: {mu2.tolist()}")
    return MomentReport(alpha=alpha, theta=theta, method=method,
                        mu=mean_vector(alpha, rates).tolist(), mu2=mu2.tolist())
