"""
Single-type Feller diffusion

Transition law of the diffusion with generator (1/2) x d2/dx2 + alpha x d/dx
started from x = 1: extinction probability, Laplace transform, the
Poisson-Gamma mixture and Bessel forms of the density, and the asymptotic
laws in the subcritical, critical and supercritical regimes.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import integrate, stats
from scipy.special import gammaln, logsumexp, xlogy

from .config import QuadratureConfig
from .errors import DomainError, NumericalError
from .specfun import DEFAULT_SPECFUN, SpecFunConfig, bessel_i1e

logger = logging.getLogger(__name__)

# |alpha| t below this uses the alpha = 0 limit with first-order correction
CRITICAL_BRANCH = 1e-8
MIN_MIXTURE_TERMS = 50
EXP_LIMIT = 700.0

DEFAULT_QUADRATURE = QuadratureConfig()


def _check_time(t: float) -> None:
    if not t > 0:
        raise DomainError(f"diffusion time must be positive, got t={t}")


def _positive_array(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} must be positive")
    return arr


def _nonnegative_array(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr >= 0)):
        raise DomainError(f"{name} must be nonnegative")
    return arr


def _out(values: np.ndarray, like):
    return float(values) if np.ndim(like) == 0 else values


def mu_beta(alpha: float, t: float) -> Tuple[float, float]:
    """Poisson mean mu(t; alpha) and Gamma scale beta(t; alpha)"""
    _check_time(t)
    at = alpha * t
    if abs(at) < CRITICAL_BRANCH:
        return 2.0 / t + alpha, 0.5 * t + 0.25 * alpha * t * t
    if at > EXP_LIMIT:
        raise DomainError(f"alpha*t={at} overflows the supercritical scale beta")
    if at < -EXP_LIMIT:
        # exp(-alpha t) overflows; mu is 2|alpha| exp(alpha t) to double precision
        return 2.0 * abs(alpha) * math.exp(at), -1.0 / (2.0 * alpha)
    return 2.0 * alpha / -math.expm1(-at), math.expm1(at) / (2.0 * alpha)


def extinction_prob(alpha: float, t: float) -> float:
    """p0(t) = exp(-mu(t; alpha))"""
    mu, _ = mu_beta(alpha, t)
    return math.exp(-mu)


def laplace_psi(phi, alpha: float, t: float):
    """E[exp(-phi X(t))] = exp(-mu + mu/(1 + beta phi)); exp(-phi) at t = 0"""
    phi_arr = _nonnegative_array(phi, "phi")
    if t < 0:
        raise DomainError(f"t must be nonnegative, got {t}")
    if t == 0:
        return _out(np.exp(-phi_arr), phi)
    mu, beta = mu_beta(alpha, t)
    bp = beta * phi_arr
    return _out(np.exp(-mu * bp / (1.0 + bp)), phi)


def zeta_conditioned(phi, alpha: float, t: float):
    """Laplace transform of X(t) conditioned on non-extinction"""
    p0 = extinction_prob(alpha, t)
    return _out((np.asarray(laplace_psi(phi, alpha, t)) - p0) / (1.0 - p0), phi)


def mixture_terms(mu: float, beta: float, x: np.ndarray) -> int:
    """Number of Poisson-Gamma terms needed at (mu, beta) over the sample x"""
    peak = math.sqrt(float(np.max(x, initial=0.0)) * mu / beta)
    n = max(MIN_MIXTURE_TERMS, math.ceil(mu + 10.0 * math.sqrt(mu)), math.ceil(peak + 10.0 * math.sqrt(peak) + 10))
    tail = stats.poisson.sf(n, mu)
    if tail > DEFAULT_SPECFUN.series_tol:
        raise NumericalError(f"Poisson tail {tail:.3g} above tolerance at mu={mu}, {n} terms")
    return n


def _poisson_gamma(x: np.ndarray, mu: float, beta: float) -> np.ndarray:
    """Continuous part of the Poisson(mu) mixture of Gamma(l, scale beta), l >= 1"""
    if not mu > 0:
        raise NumericalError("Poisson mean underflowed to zero; the law is numerically a point mass")
    n_terms = mixture_terms(mu, beta, x)
    ell = np.arange(1, n_terms + 1, dtype=float)[:, None]
    log_terms = (-mu + ell * math.log(mu) - gammaln(ell + 1)
                 + xlogy(ell - 1, x[None, :]) - x[None, :] / beta - ell * math.log(beta) - gammaln(ell))
    return np.exp(logsumexp(log_terms, axis=0))


def density_mixture(x, alpha: float, t: float):
    """Continuous part of the law of X(t), X(0) = 1, as a Poisson-Gamma mixture

    The atom at zero is extinction_prob(alpha, t).
    """
    _check_time(t)
    arr = _positive_array(x)
    mu, beta = mu_beta(alpha, t)
    return _out(_poisson_gamma(np.atleast_1d(arr), mu, beta).reshape(arr.shape), x)


def density_bessel(x, alpha: float, t: float, config: SpecFunConfig = DEFAULT_SPECFUN):
    """Same density as density_mixture in its modified Bessel form"""
    _check_time(t)
    arr = _positive_array(x)
    mu, beta = mu_beta(alpha, t)
    z = 2.0 * np.sqrt(arr * mu / beta)
    # I1(z) = exp(z) i1e(z), with exp(z) moved into the exponent
    values = np.exp(z - mu - arr / beta) * np.sqrt(mu / (arr * beta)) * bessel_i1e(z, config=config)
    return _out(np.asarray(values), x)


def density_at_zero(alpha: float, t: float) -> float:
    """Limit of the density as x -> 0+: only the one-offspring term survives"""
    mu, beta = mu_beta(alpha, t)
    return mu * math.exp(-mu) / beta


def conditioned_density(x, alpha: float, t: float):
    """Density of X(t) given X(t) > 0"""
    mu, _ = mu_beta(alpha, t)
    return _out(np.asarray(density_mixture(x, alpha, t)) / -math.expm1(-mu), x)


def qsd_subcritical(x, alpha: float):
    """Exponential quasi-stationary density 2|alpha| exp(-2|alpha| x)"""
    if not alpha < 0:
        raise DomainError(f"quasi-stationary law needs alpha < 0, got {alpha}")
    arr = _nonnegative_array(x)
    rate = 2.0 * abs(alpha)
    return _out(rate * np.exp(-rate * arr), x)


def yaglom_critical(w):
    """Critical Yaglom density of X(t)/t given survival: 2 exp(-2w)"""
    arr = _nonnegative_array(w, "w")
    return _out(2.0 * np.exp(-2.0 * arr), w)


def yaglom_survival(w, sigma2: Optional[float] = None):
    """Survival function exp(-2w); with sigma2, the discrete form exp(-2z/sigma2)"""
    arr = _nonnegative_array(w, "w")
    scale = 1.0 if sigma2 is None else float(sigma2)
    if not scale > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    return _out(np.exp(-2.0 * arr / scale), w)


def supercritical_stationary(z, alpha: float, conditioned: bool = False):
    """Limit law of Z = X(t) exp(-alpha t) for alpha > 0

    Returns (density, atom). Unconditioned the atom is exp(-2 alpha); the
    conditioned law has no atom and its density is divided by 1 - exp(-2 alpha).
    """
    if not alpha > 0:
        raise DomainError(f"supercritical law needs alpha > 0, got {alpha}")
    arr = _nonnegative_array(z, "z")
    rate = 2.0 * alpha
    atom = math.exp(-rate)
    values = _poisson_gamma(np.atleast_1d(arr), rate, 1.0 / rate).reshape(arr.shape)
    if conditioned:
        return _out(values / -math.expm1(-rate), z), 0.0
    return _out(values, z), atom


@dataclass
class PointMassPlusDensity:
    """An atom at zero plus a density on x > 0 with an exponential tail"""
    atom: float
    density: Callable[[float], float]
    tail_scale: float  # e-folding length of the tail
    label: str = ""

    def cutoff(self, tol: float) -> float:
        """x_cut with density(x) * tail_scale below tol beyond it"""
        x_cut = self.tail_scale * max(math.log(1.0 / tol), 1.0)
        for _ in range(60):
            if self.density(x_cut) * self.tail_scale < tol:
                return x_cut
            x_cut *= 2.0
        raise NumericalError(f"no tail cutoff found for {self.label or 'law'}")


def normalisation(law: PointMassPlusDensity, quad: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """atom + integral of the density over (0, x_cut]"""
    x_cut = law.cutoff(quad.tail_tol)
    mass, err = integrate.quad(law.density, 0.0, x_cut, epsabs=quad.epsabs, epsrel=quad.epsrel, limit=quad.limit)
    logger.debug(f"Normalisation of {law.label}: atom {law.atom:.6g} + {mass:.12g} (quad error {err:.2g}, x_cut {x_cut:.3g})")
    return law.atom + mass


class FellerLaw(BaseModel):
    """The diffusion at time t started from X(0) = 1"""

    model_config = ConfigDict(frozen=True)

    alpha: float
    t: float = Field(ge=0)

    def mu_beta(self) -> Tuple[float, float]:
        return mu_beta(self.alpha, self.t)

    def extinction_prob(self) -> float:
        return extinction_prob(self.alpha, self.t)

    def laplace(self, phi):
        return laplace_psi(phi, self.alpha, self.t)

    def density(self, x, form: str = "mixture"):
        if self.t == 0:
            raise DomainError("at t = 0 the law is a point mass at x = 1")
        if form == "bessel":
            return density_bessel(x, self.alpha, self.t)
        return density_mixture(x, self.alpha, self.t)

    def conditioned_density(self, x):
        return conditioned_density(x, self.alpha, self.t)

    def as_law(self, conditioned: bool = False) -> PointMassPlusDensity:
        mu, beta = self.mu_beta()
        if conditioned:
            return PointMassPlusDensity(0.0, self.conditioned_density, beta, f"conditioned(alpha={self.alpha}, t={self.t})")
        return PointMassPlusDensity(math.exp(-mu), self.density, beta, f"finite(alpha={self.alpha}, t={self.t})")


def qsd_law(alpha: float) -> PointMassPlusDensity:
    return PointMassPlusDensity(0.0, lambda x: qsd_subcritical(x, alpha), 1.0 / (2.0 * abs(alpha)), "qsd")


def yaglom_law() -> PointMassPlusDensity:
    return PointMassPlusDensity(0.0, yaglom_critical, 0.5, "yaglom")


def supercritical_law(alpha: float, conditioned: bool = False) -> PointMassPlusDensity:
    _, atom = supercritical_stationary(1.0, alpha, conditioned)
    return PointMassPlusDensity(atom, lambda z: supercritical_stationary(z, alpha, conditioned)[0],
                                1.0 / (2.0 * alpha), "supercritical")


def pde_residual_1d(phi: float, alpha: float, t: float, h: float = 1e-4) -> float:
    """Central-difference residual of d(psi)/dt + (1/2) phi (phi - 2 alpha) d(psi)/d(phi)"""
    if not (phi > h and t > h and h > 0):
        raise DomainError(f"step h={h} must be positive and below phi={phi} and t={t}")
    dpsi_dt = (laplace_psi(phi, alpha, t + h) - laplace_psi(phi, alpha, t - h)) / (2.0 * h)
    dpsi_dphi = (laplace_psi(phi + h, alpha, t) - laplace_psi(phi - h, alpha, t)) / (2.0 * h)
    return dpsi_dt + 0.5 * phi * (phi - 2.0 * alpha) * dpsi_dphi


# Multi-type asymptotic laws on the pi-ray

def _ray(total: np.ndarray, pi) -> np.ndarray:
    weights = np.asarray(pi, dtype=float)
    if weights.ndim != 1 or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise DomainError("pi must be a probability vector")
    return total[:, None] * weights[None, :]


def critical_line_density(w_total, pi) -> Tuple[np.ndarray, np.ndarray]:
    """Critical d-type limit: mass on w_i = pi_i w with magnitude 2 exp(-2w)"""
    total = np.atleast_1d(_nonnegative_array(w_total, "w"))
    return _ray(total, pi), np.asarray(yaglom_critical(total))


def supercritical_line_density(z_total, alpha: float, pi, conditioned: bool = False) -> Tuple[np.ndarray, np.ndarray, float]:
    """Supercritical d-type limit on the pi-ray; returns (points, density, atom)"""
    total = np.atleast_1d(_nonnegative_array(z_total, "z"))
    density, atom = supercritical_stationary(total, alpha, conditioned)
    return _ray(total, pi), np.asarray(density), atom
