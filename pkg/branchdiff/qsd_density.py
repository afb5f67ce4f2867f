"""
Small-theta quasi-stationary density of the subcritical multi-type diffusion

Everything is computed at the reference scale alpha = -1/2 and carried to
other alpha by density_at_alpha. The density to first order in theta is a
sum of surface components on coordinate planes (x_i, x_j) and signed line
components on the axes; points with three or more positive coordinates
carry no density at this order.
"""

import logging
import math
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from .config import QuadratureConfig
from .errors import DomainError, ModelError
from .rates import ThetaP
from .specfun import EULER_GAMMA, exp_integral_e1, exp_integral_e2
from .workers import ordered_map

logger = logging.getLogger(__name__)

ARule = Literal["default", "split"]

DEFAULT_QUADRATURE = QuadratureConfig()
# log(1+phi)/phi switches to its series below this
LOG_RATIO_SERIES = 1e-6


def a_default(j: int, x_j, P: np.ndarray):
    """a_ij(x_j) = x_j (1 - P_jj), the same for every i"""
    return np.asarray(x_j, dtype=float) * (1.0 - P[j, j])


def a_split(i: int, j: int, x_j, P: np.ndarray):
    """a_ij(x_j) = x_j P_ji m_j with m_j the number of i != j reached from j"""
    reached = sum(1 for k in range(P.shape[0]) if k != j and P[j, k] > 0)
    return np.asarray(x_j, dtype=float) * P[j, i] * reached


def _log_ratio(phi: np.ndarray) -> np.ndarray:
    """log(1 + phi)/phi with its removable singularity at 0"""
    safe = np.where(phi > LOG_RATIO_SERIES, phi, 1.0)
    series = 1.0 - phi / 2.0 + phi * phi / 3.0
    return np.where(phi > LOG_RATIO_SERIES, np.log1p(safe) / safe, series)


def to_xu(x1, x2) -> Tuple[np.ndarray, np.ndarray]:
    """(x1, x2) -> (total x, fraction u = x1/x)"""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if np.any(x1 <= 0) or np.any(x2 <= 0):
        raise DomainError("to_xu needs positive coordinates")
    total = x1 + x2
    return total, x1 / total


class SmallThetaQsd:
    """First-order-in-theta QSD for a rate model given as (theta, P) at alpha = -1/2"""

    def __init__(self, theta_p: ThetaP, a_rule: ARule = "default"):
        if a_rule not in ("default", "split"):
            raise DomainError(f"unknown a-rule {a_rule!r}")
        absorbing = [j for j in range(theta_p.d) if theta_p.P[j, j] >= 1.0]
        if absorbing:
            raise ModelError(f"types {absorbing} have P_jj = 1; no a_ij satisfies the constraint")
        self.theta_p = theta_p
        self.theta = theta_p.theta
        self.P = theta_p.P
        self.pi = theta_p.pi
        self.d = theta_p.d
        self.a_rule = a_rule

    def with_theta(self, theta: float) -> "SmallThetaQsd":
        return SmallThetaQsd(self.theta_p.with_theta(theta), self.a_rule)

    # a_ij rules

    def a(self, i: int, j: int, x_j):
        if self.a_rule == "split":
            return a_split(i, j, x_j, self.P)
        return a_default(j, x_j, self.P)

    def a_constraint(self, j: int, x_j: float) -> float:
        """sum_{i != j} P_ji x_j / a_ij(x_j); equals 1 for an admissible rule"""
        total = 0.0
        for i in range(self.d):
            if i != j and self.P[j, i] > 0:
                total += self.P[j, i] * x_j / float(self.a(i, j, x_j))
        return total

    # Laplace transforms

    def _phi(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.d,):
            raise DomainError(f"phi must have {self.d} components")
        if np.any(phi < 0):
            raise DomainError("phi must be nonnegative")
        return phi

    def zeta0(self, phi) -> float:
        """sum_i pi_i / (1 + phi_i)"""
        phi = self._phi(phi)
        return float(np.sum(self.pi / (1.0 + phi)))

    def zeta1(self, phi) -> float:
        """Coefficient of theta in the Laplace transform"""
        phi = self._phi(phi)
        inv = 1.0 / (1.0 + phi)
        # element [j, i] pairs pi_j P_ji with the phi_i factors
        diff = inv[:, None] - inv[None, :]
        weights = self.pi[:, None] * self.P
        factor = ((1.0 + phi) * _log_ratio(phi))[None, :]
        return float(-np.sum(weights * diff * diff * factor))

    def zeta(self, phi, theta: Optional[float] = None) -> float:
        theta = self.theta if theta is None else theta
        return self.zeta0(phi) + theta * self.zeta1(phi)

    def pde_residual(self, phi, h: float = 1e-4, theta: Optional[float] = None,
                     first_order: bool = True) -> float:
        """Left side of the alpha = -1/2 Laplace-transform equation at zeta0 (+ theta zeta1)"""
        phi = self._phi(phi)
        theta = self.theta if theta is None else theta
        if not 0 < h < float(np.min(phi)):
            raise DomainError(f"step h={h} must be positive and below min(phi)={np.min(phi)}")

        def transform(p):
            return self.zeta0(p) + (theta * self.zeta1(p) if first_order else 0.0)

        gradient = np.empty(self.d)
        for i in range(self.d):
            step = np.zeros(self.d)
            step[i] = h
            gradient[i] = (transform(phi + step) - transform(phi - step)) / (2.0 * h)
        drift = -phi * (1.0 + phi) + theta * ((self.P - np.eye(self.d)) @ phi)
        return float(drift @ gradient - (1.0 - transform(phi)))

    # Density components

    def g0_line(self, i: int, x_i):
        """theta -> 0 line density pi_i exp(-x_i)"""
        x = np.asarray(x_i, dtype=float)
        return self.pi[i] * np.exp(-x)

    def _half_surface(self, i: int, j: int, x_i, x_j):
        weight = self.theta * self.pi[j] * self.P[j, i]
        if weight == 0.0:
            return np.zeros(np.broadcast(x_i, x_j).shape)
        exponent = self.a(i, j, x_j) * self.theta - 1.0
        return weight * (x_j * np.exp(-x_j) * np.power(x_i, exponent) * exp_integral_e2(x_i)
                         + 2.0 * np.exp(-x_j) * exp_integral_e1(x_i))

    def g_surface(self, i: int, j: int, x_i, x_j):
        """Surface density on the (x_i, x_j) plane, symmetric under (i, x_i) <-> (j, x_j)"""
        if i == j:
            raise DomainError("surface density needs two distinct types")
        x_i = np.asarray(x_i, dtype=float)
        x_j = np.asarray(x_j, dtype=float)
        if np.any(x_i <= 0) or np.any(x_j <= 0):
            raise DomainError("surface density needs positive coordinates")
        value = self._half_surface(i, j, x_i, x_j) + self._half_surface(j, i, x_j, x_i)
        return float(value) if value.ndim == 0 else value

    def g_line(self, i: int, x_i):
        """Signed first-order line density along the x_i axis"""
        x = np.asarray(x_i, dtype=float)
        if np.any(x <= 0):
            raise DomainError("line density needs x > 0")
        bracket = exp_integral_e1(x) + (EULER_GAMMA * (1.0 - x) + np.log(x)) * np.exp(-x)
        value = -self.theta * self.pi[i] * (1.0 - self.P[i, i]) * bracket
        return float(value) if np.ndim(value) == 0 else value

    def density_eval(self, x) -> float:
        """Density at a point with at most two positive coordinates"""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise DomainError(f"point must have {self.d} coordinates")
        if np.any(x < 0):
            raise DomainError("coordinates must be nonnegative")
        positive = np.flatnonzero(x > 0)
        if len(positive) == 1:
            return self.g_line(int(positive[0]), x[positive[0]])
        if len(positive) == 2:
            i, j = int(positive[0]), int(positive[1])
            return self.g_surface(i, j, x[i], x[j])
        return 0.0

    def g_surface_xu(self, x, u, i: int = 0, j: int = 1):
        """Surface density in (total, fraction) coordinates: x g_surface(xu, x(1-u))"""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if np.any(x <= 0) or np.any(u <= 0) or np.any(u >= 1):
            raise DomainError("need x > 0 and 0 < u < 1")
        return x * self.g_surface(i, j, x * u, x * (1.0 - u))

    # Scale map

    def density_at_alpha(self, x, alpha: float) -> float:
        """Density at alpha < 0 with this model's theta taken at that alpha"""
        if not alpha < 0:
            raise DomainError(f"quasi-stationary density needs alpha < 0, got {alpha}")
        factor = 2.0 * abs(alpha)
        reference = self if factor == 1.0 else self.with_theta(self.theta / factor)
        x = np.asarray(x, dtype=float)
        k = int(np.count_nonzero(x > 0))
        return factor ** k * reference.density_eval(factor * x)

    def surface_xu_at_alpha(self, x, u, alpha: float, i: int = 0, j: int = 1):
        """g_surface_xu carried to alpha; the total-size coordinate scales, u does not"""
        factor = 2.0 * abs(alpha)
        reference = self if factor == 1.0 else self.with_theta(self.theta / factor)
        return factor * reference.g_surface_xu(factor * np.asarray(x, dtype=float), u, i, j)

    def line_at_alpha(self, i: int, x, alpha: float):
        factor = 2.0 * abs(alpha)
        reference = self if factor == 1.0 else self.with_theta(self.theta / factor)
        return factor * np.asarray(reference.g_line(i, factor * np.asarray(x, dtype=float)))

    # Grids

    def surface_grid(self, x_grid, u_grid, alpha: float = -0.5, i: int = 0, j: int = 1,
                     parallel: bool = True) -> np.ndarray:
        """Rows (x, u, density) of the XU surface density"""
        u_grid = np.asarray(u_grid, dtype=float)

        def row(x: float) -> np.ndarray:
            values = self.surface_xu_at_alpha(np.full_like(u_grid, x), u_grid, alpha, i, j)
            return np.column_stack([np.full_like(u_grid, x), u_grid, values])

        return np.vstack(ordered_map(row, list(np.asarray(x_grid, dtype=float)), parallel))

    def surface_grid_x1x2(self, x1_grid, x2_grid, alpha: float = -0.5, i: int = 0, j: int = 1,
                          parallel: bool = True) -> np.ndarray:
        """Rows (x_i, x_j, density) of the surface density on the (i, j) plane"""
        x2_grid = np.asarray(x2_grid, dtype=float)
        factor = 2.0 * abs(alpha)
        reference = self if factor == 1.0 else self.with_theta(self.theta / factor)

        def row(x1: float) -> np.ndarray:
            values = factor ** 2 * reference.g_surface(i, j, np.full_like(x2_grid, factor * x1), factor * x2_grid)
            return np.column_stack([np.full_like(x2_grid, x1), x2_grid, values])

        return np.vstack(ordered_map(row, list(np.asarray(x1_grid, dtype=float)), parallel))

    def line_grid(self, x_grid, alpha: float = -0.5) -> np.ndarray:
        """Rows (type, x, density) of every line component"""
        x_grid = np.asarray(x_grid, dtype=float)
        blocks = [np.column_stack([np.full_like(x_grid, i), x_grid, self.line_at_alpha(i, x_grid, alpha)])
                  for i in range(self.d)]
        return np.vstack(blocks)

    # Quadrature oracles

    def _cutoff(self, quad: QuadratureConfig, order: int = 0) -> float:
        x_cut = -math.log(quad.tail_tol)
        while x_cut ** order * math.exp(-x_cut) > quad.tail_tol:
            x_cut *= 1.5
        return x_cut

    def _quad(self, f: Callable[[float], float], a: float, b: float, quad: QuadratureConfig) -> float:
        value, _ = integrate.quad(f, a, b, epsabs=quad.epsabs, epsrel=quad.epsrel, limit=quad.limit)
        return value

    def _singular_inner(self, f: Callable[[float], float], c: float, x_cut: float, quad: QuadratureConfig) -> float:
        """integral over (0, x_cut) of x^(c-1) f(x), with y = x^c on (0, split]"""
        eps = quad.split
        inner = self._quad(lambda y: f(y ** (1.0 / c)), 0.0, eps ** c, quad) / c
        outer = self._quad(lambda x: x ** (c - 1.0) * f(x), eps, x_cut, quad)
        return inner + outer

    def _surface_expectation(self, i: int, j: int, h: Callable[[float, float], float],
                             quad: QuadratureConfig, order: int) -> float:
        """integral of h(x_i, x_j) g_surface over the (i, j) plane"""
        x_cut = self._cutoff(quad, order)
        eps = quad.split
        total = 0.0
        for s, r in ((i, j), (j, i)):
            # half with the x_s^(a theta - 1) factor, outer variable x_r
            weight = self.theta * self.pi[r] * self.P[r, s]
            if weight == 0.0:
                continue

            def pair(xs: float, xr: float) -> float:
                return h(xs, xr) if s == i else h(xr, xs)

            def outer(xr: float) -> float:
                c = float(self.a(s, r, xr)) * self.theta
                singular = self._singular_inner(lambda xs: float(exp_integral_e2(xs)) * pair(xs, xr), c, x_cut, quad)
                regular = (self._quad(lambda xs: float(exp_integral_e1(xs)) * pair(xs, xr), 0.0, eps, quad)
                           + self._quad(lambda xs: float(exp_integral_e1(xs)) * pair(xs, xr), eps, x_cut, quad))
                return xr * math.exp(-xr) * singular + 2.0 * math.exp(-xr) * regular

            total += weight * (self._quad(outer, 0.0, eps, quad) + self._quad(outer, eps, x_cut, quad))
        return total

    def _line_expectation(self, i: int, h: Callable[[float], float], quad: QuadratureConfig, order: int) -> float:
        x_cut = self._cutoff(quad, order)
        eps = quad.split

        def integrand(x: float) -> float:
            return self.g_line(i, x) * h(x)

        return self._quad(integrand, 0.0, eps, quad) + self._quad(integrand, eps, x_cut, quad)

    def expectation(self, h: Callable[[np.ndarray], float], order: int = 0,
                    quad: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
        """Integral of h(x) against every line and surface component

        order bounds the polynomial growth of h for the tail cutoff.
        """
        total = 0.0
        for i in range(self.d):
            def on_line(x: float, i=i) -> float:
                point = np.zeros(self.d)
                point[i] = x
                return h(point)

            total += self._line_expectation(i, on_line, quad, order)
        for i in range(self.d):
            for j in range(i + 1, self.d):
                def on_surface(xi: float, xj: float, i=i, j=j) -> float:
                    point = np.zeros(self.d)
                    point[i], point[j] = xi, xj
                    return h(point)

                total += self._surface_expectation(i, j, on_surface, quad, order)
        return total

    def line_mass(self, i: int, quad: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
        return self._line_expectation(i, lambda x: 1.0, quad, 0)

    def surface_mass(self, i: int, j: int, quad: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
        return self._surface_expectation(i, j, lambda xi, xj: 1.0, quad, 0)

    def total_mass(self, quad: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
        total = sum(self.line_mass(i, quad) for i in range(self.d))
        total += sum(self.surface_mass(i, j, quad) for i in range(self.d) for j in range(i + 1, self.d))
        logger.debug(f"Total mass of the first-order density at theta={self.theta}: {total:.10g}")
        return total

    def moment_by_quadrature(self, exponents: Sequence[int], quad: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
        """E[prod_r X_r^n_r] by integrating the density"""
        exponents = np.asarray(exponents, dtype=int)
        return self.expectation(lambda x: float(np.prod(x ** exponents)), int(exponents.sum()), quad)

    def u_moment_by_quadrature(self, exponents: Sequence[int], quad: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
        """E[prod_r U_r^n_r] with U = X / sum(X)"""
        exponents = np.asarray(exponents, dtype=int)
        return self.expectation(lambda x: float(np.prod((x / x.sum()) ** exponents)), 0, quad)

    def laplace_by_quadrature(self, phi, quad: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
        phi = self._phi(phi)
        return self.expectation(lambda x: math.exp(-float(phi @ x)), 0, quad)


def g_surface_xu(qsd: SmallThetaQsd, x, u, i: int = 0, j: int = 1):
    return qsd.g_surface_xu(x, u, i, j)


def rescale_alpha(qsd: SmallThetaQsd, x, target_alpha: float) -> float:
    """g at target_alpha from the alpha = -1/2 formulas"""
    return qsd.density_at_alpha(x, target_alpha)


def surface_pairs(d: int) -> List[Tuple[int, int]]:
    return [(i, j) for i in range(d) for j in range(i + 1, d)]
