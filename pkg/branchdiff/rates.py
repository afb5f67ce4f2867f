"""
Scaled mutation-rate model

RateMatrix holds the generator gamma, ThetaP its (theta, P) form with
gamma = theta/2 (P - I). Stationary vector, reversibility checks and the
symmetrised spectral decomposition used by the moment formulas live here.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ModelError, NumericalError

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12
REVERSIBILITY_TOL = 1e-10
PIM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class RateMatrix:
    """Scaled instantaneous mutation rates gamma_ij per unit diffusion time"""
    gamma: np.ndarray
    irreducible: bool = field(init=False)

    def __post_init__(self):
        gamma = np.array(self.gamma, dtype=float)
        if gamma.ndim != 2 or gamma.shape[0] != gamma.shape[1]:
            raise ModelError(f"gamma must be square, got shape {gamma.shape}")
        off = gamma[~np.eye(gamma.shape[0], dtype=bool)]
        if np.any(off < 0):
            raise ModelError("off-diagonal rates must be nonnegative")
        scale = max(1.0, float(np.max(np.abs(gamma), initial=0.0)))
        row_sums = gamma.sum(axis=1)
        if np.max(np.abs(row_sums), initial=0.0) > ROW_SUM_TOL * scale:
            raise ModelError(f"rows of gamma must sum to zero, got {row_sums}")
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "irreducible", _is_irreducible(gamma))

    @property
    def d(self) -> int:
        return self.gamma.shape[0]

    @cached_property
    def pi(self) -> np.ndarray:
        return stationary_pi(self)

    def is_pim(self) -> bool:
        """Off-diagonal entries of every column coincide"""
        d = self.d
        scale = max(1.0, float(np.max(np.abs(self.gamma), initial=0.0)))
        for j in range(d):
            column = np.delete(self.gamma[:, j], j)
            if column.size and np.ptp(column) > PIM_TOL * scale:
                return False
        return True

    def canonical_theta(self) -> float:
        """theta/2 = sum_j gamma_j for PIM, otherwise the floor 2 max(-gamma_ii)"""
        if self.is_pim() and self.d > 1:
            per_column = [np.delete(self.gamma[:, j], j)[0] for j in range(self.d)]
            return 2.0 * float(np.sum(per_column))
        return 2.0 * float(np.max(-np.diag(self.gamma)))

    def to_theta_p(self, theta: Optional[float] = None) -> "ThetaP":
        return to_theta_p(self, theta)

    def is_reversible(self) -> bool:
        return is_reversible(self)

    def spectral(self) -> "SpectralData":
        return spectral_decompose(self)


@dataclass(frozen=True, eq=False)
class ThetaP:
    """Overall rate theta and stochastic kernel P"""
    theta: float
    P: np.ndarray

    def __post_init__(self):
        if not self.theta > 0:
            raise ModelError(f"theta must be positive, got {self.theta}")
        P = np.array(self.P, dtype=float)
        validate_stochastic(P)
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "theta", float(self.theta))

    @property
    def d(self) -> int:
        return self.P.shape[0]

    @cached_property
    def rates(self) -> RateMatrix:
        return from_theta_p(self.theta, self.P)

    @property
    def pi(self) -> np.ndarray:
        return self.rates.pi

    def rate_matrix(self) -> RateMatrix:
        return self.rates

    def with_theta(self, theta: float) -> "ThetaP":
        return ThetaP(theta, self.P)


@dataclass(frozen=True, eq=False)
class SpectralData:
    """Eigenvalues nu (nu[0] = 0, descending) and right eigenvectors u[:, l]

    Normalised so that sum_i pi_i u_i^(k) u_i^(l) = delta_kl.
    """
    nu: np.ndarray
    u: np.ndarray
    pi: np.ndarray

    def reconstruct(self) -> np.ndarray:
        """gamma_ij = pi_j sum_l nu_l u_i^(l) u_j^(l)"""
        return (self.u * self.nu[None, :]) @ self.u.T * self.pi[None, :]

    def orthonormality_error(self) -> float:
        gram = self.u.T @ (self.pi[:, None] * self.u)
        return float(np.max(np.abs(gram - np.eye(len(self.nu)))))


def validate_stochastic(P: np.ndarray) -> None:
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ModelError(f"P must be square, got shape {P.shape}")
    if np.any(P < 0):
        raise ModelError("P has a negative entry")
    row_sums = P.sum(axis=1)
    if np.max(np.abs(row_sums - 1.0)) > ROW_SUM_TOL:
        raise ModelError(f"rows of P must sum to 1, got {row_sums}")


def _is_irreducible(gamma: np.ndarray) -> bool:
    if gamma.shape[0] == 1:
        return True
    pattern = csr_matrix((gamma > 0) & ~np.eye(gamma.shape[0], dtype=bool))
    n_components, _ = connected_components(pattern, directed=True, connection="strong")
    return n_components == 1


def from_theta_p(theta: float, P) -> RateMatrix:
    """gamma = theta/2 (P - I)"""
    P = np.asarray(P, dtype=float)
    validate_stochastic(P)
    if not theta > 0:
        raise ModelError(f"theta must be positive, got {theta}")
    return RateMatrix(0.5 * theta * (P - np.eye(P.shape[0])))


def to_theta_p(rates: RateMatrix, theta: Optional[float] = None) -> ThetaP:
    """Recover (theta, P); without theta use the canonical choice"""
    floor = 2.0 * float(np.max(-np.diag(rates.gamma)))
    if theta is None:
        theta = rates.canonical_theta()
    if not theta > 0:
        raise ModelError("zero rate matrix has no (theta, P) form")
    if theta < floor * (1.0 - 1e-12):
        raise ModelError(f"theta={theta} is below the floor {floor} = 2 max(-gamma_ii)")
    P = np.eye(rates.d) + 2.0 * rates.gamma / theta
    # clear rounding noise on the diagonal at the floor
    P[(P < 0) & (P > -1e-12)] = 0.0
    return ThetaP(theta, P)


def stationary_pi(rates: RateMatrix) -> np.ndarray:
    """Left null vector of gamma normalised to sum 1"""
    if not rates.irreducible:
        raise ModelError("gamma is reducible; its stationary vector is not unique")
    d = rates.d
    A = rates.gamma.T.copy()
    A[-1, :] = 1.0
    b = np.zeros(d)
    b[-1] = 1.0
    try:
        pi = linalg.solve(A, b)
    except linalg.LinAlgError as e:
        raise NumericalError(f"bordered stationary system is singular: {e}")
    if np.any(pi <= 0):
        raise NumericalError(f"stationary vector has nonpositive entries: {pi}")
    logger.debug(f"Stationary vector {pi} (residual {np.max(np.abs(pi @ rates.gamma)):.2e})")
    return pi


def is_reversible(rates: RateMatrix, pi: Optional[np.ndarray] = None) -> bool:
    """Detailed balance pi_i gamma_ij = pi_j gamma_ji"""
    pi = rates.pi if pi is None else np.asarray(pi, dtype=float)
    flux = pi[:, None] * rates.gamma
    return bool(np.max(np.abs(flux - flux.T)) <= REVERSIBILITY_TOL)


def spectral_decompose(rates: RateMatrix) -> SpectralData:
    """Eigen-decomposition through the symmetric D^1/2 gamma D^-1/2"""
    pi = rates.pi
    if not is_reversible(rates, pi):
        raise ModelError("spectral decomposition needs a reversible rate matrix")
    root = np.sqrt(pi)
    S = root[:, None] * rates.gamma / root[None, :]
    S = 0.5 * (S + S.T)
    nu, V = linalg.eigh(S)
    order = np.argsort(nu)[::-1]
    nu, V = nu[order], V[:, order]
    u = V / root[:, None]
    # u^(0) is the constant vector; other signs fixed by the largest component
    for k in range(u.shape[1]):
        pivot = u[np.argmax(np.abs(u[:, k])), k] if k else u[0, 0]
        if pivot < 0:
            u[:, k] = -u[:, k]
    nu[0] = 0.0
    return SpectralData(nu=nu, u=u, pi=pi)


def pim(theta: float, pi) -> RateMatrix:
    """Parent-independent mutation: gamma_ij = theta/2 (pi_j - delta_ij)"""
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 1 or np.any(pi <= 0) or abs(pi.sum() - 1.0) > ROW_SUM_TOL:
        raise ModelError(f"pi must be a positive probability vector, got {pi}")
    if not theta > 0:
        raise ModelError(f"theta must be positive, got {theta}")
    d = len(pi)
    return RateMatrix(0.5 * theta * (np.tile(pi, (d, 1)) - np.eye(d)))


def random_reversible(d: int, rng: np.random.Generator, scale: float = 0.1) -> RateMatrix:
    """Reversible gamma from a random pi and a random symmetric flux matrix"""
    if d < 2:
        raise ModelError(f"need at least two types, got d={d}")
    pi = rng.dirichlet(np.full(d, 2.0))
    flux = rng.uniform(0.1, 1.0, size=(d, d))
    flux = 0.5 * (flux + flux.T)
    np.fill_diagonal(flux, 0.0)
    gamma = scale * flux / pi[:, None]
    np.fill_diagonal(gamma, -gamma.sum(axis=1))
    return RateMatrix(gamma)
