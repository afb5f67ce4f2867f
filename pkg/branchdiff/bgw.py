"""
Discrete multi-type Bienayme-Galton-Watson oracle

States are (m, i): m = 1..m_max individuals, i of them type 1, flattened as
m(m+1)/2 - 1 + i. The one-type model keeps only m. The quasi-stationary
distribution is the principal left eigenvector of the transition matrix
restricted to m, n >= 1; Poisson offspring are applied matrix-free through
Poisson thinning. Monte Carlo replicates run in fixed-size blocks, each with
its own Philox substream keyed by (seed, block).
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import lru_cache, partial
from typing import List, Literal, Optional, Tuple

import numpy as np
from scipy import linalg, stats
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigs

from .config import PowerIterationConfig
from .errors import ConvergenceError, DomainError, ModelError, NumericalError
from .rates import ThetaP, validate_stochastic
from .workers import ordered_map

logger = logging.getLogger(__name__)

Solver = Literal["power", "arnoldi", "dense"]

DEFAULT_POWER = PowerIterationConfig()
DENSE_STATE_LIMIT = 3000
ARNOLDI_MIN_STATES = 20
JITTER_KEY = 2 ** 31


# Offspring laws

class OffspringLaw(ABC):
    """Law of the number of offspring of one parent"""

    @property
    @abstractmethod
    def mean(self) -> float:
        ...

    @property
    @abstractmethod
    def variance(self) -> float:
        ...

    @abstractmethod
    def total_pmf(self, m: int, n_max: int) -> np.ndarray:
        """P(m parents have n children) for n = 0..n_max"""

    @abstractmethod
    def sample_total(self, rng: np.random.Generator, parents: np.ndarray) -> np.ndarray:
        """Total offspring of each entry's parents"""


@dataclass(frozen=True)
class PoissonOffspring(OffspringLaw):
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ModelError(f"offspring mean must be positive, got {self.lam}")

    @property
    def mean(self) -> float:
        return self.lam

    @property
    def variance(self) -> float:
        return self.lam

    def total_pmf(self, m: int, n_max: int) -> np.ndarray:
        return stats.poisson.pmf(np.arange(n_max + 1), self.lam * m)

    def sample_total(self, rng: np.random.Generator, parents: np.ndarray) -> np.ndarray:
        return rng.poisson(self.lam * parents)


@dataclass(frozen=True, eq=False)
class ConvolutionOffspring(OffspringLaw):
    """Any finitely supported per-parent law; totals by repeated convolution"""
    pmf: np.ndarray

    def __post_init__(self):
        pmf = np.asarray(self.pmf, dtype=float)
        if pmf.ndim != 1 or np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-12:
            raise ModelError("offspring pmf must be a probability vector")
        object.__setattr__(self, "pmf", pmf)

    @property
    def mean(self) -> float:
        return float(np.arange(len(self.pmf)) @ self.pmf)

    @property
    def variance(self) -> float:
        k = np.arange(len(self.pmf))
        return float((k * k) @ self.pmf - self.mean ** 2)

    def total_pmf(self, m: int, n_max: int) -> np.ndarray:
        total = np.zeros(n_max + 1)
        total[0] = 1.0
        for _ in range(m):
            total = np.convolve(total, self.pmf)[: n_max + 1]
        return total

    def sample_total(self, rng: np.random.Generator, parents: np.ndarray) -> np.ndarray:
        support = np.arange(len(self.pmf))
        return np.array([rng.choice(support, size=int(p), p=self.pmf).sum() for p in parents], dtype=np.int64)


# Model

@dataclass(frozen=True, eq=False)
class DiscreteModel:
    """Offspring law, per-generation mutation probabilities r and truncation m_max"""
    lam: float
    r: np.ndarray
    m_max: int
    sigma2: Optional[float] = None
    offspring: Optional[OffspringLaw] = None

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        validate_stochastic(r)
        if r.shape[0] > 2:
            raise ModelError("the discrete oracle handles one or two types")
        if self.m_max < 2:
            raise ModelError(f"m_max must be at least 2, got {self.m_max}")
        offspring = self.offspring or PoissonOffspring(self.lam)
        if abs(offspring.mean - self.lam) > 1e-12:
            raise ModelError(f"offspring mean {offspring.mean} does not match lambda {self.lam}")
        sigma2 = offspring.variance if self.sigma2 is None else float(self.sigma2)
        if isinstance(offspring, PoissonOffspring) and abs(sigma2 - self.lam) > 1e-12:
            raise ModelError(f"Poisson offspring have variance lambda={self.lam}, got sigma2={sigma2}")
        r.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "offspring", offspring)
        object.__setattr__(self, "sigma2", sigma2)

    @classmethod
    def one_type(cls, lam: float, m_max: int, offspring: Optional[OffspringLaw] = None) -> "DiscreteModel":
        return cls(lam=lam, r=np.ones((1, 1)), m_max=m_max, offspring=offspring)

    @classmethod
    def two_type(cls, lam: float, r12: float, r21: float, m_max: int,
                 offspring: Optional[OffspringLaw] = None) -> "DiscreteModel":
        r = np.array([[1.0 - r12, r12], [r21, 1.0 - r21]])
        return cls(lam=lam, r=r, m_max=m_max, offspring=offspring)

    @property
    def d(self) -> int:
        return self.r.shape[0]

    @property
    def r12(self) -> float:
        return float(self.r[0, 1]) if self.d == 2 else 0.0

    @property
    def r21(self) -> float:
        return float(self.r[1, 0]) if self.d == 2 else 0.0

    @property
    def n_states(self) -> int:
        M = self.m_max
        return M if self.d == 1 else M * (M + 3) // 2

    def alpha_for(self, y0: float) -> float:
        """Continuum growth parameter Y(0) log(lambda) / sigma2"""
        return y0 * math.log(self.lam) / self.sigma2

    def state_index(self, m: int, i: int = 0) -> int:
        if not 1 <= m <= self.m_max:
            raise DomainError(f"m={m} outside 1..{self.m_max}")
        if self.d == 1:
            return m - 1
        if not 0 <= i <= m:
            raise DomainError(f"i={i} outside 0..{m}")
        return m * (m + 1) // 2 - 1 + i

    @property
    def states(self) -> Tuple[np.ndarray, np.ndarray]:
        """(m, i) of every flattened state"""
        return _state_arrays(self.m_max, self.d)


@lru_cache(maxsize=16)
def _state_arrays(m_max: int, d: int) -> Tuple[np.ndarray, np.ndarray]:
    if d == 1:
        m = np.arange(1, m_max + 1)
        return m, np.zeros_like(m)
    m = np.concatenate([np.full(k + 1, k) for k in range(1, m_max + 1)])
    i = np.concatenate([np.arange(k + 1) for k in range(1, m_max + 1)])
    return m, i


def offspring_pmf(model: DiscreteModel, m: int, n: int) -> float:
    """P(m parents produce n children); m = 0 is a point mass at n = 0"""
    if m < 0 or n < 0:
        raise DomainError(f"counts must be nonnegative, got m={m}, n={n}")
    if m == 0:
        return 1.0 if n == 0 else 0.0
    return float(model.offspring.total_pmf(m, n)[n])


def chi(model: DiscreteModel, i, m):
    """Probability that a child is type 1 when i of m parents are type 1"""
    i = np.asarray(i, dtype=float)
    m = np.asarray(m, dtype=float)
    if np.any(m <= 0):
        raise DomainError("chi needs m > 0")
    frac = i / m
    value = frac * (1.0 - model.r12) + (1.0 - frac) * model.r21
    return float(value) if value.ndim == 0 else value


def transition(model: DiscreteModel, m: int, i: int, n: int, j: int) -> float:
    """P((m, i) -> (n, j)): offspring count then binomial type assignment"""
    if m == 0:
        return 1.0 if (n == 0 and j == 0) else 0.0
    if not 0 <= j <= n:
        return 0.0
    p_total = offspring_pmf(model, m, n)
    if model.d == 1:
        return p_total
    return p_total * float(stats.binom.pmf(j, n, chi(model, i, m)))


# Truncated transition operator

class TransitionOperator:
    """Left application v -> v P~ on the truncated state space"""

    def __init__(self, model: DiscreteModel):
        self.model = model
        M = model.m_max
        m, i = model.states
        self.m = m
        self.poisson = isinstance(model.offspring, PoissonOffspring)
        if self.poisson and model.d == 2:
            chis = chi(model, i, m)
            mean = model.lam * m
            counts = np.arange(M + 1)[None, :]
            self.type1 = stats.poisson.pmf(counts, (mean * chis)[:, None])
            self.type2 = stats.poisson.pmf(counts, (mean * (1.0 - chis))[:, None])
            j_idx, k_idx = np.meshgrid(np.arange(M + 1), np.arange(M + 1), indexing="ij")
            keep = (j_idx + k_idx >= 1) & (j_idx + k_idx <= M)
            self.j_idx, self.k_idx = j_idx[keep], k_idx[keep]
            n = self.j_idx + self.k_idx
            self.target = n * (n + 1) // 2 - 1 + self.j_idx
        elif self.poisson:
            self.kernel = stats.poisson.pmf(np.arange(M + 1)[None, :], (model.lam * m)[:, None])[:, 1:]
        else:
            self.kernel = dense_transition_matrix(model)
        if self.poisson:
            self.extinction = np.exp(-model.lam * m)
        else:
            self.extinction = np.array([model.offspring.total_pmf(int(k), 0)[0] for k in m])
        self.kept = self._kept_mass()

    def _kept_mass(self) -> np.ndarray:
        if self.poisson:
            return stats.poisson.cdf(self.model.m_max, self.model.lam * self.m) - np.exp(-self.model.lam * self.m)
        return self.kernel.sum(axis=1)

    def apply_left(self, v: np.ndarray) -> np.ndarray:
        if self.poisson and self.model.d == 2:
            joint = (v[:, None] * self.type1).T @ self.type2
            out = np.zeros(self.model.n_states)
            out[self.target] = joint[self.j_idx, self.k_idx]
            return out
        return v @ self.kernel

    def as_linear_operator(self) -> LinearOperator:
        """Right action of P~ transpose, for eigs"""
        n = self.model.n_states
        return LinearOperator((n, n), matvec=lambda x: self.apply_left(np.real(np.ravel(x))), dtype=float)


@lru_cache(maxsize=8)
def transition_operator(model: DiscreteModel) -> TransitionOperator:
    logger.debug(f"Building transition operator for {model.n_states} states")
    return TransitionOperator(model)


def apply_left(model: DiscreteModel, v: np.ndarray) -> np.ndarray:
    """v P~ without forming P~"""
    v = np.asarray(v, dtype=float)
    if v.shape != (model.n_states,):
        raise DomainError(f"vector must have {model.n_states} entries")
    return transition_operator(model).apply_left(v)


def dense_transition_matrix(model: DiscreteModel) -> np.ndarray:
    """Full truncated P~ (rows and columns for m, n >= 1)"""
    S = model.n_states
    if S > DENSE_STATE_LIMIT:
        raise DomainError(f"{S} states is too many for a dense matrix (limit {DENSE_STATE_LIMIT})")
    M = model.m_max
    m_arr, i_arr = model.states
    matrix = np.zeros((S, S))
    for row, (m, i) in enumerate(zip(m_arr, i_arr)):
        totals = model.offspring.total_pmf(int(m), M)
        if model.d == 1:
            matrix[row, :] = totals[1:]
            continue
        c = chi(model, i, m)
        for n in range(1, M + 1):
            start = n * (n + 1) // 2 - 1
            matrix[row, start:start + n + 1] = totals[n] * stats.binom.pmf(np.arange(n + 1), n, c)
    return matrix


# Quasi-stationary eigenvector

@dataclass
class QsdVector:
    """Normalised principal left eigenvector of P~ with its loss decomposition"""
    model: DiscreteModel
    probabilities: np.ndarray
    rho: float
    extinction: float
    leak: float
    residual: float
    iterations: int
    solver: str

    @property
    def Pi(self) -> float:
        """Total one-step loss 1 - rho (extinction plus truncation leak)"""
        return 1.0 - self.rho

    def marginal(self) -> np.ndarray:
        """Probability of each total size m = 1..m_max"""
        if self.model.d == 1:
            return self.probabilities.copy()
        starts = np.array([m * (m + 1) // 2 - 1 for m in range(1, self.model.m_max + 1)])
        return np.add.reduceat(self.probabilities, starts)

    def as_matrix(self) -> np.ndarray:
        """G[m, i] for the two-type model, zero outside 0 <= i <= m"""
        M = self.model.m_max
        grid = np.zeros((M + 1, M + 1))
        m, i = self.model.states
        grid[m, i] = self.probabilities
        return grid

    def boundary_mass(self) -> float:
        return float(self.marginal()[-1])

    def summary(self) -> dict:
        return {
            "rho": self.rho,
            "Pi": self.Pi,
            "extinction": self.extinction,
            "leak": self.leak,
            "residual": self.residual,
            "iterations": self.iterations,
            "solver": self.solver,
            "boundary_mass": self.boundary_mass(),
            "n_states": self.model.n_states,
        }


def _finish(model: DiscreteModel, v: np.ndarray, iterations: int, solver: str,
            config: PowerIterationConfig) -> QsdVector:
    op = transition_operator(model)
    w = op.apply_left(v)
    rho = float(w.sum())
    residual = float(np.abs(w - rho * v).sum())
    extinction = float(v @ op.extinction)
    leak = float(v @ (1.0 - op.extinction - op.kept))
    result = QsdVector(model, v, rho, extinction, leak, residual, iterations, solver)
    boundary = result.boundary_mass()
    if boundary >= config.boundary_warn:
        logger.warning(f"QSD mass {boundary:.3g} at the truncation boundary m={model.m_max}; increase m_max")
    logger.info(f"QSD by {solver}: rho={rho:.12g}, extinction={extinction:.6g}, leak={leak:.3g}, "
                f"residual={residual:.3g} after {iterations} iterations")
    return result


def _power(model: DiscreteModel, v: np.ndarray, config: PowerIterationConfig,
           max_iter: int, raise_on_cap: bool = True) -> Tuple[np.ndarray, int, float]:
    op = transition_operator(model)
    delta = math.inf
    for k in range(1, max_iter + 1):
        w = op.apply_left(v)
        total = w.sum()
        if not total > 0:
            raise NumericalError("power iteration lost all mass")
        w /= total
        delta = float(np.abs(w - v).sum())
        v = w
        if k % config.log_every == 0:
            logger.debug(f"Power iteration {k}: change {delta:.3e}")
        if delta <= config.tol:
            return v, k, delta
    if raise_on_cap:
        raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations "
                               f"(last change {delta:.3e})", iterations=max_iter, residual=delta)
    return v, max_iter, delta


def _start_vector(model: DiscreteModel, start, rng: Optional[np.random.Generator]) -> np.ndarray:
    n = model.n_states
    if start is None or (isinstance(start, str) and start == "uniform"):
        v = np.ones(n)
    elif isinstance(start, str) and start == "random":
        v = (rng or np.random.default_rng()).random(n) + 1e-3
    else:
        v = np.asarray(start, dtype=float).copy()
        if v.shape != (n,) or np.any(v < 0) or not v.sum() > 0:
            raise DomainError("start vector must be nonnegative with positive mass")
    return v / v.sum()


def _dense_eigenvector(model: DiscreteModel) -> np.ndarray:
    matrix = dense_transition_matrix(model)
    values, vectors = linalg.eig(matrix.T)
    k = int(np.argmax(values.real))
    v = np.real(vectors[:, k])
    return v


def _arnoldi_eigenvector(model: DiscreteModel, v0: np.ndarray, config: PowerIterationConfig) -> np.ndarray:
    op = transition_operator(model).as_linear_operator()
    n = model.n_states
    try:
        values, vectors = eigs(op, k=2, which="LM", v0=v0, ncv=min(n - 1, 40),
                               tol=config.tol, maxiter=config.max_iter)
    except ArpackNoConvergence as e:
        raise ConvergenceError(f"ARPACK did not converge: {e}", iterations=config.max_iter)
    k = int(np.argmax(values.real))
    logger.debug(f"ARPACK leading eigenvalues {values}")
    return np.real(vectors[:, k])


def _normalise_eigenvector(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.where(v < 0, 0.0, v)
    total = v.sum()
    if not total > 0:
        raise NumericalError("principal eigenvector has no positive mass")
    return v / total


def qsd_eigenvector(model: DiscreteModel, solver: Solver = "power",
                    config: PowerIterationConfig = DEFAULT_POWER,
                    start=None, rng: Optional[np.random.Generator] = None) -> QsdVector:
    """Quasi-stationary distribution of the truncated chain"""
    logger.info(f"Solving for the QSD of a {model.d}-type model: lambda={model.lam}, "
                f"m_max={model.m_max}, {model.n_states} states, solver={solver}")
    if solver == "arnoldi" and model.n_states < ARNOLDI_MIN_STATES:
        solver = "dense"
    if solver == "power":
        v, iterations, _ = _power(model, _start_vector(model, start, rng), config, config.max_iter)
        return _finish(model, v, iterations, "power", config)
    if solver == "dense":
        v = _normalise_eigenvector(_dense_eigenvector(model))
        return _finish(model, v, 0, "dense", config)
    if solver == "arnoldi":
        v = _normalise_eigenvector(_arnoldi_eigenvector(model, _start_vector(model, start, rng), config))
        v, iterations, delta = _power(model, v, config, max(config.polish_iter, 1), raise_on_cap=False)
        if delta > config.tol:
            logger.warning(f"Power polish stopped at change {delta:.3e} after {iterations} iterations")
        return _finish(model, v, iterations, "arnoldi", config)
    raise DomainError(f"unknown solver {solver!r}")


# Continuum rescaling

@dataclass
class ContinuumSamples:
    """Eigenvector QSD mapped onto the diffusion scale"""
    scale: float
    x: np.ndarray
    marginal: np.ndarray
    surface_x: np.ndarray = field(default_factory=lambda: np.empty(0))
    surface_u: np.ndarray = field(default_factory=lambda: np.empty(0))
    surface_density: np.ndarray = field(default_factory=lambda: np.empty(0))
    surface_i: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    surface_m: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))


def continuum_scale(model: DiscreteModel, alpha: float) -> float:
    """X = scale * Y with scale = log(lambda) / (alpha sigma2)"""
    if alpha == 0:
        raise DomainError("continuum rescaling needs alpha != 0")
    scale = math.log(model.lam) / (alpha * model.sigma2)
    if not scale > 0:
        raise DomainError(f"log(lambda) and alpha must share a sign (lambda={model.lam}, alpha={alpha})")
    return scale


def to_continuum(model: DiscreteModel, qsd: QsdVector, alpha: float = -0.5) -> ContinuumSamples:
    """Marginal density sum_i G(m, i) / scale and surface density m G(m, i) / scale"""
    scale = continuum_scale(model, alpha)
    m_values = np.arange(1, model.m_max + 1)
    samples = ContinuumSamples(scale=scale, x=scale * m_values, marginal=qsd.marginal() / scale)
    if model.d == 2:
        m, i = model.states
        samples.surface_m = m
        samples.surface_i = i
        samples.surface_x = scale * m
        samples.surface_u = i / m
        samples.surface_density = m * qsd.probabilities / scale
    return samples


def from_continuum(theta_p: ThetaP, lam: float, alpha: float, m_max: int) -> DiscreteModel:
    """Two-type model whose mutation probabilities match gamma: r_ij = theta/2 P_ij log(lambda)/alpha"""
    if theta_p.d != 2:
        raise ModelError("the discrete oracle handles two types")
    factor = 0.5 * theta_p.theta * math.log(lam) / alpha
    if not factor > 0:
        raise DomainError(f"log(lambda)/alpha must be positive (lambda={lam}, alpha={alpha})")
    r12 = factor * theta_p.P[0, 1]
    r21 = factor * theta_p.P[1, 0]
    if r12 + r21 > 1:
        raise ModelError(f"matched mutation probabilities exceed 1 (r12={r12}, r21={r21})")
    logger.debug(f"Matched mutation probabilities r12={r12:.6g}, r21={r21:.6g}")
    return DiscreteModel.two_type(lam, r12, r21, m_max)


def matched_to_alpha(alpha: float, y0: int, m_max: int = 2, r12: float = 0.0, r21: float = 0.0,
                     tol: float = 1e-15, max_iter: int = 200) -> DiscreteModel:
    """Poisson model (sigma2 = lambda) with log(lambda) = alpha lambda / y0"""
    if y0 < 1:
        raise DomainError(f"y0 must be positive, got {y0}")
    lam = 1.0
    for _ in range(max_iter):
        updated = math.exp(alpha * lam / y0)
        if abs(updated - lam) <= tol:
            lam = updated
            break
        lam = updated
    else:
        raise ConvergenceError(f"lambda fixed point did not converge for alpha={alpha}, y0={y0}", iterations=max_iter)
    if r12 or r21:
        return DiscreteModel.two_type(lam, r12, r21, m_max)
    return DiscreteModel.one_type(lam, m_max)


# Monte Carlo

@dataclass
class SimulationResult:
    """Per-replicate end states and per-generation survivor statistics"""
    model: DiscreteModel
    y0: int
    tau: int
    seed: int
    survived: np.ndarray
    total: np.ndarray
    type1: np.ndarray
    capped: np.ndarray
    extinct_at: np.ndarray
    alive_by_generation: np.ndarray
    size_by_generation: np.ndarray

    @property
    def n_reps(self) -> int:
        return len(self.survived)

    @property
    def n_capped(self) -> int:
        return int(self.capped.sum())

    def survival_fraction(self) -> float:
        return float(self.survived.mean())

    def mean_size_given_survival(self) -> np.ndarray:
        alive = self.alive_by_generation
        return np.divide(self.size_by_generation, alive, out=np.zeros_like(self.size_by_generation), where=alive > 0)


def _substream(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(key,))))


def _simulate_block(block: int, sizes: List[int], model: DiscreteModel, tau: int, y0: int,
                    y1_0: int, seed: int, cap: Optional[int]):
    size = sizes[block]
    rng = _substream(seed, block)
    total = np.full(size, y0, dtype=np.int64)
    type1 = np.full(size, y1_0, dtype=np.int64)
    capped = np.zeros(size, dtype=bool)
    extinct_at = np.full(size, -1, dtype=np.int64)
    alive_counts = np.zeros(tau + 1)
    size_sums = np.zeros(tau + 1)
    alive_counts[0] = size
    size_sums[0] = float(y0) * size
    active = np.arange(size)
    for generation in range(1, tau + 1):
        if active.size == 0:
            break
        parents = total[active]
        children = model.offspring.sample_total(rng, parents)
        if model.d == 2:
            frac = type1[active] / parents
            p1 = frac * (1.0 - model.r12) + (1.0 - frac) * model.r21
            type1[active] = rng.binomial(children, p1)
        else:
            type1[active] = children
        total[active] = children
        dead = children == 0
        extinct_at[active[dead]] = generation
        alive_counts[generation] = np.count_nonzero(~dead)
        size_sums[generation] = float(children.sum())
        keep = ~dead
        if cap is not None:
            over = children >= cap
            capped[active[over]] = True
            keep &= ~over
        active = active[keep]
    return total, type1, capped, extinct_at, alive_counts, size_sums


def simulate(model: DiscreteModel, tau: int, n_reps: int, seed: int, y0: int = 1,
             y1_0: Optional[int] = None, block_size: int = 10_000, cap_factor: float = 50.0,
             parallel: bool = True) -> SimulationResult:
    """Run n_reps independent replicates for tau generations

    Supercritical runs stop a replicate once it reaches cap_factor * y0 and
    count it as surviving; capped replicates are reported.
    """
    if tau < 1 or n_reps < 1 or y0 < 1 or block_size < 1:
        raise DomainError("tau, n_reps, y0 and block_size must be positive")
    y1_0 = y0 if y1_0 is None else y1_0
    if not 0 <= y1_0 <= y0:
        raise DomainError(f"initial type-1 count {y1_0} outside 0..{y0}")
    cap = int(math.ceil(cap_factor * y0)) if model.lam > 1 else None
    n_blocks = -(-n_reps // block_size)
    sizes = [block_size] * (n_blocks - 1) + [n_reps - block_size * (n_blocks - 1)]
    logger.info(f"Simulating {n_reps} replicates for {tau} generations in {n_blocks} blocks "
                f"(lambda={model.lam}, y0={y0}, seed={seed})")
    run = partial(_simulate_block, sizes=sizes, model=model, tau=tau, y0=y0, y1_0=y1_0, seed=seed, cap=cap)
    blocks = ordered_map(run, range(n_blocks), parallel)

    total = np.concatenate([b[0] for b in blocks])
    capped = np.concatenate([b[2] for b in blocks])
    result = SimulationResult(
        model=model, y0=y0, tau=tau, seed=seed,
        survived=total > 0,
        total=total,
        type1=np.concatenate([b[1] for b in blocks]),
        capped=capped,
        extinct_at=np.concatenate([b[3] for b in blocks]),
        alive_by_generation=np.sum([b[4] for b in blocks], axis=0),
        size_by_generation=np.sum([b[5] for b in blocks], axis=0),
    )
    if result.n_capped:
        logger.warning(f"{result.n_capped} of {n_reps} replicates hit the population cap {cap} and were stopped")
    logger.info(f"Simulation finished: survival fraction {result.survival_fraction():.6g}")
    return result


@dataclass
class KsResult:
    statistic: float
    pvalue: float
    n: int


def yaglom_ks(result: SimulationResult, sigma2: Optional[float] = None) -> KsResult:
    """KS distance between Y(tau)/tau given survival and Exp(rate 2/sigma2)

    Counts are spread uniformly over (k - 1, k] with a seeded jitter stream
    before scaling so the lattice does not enter the statistic.
    """
    sigma2 = result.model.sigma2 if sigma2 is None else sigma2
    counts = result.total[result.survived & ~result.capped].astype(float)
    if counts.size == 0:
        raise NumericalError("no surviving replicates to compare")
    jitter = _substream(result.seed, JITTER_KEY).random(counts.size)
    samples = (counts - jitter) / result.tau
    test = stats.kstest(samples, "expon", args=(0.0, sigma2 / 2.0))
    logger.info(f"Yaglom KS statistic {test.statistic:.4g} over {counts.size} survivors")
    return KsResult(float(test.statistic), float(test.pvalue), int(counts.size))


def extinction_estimate(result: SimulationResult) -> Tuple[float, float]:
    """Extinct fraction and its binomial standard error"""
    n = result.n_reps
    p = float(np.count_nonzero(~result.survived)) / n
    return p, math.sqrt(p * (1.0 - p) / n)
