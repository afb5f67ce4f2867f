"""
Configuration for branchdiff runs
Environment settings (python-dotenv), logging setup, grid specs and the
per-command parameter blocks read from an INI-style run file
"""

import configparser
import logging
import os
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

# Environment settings
BRANCHDIFF_THREADS = os.getenv("BRANCHDIFF_THREADS")
BRANCHDIFF_LOG_LEVEL = os.getenv("BRANCHDIFF_LOG_LEVEL", "INFO")
BRANCHDIFF_OUTPUT_DIR = os.getenv("BRANCHDIFF_OUTPUT_DIR", "")

COMMANDS = ("feller", "qsd-approx", "moments", "sample-dist", "qsd-numeric", "compare", "mc")


def thread_count() -> int:
    """Worker thread cap from BRANCHDIFF_THREADS, defaulting to the CPU count"""
    cpus = os.cpu_count() or 1
    if not BRANCHDIFF_THREADS:
        return cpus
    try:
        value = int(BRANCHDIFF_THREADS)
    except ValueError:
        raise ConfigError(f"BRANCHDIFF_THREADS must be an integer, got {BRANCHDIFF_THREADS!r}")
    if value < 1:
        raise ConfigError("BRANCHDIFF_THREADS must be at least 1")
    return value


def configure_logging(verbose: bool = False) -> None:
    """Configure root logging once for CLI runs"""
    level = logging.DEBUG if verbose else getattr(logging, BRANCHDIFF_LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def resolve_output(path: Optional[str]) -> Optional[Path]:
    """Resolve an output path against BRANCHDIFF_OUTPUT_DIR when relative"""
    if not path or path == "-":
        return None
    out = Path(path)
    if not out.is_absolute() and BRANCHDIFF_OUTPUT_DIR:
        out = Path(BRANCHDIFF_OUTPUT_DIR) / out
    return out


# Value parsing for INI strings and flags

def parse_vector(value: Any) -> Any:
    """Parse '0.75,0.25' into a list of floats; lists pass through"""
    if isinstance(value, str):
        try:
            return [float(v) for v in value.replace(" ", "").split(",") if v]
        except ValueError:
            raise ValueError(f"cannot parse vector {value!r}")
    return value


def parse_matrix(value: Any) -> Any:
    """Parse '0.75,0.25;0.25,0.75' into a list of rows"""
    if isinstance(value, str):
        return [parse_vector(row) for row in value.split(";") if row.strip()]
    return value


def parse_int_vector(value: Any) -> Any:
    if isinstance(value, str):
        try:
            return [int(v) for v in value.replace(" ", "").split(",") if v]
        except ValueError:
            raise ValueError(f"cannot parse integer vector {value!r}")
    return value


Vector = Annotated[List[float], BeforeValidator(parse_vector)]
Matrix = Annotated[List[List[float]], BeforeValidator(parse_matrix)]
IntVector = Annotated[List[int], BeforeValidator(parse_int_vector)]


class GridSpec(BaseModel):
    """A start:stop:step grid, inclusive of stop within half a step"""

    model_config = ConfigDict(frozen=True)

    start: float
    stop: float
    step: float = Field(gt=0)

    @model_validator(mode="after")
    def _increasing(self) -> "GridSpec":
        if not self.stop > self.start:
            raise ValueError(f"grid stop {self.stop} must exceed start {self.start}")
        return self

    @classmethod
    def parse(cls, spec: str) -> "GridSpec":
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid spec must be start:stop:step, got {spec!r}")
        try:
            return cls(start=float(parts[0]), stop=float(parts[1]), step=float(parts[2]))
        except (ValueError, ValidationError) as e:
            raise ConfigError(f"invalid grid spec {spec!r}: {e}")

    def points(self) -> np.ndarray:
        n = int(np.floor((self.stop - self.start) / self.step + 0.5)) + 1
        return self.start + self.step * np.arange(n)


def grid_points(spec: str) -> np.ndarray:
    return GridSpec.parse(spec).points()


# Numeric tolerances

class QuadratureConfig(BaseModel):
    """Adaptive Gauss-Kronrod settings for normalisation and moment checks"""

    model_config = ConfigDict(frozen=True)

    epsabs: float = Field(default=1e-12, gt=0)
    epsrel: float = Field(default=1e-10, gt=0)
    limit: int = Field(default=200, ge=10)
    tail_tol: float = Field(default=1e-10, gt=0)
    # inner piece (0, split] of the singular x^(a theta - 1) factor
    split: float = Field(default=0.1, gt=0)


class PowerIterationConfig(BaseModel):
    """Stopping rules for the truncated eigenvector solvers"""

    model_config = ConfigDict(frozen=True)

    tol: float = Field(default=1e-12, gt=0)
    max_iter: int = Field(default=200_000, ge=1)
    log_every: int = Field(default=1000, ge=1)
    boundary_warn: float = Field(default=1e-3, gt=0)
    polish_iter: int = Field(default=2000, ge=0)


# Parameter blocks, one per subcommand

class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class RateSpec(_Params):
    """Rate model given as a full gamma matrix, as (theta, P) or as (theta, pi) for PIM"""

    gamma: Optional[Matrix] = None
    theta: Optional[float] = Field(default=None, gt=0)
    P: Optional[Matrix] = None
    pi: Optional[Vector] = None

    @model_validator(mode="after")
    def _one_form(self) -> "RateSpec":
        return self._check_form()

    def _check_form(self):
        forms = [self.gamma is not None, self.theta is not None and self.P is not None,
                 self.theta is not None and self.pi is not None and self.P is None]
        if sum(forms) != 1:
            raise ValueError("give exactly one rate model: gamma, theta+P, or theta+pi")
        return self

    def build(self):
        """Construct the RateMatrix and its ThetaP form (canonical theta when only gamma is given)"""
        from .rates import RateMatrix, ThetaP, pim

        if self.gamma is not None:
            rm = RateMatrix(np.array(self.gamma, dtype=float))
            return rm, rm.to_theta_p(self.theta)
        if self.P is not None:
            tp = ThetaP(self.theta, np.array(self.P, dtype=float))
            return tp.rate_matrix(), tp
        rm = pim(self.theta, np.array(self.pi, dtype=float))
        return rm, rm.to_theta_p()


class FellerParams(_Params):
    alpha: float = -0.5
    t: float = 1.0
    x: str = "0.01:8:0.01"
    law: Literal["finite", "conditioned", "qsd", "yaglom", "supercritical",
                 "supercritical-conditioned", "critical-line", "supercritical-line"] = "finite"
    form: Literal["mixture", "bessel"] = "mixture"
    pi: Optional[Vector] = None


class QsdApproxParams(RateSpec):
    alpha: float = Field(default=-0.5, lt=0)
    x: str = "0.05:6:0.05"
    u: str = "0.01:0.99:0.01"
    coords: Literal["xu", "x1x2"] = "xu"
    a_rule: Literal["default", "split"] = "default"
    clip_negative: bool = False


class MomentsParams(RateSpec):
    alpha: float = Field(default=-0.5, lt=0)
    method: Literal["solve", "spectral", "pim", "small-theta", "all"] = "solve"
    max_order: int = Field(default=3, ge=1)
    # number of types of a random reversible model drawn from the run seed
    random: Optional[int] = Field(default=None, ge=2)

    @model_validator(mode="after")
    def _one_form(self) -> "MomentsParams":
        given = [self.gamma is not None, self.P is not None, self.pi is not None]
        if self.random is not None:
            if any(given):
                raise ValueError("random draws its own rate model; drop gamma, P and pi")
            return self
        return self._check_form()


class SampleDistParams(RateSpec):
    n_total: int = Field(default=2, ge=1)
    counts: Optional[IntVector] = None

    @field_validator("counts")
    @classmethod
    def _sample_not_empty(cls, counts: Optional[List[int]]) -> Optional[List[int]]:
        if counts is not None and (any(k < 0 for k in counts) or not any(counts)):
            raise ValueError(f"counts must be nonnegative with at least one positive entry, got {counts}")
        return counts


class QsdNumericParams(_Params):
    lam: float = Field(default=0.975, gt=0)
    sigma2: Optional[float] = Field(default=None, gt=0)
    alpha: float = -0.5
    m_max: int = Field(default=160, ge=2)
    d: Literal[1, 2] = 1
    r12: float = Field(default=0.0, ge=0, le=1)
    r21: float = Field(default=0.0, ge=0, le=1)
    solver: Literal["power", "arnoldi", "dense"] = "power"
    tol: float = Field(default=1e-12, gt=0)
    max_iter: int = Field(default=200_000, ge=1)


class CompareParams(_Params):
    theta: float = Field(default=0.1, gt=0)
    pi: Vector = Field(default_factory=lambda: [0.75, 0.25])
    P: Optional[Matrix] = None
    lam: float = Field(default=0.975, gt=0, lt=1)
    alpha: float = Field(default=-0.5, lt=0)
    m_max: int = Field(default=160, ge=2)
    solver: Literal["power", "arnoldi", "dense"] = "arnoldi"
    tol: float = Field(default=1e-12, gt=0)
    max_iter: int = Field(default=200_000, ge=1)
    x_min: float = 0.5
    x_max: float = 6.0
    u_min: float = 0.05
    u_max: float = 0.95
    agree_tol: float = 0.10
    disagree_tol: float = 0.30


class McParams(_Params):
    mode: Literal["yaglom", "extinction", "trajectory"] = "yaglom"
    lam: Optional[float] = Field(default=None, gt=0)
    alpha: Optional[float] = None
    y0: int = Field(default=1, ge=1)
    tau: int = Field(default=200, ge=1)
    reps: int = Field(default=100_000, ge=1)
    r12: float = Field(default=0.0, ge=0, le=1)
    r21: float = Field(default=0.0, ge=0, le=1)
    cap_factor: float = Field(default=50.0, gt=1)
    block_size: int = Field(default=10_000, ge=1)


PARAMS_BY_COMMAND = {
    "feller": FellerParams,
    "qsd-approx": QsdApproxParams,
    "moments": MomentsParams,
    "sample-dist": SampleDistParams,
    "qsd-numeric": QsdNumericParams,
    "compare": CompareParams,
    "mc": McParams,
}


class RunConfig(BaseModel):
    """Everything a CLI run needs: the command's block plus output and seed"""

    model_config = ConfigDict(extra="forbid")

    command: Literal["feller", "qsd-approx", "moments", "sample-dist", "qsd-numeric", "compare", "mc"]
    params: _Params
    out: Optional[str] = None
    seed: int = 12345
    clip_negative: bool = False


def read_config_file(path: str) -> Dict[str, Dict[str, str]]:
    """Read an INI-style run file into {section: {key: value}}"""
    file = Path(path)
    if not file.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep 'P' distinct from 'p'
    try:
        parser.read(file)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config file {path}: {e}")
    unknown = [s for s in parser.sections() if s not in COMMANDS and s != "run"]
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    return {section: dict(parser[section]) for section in parser.sections()}


def build_run_config(command: str, file_values: Dict[str, Dict[str, str]],
                     overrides: Dict[str, Any]) -> RunConfig:
    """Merge file values with flag overrides (flags win) and validate"""
    run_section = dict(file_values.get("run", {}))
    values: Dict[str, Any] = dict(file_values.get(command, {}))
    run_keys = ("out", "seed", "clip_negative")
    for key, value in overrides.items():
        if value is None:
            continue
        if key in run_keys:
            run_section[key] = value
        else:
            values[key] = value
    try:
        params = PARAMS_BY_COMMAND[command].model_validate(values)
        config = RunConfig(command=command, params=params, **run_section)
    except ValidationError as e:
        raise ConfigError(f"invalid [{command}] configuration: {e}")
    logger.debug(f"Run config for {command}: {config.params.model_dump()}")
    return config
