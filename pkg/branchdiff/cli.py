"""
branchdiff command line
Each subcommand reads its block from --config (flags override file values),
runs one analysis and writes a CSV table and/or a JSON summary that echoes
the full input.
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .bgw import (DiscreteModel, extinction_estimate, from_continuum, matched_to_alpha, qsd_eigenvector,
                  simulate, to_continuum, yaglom_ks)
from .config import (PowerIterationConfig, RunConfig, build_run_config, configure_logging, grid_points,
                     read_config_file, resolve_output)
from .errors import BranchDiffError, ConfigError, exit_code_for
from .feller import (FellerLaw, critical_line_density, density_at_zero, extinction_prob, normalisation, qsd_law,
                     qsd_subcritical, supercritical_law, supercritical_line_density, supercritical_stationary,
                     yaglom_critical, yaglom_law)
from .qsd_density import SmallThetaQsd, surface_pairs
from .qsd_moments import (SampleCounts, moment_report, moment_x_power, rescale_moment, sampling_distribution,
                          sampling_table, sampling_via_u_moments)
from .rates import ThetaP, pim, random_reversible
from .workers import shutdown_worker_pool

logger = logging.getLogger(__name__)

CSV_FORMAT = "%.17g"


@dataclass
class Table:
    columns: List[str]
    rows: np.ndarray


@dataclass
class CommandOutput:
    """Main table, extra tables written as <stem>_<name>.csv, and the JSON summary"""
    table: Optional[Table] = None
    extras: Dict[str, Table] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)


# Output

def write_csv(table: Table, handle) -> None:
    np.savetxt(handle, np.atleast_2d(table.rows), fmt=CSV_FORMAT, delimiter=",",
               header=",".join(table.columns), comments="")


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def write_output(run: RunConfig, output: CommandOutput) -> None:
    summary = {
        "command": run.command,
        "version": __version__,
        "seed": run.seed,
        "input": run.params.model_dump(),
        **output.summary,
    }
    text = json.dumps(summary, indent=2, default=_json_default)
    path = resolve_output(run.out)
    if path is None:
        if output.table is not None:
            write_csv(output.table, sys.stdout)
            logger.info(f"Summary: {text}")
        else:
            sys.stdout.write(text + "\n")
        return

    path.parent.mkdir(parents=True, exist_ok=True)
    if output.table is None:
        path.write_text(text + "\n")
        logger.info(f"Wrote {path}")
        return
    with open(path, "w", newline="") as handle:
        write_csv(output.table, handle)
    logger.info(f"Wrote {len(np.atleast_2d(output.table.rows))} rows to {path}")
    for name, table in output.extras.items():
        extra = path.with_name(f"{path.stem}_{name}.csv")
        with open(extra, "w", newline="") as handle:
            write_csv(table, handle)
        logger.info(f"Wrote {extra}")
    sidecar = path.with_suffix(".json")
    sidecar.write_text(text + "\n")
    logger.info(f"Wrote {sidecar}")


def _clip(values: np.ndarray, enabled: bool, label: str) -> np.ndarray:
    negative = int(np.count_nonzero(values < 0))
    if negative and enabled:
        logger.warning(f"{negative} negative {label} values clipped to 0 (theta outside the small-theta regime)")
        return np.maximum(values, 0.0)
    return values


# Commands

def cmd_feller(run: RunConfig) -> CommandOutput:
    """Density of one Feller diffusion law over the x grid"""
    p = run.params
    x = grid_points(p.x)
    summary: Dict[str, Any] = {"law": p.law}

    if p.law in ("critical-line", "supercritical-line"):
        if p.pi is None:
            raise ConfigError(f"law {p.law} needs pi")
        if p.law == "critical-line":
            points, density = critical_line_density(x, p.pi)
            atom = 0.0
        else:
            points, density, atom = supercritical_line_density(x, p.alpha, p.pi, conditioned=False)
        columns = ["x"] + [f"w{i}" for i in range(points.shape[1])] + ["density", "atom"]
        rows = np.column_stack([x, points, density, np.full_like(x, atom)])
        summary["atom"] = atom
        return CommandOutput(Table(columns, rows), summary=summary)

    if p.law == "finite":
        feller_law = FellerLaw(alpha=p.alpha, t=p.t)
        positive = x > 0
        density = np.empty_like(x)
        density[positive] = feller_law.density(x[positive], p.form)
        density[~positive] = density_at_zero(p.alpha, p.t)
        atom = p0 = extinction_prob(p.alpha, p.t)
        law = feller_law.as_law()
    elif p.law == "conditioned":
        feller_law = FellerLaw(alpha=p.alpha, t=p.t)
        positive = x > 0
        density = np.empty_like(x)
        density[positive] = feller_law.conditioned_density(x[positive])
        p0 = extinction_prob(p.alpha, p.t)
        density[~positive] = density_at_zero(p.alpha, p.t) / (1.0 - p0)
        atom = 0.0
        law = feller_law.as_law(conditioned=True)
    elif p.law == "qsd":
        density = np.asarray(qsd_subcritical(x, p.alpha))
        atom, p0 = 0.0, 1.0
        law = qsd_law(p.alpha)
    elif p.law == "yaglom":
        density = np.asarray(yaglom_critical(x))
        atom, p0 = 0.0, 1.0
        law = yaglom_law()
    else:
        conditioned = p.law == "supercritical-conditioned"
        density, atom = supercritical_stationary(x, p.alpha, conditioned)
        density = np.asarray(density)
        p0 = math.exp(-2.0 * p.alpha)
        law = supercritical_law(p.alpha, conditioned)

    summary.update({"atom": atom, "p0": p0, "normalisation": normalisation(law)})
    rows = np.column_stack([x, density, np.full_like(x, atom), np.full_like(x, p0)])
    return CommandOutput(Table(["x", "density", "atom", "p0"], rows), summary=summary)


def cmd_qsd_approx(run: RunConfig) -> CommandOutput:
    """Small-theta QSD grids: surface components plus the signed line densities"""
    p = run.params
    _, theta_p = p.build()
    qsd = SmallThetaQsd(theta_p, p.a_rule)
    clip = run.clip_negative or p.clip_negative
    x = grid_points(p.x)

    blocks = []
    for i, j in surface_pairs(theta_p.d):
        if p.coords == "xu":
            grid = qsd.surface_grid(x, grid_points(p.u), p.alpha, i, j)
        else:
            grid = qsd.surface_grid_x1x2(x, x, p.alpha, i, j)
        blocks.append(np.column_stack([np.full(len(grid), i), np.full(len(grid), j), grid]))
    rows = np.vstack(blocks)
    rows[:, 4] = _clip(rows[:, 4], clip, "surface density")
    columns = ["i", "j", "x", "u", "density"] if p.coords == "xu" else ["i", "j", "x_i", "x_j", "density"]

    lines = qsd.line_grid(x, p.alpha)
    lines[:, 2] = _clip(lines[:, 2], clip, "line density")
    summary = {
        "theta": theta_p.theta,
        "pi": theta_p.pi,
        "P": theta_p.P,
        "negative_surface_points": int(np.count_nonzero(rows[:, 4] < 0)),
        "negative_line_points": int(np.count_nonzero(lines[:, 2] < 0)),
    }
    return CommandOutput(Table(columns, rows), {"lines": Table(["type", "x", "density"], lines)}, summary)


MOMENT_METHODS = {"solve": "linear-solve", "spectral": "spectral", "pim": "pim", "small-theta": "small-theta"}


def cmd_moments(run: RunConfig) -> CommandOutput:
    """First and second QSD moments by one or every applicable method"""
    p = run.params
    if p.random is not None:
        rates = random_reversible(p.random, np.random.default_rng(run.seed))
        theta_p = rates.to_theta_p()
    else:
        rates, theta_p = p.build()

    if p.method == "all":
        methods = ["linear-solve"]
        if rates.is_reversible():
            methods.append("spectral")
        if rates.is_pim():
            methods.append("pim")
        methods.append("small-theta")
    else:
        methods = [MOMENT_METHODS[p.method]]

    reports = {m: moment_report(p.alpha, rates, m, theta_p) for m in methods}
    summary: Dict[str, Any] = {
        "gamma": rates.gamma,
        "results": {m: r.model_dump() for m, r in reports.items()},
    }
    if len(reports) > 1:
        base = reports["linear-solve"].second
        scale = np.maximum(np.abs(base), np.finfo(float).tiny)
        summary["comparison"] = {m: float(np.max(np.abs(r.second - base) / scale))
                                 for m, r in reports.items() if m != "linear-solve"}

    reference = theta_p.with_theta(theta_p.theta / (2.0 * abs(p.alpha)))
    summary["x_power_moments"] = {
        str(r): [rescale_moment(moment_x_power(r, n, reference), n, p.alpha) for n in range(1, p.max_order + 1)]
        for r in range(theta_p.d)
    }
    logger.info(f"Moments by {', '.join(methods)} at alpha={p.alpha}")
    return CommandOutput(summary=summary)


def cmd_sample_dist(run: RunConfig) -> CommandOutput:
    """Sampling distribution of type counts in a sample from the QSD"""
    p = run.params
    _, theta_p = p.build()
    if p.counts is not None:
        counts = SampleCounts.of(p.counts)
        summary = {
            "counts": list(counts.n),
            "probability": sampling_distribution(counts, theta_p),
            "via_u_moments": sampling_via_u_moments(counts, theta_p),
        }
        return CommandOutput(summary=summary)

    table, total = sampling_table(p.n_total, theta_p)
    rows = np.array([list(c.n) + [prob] for c, prob in table], dtype=float)
    columns = [f"n{i}" for i in range(theta_p.d)] + ["probability"]
    return CommandOutput(Table(columns, rows), summary={"n_total": p.n_total, "sum": total})


def _power_config(p) -> PowerIterationConfig:
    return PowerIterationConfig(tol=p.tol, max_iter=p.max_iter)


def cmd_qsd_numeric(run: RunConfig) -> CommandOutput:
    """Eigenvector QSD of the truncated discrete model, on the diffusion scale"""
    p = run.params
    if p.d == 1:
        model = DiscreteModel(lam=p.lam, r=np.ones((1, 1)), m_max=p.m_max, sigma2=p.sigma2)
    else:
        r = np.array([[1.0 - p.r12, p.r12], [p.r21, 1.0 - p.r21]])
        model = DiscreteModel(lam=p.lam, r=r, m_max=p.m_max, sigma2=p.sigma2)
    qsd = qsd_eigenvector(model, p.solver, _power_config(p))
    samples = to_continuum(model, qsd, p.alpha)
    summary = {**qsd.summary(), "scale": samples.scale}

    if model.d == 1:
        m = np.arange(1, model.m_max + 1)
        exact = np.asarray(qsd_subcritical(samples.x, p.alpha)) if p.alpha < 0 else np.full_like(samples.x, np.nan)
        rows = np.column_stack([m, samples.x, qsd.probabilities, samples.marginal, exact])
        return CommandOutput(Table(["m", "x", "probability", "density", "exponential"], rows), summary=summary)

    rows = np.column_stack([samples.surface_m, samples.surface_i, samples.surface_x, samples.surface_u,
                            qsd.probabilities, samples.surface_density])
    marginal = np.column_stack([np.arange(1, model.m_max + 1), samples.x, samples.marginal])
    return CommandOutput(Table(["m", "i", "x", "u", "probability", "density"], rows),
                         {"marginal": Table(["m", "x", "density"], marginal)}, summary)


def compare_verdict(l1: float, agree_tol: float, disagree_tol: float) -> str:
    if l1 <= agree_tol:
        return "agrees"
    if l1 >= disagree_tol:
        return "disagrees"
    return "inconclusive"


def cmd_compare(run: RunConfig) -> CommandOutput:
    """Eigenvector QSD against the small-theta surface density on the interior grid"""
    p = run.params
    if p.P is not None:
        theta_p = ThetaP(p.theta, np.array(p.P, dtype=float))
    else:
        theta_p = pim(p.theta, p.pi).to_theta_p()
    model = from_continuum(theta_p, p.lam, p.alpha, p.m_max)
    qsd = qsd_eigenvector(model, p.solver, _power_config(p))
    samples = to_continuum(model, qsd, p.alpha)

    x, u = samples.surface_x, samples.surface_u
    inside = (x >= p.x_min) & (x <= p.x_max) & (u >= p.u_min) & (u <= p.u_max)
    if not np.any(inside):
        raise ConfigError("comparison window contains no lattice points")
    x, u = x[inside], u[inside]
    numeric = samples.surface_density[inside]
    theory = np.asarray(SmallThetaQsd(theta_p).surface_xu_at_alpha(x, u, p.alpha))

    # each lattice point (m, i) covers a cell of area scale / m in (x, u)
    weights = samples.scale / samples.surface_m[inside]
    l1 = float(np.sum(weights * np.abs(numeric - theory)) / np.sum(weights * np.abs(theory)))
    sup = float(np.max(np.abs(numeric - theory)) / np.max(np.abs(theory)))
    verdict = compare_verdict(l1, p.agree_tol, p.disagree_tol)
    logger.info(f"Comparison at theta={p.theta}: relative L1 {l1:.4g}, sup {sup:.4g} -> {verdict}")

    summary = {
        "l1": l1,
        "sup": sup,
        "verdict": verdict,
        "n_points": int(inside.sum()),
        "r12": model.r12,
        "r21": model.r21,
        "qsd": qsd.summary(),
    }
    rows = np.column_stack([x, u, numeric, theory])
    return CommandOutput(Table(["x", "u", "numeric", "theory"], rows), summary=summary)


def _simulation_model(lam: float, r12: float, r21: float) -> DiscreteModel:
    # m_max plays no part in simulation
    if r12 or r21:
        return DiscreteModel.two_type(lam, r12, r21, 2)
    return DiscreteModel.one_type(lam, 2)


def cmd_mc(run: RunConfig) -> CommandOutput:
    """Monte Carlo replicates of the discrete process"""
    p = run.params
    if p.mode == "extinction":
        if p.alpha is None and p.lam is None:
            raise ConfigError("extinction mode needs alpha or lam")
        if p.alpha is not None:
            model = matched_to_alpha(p.alpha, p.y0, r12=p.r12, r21=p.r21)
        else:
            model = _simulation_model(p.lam, p.r12, p.r21)
    else:
        model = _simulation_model(1.0 if p.lam is None else p.lam, p.r12, p.r21)

    result = simulate(model, p.tau, p.reps, run.seed, y0=p.y0, block_size=p.block_size, cap_factor=p.cap_factor)
    summary: Dict[str, Any] = {
        "lam": model.lam,
        "sigma2": model.sigma2,
        "alpha": model.alpha_for(p.y0),
        "survival_fraction": result.survival_fraction(),
        "n_capped": result.n_capped,
    }

    if p.mode == "yaglom":
        if model.lam != 1.0:
            logger.warning(f"Yaglom comparison at lambda={model.lam}; the exponential limit holds at lambda = 1")
        ks = yaglom_ks(result)
        summary.update({"ks_statistic": ks.statistic, "ks_pvalue": ks.pvalue, "n_survivors": ks.n})
        return CommandOutput(summary=summary)

    if p.mode == "extinction":
        fraction, se = extinction_estimate(result)
        summary.update({"extinct_fraction": fraction, "standard_error": se})
        alpha = summary["alpha"]
        if alpha > 0:
            expected = math.exp(-2.0 * alpha)
            summary["diffusion_extinction"] = expected
            summary["z_score"] = (fraction - expected) / se if se > 0 else None
        return CommandOutput(summary=summary)

    generations = np.arange(p.tau + 1)
    rows = np.column_stack([generations, result.alive_by_generation, result.mean_size_given_survival()])
    return CommandOutput(Table(["generation", "alive", "mean_size"], rows), summary=summary)


COMMAND_HANDLERS: Dict[str, Callable[[RunConfig], CommandOutput]] = {
    "feller": cmd_feller,
    "qsd-approx": cmd_qsd_approx,
    "moments": cmd_moments,
    "sample-dist": cmd_sample_dist,
    "qsd-numeric": cmd_qsd_numeric,
    "compare": cmd_compare,
    "mc": cmd_mc,
}


# Argument parsing

COMMAND_HELP = {
    "feller": ("Feller diffusion densities",
               "CSV columns: x,density,atom,p0 (line laws: x,w0..w{d-1},density,atom)"),
    "qsd-approx": ("small-theta multi-type QSD grids",
                   "CSV columns: i,j,x,u,density (or i,j,x_i,x_j,density); <out>_lines.csv: type,x,density"),
    "moments": ("QSD first and second moments", "JSON only: results per method and a comparison field"),
    "sample-dist": ("sampling distribution of a finite sample",
                    "CSV columns: n0..n{d-1},probability; with --counts, JSON only"),
    "qsd-numeric": ("eigenvector QSD of the truncated discrete model",
                    "CSV columns d=1: m,x,probability,density,exponential; "
                    "d=2: m,i,x,u,probability,density plus <out>_marginal.csv: m,x,density"),
    "compare": ("discrete QSD against the small-theta surface density",
                "CSV columns: x,u,numeric,theory; JSON: l1, sup, verdict"),
    "mc": ("Monte Carlo of the discrete process",
           "yaglom and extinction modes: JSON only; trajectory mode CSV columns: generation,alive,mean_size"),
}


def _rate_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--gamma", help="rate matrix rows 'a,b;c,d'")
    parser.add_argument("--theta", type=float, help="overall mutation rate")
    parser.add_argument("--P", dest="P", help="mutation kernel rows 'a,b;c,d'")
    parser.add_argument("--pi", help="stationary vector for a PIM model 'a,b'")


def _solver_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lambda", dest="lam", type=float, help="offspring mean")
    parser.add_argument("--m-max", dest="m_max", type=int, help="truncation of the total size")
    parser.add_argument("--solver", choices=["power", "arnoldi", "dense"])
    parser.add_argument("--tol", type=float, help="L1 change at which iteration stops")
    parser.add_argument("--max-iter", dest="max_iter", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run file with one section per command")
    common.add_argument("--out", help="output path (CSV, JSON summary beside it); stdout when omitted")
    common.add_argument("--seed", type=int, help="random seed (default 12345)")
    common.add_argument("--clip-negative", dest="clip_negative", action="store_const", const=True,
                        help="clip negative small-theta density values to 0")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="branchdiff", description="Quasi-stationary laws of branching diffusions")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str) -> argparse.ArgumentParser:
        title, columns = COMMAND_HELP[name]
        return sub.add_parser(name, parents=[common], help=title, description=f"{title}. {columns}")

    feller = add("feller")
    feller.add_argument("--alpha", type=float)
    feller.add_argument("--t", type=float, help="diffusion time")
    feller.add_argument("--x", help="grid start:stop:step")
    feller.add_argument("--law", choices=["finite", "conditioned", "qsd", "yaglom", "supercritical",
                                          "supercritical-conditioned", "critical-line", "supercritical-line"])
    feller.add_argument("--form", choices=["mixture", "bessel"])
    feller.add_argument("--pi", help="direction of the line laws 'a,b'")

    approx = add("qsd-approx")
    _rate_flags(approx)
    approx.add_argument("--alpha", type=float)
    approx.add_argument("--x", help="total-size grid start:stop:step")
    approx.add_argument("--u", help="fraction grid start:stop:step")
    approx.add_argument("--coords", choices=["xu", "x1x2"])
    approx.add_argument("--a-rule", dest="a_rule", choices=["default", "split"])

    moments = add("moments")
    _rate_flags(moments)
    moments.add_argument("--alpha", type=float)
    moments.add_argument("--method", choices=["solve", "spectral", "pim", "small-theta", "all"])
    moments.add_argument("--max-order", dest="max_order", type=int)
    moments.add_argument("--random", type=int, metavar="D", help="draw a random reversible model with D types")

    sample = add("sample-dist")
    _rate_flags(sample)
    sample.add_argument("--n-total", dest="n_total", type=int)
    sample.add_argument("--counts", help="one composition 'n0,n1,...'")

    numeric = add("qsd-numeric")
    _solver_flags(numeric)
    numeric.add_argument("--sigma2", type=float)
    numeric.add_argument("--alpha", type=float)
    numeric.add_argument("--d", type=int, choices=[1, 2])
    numeric.add_argument("--r12", type=float)
    numeric.add_argument("--r21", type=float)

    compare = add("compare")
    _solver_flags(compare)
    compare.add_argument("--theta", type=float)
    compare.add_argument("--pi")
    compare.add_argument("--P", dest="P")
    compare.add_argument("--alpha", type=float)

    mc = add("mc")
    mc.add_argument("--mode", choices=["yaglom", "extinction", "trajectory"])
    mc.add_argument("--lambda", dest="lam", type=float)
    mc.add_argument("--alpha", type=float)
    mc.add_argument("--y0", type=int)
    mc.add_argument("--tau", type=int)
    mc.add_argument("--reps", type=int)
    mc.add_argument("--r12", type=float)
    mc.add_argument("--r21", type=float)
    mc.add_argument("--block-size", dest="block_size", type=int)
    return parser


GLOBAL_FLAGS = ("command", "config", "verbose")


def run_command(command: str, config_path: Optional[str], overrides: Dict[str, Any]) -> CommandOutput:
    """Validate the merged configuration, run the command and write its outputs"""
    file_values = read_config_file(config_path) if config_path else {}
    run = build_run_config(command, file_values, overrides)
    logger.info(f"Running {command}")
    output = COMMAND_HANDLERS[command](run)
    write_output(run, output)
    logger.info(f"Finished {command}")
    return output


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.verbose)
    overrides = {k: v for k, v in vars(args).items() if k not in GLOBAL_FLAGS}
    try:
        run_command(args.command, args.config, overrides)
        return 0
    except BranchDiffError as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    finally:
        shutdown_worker_pool()


if __name__ == "__main__":
    sys.exit(main())
