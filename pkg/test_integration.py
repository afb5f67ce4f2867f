#!/usr/bin/env python3
"""
End-to-end tests of the branchdiff command line: flags, config files,
output files and exit codes
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the repository root to path
sys.path.insert(0, str(Path(__file__).parent))

from branchdiff.cli import compare_verdict, main


def read_csv(path: Path):
    header = path.read_text().splitlines()[0].split(",")
    return header, np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))


def read_json(path: Path) -> dict:
    return json.loads(path.read_text())


def test_imports():
    """Every module imports and the package reports its version"""
    import branchdiff
    from branchdiff import bgw, cli, config, errors, feller, qsd_density, qsd_moments, rates, specfun, workers

    assert branchdiff.__version__
    for module in (bgw, cli, config, feller, qsd_density, qsd_moments, rates, specfun, workers):
        assert module.logger.name == module.__name__
    assert issubclass(errors.ConvergenceError, errors.BranchDiffError)


def test_help_and_bad_flags():
    assert main(["--help"]) == 0
    assert main(["feller", "--law", "bogus"]) == 2
    assert main([]) == 2


def test_feller_grid_and_sidecar(tmp_path):
    out = tmp_path / "feller.csv"
    assert main(["feller", "--alpha", "-0.5", "--t", "1", "--x", "0:8:0.01", "--out", str(out)]) == 0
    header, rows = read_csv(out)
    assert header == ["x", "density", "atom", "p0"]
    assert rows.shape == (801, 4)
    assert np.all(rows[:, 1] > 0)
    mass = np.trapz(rows[:, 1], rows[:, 0]) + rows[0, 2]
    assert mass == pytest.approx(1.0, abs=1e-3)

    summary = read_json(out.with_suffix(".json"))
    assert summary["command"] == "feller"
    assert summary["input"]["alpha"] == -0.5
    assert summary["normalisation"] == pytest.approx(1.0, abs=1e-6)
    assert summary["seed"] == 12345


def test_feller_line_law_needs_pi(tmp_path):
    assert main(["feller", "--law", "critical-line", "--out", str(tmp_path / "line.csv")]) == 2
    out = tmp_path / "line.csv"
    assert main(["feller", "--law", "critical-line", "--pi", "0.75,0.25", "--x", "0:2:0.5", "--out", str(out)]) == 0
    header, rows = read_csv(out)
    assert header == ["x", "w0", "w1", "density", "atom"]
    np.testing.assert_allclose(rows[:, 1], 0.75 * rows[:, 0])


def test_config_file_values_and_flag_precedence(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text("[run]\nseed = 7\n\n[feller]\nalpha = 0.5\nt = 2\nx = 0.5:2:0.5\n")
    out = tmp_path / "feller.csv"
    assert main(["feller", "--config", str(config), "--t", "1", "--out", str(out)]) == 0
    summary = read_json(out.with_suffix(".json"))
    assert summary["input"]["alpha"] == 0.5
    assert summary["input"]["t"] == 1.0
    assert summary["seed"] == 7


def test_configuration_errors_exit_with_two(tmp_path):
    assert main(["feller", "--x", "1:0:0.1"]) == 2
    assert main(["feller", "--x", "0:1"]) == 2
    assert main(["feller", "--config", str(tmp_path / "missing.ini")]) == 2
    bogus = tmp_path / "bogus.ini"
    bogus.write_text("[bogus]\nalpha = 1\n")
    assert main(["feller", "--config", str(bogus)]) == 2
    assert main(["moments", "--theta", "0.1"]) == 2
    misspelled = tmp_path / "misspelled.ini"
    misspelled.write_text("[run]\nsed = 3\n")
    assert main(["feller", "--config", str(misspelled)]) == 2
    for counts in ("0,0", "1,-1"):
        assert main(["sample-dist", "--theta", "0.1", "--pi", "0.75,0.25", "--counts", counts]) == 2


def test_numerical_failure_exits_with_one(tmp_path):
    args = ["qsd-numeric", "--lambda", "0.9", "--m-max", "20", "--solver", "power", "--max-iter", "1",
            "--out", str(tmp_path / "q.csv")]
    assert main(args) == 1


def test_qsd_numeric_one_type(tmp_path):
    out = tmp_path / "q.csv"
    assert main(["qsd-numeric", "--lambda", "0.9", "--m-max", "40", "--solver", "dense", "--out", str(out)]) == 0
    header, rows = read_csv(out)
    assert header == ["m", "x", "probability", "density", "exponential"]
    assert rows.shape == (40, 5)
    assert rows[:, 2].sum() == pytest.approx(1.0, abs=1e-12)
    summary = read_json(out.with_suffix(".json"))
    assert summary["Pi"] == pytest.approx(summary["extinction"] + summary["leak"], abs=1e-12)


def test_qsd_numeric_two_type_writes_marginal(tmp_path):
    out = tmp_path / "q2.csv"
    args = ["qsd-numeric", "--lambda", "0.9", "--m-max", "10", "--d", "2", "--r12", "0.05", "--r21", "0.1",
            "--solver", "dense", "--out", str(out)]
    assert main(args) == 0
    header, rows = read_csv(out)
    assert header == ["m", "i", "x", "u", "probability", "density"]
    assert rows.shape == (65, 6)
    _, marginal = read_csv(tmp_path / "q2_marginal.csv")
    assert marginal.shape == (10, 3)


def test_moments_all_methods_agree(tmp_path):
    out = tmp_path / "moments.json"
    assert main(["moments", "--theta", "0.1", "--pi", "0.75,0.25", "--method", "all", "--out", str(out)]) == 0
    summary = read_json(out)
    assert set(summary["results"]) == {"linear-solve", "spectral", "pim", "small-theta"}
    assert summary["comparison"]["spectral"] <= 1e-10
    assert summary["comparison"]["pim"] <= 1e-10
    np.testing.assert_allclose(summary["results"]["pim"]["mu2"], [[1.4375, 0.0625], [0.0625, 0.4375]],
                               rtol=1e-12)
    assert summary["x_power_moments"]["0"][0] == pytest.approx(0.75)


def test_moments_for_a_random_reversible_model(tmp_path):
    out = tmp_path / "random.json"
    assert main(["moments", "--random", "4", "--method", "all", "--seed", "3", "--out", str(out)]) == 0
    summary = read_json(out)
    assert "spectral" in summary["results"]
    assert summary["comparison"]["spectral"] <= 1e-10
    assert np.array(summary["gamma"]).shape == (4, 4)


def test_sample_distribution_table_and_single_composition(tmp_path, capsys):
    out = tmp_path / "sample.csv"
    assert main(["sample-dist", "--theta", "0.1", "--pi", "0.75,0.25", "--n-total", "2", "--out", str(out)]) == 0
    header, rows = read_csv(out)
    assert header == ["n0", "n1", "probability"]
    table = {(int(a), int(b)): p for a, b, p in rows}
    assert table[(2, 0)] == pytest.approx(0.73125, rel=1e-14)
    assert table[(1, 1)] == pytest.approx(0.0375, rel=1e-14)
    assert read_json(out.with_suffix(".json"))["sum"] == pytest.approx(1.0, abs=1e-15)

    capsys.readouterr()
    assert main(["sample-dist", "--theta", "0.1", "--pi", "0.75,0.25", "--counts", "0,2"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["probability"] == pytest.approx(0.23125, rel=1e-14)
    assert summary["via_u_moments"] == pytest.approx(0.23125, rel=1e-12)


def test_qsd_approx_grids(tmp_path):
    out = tmp_path / "approx.csv"
    args = ["qsd-approx", "--theta", "0.1", "--pi", "0.75,0.25", "--x", "0.5:2:0.5", "--u", "0.25:0.75:0.25",
            "--alpha", "-1", "--out", str(out)]
    assert main(args) == 0
    header, rows = read_csv(out)
    assert header == ["i", "j", "x", "u", "density"]
    assert rows.shape == (12, 5)
    assert np.all(rows[:, 4] > 0)
    _, lines = read_csv(tmp_path / "approx_lines.csv")
    assert lines.shape == (8, 3)


def test_qsd_approx_clips_only_on_request(tmp_path):
    args = ["qsd-approx", "--theta", "3", "--pi", "0.75,0.25", "--x", "0.5:4:0.5", "--u", "0.1:0.9:0.1"]
    plain, clipped = tmp_path / "plain.csv", tmp_path / "clipped.csv"
    assert main(args + ["--out", str(plain)]) == 0
    assert main(args + ["--clip-negative", "--out", str(clipped)]) == 0
    _, plain_lines = read_csv(tmp_path / "plain_lines.csv")
    _, clipped_lines = read_csv(tmp_path / "clipped_lines.csv")
    assert np.all(clipped_lines[:, 2] >= 0)
    assert read_json(plain.with_suffix(".json"))["negative_line_points"] == int(np.count_nonzero(plain_lines[:, 2] < 0))


def test_mc_trajectory(tmp_path):
    out = tmp_path / "traj.csv"
    args = ["mc", "--mode", "trajectory", "--lambda", "0.9", "--tau", "20", "--reps", "1000", "--seed", "5",
            "--out", str(out)]
    assert main(args) == 0
    header, rows = read_csv(out)
    assert header == ["generation", "alive", "mean_size"]
    assert rows.shape == (21, 3)
    assert rows[0, 1] == 1000
    assert np.all(np.diff(rows[:, 1]) <= 0)


def test_mc_yaglom_summary(capsys):
    capsys.readouterr()
    assert main(["mc", "--mode", "yaglom", "--tau", "50", "--reps", "20000", "--seed", "9"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["lam"] == 1.0
    assert summary["n_survivors"] > 300
    assert summary["ks_statistic"] < 0.1


def test_mc_extinction_needs_a_model():
    assert main(["mc", "--mode", "extinction", "--reps", "10"]) == 2


def test_compare_verdict_bands():
    assert compare_verdict(0.05, 0.1, 0.3) == "agrees"
    assert compare_verdict(0.2, 0.1, 0.3) == "inconclusive"
    assert compare_verdict(0.3, 0.1, 0.3) == "disagrees"


@pytest.mark.slow
def test_compare_small_and_large_theta(tmp_path):
    l1 = {}
    for theta in ("0.01", "0.1", "1"):
        out = tmp_path / f"compare_{theta}.csv"
        args = ["compare", "--config", str(Path(__file__).parent / "configs" / "discrete_comparison.ini"), "--theta", theta,
                "--tol", "1e-10", "--out", str(out)]
        assert main(args) == 0
        summary = read_json(out.with_suffix(".json"))
        l1[theta] = summary["l1"]
        if theta == "1":
            assert summary["verdict"] == "disagrees"
        else:
            assert summary["verdict"] == "agrees"
            assert summary["l1"] <= 0.10
    assert l1["0.1"] < l1["1"]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
