import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from ecoinfer.cli import main
from ecoinfer.sieve import BasisSpec, SieveBasis

from oracles import dense_dml

DATA = Path(__file__).parent / "data"
COLUMNS = ["--outcome", "turnout", "--shares", "share_a,share_b", "--covariates", "income,density",
           "--size", "pop", "--id", "geo"]


@pytest.fixture
def golden(tmp_path):
    path = tmp_path / "golden.csv"
    shutil.copy(DATA / "golden.csv", path)
    return path


def run(*args):
    return main([str(a) for a in args])


def load(path):
    return json.loads(Path(path).read_text())


def test_fit_matches_golden_report(golden, tmp_path):
    out = tmp_path / "fit.json"
    assert run("fit", "--input", golden, *COLUMNS, "--output", out) == 0
    got, want = load(out), load(DATA / "golden_fit.json")
    for key in ("beta", "std_errors", "ci_lower", "ci_upper", "vcov"):
        np.testing.assert_allclose(got[key], want[key], rtol=1e-10, atol=1e-12)
    assert got["diagnostics"]["lambda"] == pytest.approx(want["diagnostics"]["lambda"], rel=1e-12)
    assert got["groups"] == ["share_a", "share_b"]


def test_fit_agrees_with_dense_oracle(golden, tmp_path):
    out = tmp_path / "fit.json"
    run("fit", "--input", golden, *COLUMNS, "--output", out)
    report = load(out)
    frame = pd.read_csv(golden)
    xbar = frame[["share_a", "share_b"]].to_numpy()
    Phi = SieveBasis(BasisSpec("linear")).fit_transform(frame[["income", "density"]].to_numpy())
    beta, vcov, _, _ = dense_dml(xbar, Phi, frame["turnout"].to_numpy(), frame["pop"].to_numpy(float),
                                 lam_sum=report["diagnostics"]["lambda_sum"])
    np.testing.assert_allclose(report["beta"], beta, atol=1e-10)
    np.testing.assert_allclose(report["vcov"], vcov, atol=1e-10)


def test_contrast_sensitivity_matches_golden(golden, tmp_path):
    out, contour = tmp_path / "sens.json", tmp_path / "contour.csv"
    assert run("sensitivity", "--input", golden, *COLUMNS, "--contrast", "1,-1", "--grid", "3x3",
               "--output", out, "--contour-output", contour) == 0
    got, want = load(out), load(DATA / "golden_sensitivity.json")
    for key in ("estimate", "std_error", "sigma_hat", "nu2_raw", "S"):
        assert got[key] == pytest.approx(want[key], rel=1e-10)
    for a, b in zip(got["robustness_values"], want["robustness_values"]):
        assert a["rv"] == pytest.approx(b["rv"], rel=1e-10)
    grid = pd.read_csv(contour)
    assert grid.shape == (9, 5)
    np.testing.assert_allclose(grid.bound, got["S"] * grid.c_gamma * grid.c_alpha, rtol=1e-12)
    # the corner where the bound first reaches the estimate flips its sign
    assert ((grid.lower <= 0) & (grid.upper >= 0)).any()


def test_grid_and_rho_zero(golden, tmp_path):
    contour = tmp_path / "c.csv"
    assert run("sensitivity", "--input", golden, *COLUMNS, "--grid", "2x2", "--rho", "0",
               "--output", tmp_path / "s.json", "--contour-output", contour) == 0
    grid = pd.read_csv(contour)
    assert len(grid) == 4 and np.all(grid.bound == 0)


def test_target_by_name_and_benchmarks(golden, tmp_path):
    out = tmp_path / "s.json"
    assert run("sensitivity", "--input", golden, *COLUMNS, "--target", "share_b", "--benchmark",
               "--grid", "2x2", "--output", out) == 0
    report = load(out)
    assert report["target"] == [0.0, 1.0]
    assert [b["covariate"] for b in report["benchmarks"]] == ["income", "density"]


def test_config_rerun_is_identical(golden, tmp_path):
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    run("fit", "--input", golden, *COLUMNS, "--lambda", "0.05", "--output", first)
    assert run("fit", "--config", first, "--output", second) == 0
    assert first.read_bytes() == second.read_bytes()


def test_local_output(golden, tmp_path):
    out = tmp_path / "local.csv"
    assert run("local", "--input", golden, *COLUMNS, "--bounds", "0", "1", "--output", out) == 0
    frame = pd.read_csv(out)
    assert len(frame) == 10
    data = pd.read_csv(golden)
    cols = ["B_share_a", "B_share_b"]
    assert list(frame.id) == list(data.geo)
    assert np.all(frame[cols].to_numpy() >= 0) and np.all(frame[cols].to_numpy() <= 1)
    for g in ("share_a", "share_b"):
        assert np.all(frame[f"lower_{g}"] <= frame[f"B_{g}"] + 1e-12)
        assert np.all(frame[f"B_{g}"] <= frame[f"upper_{g}"] + 1e-12)
    implied = (frame[cols].to_numpy() * data[["share_a", "share_b"]].to_numpy()).sum(axis=1)
    np.testing.assert_allclose(implied, data["turnout"], atol=1e-10)


def test_missing_share_column_exits_one(golden, tmp_path, capsys):
    code = run("fit", "--input", golden, "--outcome", "turnout", "--shares", "share_a,share_c",
               "--output", tmp_path / "x.json")
    assert code == 1
    assert "share_c" in capsys.readouterr().err


def test_out_of_range_outcome_exits_one(golden, tmp_path):
    assert run("fit", "--input", golden, *COLUMNS, "--bounds", "0", "0.5",
               "--output", tmp_path / "x.json") == 1


def test_missing_file_exits_one(tmp_path):
    assert run("fit", "--input", tmp_path / "none.csv", *COLUMNS) == 1


def test_simulate_writes_datasets(tmp_path):
    assert run("simulate", "--study", "1", "--m", "40", "--reps", "2", "--seed", "3",
               "--output-dir", tmp_path) == 0
    for rep in range(2):
        data = pd.read_csv(tmp_path / f"data_{rep:04d}.csv")
        truth = pd.read_csv(tmp_path / f"truth_{rep:04d}.csv")
        assert len(data) == len(truth) == 40
    meta = load(tmp_path / "truth_0001.csv.json")
    assert meta["config"]["seed"] == 4


def test_benchmark_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        assert run("benchmark", "--study", "1", "--m", "80", "--reps", "1", "--seed", "7", "--no-timing",
                   "--output", d / "s.json", "--raw-output", d / "raw.csv",
                   "--table-output", d / "table.csv") == 0
        outs.append([(d / f).read_bytes() for f in ("s.json", "raw.csv", "table.csv")])
    assert outs[0] == outs[1]
    table = pd.read_csv(tmp_path / "a" / "table.csv")
    assert set(table.method) == {"proposed", "goodman"}
    assert {"rmse", "cover50", "cover95"} <= set(table.columns)


def test_module_entry_point(golden, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ecoinfer", "fit", "--input", str(golden), *COLUMNS,
                           "--output", str(tmp_path / "f.json")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "f.json").exists()
