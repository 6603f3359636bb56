"""Command-line interface.

Every JSON report embeds the resolved configuration under ``"config"``;
passing that file back with ``--config`` reproduces the run. Exit codes:
0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dataset import ColumnSchema, DataValidationError, load_csv
from .ridge import ConvergenceError, RankDeficiencyError
from .sieve import BasisSpec

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

# keys that only say where to write things; excluded from embedded configs
OUTPUT_KEYS = {"output", "local_output", "contour_output", "raw_output", "table_output", "output_dir",
               "config", "workers", "command"}

DEFAULTS = {
    "common": {
        "input": None, "outcome": None, "shares": None, "covariates": "", "categorical": "",
        "size": None, "id": None, "bounds": None,
        "basis": "linear", "terms": None, "degree": 2, "knots": 3, "order": 4, "max_frequency": None,
        "lam": "auto", "lambda_min": 1e-8, "lambda_max": 1e2, "lambda_num": 50,
        "weighting": "car", "level": 0.95,
    },
    "fit": {"local_alpha": 0.05, "unimodal": False},
    "local": {"alpha": 0.05, "unimodal": False},
    "sensitivity": {"target": "0", "contrast": None, "rho": 1.0, "grid": "50x50",
                    "c_gamma_max": 1.0, "c_alpha_max": 1.0, "deltas": None, "benchmark": False},
    "synth": {"study": 1, "m": None, "d": None, "p": None, "r2_xz": None, "r2_bz": None,
              "mu_b": None, "sigma_b_scale": None, "seed": 0, "reps": 1},
    "benchmark": {"methods": "proposed,goodman", "timing": True},
}


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# parser


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--input", help="CSV file with one row per geography")
    g.add_argument("--outcome", help="outcome mean column")
    g.add_argument("--shares", help="comma-separated group share columns")
    g.add_argument("--covariates", help="comma-separated numeric covariate columns")
    g.add_argument("--categorical", help="comma-separated categorical covariate columns")
    g.add_argument("--size", help="population size column (default: all ones)")
    g.add_argument("--id", help="geography identifier column")
    g.add_argument("--bounds", nargs=2, type=float, metavar=("LO", "HI"), help="outcome range")
    m = p.add_argument_group("model")
    m.add_argument("--basis", choices=["linear", "cosine", "polynomial", "spline", "intercept"])
    m.add_argument("--terms", type=int, help="number of basis terms J")
    m.add_argument("--degree", type=int, help="polynomial degree per covariate")
    m.add_argument("--knots", type=int, help="interior spline knots per covariate")
    m.add_argument("--order", type=int, help="spline order")
    m.add_argument("--max-frequency", type=int, help="largest cosine frequency per covariate")
    m.add_argument("--lambda", dest="lam", help="penalty (empirical-mean scale) or 'auto'")
    m.add_argument("--lambda-min", type=float)
    m.add_argument("--lambda-max", type=float)
    m.add_argument("--lambda-num", type=int)
    m.add_argument("--weighting", choices=["car", "car-u"])
    m.add_argument("--level", type=float, help="confidence level")


def _add_synth_args(p):
    g = p.add_argument_group("simulation")
    g.add_argument("--study", type=int, choices=[1, 2], help="preset design")
    g.add_argument("--m", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--p", type=int)
    g.add_argument("--r2-xz", type=float)
    g.add_argument("--r2-bz", type=float)
    g.add_argument("--mu-b", help="comma-separated means of the local coefficients")
    g.add_argument("--sigma-b-scale", type=float, help="s in Sigma_b = s (I + 11')")
    g.add_argument("--seed", type=int)
    g.add_argument("--reps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecoinfer", description=__doc__.splitlines()[0],
                                     argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="estimate group means", argument_default=argparse.SUPPRESS)
    _add_data_args(fit)
    fit.add_argument("--local-output", help="also write local estimates CSV")
    fit.add_argument("--local-alpha", type=float)
    fit.add_argument("--unimodal", action="store_true")

    loc = sub.add_parser("local", help="per-geography estimates and intervals",
                         argument_default=argparse.SUPPRESS)
    _add_data_args(loc)
    loc.add_argument("--alpha", type=float, help="1 - confidence of the regions")
    loc.add_argument("--unimodal", action="store_true")

    sens = sub.add_parser("sensitivity", help="bias bounds and robustness values",
                          argument_default=argparse.SUPPRESS)
    _add_data_args(sens)
    sens.add_argument("--target", help="group name or index")
    sens.add_argument("--contrast", help="comma-separated contrast weights")
    sens.add_argument("--rho", type=float)
    sens.add_argument("--grid", help="contour grid size as NxM")
    sens.add_argument("--c-gamma-max", type=float)
    sens.add_argument("--c-alpha-max", type=float)
    sens.add_argument("--deltas", help="comma-separated bias levels for robustness values")
    sens.add_argument("--benchmark", action="store_true", help="leave-one-covariate-out benchmarks")
    sens.add_argument("--contour-output", help="contour CSV path")

    sim = sub.add_parser("simulate", help="write synthetic datasets", argument_default=argparse.SUPPRESS)
    _add_synth_args(sim)
    sim.add_argument("--output-dir", help="directory for dataset and truth CSVs")

    bench = sub.add_parser("benchmark", help="Monte Carlo comparison of methods",
                           argument_default=argparse.SUPPRESS)
    _add_synth_args(bench)
    bench.add_argument("--methods", help="comma-separated subset of proposed,goodman")
    bench.add_argument("--workers", type=int, help="worker processes")
    bench.add_argument("--no-timing", dest="timing", action="store_false",
                       help="omit the seconds column so outputs are reproducible byte for byte")
    bench.add_argument("--raw-output", help="per-replication CSV path")
    bench.add_argument("--table-output", help="summary table CSV path (method by rmse and coverage)")

    for p in (fit, loc, sens, sim, bench):
        p.add_argument("--config", help="JSON report or config to re-run")
        if p is not sim:
            p.add_argument("--output", help="output path")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then values from ``--config``, then explicit flags."""
    explicit = vars(args).copy()
    command = explicit["command"]
    cfg = {}
    if command in ("fit", "local", "sensitivity"):
        cfg.update(DEFAULTS["common"])
        cfg.update(DEFAULTS.get(command, {}))
    else:
        cfg.update(DEFAULTS["synth"])
        if command == "benchmark":
            cfg.update(DEFAULTS["benchmark"])
    if "config" in explicit:
        try:
            loaded = json.loads(Path(explicit["config"]).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read config {explicit['config']}: {exc}") from exc
        loaded = loaded.get("config", loaded)
        unknown = set(loaded) - set(cfg) - OUTPUT_KEYS
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k not in OUTPUT_KEYS})
    cfg.update(explicit)
    return cfg


def embedded(cfg: dict) -> dict:
    out = {k: v for k, v in sorted(cfg.items()) if k not in OUTPUT_KEYS}
    out["command"] = cfg["command"]
    return out


# ---------------------------------------------------------------------------
# helpers


def _split(text):
    if text is None or text == "":
        return []
    if isinstance(text, (list, tuple)):
        return list(text)
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise InputError(f"missing required option --{k.replace('_', '-')}")


def load_data(cfg):
    _require(cfg, "input", "outcome", "shares")
    schema = ColumnSchema(
        outcome=cfg["outcome"], shares=_split(cfg["shares"]), covariates=_split(cfg["covariates"]),
        size=cfg["size"], id=cfg["id"], categorical=_split(cfg["categorical"]),
    )
    return load_csv(cfg["input"], schema, outcome_bounds=cfg["bounds"])


def basis_from(cfg) -> BasisSpec:
    return BasisSpec(family=cfg["basis"], n_terms=cfg["terms"], degree=cfg["degree"],
                     max_frequency=cfg["max_frequency"], n_knots=cfg["knots"], order=cfg["order"])


def fit_model(cfg, data):
    from .dml import fit_dataset
    from .ridge import default_lambda_grid

    lam = cfg["lam"]
    if isinstance(lam, str) and lam != "auto":
        try:
            lam = float(lam)
        except ValueError as exc:
            raise InputError(f"--lambda must be a number or 'auto', got {lam!r}") from exc
    grid = default_lambda_grid(cfg["lambda_min"], cfg["lambda_max"], cfg["lambda_num"])
    return fit_dataset(data, basis=basis_from(cfg), lam=lam, lambda_grid=grid,
                       weighting=cfg["weighting"], level=cfg["level"])


def write_text(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_csv(frame, path):
    text = frame.to_csv(index=False, lineterminator="\n")
    write_text(path, text)


def _local(cfg, data, model, alpha, unimodal):
    from .local import local_estimates

    loc = local_estimates(model, data.xbar, data.ybar, data.z, bounds=data.outcome_bounds,
                          linear_columns=data.linear_covariates)
    return loc.to_frame(alpha=alpha, unimodal=unimodal, ids=data.ids, group_names=list(data.group_names))


# ---------------------------------------------------------------------------
# commands


def cmd_fit(cfg):
    data = load_data(cfg)
    model = fit_model(cfg, data)
    report = model.result_.to_dict()
    report["config"] = embedded(cfg)
    write_text(cfg.get("output"), dump_json(report))
    if cfg.get("local_output"):
        write_csv(_local(cfg, data, model, cfg["local_alpha"], cfg["unimodal"]), cfg["local_output"])


def cmd_local(cfg):
    data = load_data(cfg)
    model = fit_model(cfg, data)
    write_csv(_local(cfg, data, model, cfg["alpha"], cfg["unimodal"]), cfg.get("output"))


def _parse_grid(text):
    try:
        a, b = str(text).lower().split("x")
        n_g, n_a = int(a), int(b)
    except ValueError as exc:
        raise InputError(f"--grid must look like 50x50, got {text!r}") from exc
    if n_g < 1 or n_a < 1:
        raise InputError("--grid sizes must be positive")
    return n_g, n_a


def cmd_sensitivity(cfg):
    from .sensitivity import benchmark_covariates, sensitivity_report

    data = load_data(cfg)
    if cfg["contrast"] is not None:
        try:
            target = [float(v) for v in _split(cfg["contrast"])]
        except ValueError as exc:
            raise InputError(f"invalid contrast {cfg['contrast']!r}") from exc
        if len(target) != data.d:
            raise InputError(f"contrast has {len(target)} weights but there are {data.d} groups")
    else:
        t = str(cfg["target"])
        if t in data.group_names:
            target = data.group_names.index(t)
        else:
            try:
                target = int(t)
            except ValueError as exc:
                raise InputError(f"unknown target group {t!r}") from exc
            if not 0 <= target < data.d:
                raise InputError(f"target index {target} out of range")
    rho = float(cfg["rho"])
    if not 0 <= rho <= 1:
        raise InputError("--rho must lie in [0, 1]")
    n_g, n_a = _parse_grid(cfg["grid"])
    deltas = None if cfg["deltas"] is None else [float(v) for v in _split(cfg["deltas"])]
    model = fit_model(cfg, data)
    report = sensitivity_report(model, target, rho=rho, deltas=deltas)
    if cfg["benchmark"]:
        lam = model.lambda_ if cfg["lam"] != "auto" else "auto"
        report.benchmarks = benchmark_covariates(
            data, basis_from(cfg), target, lam=lam, weighting=cfg["weighting"], rho=rho,
            full_model=model,
        )
    grid = report.contour_grid(np.linspace(0, cfg["c_gamma_max"], n_g),
                               np.linspace(0, cfg["c_alpha_max"], n_a), rho=rho)
    out = report.to_dict()
    out["groups"] = list(data.group_names)
    out["config"] = embedded(cfg)
    write_text(cfg.get("output"), dump_json(out))
    if cfg.get("contour_output"):
        write_csv(grid, cfg["contour_output"])


def synth_config_from(cfg):
    from .synth import SynthConfig, study1_config, study2_config

    study = int(cfg["study"])
    if study == 1:
        base = study1_config(seed=cfg["seed"]).to_dict()
        default_scale = 0.02
    else:
        base = study2_config(m=1000, d=2, p=3, r2_xz=0.5, seed=cfg["seed"]).to_dict()
        default_scale = 0.005
    for key in ("m", "d", "p", "r2_xz", "r2_bz"):
        if cfg.get(key) is not None:
            base[key] = cfg[key]
    d = int(base["d"])
    if cfg.get("mu_b") is not None:
        base["mu_b"] = [float(v) for v in _split(cfg["mu_b"])]
    elif len(base["mu_b"]) != d:
        base["mu_b"] = np.linspace(0.3, 0.7, d).tolist()
    scale = cfg.get("sigma_b_scale")
    if scale is not None or len(base["sigma_b"]) != d:
        scale = default_scale if scale is None else float(scale)
        base["sigma_b"] = (scale * (np.eye(d) + np.ones((d, d)))).tolist()
    try:
        return SynthConfig.from_dict(base)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def cmd_simulate(cfg):
    from .synth import generate

    config = synth_config_from(cfg)
    out_dir = Path(cfg.get("output_dir") or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    for rep in range(int(cfg["reps"])):
        sd = generate(config.with_seed(config.seed + rep))
        sd.write(out_dir / f"data_{rep:04d}.csv", out_dir / f"truth_{rep:04d}.csv")
    write_text(out_dir / "simulate.json", dump_json({"config": embedded(cfg), "synth": config.to_dict()}))


def cmd_benchmark(cfg):
    from .benchmark import METHODS, run_benchmark, summarize

    config = synth_config_from(cfg)
    methods = _split(cfg["methods"])
    bad = set(methods) - set(METHODS)
    if bad:
        raise InputError(f"unknown methods: {sorted(bad)}")
    raw = run_benchmark(config, int(cfg["reps"]), methods, workers=int(cfg.get("workers", 1)))
    summary = summarize(raw, timing=cfg["timing"])
    if cfg.get("raw_output"):
        # wall-clock times vary between runs; they appear only in the summary
        write_csv(raw.drop(columns="seconds"), cfg["raw_output"])
    if cfg.get("table_output"):
        write_csv(summary, cfg["table_output"])
    out = {"summary": summary.to_dict(orient="records"), "config": embedded(cfg),
           "synth": config.to_dict()}
    write_text(cfg.get("output"), dump_json(out))


COMMANDS = {"fit": cmd_fit, "local": cmd_local, "sensitivity": cmd_sensitivity,
            "simulate": cmd_simulate, "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[cfg["command"]](cfg)
    except (InputError, DataValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RankDeficiencyError, ConvergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
