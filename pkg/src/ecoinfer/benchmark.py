"""Monte Carlo harness: repeated synthetic datasets, error and coverage."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from typing import Sequence

import numpy as np
import pandas as pd

from .dml import fit_dataset, goodman
from .sieve import BasisSpec
from .synth import SynthConfig, generate

METHODS = ("proposed", "goodman")
LEVELS = (0.5, 0.95)


def run_replication(config: SynthConfig, rep: int, methods: Sequence[str] = METHODS,
                    basis: BasisSpec = BasisSpec("linear")) -> list:
    """Fit each method on the dataset drawn with seed ``config.seed + rep``.

    Returns one record per (method, group).
    """
    sd = generate(config.with_seed(config.seed + rep))
    rows = []
    for method in methods:
        start = time.perf_counter()
        if method == "proposed":
            result = fit_dataset(sd.data, basis=basis).result_
        elif method == "goodman":
            result = goodman(sd.data)
        else:
            raise ValueError(f"unknown method {method!r}")
        seconds = time.perf_counter() - start
        bounds = {level: result.ci(level) for level in LEVELS}
        for j in range(sd.data.d):
            truth = float(sd.beta_true[j])
            row = {
                "rep": rep, "method": method, "group": j,
                "estimate": float(result.beta[j]), "truth": truth,
                "std_error": float(result.std_errors[j]),
                "error": float(result.beta[j]) - truth,
                "seconds": seconds,
            }
            for level, (lo, hi) in bounds.items():
                row[f"cover{int(round(level * 100))}"] = bool(lo[j] <= truth <= hi[j])
            rows.append(row)
    return rows


def _replication_task(args):
    config, rep, methods, basis = args
    return run_replication(config, rep, methods, basis)


def run_benchmark(config: SynthConfig, reps: int, methods: Sequence[str] = METHODS, workers: int = 1,
                  basis: BasisSpec = BasisSpec("linear")) -> pd.DataFrame:
    """Per-replication records, ordered by replication index regardless of ``workers``."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    tasks = [(config, rep, tuple(methods), basis) for rep in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replication_task, tasks))
    else:
        results = [_replication_task(t) for t in tasks]
    rows = [row for chunk in results for row in chunk]
    return pd.DataFrame(rows).sort_values(["rep", "method", "group"], kind="stable").reset_index(drop=True)


def summarize(raw: pd.DataFrame, timing: bool = True) -> pd.DataFrame:
    """RMSE and coverage averaged over groups and replications, per method."""
    out = []
    for method, frame in raw.groupby("method", sort=False):
        row = {
            "method": method,
            "rmse": float(np.sqrt(np.mean(frame["error"] ** 2))),
            "cover50": float(frame["cover50"].mean()),
            "cover95": float(frame["cover95"].mean()),
            "reps": int(frame["rep"].nunique()),
        }
        if timing:
            row["seconds"] = float(frame.drop_duplicates("rep")["seconds"].mean())
        out.append(row)
    return pd.DataFrame(out)
