"""Aggregate (ecological) data: validation, CSV/JSON ingestion, and the
group-size weighting function."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

SHARE_SUM_TOL = 1e-9
RENORMALIZE_TOL = 1e-6
BND_WARN_THRESHOLD = 50.0


class DataValidationError(ValueError):
    """Raised when aggregate data violate a structural requirement."""


@dataclass(frozen=True)
class GeographyRecord:
    ybar: float
    xbar: np.ndarray
    z: np.ndarray
    n: float = 1.0
    id: object = None


@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from CSV columns to the roles they play.

    ``categorical`` columns are expanded to one-hot indicators (first level
    dropped) that enter the sieve linearly.
    """

    outcome: str
    shares: Sequence[str]
    covariates: Sequence[str] = ()
    size: Optional[str] = None
    id: Optional[str] = None
    categorical: Sequence[str] = ()

    def to_dict(self):
        return {
            "outcome": self.outcome,
            "shares": list(self.shares),
            "covariates": list(self.covariates),
            "size": self.size,
            "id": self.id,
            "categorical": list(self.categorical),
        }


@dataclass(frozen=True, eq=False)
class AggregateDataset:
    """Per-geography aggregate observations.

    Parameters
    ----------
    ybar : ndarray of shape (m,)
        Outcome mean in each geography.
    xbar : ndarray of shape (m, d)
        Group shares; each row lies on the simplex.
    z : ndarray of shape (m, p)
        Geography-level covariates (``p`` may be 0).
    n : ndarray of shape (m,)
        Population sizes, strictly positive.
    """

    ybar: np.ndarray
    xbar: np.ndarray
    z: np.ndarray
    n: np.ndarray
    ids: np.ndarray
    group_names: tuple
    covariate_names: tuple
    outcome_bounds: Optional[tuple] = None
    linear_covariates: tuple = field(default=())

    def __post_init__(self):
        ybar = np.asarray(self.ybar, dtype=float).reshape(-1)
        xbar = np.asarray(self.xbar, dtype=float)
        if xbar.ndim == 1:
            xbar = xbar[:, None]
        m = ybar.shape[0]
        z = np.asarray(self.z, dtype=float)
        if z.size == 0:
            z = np.zeros((m, 0))
        elif z.ndim == 1:
            z = z[:, None]
        n = np.asarray(self.n, dtype=float).reshape(-1)
        ids = np.asarray(self.ids, dtype=object).reshape(-1)

        if m < 2:
            raise DataValidationError("need at least 2 geographies")
        if xbar.shape[0] != m or z.shape[0] != m or n.shape[0] != m or ids.shape[0] != m:
            raise DataValidationError("inconsistent number of rows across fields")
        d = xbar.shape[1]
        if d < 1:
            raise DataValidationError("need at least one group")
        for name, arr in (("ybar", ybar), ("xbar", xbar), ("z", z), ("n", n)):
            if not np.all(np.isfinite(arr)):
                raise DataValidationError(f"non-finite value in {name}")
        if np.any(xbar < 0) or np.any(xbar > 1):
            raise DataValidationError("share outside [0, 1]")
        bad = np.abs(xbar.sum(axis=1) - 1.0) > SHARE_SUM_TOL
        if np.any(bad):
            raise DataValidationError(
                f"share-sum violation in row {int(np.flatnonzero(bad)[0])}"
            )
        if np.any(n <= 0):
            raise DataValidationError("nonpositive population size n")
        if self.outcome_bounds is not None:
            lo, hi = (float(b) for b in self.outcome_bounds)
            if not lo < hi:
                raise DataValidationError("outcome bounds must satisfy lo < hi")
            if np.any(ybar < lo) or np.any(ybar > hi):
                raise DataValidationError(f"ybar outside declared bounds [{lo}, {hi}]")
            object.__setattr__(self, "outcome_bounds", (lo, hi))

        group_names = tuple(self.group_names) or tuple(f"x{j}" for j in range(d))
        cov_names = tuple(self.covariate_names) or tuple(f"z{k}" for k in range(z.shape[1]))
        if len(group_names) != d or len(cov_names) != z.shape[1]:
            raise DataValidationError("name lists do not match data dimensions")
        linear = tuple(bool(v) for v in self.linear_covariates) or (False,) * z.shape[1]
        if len(linear) != z.shape[1]:
            raise DataValidationError("linear_covariates must have one flag per covariate")

        for arr in (ybar, xbar, z, n):
            arr.setflags(write=False)
        object.__setattr__(self, "ybar", ybar)
        object.__setattr__(self, "xbar", xbar)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "group_names", group_names)
        object.__setattr__(self, "covariate_names", cov_names)
        object.__setattr__(self, "linear_covariates", linear)

    @classmethod
    def from_arrays(cls, ybar, xbar, z=None, n=None, ids=None, group_names=(),
                    covariate_names=(), outcome_bounds=None, linear_covariates=()):
        ybar = np.asarray(ybar, dtype=float).reshape(-1)
        m = ybar.shape[0]
        return cls(
            ybar=ybar,
            xbar=xbar,
            z=np.zeros((m, 0)) if z is None else z,
            n=np.ones(m) if n is None else n,
            ids=np.arange(m) if ids is None else ids,
            group_names=tuple(group_names),
            covariate_names=tuple(covariate_names),
            outcome_bounds=outcome_bounds,
            linear_covariates=tuple(linear_covariates),
        )

    @property
    def m(self) -> int:
        return self.ybar.shape[0]

    @property
    def d(self) -> int:
        return self.xbar.shape[1]

    @property
    def p(self) -> int:
        return self.z.shape[1]

    @property
    def records(self):
        return [
            GeographyRecord(float(self.ybar[g]), self.xbar[g], self.z[g], float(self.n[g]), self.ids[g])
            for g in range(self.m)
        ]

    def subset(self, index) -> "AggregateDataset":
        index = np.asarray(index)
        return AggregateDataset(
            ybar=self.ybar[index], xbar=self.xbar[index], z=self.z[index],
            n=self.n[index], ids=self.ids[index], group_names=self.group_names,
            covariate_names=self.covariate_names, outcome_bounds=self.outcome_bounds,
            linear_covariates=self.linear_covariates,
        )

    def drop_covariates(self, columns) -> "AggregateDataset":
        keep = [k for k in range(self.p) if k not in set(columns)]
        return AggregateDataset(
            ybar=self.ybar, xbar=self.xbar, z=self.z[:, keep], n=self.n, ids=self.ids,
            group_names=self.group_names,
            covariate_names=tuple(self.covariate_names[k] for k in keep),
            outcome_bounds=self.outcome_bounds,
            linear_covariates=tuple(self.linear_covariates[k] for k in keep),
        )

    def with_ybar(self, ybar) -> "AggregateDataset":
        return AggregateDataset(
            ybar=ybar, xbar=self.xbar, z=self.z, n=self.n, ids=self.ids,
            group_names=self.group_names, covariate_names=self.covariate_names,
            outcome_bounds=None, linear_covariates=self.linear_covariates,
        )

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "ybar": self.ybar.tolist(),
            "xbar": self.xbar.tolist(),
            "z": self.z.tolist(),
            "n": self.n.tolist(),
            "ids": [_jsonable(v) for v in self.ids],
            "group_names": list(self.group_names),
            "covariate_names": list(self.covariate_names),
            "outcome_bounds": None if self.outcome_bounds is None else list(self.outcome_bounds),
            "linear_covariates": list(self.linear_covariates),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AggregateDataset":
        m = len(obj["ybar"])
        p = len(obj.get("covariate_names", []))
        z = np.asarray(obj.get("z", []), dtype=float).reshape(m, p)
        bounds = obj.get("outcome_bounds")
        return cls(
            ybar=obj["ybar"], xbar=obj["xbar"], z=z, n=obj.get("n", np.ones(m)),
            ids=obj.get("ids", list(range(m))), group_names=tuple(obj.get("group_names", ())),
            covariate_names=tuple(obj.get("covariate_names", ())),
            outcome_bounds=None if bounds is None else tuple(bounds),
            linear_covariates=tuple(obj.get("linear_covariates", ())),
        )

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_json(cls, path) -> "AggregateDataset":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def _numeric_column(frame: pd.DataFrame, col: str) -> np.ndarray:
    if col not in frame.columns:
        raise DataValidationError(f"missing column: {col}")
    values = pd.to_numeric(frame[col], errors="coerce")
    bad = values.isna() & ~frame[col].isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataValidationError(f"non-numeric cell in column {col}, row {row}")
    if values.isna().any():
        row = int(np.flatnonzero(values.isna().to_numpy())[0])
        raise DataValidationError(f"missing value in column {col}, row {row}")
    # exact decimal-to-double parsing so written datasets read back bit for bit
    return np.array([float(v) for v in frame[col].to_numpy()], dtype=float)


def normalize_shares(xbar: np.ndarray, tol: float = RENORMALIZE_TOL) -> np.ndarray:
    """Renormalize share rows whose sum is within ``tol`` of one; reject others."""
    xbar = np.asarray(xbar, dtype=float)
    sums = xbar.sum(axis=1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        g = int(np.flatnonzero(bad)[0])
        raise DataValidationError(f"share-sum violation in row {g}: shares sum to {float(sums[g]):.12g}")
    # rows already on the simplex up to rounding are left untouched
    fix = np.abs(sums - 1.0) > 1e-12
    out = xbar.copy()
    out[fix] /= sums[fix, None]
    return out


def from_frame(frame: pd.DataFrame, schema: ColumnSchema, outcome_bounds=None) -> AggregateDataset:
    """Build a validated dataset from a data frame according to ``schema``."""
    if not schema.shares:
        raise DataValidationError("schema must name at least one share column")
    ybar = _numeric_column(frame, schema.outcome)
    xbar = np.column_stack([_numeric_column(frame, c) for c in schema.shares])
    if np.any(xbar < 0):
        raise DataValidationError("negative share")
    xbar = normalize_shares(xbar)

    cols, names, linear = [], [], []
    for c in schema.covariates:
        cols.append(_numeric_column(frame, c))
        names.append(c)
        linear.append(False)
    for c in schema.categorical:
        if c not in frame.columns:
            raise DataValidationError(f"missing column: {c}")
        if frame[c].isna().any():
            raise DataValidationError(f"missing value in column {c}")
        levels = sorted(frame[c].astype(str).unique())
        for level in levels[1:]:
            cols.append((frame[c].astype(str) == level).to_numpy(dtype=float))
            names.append(f"{c}={level}")
            linear.append(True)
    m = len(frame)
    z = np.column_stack(cols) if cols else np.zeros((m, 0))

    n = np.ones(m) if schema.size is None else _numeric_column(frame, schema.size)
    if np.any(n <= 0):
        raise DataValidationError(f"nonpositive n in column {schema.size}")
    if schema.id is not None:
        if schema.id not in frame.columns:
            raise DataValidationError(f"missing column: {schema.id}")
        ids = frame[schema.id].to_numpy(dtype=object)
    else:
        ids = np.arange(m)
    return AggregateDataset(
        ybar=ybar, xbar=xbar, z=z, n=n, ids=ids,
        group_names=tuple(schema.shares), covariate_names=tuple(names),
        outcome_bounds=None if outcome_bounds is None else tuple(outcome_bounds),
        linear_covariates=tuple(linear),
    )


def load_csv(path, schema: ColumnSchema, outcome_bounds=None) -> AggregateDataset:
    """Read a UTF-8 CSV with a header row and validate it against ``schema``."""
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"file not found: {path}")
    frame = pd.read_csv(path, encoding="utf-8", dtype=str, keep_default_na=True)
    return from_frame(frame, schema, outcome_bounds=outcome_bounds)


def save_csv(data: AggregateDataset, path, outcome: str = "ybar", size: str = "n",
             id_column: str = "id") -> ColumnSchema:
    """Write ``data`` as CSV and return the schema that reads it back.

    Only datasets without categorical expansions round-trip exactly; one-hot
    columns are written as plain numeric covariates.
    """
    frame = pd.DataFrame({id_column: data.ids})
    frame[outcome] = data.ybar
    for j, name in enumerate(data.group_names):
        frame[name] = data.xbar[:, j]
    for k, name in enumerate(data.covariate_names):
        frame[name] = data.z[:, k]
    frame[size] = data.n
    # repr-precision floats so the round trip is exact
    frame.to_csv(path, index=False, float_format=None)
    return ColumnSchema(
        outcome=outcome, shares=list(data.group_names), covariates=list(data.covariate_names),
        size=size, id=id_column,
    )


def compute_u(data: AggregateDataset, group: int) -> np.ndarray:
    """Size weights ``u_gj = n_g xbar_gj / mean(n xbar_j)`` for one group."""
    if not 0 <= group < data.d:
        raise IndexError(f"group index {group} out of range for d={data.d}")
    mass = data.n * data.xbar[:, group]
    total = mass.mean()
    if total <= 0:
        raise DataValidationError(f"group absent: {data.group_names[group]} has zero mass")
    return mass / total


def compute_u_matrix(data: AggregateDataset) -> np.ndarray:
    return np.column_stack([compute_u(data, j) for j in range(data.d)])


def bnd_diagnostic(data: AggregateDataset, threshold: float = BND_WARN_THRESHOLD) -> np.ndarray:
    """Largest size weight per group; warns when any exceeds ``threshold``."""
    out = np.array([compute_u(data, j).max() for j in range(data.d)])
    if np.any(out > threshold):
        warnings.warn(
            f"a single geography dominates some group (max u = {out.max():.3g})",
            RuntimeWarning, stacklevel=2,
        )
    return out
