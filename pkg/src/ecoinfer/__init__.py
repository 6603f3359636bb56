"""Debiased ecological inference from aggregate data."""

from .dataset import AggregateDataset, ColumnSchema, DataValidationError, compute_u, load_csv, save_csv
from .dml import EcoDML, EstimateResult, GoodmanRegression, estimate, goodman
from .sieve import BasisSpec, SieveBasis, SieveDesign

__version__ = "0.1.0"

__all__ = [
    "AggregateDataset",
    "BasisSpec",
    "ColumnSchema",
    "DataValidationError",
    "EcoDML",
    "EstimateResult",
    "GoodmanRegression",
    "SieveBasis",
    "SieveDesign",
    "compute_u",
    "estimate",
    "goodman",
    "load_csv",
    "save_csv",
]
