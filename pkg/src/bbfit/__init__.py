"""Batchwise backfitting for distributional regression."""

from .datastore import ColumnStore, ECDFTransformer, ingest_csv, make_batches
from .engine import FitOptions, FitResult, ModelSpec, build_model, fit, fit_two_stage
from .estimator import BatchwiseBackfittingRegressor
from .evaluate import EvalReport, crps, evaluate
from .families import get_family

__version__ = "0.1.0"

__all__ = [
    "BatchwiseBackfittingRegressor",
    "ColumnStore",
    "ECDFTransformer",
    "EvalReport",
    "FitOptions",
    "FitResult",
    "ModelSpec",
    "build_model",
    "crps",
    "evaluate",
    "fit",
    "fit_two_stage",
    "get_family",
    "ingest_csv",
    "make_batches",
]
