"""Isolation Forest anomaly detection with DIFFI explanations for EV charging sessions."""

from .diffi_global import GfiReport, SelectionResult, compute_gfi, iic, multi_run_gfi, select_features
from .diffi_local import LocalExplanation, RankDistribution, explain, local_diffi, rank_distribution
from .features import FEATURE_NAMES, FeatureMatrix, extract, extract_all
from .forest import ForestParams, IsolationForest, ScoreReport, avg_path_adjustment, fit, load, save
from .ingest import SessionRecord, SignalSeries, align_signals, parse_sessions
from .synth import AnomalySpec, synth_generate

__version__ = "0.1.0"

__all__ = [
    "FEATURE_NAMES",
    "AnomalySpec",
    "FeatureMatrix",
    "ForestParams",
    "GfiReport",
    "IsolationForest",
    "LocalExplanation",
    "RankDistribution",
    "ScoreReport",
    "SelectionResult",
    "SessionRecord",
    "SignalSeries",
    "align_signals",
    "avg_path_adjustment",
    "compute_gfi",
    "explain",
    "extract",
    "extract_all",
    "fit",
    "iic",
    "load",
    "local_diffi",
    "multi_run_gfi",
    "parse_sessions",
    "rank_distribution",
    "save",
    "select_features",
    "synth_generate",
]
