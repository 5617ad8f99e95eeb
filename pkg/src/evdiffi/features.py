"""Session -> 22-feature tabular representation.

Signal statistics follow these conventions:

- moments are population moments (no bias correction);
- skewness is the Fisher-Pearson coefficient, kurtosis is excess kurtosis;
- any zero-variance input yields 0 for skewness, kurtosis, correlation and
  correlation lag, so downstream models never see NaN.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import SessionRecord

FEATURE_NAMES: tuple[str, ...] = (
    "P_mean",
    "E_mean",
    "T_mean",
    "co2_kg",
    "duration_s",
    "Corr_PT",
    "P_std",
    "T_std",
    "P_max",
    "T_max",
    "P_min",
    "T_min",
    "P_absdiff",
    "T_absdiff",
    "P_skew",
    "T_skew",
    "P_kurt",
    "T_kurt",
    "P_npeaks",
    "T_npeaks",
    "P_corrlag",
    "T_corrlag",
)

_INV_E = math.exp(-1.0)


class FeatureError(ValueError):
    pass


def _as_array(values: Sequence[float], min_len: int) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < min_len:
        raise FeatureError(f"need a 1-D sequence of length >= {min_len}, got shape {x.shape}")
    return x


def _is_constant(x: np.ndarray) -> bool:
    return bool(x.max() == x.min())


def _central_moments(x: np.ndarray) -> tuple[float, float, float]:
    dev = x - x.mean()
    dev2 = dev * dev
    return float(dev2.mean()), float((dev2 * dev).mean()), float((dev2 * dev2).mean())


def skewness(values: Sequence[float]) -> float:
    """Fisher-Pearson skewness ``m3 / m2**1.5``; 0 for a constant sequence."""
    x = _as_array(values, 3)
    if _is_constant(x):
        return 0.0
    m2, m3, _ = _central_moments(x)
    if m2 == 0.0:
        return 0.0
    return m3 / m2**1.5


def kurtosis(values: Sequence[float]) -> float:
    """Excess kurtosis ``m4 / m2**2 - 3``; 0 for a constant sequence."""
    x = _as_array(values, 3)
    if _is_constant(x):
        return 0.0
    m2, _, m4 = _central_moments(x)
    if m2 == 0.0:
        return 0.0
    return m4 / (m2 * m2) - 3.0


def abs_diff(values: Sequence[float]) -> float:
    """Mean absolute successive difference."""
    x = _as_array(values, 2)
    return float(np.abs(np.diff(x)).mean())


def count_peaks(values: Sequence[float]) -> int:
    """Number of strict interior local maxima (plateaus do not count)."""
    x = _as_array(values, 3)
    mid = x[1:-1]
    return int(np.count_nonzero((x[:-2] < mid) & (mid > x[2:])))


def autocorr_lag(values: Sequence[float]) -> int:
    """Smallest lag in ``[1, N // 2]`` where the biased autocorrelation drops below 1/e.

    Returns ``N // 2`` if it never does, and 0 for a constant input.
    """
    x = _as_array(values, 3)
    if _is_constant(x):
        return 0
    dev = x - x.mean()
    denom = float(dev @ dev)
    if denom == 0.0:
        return 0
    n = x.size
    max_lag = n // 2
    for lag in range(1, max_lag + 1):
        if float(dev[:-lag] @ dev[lag:]) / denom < _INV_E:
            return lag
    return max_lag


def pearson_corr(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation, 0 if either input has zero variance."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise FeatureError(f"length mismatch: {x.shape} vs {y.shape}")
    _as_array(x, 3)
    if _is_constant(x) or _is_constant(y):
        return 0.0
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def _signal_stats(x: np.ndarray) -> dict[str, float]:
    return {
        "mean": float(x.mean()),
        "std": 0.0 if _is_constant(x) else float(x.std()),
        "max": float(x.max()),
        "min": float(x.min()),
        "absdiff": abs_diff(x),
        "skew": skewness(x),
        "kurt": kurtosis(x),
        "npeaks": float(count_peaks(x)),
        "corrlag": float(autocorr_lag(x)),
    }


def extract(session: SessionRecord) -> np.ndarray:
    """Feature vector for one session, ordered as :data:`FEATURE_NAMES`."""
    p = session.power.values
    t = session.temperature.values
    ps = _signal_stats(p)
    ts = _signal_stats(t)
    row = {
        "P_mean": ps["mean"],
        "E_mean": float(session.energy_kwh),
        "T_mean": ts["mean"],
        "co2_kg": float(session.co2_kg),
        "duration_s": session.duration_s,
        "Corr_PT": pearson_corr(p, t),
    }
    for stat in ("std", "max", "min", "absdiff", "skew", "kurt", "npeaks", "corrlag"):
        row[f"P_{stat}"] = ps[stat]
        row[f"T_{stat}"] = ts[stat]
    return np.array([row[name] for name in FEATURE_NAMES], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Dataset of ``n`` points in ``d`` named dimensions."""

    schema: tuple[str, ...]
    values: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim == 1 and vals.size == 0:
            vals = vals.reshape(0, len(self.schema))
        if vals.ndim != 2 or vals.shape[1] != len(self.schema):
            raise ValueError(f"values shape {vals.shape} does not match schema of {len(self.schema)}")
        if vals.shape[0] != len(self.ids):
            raise ValueError(f"{vals.shape[0]} rows but {len(self.ids)} ids")
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def select(self, columns: Sequence[int]) -> FeatureMatrix:
        cols = list(columns)
        return FeatureMatrix(tuple(self.schema[c] for c in cols), self.values[:, cols], self.ids)

    @classmethod
    def from_arrays(cls, values: np.ndarray, schema: Sequence[str] | None = None, ids: Sequence[str] | None = None) -> FeatureMatrix:
        values = np.asarray(values, dtype=np.float64)
        if schema is None:
            schema = tuple(f"f{j}" for j in range(values.shape[1]))
        if ids is None:
            ids = tuple(str(i) for i in range(values.shape[0]))
        return cls(tuple(schema), values, tuple(ids))


def extract_all(sessions: Iterable[SessionRecord]) -> FeatureMatrix:
    sessions = list(sessions)
    rows = [extract(s) for s in sessions]
    values = np.vstack(rows) if rows else np.empty((0, len(FEATURE_NAMES)))
    return FeatureMatrix(FEATURE_NAMES, values, tuple(s.session_id for s in sessions))


def write_features(fm: FeatureMatrix, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("session_id",) + fm.schema)
        for sid, row in zip(fm.ids, fm.values):
            w.writerow([sid] + [repr(float(v)) for v in row])


def read_features(path: str | Path, schema: Sequence[str] | None = None) -> FeatureMatrix:
    """Read a ``features.csv``.

    If ``schema`` is given the file's columns must match it exactly (same
    names, same order); a mismatch raises :class:`FeatureError`.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "session_id" or len(header) < 2:
            raise FeatureError(f"{path}: header must start with session_id and name at least one feature")
        names = tuple(h.strip() for h in header[1:])
        if schema is not None and names != tuple(schema):
            missing = [c for c in schema if c not in names]
            raise FeatureError(f"{path}: schema mismatch (missing {missing}, got {list(names)})")
        ids: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FeatureError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise FeatureError(f"{path}:{lineno}: {exc}") from exc
            if not all(math.isfinite(v) for v in vals):
                raise FeatureError(f"{path}:{lineno}: non-finite feature value")
            ids.append(row[0])
            rows.append(vals)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return FeatureMatrix(names, values, tuple(ids))
