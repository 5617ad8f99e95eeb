"""Synthetic charging-session corpora with planted anomalies.

Nominal sessions sample power and temperature once a minute. Power follows a
ramp-plateau-taper profile resembling constant-current/constant-voltage
charging; temperature follows the delivered power through a first-order
thermal lag, starting from ambient. Both carry Gaussian sensor noise, with a
per-session temperature noise level.

All randomness comes from a single ``numpy.random.Generator`` (PCG64) seeded
with the integer ``seed``, so corpora are reproducible across runs and
platforms.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMatrix
from .ingest import SessionRecord, SignalSeries, parse_timestamp

TEMPERATURE_SPIKE = "temperature_spike"
POWER_OSCILLATION = "power_oscillation"
TRUNCATED_SESSION = "truncated_session"
POWER_DROPOUT = "power_dropout"
ANOMALY_KINDS = (TEMPERATURE_SPIKE, POWER_OSCILLATION, TRUNCATED_SESSION, POWER_DROPOUT)

# Features each anomaly kind is expected to move the most.
EXPECTED_FEATURES: dict[str, frozenset[str]] = {
    TEMPERATURE_SPIKE: frozenset({"T_kurt", "T_npeaks", "T_std", "T_max"}),
    POWER_OSCILLATION: frozenset({"P_absdiff", "P_npeaks", "P_corrlag", "P_std", "P_kurt"}),
    TRUNCATED_SESSION: frozenset({"duration_s", "E_mean", "co2_kg", "P_npeaks", "T_npeaks", "P_kurt", "P_skew"}),
    POWER_DROPOUT: frozenset({"P_min", "P_std", "P_kurt", "P_skew", "P_absdiff"}),
}

_HINTS = {
    TEMPERATURE_SPIKE: "T_kurt",
    POWER_OSCILLATION: "P_absdiff",
    TRUNCATED_SESSION: "duration_s",
    POWER_DROPOUT: "P_min",
}


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    target_feature_hint: str = ""
    magnitude: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.kind!r}")
        if not self.magnitude > 0:
            raise ValueError(f"magnitude must be > 0, got {self.magnitude}")
        if not self.target_feature_hint:
            object.__setattr__(self, "target_feature_hint", _HINTS[self.kind])

    @property
    def expected_features(self) -> frozenset[str]:
        return EXPECTED_FEATURES[self.kind]


DEFAULT_ANOMALIES = tuple(AnomalySpec(kind) for kind in ANOMALY_KINDS)


@dataclass(frozen=True)
class SynthConfig:
    sample_period_s: int = 60
    min_samples: int = 60
    max_samples: int = 180
    n_stations: int = 8
    rate_kw: tuple[float, float] = (7.0, 22.0)
    ambient_c: tuple[float, float] = (-5.0, 35.0)
    heating_c: tuple[float, float] = (6.0, 14.0)
    thermal_lag: tuple[float, float] = (10.0, 30.0)  # samples
    power_noise: float = 0.02  # relative to the plateau rate
    temperature_noise_c: tuple[float, float] = (0.05, 2.0)  # per-session sensor noise
    co2_kg_per_kwh: float = 0.256
    epoch: str = "2022-01-01T00:00:00Z"
    span_days: int = 900


@dataclass
class SynthCorpus:
    sessions: list[SessionRecord]
    labels: np.ndarray
    injected: list[AnomalySpec | None] = field(default_factory=list)

    def labels_csv(self) -> str:
        lines = ["session_id,label,kind"]
        for s, y, a in zip(self.sessions, self.labels, self.injected):
            lines.append(f"{s.session_id},{int(y)},{a.kind if a else ''}")
        return "\n".join(lines) + "\n"


def _nominal_power(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    ramp = int(rng.integers(1, 4))
    taper_start = int(n * rng.uniform(0.65, 0.8))
    p = np.full(n, rate)
    p[:ramp] = rate * np.linspace(0.4, 1.0, ramp, endpoint=False)
    tail = np.arange(n - taper_start)
    p[taper_start:] = rate * (0.3 + 0.7 * np.exp(-tail / max(1.0, (n - taper_start) / 3.0)))
    return p


def _thermal_response(power: np.ndarray, rate: float, ambient: float, heating: float, tau: float) -> np.ndarray:
    """First-order thermal lag driven by the delivered power."""
    load = power / rate
    out = np.empty(power.size)
    y = 0.0
    for i, u in enumerate(load):
        y += (u - y) / tau
        out[i] = y
    return ambient + heating * out


def _inject_power(kind: str, magnitude: float, power: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    n = power.size
    power = power.copy()
    if kind == POWER_OSCILLATION:
        period = rng.uniform(3.0, 5.0)
        start = n // 10
        t = np.arange(n - start)
        power[start:] += magnitude * 0.25 * rate * np.sin(2 * math.pi * t / period)
    elif kind == POWER_DROPOUT:
        width = min(n - 2, max(3, int(n * 0.25 * magnitude)))
        start = int(rng.integers(1, n - width))
        power[start : start + width] = rate * 0.01 * rng.uniform(0.0, 1.0, size=width)
    return power


def _inject_temperature(kind: str, magnitude: float, temperature: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = temperature.size
    temperature = temperature.copy()
    if kind == TEMPERATURE_SPIKE:
        # glitches come in up/down pairs
        n_pairs = int(rng.integers(1, 3))
        for j, pos in enumerate(rng.choice(np.arange(2, n - 2), size=2 * n_pairs, replace=False)):
            temperature[pos] += (-1) ** j * magnitude * rng.uniform(15.0, 25.0)
    return temperature


def synth_generate(
    n_sessions: int,
    contamination: float,
    anomalies: Sequence[AnomalySpec] = DEFAULT_ANOMALIES,
    seed: int = 0,
    config: SynthConfig | None = None,
) -> SynthCorpus:
    """Generate ``n_sessions`` sessions, ``round(contamination * n)`` of them anomalous.

    Anomalous sessions are chosen at random; kinds are assigned by cycling
    through ``anomalies`` in order.
    """
    if n_sessions < 1:
        raise ValueError("n_sessions must be positive")
    if not 0.0 < contamination < 1.0:
        raise ValueError("contamination must lie in (0, 1)")
    n_anom = int(math.floor(contamination * n_sessions + 0.5))
    if contamination * n_sessions < 1 or n_anom < 1:
        raise ValueError("contamination * n_sessions must be >= 1")
    if not anomalies:
        raise ValueError("need at least one AnomalySpec")
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)

    anomalous = np.sort(rng.choice(n_sessions, size=n_anom, replace=False))
    injected: list[AnomalySpec | None] = [None] * n_sessions
    for i, idx in enumerate(anomalous):
        injected[idx] = anomalies[i % len(anomalies)]

    epoch_us = parse_timestamp(cfg.epoch)
    dt_us = cfg.sample_period_s * 1_000_000
    width = len(str(n_sessions - 1))
    sessions: list[SessionRecord] = []
    for i in range(n_sessions):
        n = int(rng.integers(cfg.min_samples, cfg.max_samples + 1))
        rate = rng.uniform(*cfg.rate_kw)
        spec = injected[i]
        power = _nominal_power(n, rate, rng)
        if spec is not None:
            power = _inject_power(spec.kind, spec.magnitude, power, rate, rng)
        temperature = _thermal_response(
            power, rate, rng.uniform(*cfg.ambient_c), rng.uniform(*cfg.heating_c), rng.uniform(*cfg.thermal_lag)
        )
        power = np.maximum(power + rng.normal(0.0, cfg.power_noise * rate, size=n), 0.0)
        temperature = temperature + rng.normal(0.0, rng.uniform(*cfg.temperature_noise_c), size=n)
        if spec is not None:
            temperature = _inject_temperature(spec.kind, spec.magnitude, temperature, rng)
            if spec.kind == TRUNCATED_SESSION:
                keep = min(n, max(3, int(round(rng.uniform(12, 20) / spec.magnitude))))
                power, temperature = power[:keep], temperature[:keep]
        n = power.size
        start_us = epoch_us + int(rng.integers(0, cfg.span_days * 1440)) * 60_000_000
        ts = start_us + dt_us * np.arange(n, dtype=np.int64)
        energy = float(power.sum()) * cfg.sample_period_s / 3600.0
        co2 = energy * cfg.co2_kg_per_kwh * (1.0 + rng.normal(0.0, 0.01))
        sessions.append(
            SessionRecord(
                session_id=f"S{i:0{width}d}",
                station_id=f"ST{int(rng.integers(cfg.n_stations)) + 1:02d}",
                start_time=int(ts[0]),
                end_time=int(ts[-1]) + dt_us,
                energy_kwh=energy,
                co2_kg=max(co2, 0.0),
                power=SignalSeries(ts, power),
                temperature=SignalSeries(ts, temperature),
            )
        )
    labels = np.array([0 if a is None else 1 for a in injected], dtype=np.int64)
    return SynthCorpus(sessions, labels, injected)


def planted_matrix(
    n: int,
    d: int,
    contamination: float,
    feature: int | None = 0,
    seed: int = 0,
    shift: tuple[float, float] = (6.0, 10.0),
) -> tuple[FeatureMatrix, np.ndarray, np.ndarray]:
    """Standard-normal data where every anomaly deviates in a single feature.

    The deviating coordinate is replaced by ``+-U(shift)``. With ``feature``
    set, all anomalies use that feature; with ``None`` each anomaly draws its
    own. Returns the matrix, 0/1 labels and the planted feature per row
    (-1 for inliers).
    """
    if feature is not None and not 0 <= feature < d:
        raise ValueError(f"feature must lie in [0, {d}), got {feature}")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    n_anom = max(1, int(math.floor(contamination * n + 0.5)))
    idx = rng.choice(n, size=n_anom, replace=False)
    feats = np.full(n_anom, feature) if feature is not None else rng.integers(d, size=n_anom)
    signs = rng.choice([-1.0, 1.0], size=n_anom)
    X[idx, feats] = signs * rng.uniform(*shift, size=n_anom)
    labels = np.zeros(n, dtype=np.int64)
    labels[idx] = 1
    planted = np.full(n, -1, dtype=np.int64)
    planted[idx] = feats
    return FeatureMatrix.from_arrays(X), labels, planted


def full_scale_matrix(n: int = 22986, d: int = 22, contamination: float = 0.05, seed: int = 0) -> FeatureMatrix:
    """Gaussian matrix at the size of the reference corpus, with planted outliers in random features."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    n_anom = int(math.floor(contamination * n + 0.5))
    idx = rng.choice(n, size=n_anom, replace=False)
    feats = rng.integers(d, size=n_anom)
    X[idx, feats] += rng.choice([-1.0, 1.0], size=n_anom) * rng.uniform(4.0, 6.0, size=n_anom)
    return FeatureMatrix.from_arrays(X)
