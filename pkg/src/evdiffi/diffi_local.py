"""Local DIFFI: per-point feature importances and their rank distribution."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .diffi_global import rank_descending
from .features import FeatureMatrix
from .forest import LEAF, IsolationForest, ScoreReport


class LocalDiffiError(ValueError):
    pass


@dataclass(frozen=True)
class LocalExplanation:
    session_id: str
    lfi: np.ndarray
    ranking: np.ndarray
    score: float
    schema: tuple[str, ...]
    predicted_outlier: bool = True

    def to_json(self) -> str:
        obj = {
            "session_id": self.session_id,
            "score": float(self.score),
            "lfi": {name: float(v) for name, v in zip(self.schema, self.lfi)},
            "ranking": [self.schema[j] for j in self.ranking],
        }
        if not self.predicted_outlier:
            obj["predicted_outlier"] = False
        return json.dumps(obj)


def _local_importances(forest: IsolationForest, X: np.ndarray) -> np.ndarray:
    """Raw ``(n, d)`` local importances for every row of ``X``.

    Each internal node on a row's path credits its split feature with
    ``1/h - 1/h_max``, where ``h`` is the row's depth in that tree and
    ``h_max`` the forest's depth limit; credits are then divided by how many
    times each feature was used on the row's paths.
    """
    n, d = X.shape
    h_max = float(forest.params.max_depth)
    credit = np.zeros((n, d))
    used = np.zeros((n, d))
    for tree in forest.trees:
        k = np.zeros(n, dtype=np.int64)
        visited: list[np.ndarray] = []
        active = tree.feature[k] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            nodes = k[rows]
            visited.append(np.stack([rows, nodes]))
            f = tree.feature[nodes]
            go_left = X[rows, f] < tree.threshold[nodes]
            k[rows] = np.where(go_left, tree.left[nodes], tree.right[nodes])
            active = tree.feature[k] != LEAF
        if not visited:
            continue
        depth = tree.depth[k].astype(np.float64)
        delta = np.zeros(n)
        np.divide(1.0, depth, out=delta, where=depth > 0)
        delta -= 1.0 / h_max
        for rows_nodes in visited:
            rows, nodes = rows_nodes
            f = tree.feature[nodes]
            np.add.at(credit, (rows, f), delta[rows])
            np.add.at(used, (rows, f), 1.0)
    out = np.zeros((n, d))
    np.divide(credit, used, out=out, where=used > 0)
    return out


def local_diffi(forest: IsolationForest, x: np.ndarray, session_id: str = "", label: int | None = None) -> LocalExplanation:
    """Explain a single point. ``label`` marks whether it was predicted an outlier."""
    X = forest._check(x)
    if X.shape[0] != 1:
        raise LocalDiffiError("local_diffi explains exactly one point")
    lfi = _local_importances(forest, X)[0]
    score = forest.score(X)
    if label is None:
        label = int(score >= forest.threshold_score)
    return LocalExplanation(session_id, lfi, rank_descending(lfi), score, forest.schema, bool(label))


def explain(
    forest: IsolationForest,
    data: FeatureMatrix,
    report: ScoreReport | None = None,
    all_points: bool = False,
) -> list[LocalExplanation]:
    """Local explanations for predicted outliers (or every point with ``all_points``)."""
    X = forest._check_matrix(data)
    if report is None:
        report = forest.classify(data)
    idx = np.arange(data.n) if all_points else report.outliers
    if idx.size == 0:
        return []
    lfi = _local_importances(forest, X[idx])
    return [
        LocalExplanation(
            data.ids[i],
            lfi[row],
            rank_descending(lfi[row]),
            float(report.scores[i]),
            forest.schema,
            bool(report.labels[i]),
        )
        for row, i in enumerate(idx)
    ]


@dataclass(frozen=True)
class RankDistribution:
    """``fraction[f, r]``: share of explanations where feature ``f`` holds rank ``r + 1``."""

    schema: tuple[str, ...]
    fraction: np.ndarray
    count: int

    def to_csv(self) -> str:
        lines = ["feature,rank,fraction"]
        d = len(self.schema)
        for f in range(d):
            for r in range(d):
                lines.append(f"{self.schema[f]},{r + 1},{float(self.fraction[f, r])!r}")
        return "\n".join(lines) + "\n"


def rank_distribution(explanations: Sequence[LocalExplanation]) -> RankDistribution:
    if not explanations:
        raise LocalDiffiError("rank distribution needs at least one explanation")
    schema = explanations[0].schema
    d = len(schema)
    tally = np.zeros((d, d), dtype=np.int64)
    for e in explanations:
        if e.schema != schema:
            raise LocalDiffiError("explanations do not share one schema")
        tally[e.ranking, np.arange(d)] += 1
    return RankDistribution(schema, tally / len(explanations), len(explanations))
