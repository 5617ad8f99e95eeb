"""Global DIFFI feature importance and unsupervised feature selection.

For every tree and every point in a group (predicted inliers or predicted
outliers), each internal node on the point's path credits its split feature
with ``iic(node) / depth(point)``, and the feature's counter goes up by one.
The global importance of feature ``j`` is::

    gfi[j] = (I_out[j] / V_out[j]) / (I_in[j] / V_in[j])

``depth(point)`` counts internal nodes traversed (no leaf adjustment).
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from .features import FeatureMatrix
from .forest import LEAF, ForestParams, IsolationForest, IsolationTree, ScoreReport, fit

DEFAULT_TOP_K = 9

EVALUATION_COUNTS = "evaluation"
GROUP_COUNTS = "group"
TRAINING_COUNTS = "training"
COUNT_SOURCES = (EVALUATION_COUNTS, GROUP_COUNTS, TRAINING_COUNTS)


class DiffiError(ValueError):
    pass


def iic(n: int, n_l: int, n_r: int) -> float:
    """Induced imbalance coefficient of a node splitting ``n`` points into ``n_l`` and ``n_r``.

    Zero when a child is empty. Otherwise the larger child's share ``a`` is
    mapped from ``[lambda_min, lambda_max]`` onto ``[0.5, 1]``, with
    ``lambda_min = ceil(n/2)/n`` and ``lambda_max = (n-1)/n``. For n in {2, 3}
    the interval collapses and the coefficient is 1.
    """
    if n_l < 0 or n_r < 0 or n < 1 or n != n_l + n_r:
        raise DiffiError(f"inconsistent counts n={n}, n_l={n_l}, n_r={n_r}")
    if n_l == 0 or n_r == 0:
        return 0.0
    lam_min = (-(-n // 2)) / n
    lam_max = (n - 1) / n
    if lam_max == lam_min:
        return 1.0
    a = max(n_l, n_r) / n
    return (a - lam_min) / (2.0 * (lam_max - lam_min)) + 0.5


def iic_array(n: np.ndarray, n_l: np.ndarray, n_r: np.ndarray) -> np.ndarray:
    """Vectorised :func:`iic`. Nodes with ``n == 0`` get 0."""
    n = np.asarray(n, dtype=np.int64)
    n_l = np.asarray(n_l, dtype=np.int64)
    n_r = np.asarray(n_r, dtype=np.int64)
    out = np.zeros(n.shape, dtype=np.float64)
    ok = (n_l > 0) & (n_r > 0)
    if not ok.any():
        return out
    nn = n[ok].astype(np.float64)
    lam_min = (-(-n[ok] // 2)) / nn
    lam_max = (n[ok] - 1) / nn
    a = np.maximum(n_l[ok], n_r[ok]) / nn
    span = lam_max - lam_min
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(span == 0.0, 1.0, (a - lam_min) / (2.0 * span) + 0.5)
    out[ok] = g
    return out


@dataclass
class ImportanceAccumulators:
    I_in: np.ndarray
    I_out: np.ndarray
    V_in: np.ndarray
    V_out: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> ImportanceAccumulators:
        return cls(np.zeros(d), np.zeros(d), np.zeros(d, dtype=np.int64), np.zeros(d, dtype=np.int64))

    def __iadd__(self, other: ImportanceAccumulators) -> ImportanceAccumulators:
        self.I_in += other.I_in
        self.I_out += other.I_out
        self.V_in += other.V_in
        self.V_out += other.V_out
        return self


def rank_descending(values: np.ndarray) -> np.ndarray:
    """Indices sorted by descending value; ties keep ascending index order."""
    return np.lexsort((np.arange(len(values)), -np.asarray(values, dtype=np.float64)))


@dataclass(frozen=True)
class GfiReport:
    schema: tuple[str, ...]
    gfi: np.ndarray
    ranking: np.ndarray
    runs: int = 1

    @classmethod
    def from_scores(cls, schema: Sequence[str], gfi: np.ndarray, runs: int = 1) -> GfiReport:
        gfi = np.asarray(gfi, dtype=np.float64)
        return cls(tuple(schema), gfi, rank_descending(gfi), runs)

    def ranks(self) -> np.ndarray:
        """1-based rank of every feature."""
        r = np.empty(len(self.ranking), dtype=np.int64)
        r[self.ranking] = np.arange(1, len(self.ranking) + 1)
        return r

    def to_csv(self) -> str:
        ranks = self.ranks()
        lines = ["feature,gfi,rank"]
        lines += [f"{name},{float(g)!r},{int(r)}" for name, g, r in zip(self.schema, self.gfi, ranks)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> GfiReport:
        rows = [line.split(",") for line in text.strip().splitlines()]
        if not rows or [c.strip() for c in rows[0]] != ["feature", "gfi", "rank"]:
            raise DiffiError("GFI file must have header feature,gfi,rank")
        body = rows[1:]
        schema = tuple(r[0] for r in body)
        gfi = np.array([float(r[1]) for r in body])
        return cls.from_scores(schema, gfi)


def _group_contribution(
    tree: IsolationTree,
    leaf_of: np.ndarray,
    d: int,
    n_node: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Importance and counter increments from one group of points in one tree.

    ``n_node`` holds the per-node counts feeding the imbalance coefficient;
    ``None`` means the group's own counts.
    """
    internal = np.flatnonzero(tree.feature != LEAF)
    if internal.size == 0 or leaf_of.size == 0:
        return np.zeros(d), np.zeros(d, dtype=np.int64)
    depth = tree.depth[leaf_of]
    inv_depth = np.zeros(leaf_of.size)
    np.divide(1.0, depth, out=inv_depth, where=depth > 0)
    passed = tree.node_counts(leaf_of)
    inv_depth_sum = tree.node_counts(leaf_of, inv_depth)
    if n_node is None:
        n_node = passed
    lam = iic_array(
        n_node[internal].astype(np.int64),
        n_node[tree.left[internal]].astype(np.int64),
        n_node[tree.right[internal]].astype(np.int64),
    )
    feats = tree.feature[internal]
    I = np.bincount(feats, weights=lam * inv_depth_sum[internal], minlength=d)
    V = np.bincount(feats, weights=passed[internal], minlength=d).astype(np.int64)
    return I, V


def accumulate(
    forest: IsolationForest,
    X: np.ndarray,
    labels: np.ndarray,
    counts: str = EVALUATION_COUNTS,
) -> ImportanceAccumulators:
    """Cumulative importances and feature counters for inliers and outliers.

    ``counts`` selects the node counts feeding the imbalance coefficient:
    ``"evaluation"`` counts all scored points passing each node, ``"group"``
    only the points of the group being accumulated (inliers for ``I_in``,
    outliers for ``I_out``), and ``"training"`` the tree's subsample.
    """
    if counts not in COUNT_SOURCES:
        raise ValueError(f"counts must be one of {COUNT_SOURCES}")
    d = forest.d
    acc = ImportanceAccumulators.zeros(d)
    is_out = np.asarray(labels) == 1
    for tree in forest.trees:
        leaf_of = tree.apply(X)
        if counts == EVALUATION_COUNTS:
            n_node = tree.node_counts(leaf_of)
        elif counts == TRAINING_COUNTS:
            n_node = tree.n_train
        else:
            n_node = None
        I, V = _group_contribution(tree, leaf_of[~is_out], d, n_node)
        acc.I_in += I
        acc.V_in += V
        I, V = _group_contribution(tree, leaf_of[is_out], d, n_node)
        acc.I_out += I
        acc.V_out += V
    return acc


def gfi_from_accumulators(acc: ImportanceAccumulators) -> np.ndarray:
    """Componentwise ratio of mean outlier to mean inlier importance.

    Features that were never used (zero counters) get 0. A zero inlier term
    with a positive outlier term gives ``inf``.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        out_term = np.where(acc.V_out > 0, acc.I_out / np.maximum(acc.V_out, 1), 0.0)
        in_term = np.where(acc.V_in > 0, acc.I_in / np.maximum(acc.V_in, 1), 0.0)
        gfi = np.where(in_term > 0, out_term / np.where(in_term > 0, in_term, 1.0), np.where(out_term > 0, np.inf, 0.0))
    return gfi


def compute_gfi(
    forest: IsolationForest,
    data: FeatureMatrix,
    report: ScoreReport | None = None,
    counts: str = EVALUATION_COUNTS,
) -> tuple[GfiReport, ImportanceAccumulators]:
    """Global DIFFI importances of ``forest`` on ``data``.

    Raises:
        DiffiError: if there are no predicted outliers or no predicted inliers.
    """
    if report is None:
        report = forest.classify(data)
    elif len(report.labels) != data.n:
        raise DiffiError("score report does not match the data")
    X = forest._check_matrix(data)
    if report.outliers.size == 0:
        raise DiffiError("no predicted outliers: GFI is undefined")
    if report.inliers.size == 0:
        raise DiffiError("no predicted inliers: GFI is undefined")
    acc = accumulate(forest, X, report.labels, counts)
    return GfiReport.from_scores(forest.schema, gfi_from_accumulators(acc)), acc


def run_seed(seed: int, run: int) -> int:
    """Seed of run ``run`` in a multi-run average; run 0 keeps ``seed``."""
    if run == 0:
        return seed
    return int(np.random.SeedSequence([seed % 2**64, 0x6D72, run]).generate_state(1, dtype=np.uint64)[0] >> 1)


def multi_run_gfi(
    data: FeatureMatrix,
    params: ForestParams,
    n_runs: int,
    counts: str = EVALUATION_COUNTS,
    first: IsolationForest | None = None,
) -> GfiReport:
    """Average GFI over ``n_runs`` forests fitted with derived seeds.

    ``first`` may supply an already fitted forest to use as run 0.
    """
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    total = np.zeros(data.d)
    for r in range(n_runs):
        if r == 0 and first is not None:
            forest = first
        else:
            forest = fit(data, replace(params, seed=run_seed(params.seed, r)))
        report, _ = compute_gfi(forest, data, counts=counts)
        total += report.gfi
    return GfiReport.from_scores(data.schema, total / n_runs, runs=n_runs)


@dataclass(frozen=True)
class SelectionResult:
    kept: tuple[int, ...]
    dropped: tuple[int, ...]
    schema: tuple[str, ...]

    @property
    def k(self) -> int:
        return len(self.kept)

    def kept_names(self) -> list[str]:
        return [self.schema[j] for j in self.kept]

    def dropped_names(self) -> list[str]:
        return [self.schema[j] for j in self.dropped]

    def to_json_obj(self) -> dict:
        return {"kept": self.kept_names(), "dropped": self.dropped_names(), "k": self.k}


def select_features(report: GfiReport, k: int = DEFAULT_TOP_K) -> SelectionResult:
    """Keep the ``k`` highest-ranked features, in rank order."""
    d = len(report.ranking)
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    order = [int(j) for j in report.ranking]
    return SelectionResult(tuple(order[:k]), tuple(order[k:]), report.schema)
