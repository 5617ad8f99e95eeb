"""Isolation Forest: training, scoring, thresholding and a versioned JSON model format.

Each tree is stored as flat arrays in preorder (a child always has a larger
node id than its parent). Every node keeps ``n_train``, the number of training
points of the tree's subsample that reached it; DIFFI needs these counts.

Per-tree randomness comes from ``numpy.random.PCG64`` seeded with
``SeedSequence([seed mod 2**64, tree_index])``, so each tree is reproducible
on its own and the forest is a pure function of ``(data, params)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Any

import numpy as np

from .features import FeatureMatrix

FORMAT_VERSION = 1
EULER_GAMMA = 0.57721566490153286061
LEAF = -1


class ModelFormatError(ValueError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class SchemaMismatchError(ValueError):
    pass


@lru_cache(maxsize=None)
def harmonic(k: int) -> float:
    """k-th harmonic number; exact summation below 10**5, asymptotic expansion above."""
    if k <= 0:
        return 0.0
    if k < 100_000:
        return math.fsum(1.0 / i for i in range(1, k + 1))
    k2 = float(k) * k
    return math.log(k) + EULER_GAMMA + 1.0 / (2 * k) - 1.0 / (12 * k2) + 1.0 / (120 * k2 * k2)


def avg_path_adjustment(m: int) -> float:
    """Average unsuccessful-search path length ``c(m)`` of a BST with ``m`` points."""
    if m < 0:
        raise ValueError(f"m must be >= 0, got {m}")
    if m <= 1:
        return 0.0
    return 2.0 * harmonic(m - 1) - 2.0 * (m - 1) / m


def score_from_path_length(mean_h: float | np.ndarray, psi: int) -> float | np.ndarray:
    """Anomaly score ``2 ** (-E[h] / c(psi))``."""
    return np.power(2.0, -np.asarray(mean_h, dtype=np.float64) / avg_path_adjustment(psi))


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    subsample_size: int = 256
    max_depth: int | None = None
    contamination: float = 0.05
    seed: int = 0
    bootstrap: bool = False  # sample with replacement instead of distinct subsets

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.subsample_size < 1:
            raise ValueError(f"subsample_size must be >= 1, got {self.subsample_size}")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {self.max_depth}")
        if not 0.0 < self.contamination <= 0.5:
            raise ValueError(f"contamination must lie in (0, 0.5], got {self.contamination}")

    def resolve(self, n: int) -> ForestParams:
        """Clamp the subsample size to ``n`` and fill in the default depth limit."""
        psi = min(self.subsample_size, n)
        depth = self.max_depth
        if depth is None:
            depth = max(1, math.ceil(math.log2(psi)))
        return replace(self, subsample_size=psi, max_depth=depth)


@dataclass(frozen=True, eq=False)
class IsolationTree:
    feature: np.ndarray  # int64, LEAF for leaves
    threshold: np.ndarray  # float64, NaN for leaves
    left: np.ndarray
    right: np.ndarray
    n_train: np.ndarray
    depth: np.ndarray = field(default=None)  # edges from the root

    def __post_init__(self) -> None:
        if self.depth is None:
            depth = np.zeros(len(self.feature), dtype=np.int64)
            for k in range(len(self.feature)):
                if self.feature[k] != LEAF:
                    depth[self.left[k]] = depth[k] + 1
                    depth[self.right[k]] = depth[k] + 1
            object.__setattr__(self, "depth", depth)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature == LEAF

    @cached_property
    def leaf_adjustment(self) -> np.ndarray:
        return np.array([avg_path_adjustment(int(m)) for m in self.n_train])

    @property
    def height(self) -> int:
        return int(self.depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id reached by every row of ``X``."""
        n = X.shape[0]
        leaf_of = np.empty(n, dtype=np.int64)
        buckets: dict[int, np.ndarray] = {0: np.arange(n)}
        for k in range(self.n_nodes):
            rows = buckets.pop(k, None)
            if rows is None:
                continue
            f = self.feature[k]
            if f == LEAF:
                leaf_of[rows] = k
                continue
            go_left = X[rows, f] < self.threshold[k]
            buckets[self.left[k]] = rows[go_left]
            buckets[self.right[k]] = rows[~go_left]
        return leaf_of

    def node_counts(self, leaf_of: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
        """Per-node totals of ``weights`` (default 1) over points whose leaves are ``leaf_of``."""
        counts = np.bincount(leaf_of, weights=weights, minlength=self.n_nodes).astype(np.float64)
        internal = np.flatnonzero(self.feature != LEAF)
        for k in internal[::-1]:
            counts[k] = counts[self.left[k]] + counts[self.right[k]]
        return counts


@dataclass(frozen=True)
class PathTrace:
    nodes: tuple[int, ...]  # internal nodes visited, root first
    features: tuple[int, ...]
    leaf: int
    depth: int  # internal nodes traversed


def path_length(tree: IsolationTree, x: np.ndarray) -> tuple[float, PathTrace]:
    """Depth of ``x`` plus the ``c(n_train)`` adjustment of the leaf it lands in."""
    nodes: list[int] = []
    k = 0
    while tree.feature[k] != LEAF:
        nodes.append(k)
        k = tree.left[k] if x[tree.feature[k]] < tree.threshold[k] else tree.right[k]
    trace = PathTrace(tuple(nodes), tuple(int(tree.feature[v]) for v in nodes), int(k), len(nodes))
    return len(nodes) + avg_path_adjustment(int(tree.n_train[k])), trace


def _tree_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed % 2**64, index])))


def build_tree(X: np.ndarray, rng: np.random.Generator, max_depth: int) -> IsolationTree:
    """Grow one isolation tree on the rows of ``X``.

    A node becomes a leaf at ``max_depth``, when it holds at most one point, or
    when its points are identical on every feature. Otherwise the split
    feature is drawn uniformly among features that vary at the node and the
    threshold uniformly in that feature's open range.
    """
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    n_train: list[int] = []

    def grow(rows: np.ndarray, depth: int) -> int:
        k = len(feature)
        feature.append(LEAF)
        threshold.append(math.nan)
        left.append(LEAF)
        right.append(LEAF)
        n_train.append(rows.size)
        if depth >= max_depth or rows.size <= 1:
            return k
        sub = X[rows]
        lo = sub.min(axis=0)
        hi = sub.max(axis=0)
        varying = np.flatnonzero(hi > lo)
        if varying.size == 0:
            return k
        f = int(varying[rng.integers(varying.size)])
        t = rng.uniform(lo[f], hi[f])
        while t <= lo[f]:
            t = rng.uniform(lo[f], hi[f])
        go_left = sub[:, f] < t
        feature[k] = f
        threshold[k] = float(t)
        left[k] = grow(rows[go_left], depth + 1)
        right[k] = grow(rows[~go_left], depth + 1)
        return k

    grow(np.arange(X.shape[0]), 0)
    return IsolationTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(n_train, dtype=np.int64),
    )


@dataclass(frozen=True)
class ScoreReport:
    ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray  # 1 = predicted outlier

    @property
    def outliers(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def inliers(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)

    def to_csv(self) -> str:
        lines = ["session_id,score,label"]
        lines += [f"{i},{float(s)!r},{int(y)}" for i, s, y in zip(self.ids, self.scores, self.labels)]
        return "\n".join(lines) + "\n"


def contamination_threshold(scores: np.ndarray, contamination: float) -> float:
    """Score cut such that ``s >= cut`` flags about ``contamination * n`` points.

    When ties at the cut would flag more than ``round(contamination * n) + 1``
    points, the cut moves just above the tied value instead.
    """
    n = scores.size
    k = int(math.floor(contamination * n + 0.5))
    desc = np.sort(scores)[::-1]
    if k == 0:
        return float(np.nextafter(desc[0], np.inf))
    cut = float(desc[k - 1])
    if np.count_nonzero(scores >= cut) > k + 1:
        cut = float(np.nextafter(cut, np.inf))
    return cut


class IsolationForest:
    """A fitted, immutable isolation forest."""

    def __init__(
        self,
        params: ForestParams,
        schema: tuple[str, ...],
        trees: list[IsolationTree],
        threshold_score: float,
    ) -> None:
        self.params = params
        self.schema = tuple(schema)
        self.trees = tuple(trees)
        self.threshold_score = float(threshold_score)

    @property
    def d(self) -> int:
        return len(self.schema)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.d:
            raise SchemaMismatchError(f"expected {self.d} features, got {X.shape[1]}")
        return X

    def _check_matrix(self, data: FeatureMatrix) -> np.ndarray:
        if tuple(data.schema) != self.schema:
            raise SchemaMismatchError(f"schema mismatch: model {list(self.schema)}, data {list(data.schema)}")
        return data.values

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        """Matrix ``(n, T)`` of adjusted path lengths."""
        X = self._check(X)
        out = np.empty((X.shape[0], len(self.trees)))
        for t, tree in enumerate(self.trees):
            leaf_of = tree.apply(X)
            out[:, t] = tree.depth[leaf_of] + tree.leaf_adjustment[leaf_of]
        return out

    def score_samples(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        mean_h = self.path_lengths(X).mean(axis=1)
        return score_from_path_length(mean_h, self.params.subsample_size)

    def score(self, x: np.ndarray) -> float:
        return float(self.score_samples(x)[0])

    def classify(self, data: FeatureMatrix) -> ScoreReport:
        X = self._check_matrix(data)
        scores = self.score_samples(X) if data.n else np.empty(0)
        labels = (scores >= self.threshold_score).astype(np.int64)
        return ScoreReport(data.ids, scores, labels)

    # serialization

    def _payload(self) -> dict[str, Any]:
        trees = []
        for tree in self.trees:
            nodes = []
            for k in range(tree.n_nodes):
                if tree.feature[k] == LEAF:
                    nodes.append({"leaf": int(tree.n_train[k])})
                else:
                    nodes.append(
                        {
                            "feature": int(tree.feature[k]),
                            "threshold": float(tree.threshold[k]),
                            "left": int(tree.left[k]),
                            "right": int(tree.right[k]),
                            "n_train": int(tree.n_train[k]),
                        }
                    )
            trees.append({"nodes": nodes, "root": 0})
        return {
            "version": FORMAT_VERSION,
            "params": asdict(self.params),
            "schema": list(self.schema),
            "threshold_score": self.threshold_score,
            "trees": trees,
        }

    def to_bytes(self) -> bytes:
        payload = self._payload()
        payload["checksum"] = _checksum(payload)
        return _canonical(payload)

    @classmethod
    def from_bytes(cls, blob: bytes) -> IsolationForest:
        try:
            payload = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ChecksumError(f"model file is truncated or corrupt: {exc}") from exc
        if not isinstance(payload, dict):
            raise ModelFormatError("model file must hold a JSON object")
        version = payload.get("version")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"unsupported model format version {version!r} (expected {FORMAT_VERSION})")
        stored = payload.pop("checksum", None)
        if stored != _checksum(payload):
            raise ChecksumError("model checksum mismatch")
        try:
            params = ForestParams(**payload["params"])
            trees = [_tree_from_nodes(t["nodes"]) for t in payload["trees"]]
            return cls(params, tuple(payload["schema"]), trees, payload["threshold_score"])
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"malformed model file: {exc}") from exc


def _canonical(payload: dict[str, Any]) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _checksum(payload: dict[str, Any]) -> str:
    return hashlib.sha256(_canonical(payload)).hexdigest()


def _tree_from_nodes(nodes: list[dict[str, Any]]) -> IsolationTree:
    m = len(nodes)
    feature = np.full(m, LEAF, dtype=np.int64)
    threshold = np.full(m, math.nan)
    left = np.full(m, LEAF, dtype=np.int64)
    right = np.full(m, LEAF, dtype=np.int64)
    n_train = np.zeros(m, dtype=np.int64)
    for k, node in enumerate(nodes):
        if "leaf" in node:
            n_train[k] = node["leaf"]
        else:
            feature[k] = node["feature"]
            threshold[k] = node["threshold"]
            left[k] = node["left"]
            right[k] = node["right"]
            n_train[k] = node["n_train"]
    return IsolationTree(feature, threshold, left, right, n_train)


def save(forest: IsolationForest) -> bytes:
    return forest.to_bytes()


def load(blob: bytes) -> IsolationForest:
    return IsolationForest.from_bytes(blob)


def fit(data: FeatureMatrix | np.ndarray, params: ForestParams | None = None) -> IsolationForest:
    """Train an isolation forest and set its contamination threshold.

    Raises:
        ValueError: fewer than two rows, no columns, or non-finite values.
    """
    params = params or ForestParams()
    if isinstance(data, FeatureMatrix):
        X, schema = data.values, data.schema
    else:
        X = np.asarray(data, dtype=np.float64)
        schema = tuple(f"f{j}" for j in range(X.shape[1]))
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 1:
        raise ValueError(f"need at least 2 rows and 1 column, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")

    n = X.shape[0]
    params = params.resolve(n)
    trees = []
    for t in range(params.n_trees):
        rng = _tree_rng(params.seed, t)
        rows = rng.choice(n, size=params.subsample_size, replace=params.bootstrap)
        trees.append(build_tree(X[rows], rng, params.max_depth))
    forest = IsolationForest(params, schema, trees, threshold_score=math.inf)
    forest.threshold_score = contamination_threshold(forest.score_samples(X), params.contamination)
    return forest
