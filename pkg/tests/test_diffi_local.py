import json

import numpy as np
import pytest

from conftest import make_forest, make_tree
from evdiffi.diffi_local import (
    LocalDiffiError,
    LocalExplanation,
    explain,
    local_diffi,
    rank_distribution,
)
from evdiffi.forest import LEAF, ForestParams, fit
from evdiffi.synth import planted_matrix


def stump(feature, threshold=0.0):
    return make_tree([feature, LEAF, LEAF], [threshold, np.nan, np.nan], [1, LEAF, LEAF], [2, LEAF, LEAF], [10, 1, 9])


def test_depth_one_isolation():
    forest = make_forest([stump(2)], d=3, psi=10, max_depth=8)
    e = local_diffi(forest, np.array([0.0, 0.0, -1.0]), "p")
    assert e.lfi[2] == pytest.approx(0.875, abs=1e-15)
    assert e.lfi[0] == e.lfi[1] == 0.0
    assert e.ranking[0] == 2


def test_max_depth_paths_give_zero():
    # chain of two splits on feature 0, max_depth 2: every leaf sits at depth <= 2
    tree = make_tree(
        [0, 0, LEAF, LEAF, LEAF],
        [0.0, -1.0, np.nan, np.nan, np.nan],
        [1, 2, LEAF, LEAF, LEAF],
        [4, 3, LEAF, LEAF, LEAF],
        [6, 4, 1, 3, 2],
    )
    forest = make_forest([tree], d=2, psi=6, max_depth=2)
    e = local_diffi(forest, np.array([-0.5, 3.0]))
    assert np.array_equal(e.lfi, [0.0, 0.0])


def test_credit_is_averaged_over_usage():
    # two trees: one isolates at depth 1 via feature 0, one at depth 2 via feature 0 twice
    deep = make_tree(
        [0, 0, LEAF, LEAF, LEAF],
        [5.0, -5.0, np.nan, np.nan, np.nan],
        [1, 2, LEAF, LEAF, LEAF],
        [4, 3, LEAF, LEAF, LEAF],
        [10, 5, 1, 4, 5],
    )
    forest = make_forest([stump(0), deep], d=2, psi=10, max_depth=4)
    e = local_diffi(forest, np.array([-9.0, 0.0]))
    want = ((1 - 0.25) + 2 * (0.5 - 0.25)) / 3
    assert e.lfi[0] == pytest.approx(want, abs=1e-15)


def test_vectorised_explain_matches_single_points():
    fm, _, _ = planted_matrix(300, 4, 0.05, feature=2, seed=0)
    forest = fit(fm, ForestParams(n_trees=20, seed=0))
    many = explain(forest, fm, all_points=True)
    for i in range(0, 300, 37):
        one = local_diffi(forest, fm.values[i])
        assert np.allclose(many[i].lfi, one.lfi, rtol=1e-12, atol=1e-15)
        assert many[i].score == pytest.approx(one.score, rel=1e-15)


def test_explain_defaults_to_predicted_outliers():
    fm, _, _ = planted_matrix(300, 4, 0.05, feature=2, seed=1)
    forest = fit(fm, ForestParams(n_trees=20, seed=1))
    report = forest.classify(fm)
    exps = explain(forest, fm, report)
    assert [e.session_id for e in exps] == [fm.ids[i] for i in report.outliers]
    assert all(e.predicted_outlier for e in exps)


def test_rank_distribution_single_leader():
    schema = ("A", "B", "C")
    exps = [
        LocalExplanation("p0", np.array([3.0, 1.0, 2.0]), np.array([0, 2, 1]), 0.7, schema),
        LocalExplanation("p1", np.array([5.0, 4.0, 1.0]), np.array([0, 1, 2]), 0.8, schema),
    ]
    dist = rank_distribution(exps)
    assert dist.fraction[0, 0] == 1.0
    assert dist.count == 2


def test_rank_distribution_sums_to_one():
    fm, _, _ = planted_matrix(400, 5, 0.05, feature=None, seed=2)
    forest = fit(fm, ForestParams(n_trees=30, seed=2))
    dist = rank_distribution(explain(forest, fm))
    assert np.allclose(dist.fraction.sum(axis=0), 1.0, atol=1e-12, rtol=0)
    assert np.allclose(dist.fraction.sum(axis=1), 1.0, atol=1e-12, rtol=0)
    lines = dist.to_csv().splitlines()
    assert lines[0] == "feature,rank,fraction" and len(lines) == 1 + 25


def test_planted_feature_leads_rank_one():
    fm, labels, _ = planted_matrix(200, 5, 0.05, feature=0, seed=3)
    forest = fit(fm, ForestParams(seed=3))
    anomalies = np.flatnonzero(labels == 1)
    assert anomalies.size == 10
    exps = [local_diffi(forest, fm.values[i], fm.ids[i]) for i in anomalies]
    assert rank_distribution(exps).fraction[0, 0] >= 0.8


def test_explanation_json():
    forest = make_forest([stump(1)], d=2, psi=10, max_depth=8)
    obj = json.loads(local_diffi(forest, np.array([0.0, -1.0]), "s1").to_json())
    assert obj["session_id"] == "s1"
    assert obj["ranking"][0] == "f1" and set(obj["lfi"]) == {"f0", "f1"}


def test_errors():
    forest = make_forest([stump(0)], d=2, psi=10, max_depth=8)
    with pytest.raises(LocalDiffiError):
        local_diffi(forest, np.zeros((2, 2)))
    with pytest.raises(LocalDiffiError):
        rank_distribution([])
