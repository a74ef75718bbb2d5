import xml.etree.ElementTree as ET

import numpy as np
import pytest

from conftest import random_forest
from latentrisk.attribution import (
    ShapVector,
    brute_force_shap,
    describe_signature,
    expected_value,
    expression_percentiles,
    rank_sources,
    to_log_odds,
    tree_shap,
    tree_shap_matrix,
    waterfall,
)
from latentrisk.errors import InputError, ModelArtifactError, SchemaError
from latentrisk.forest import DecisionTree, HyperParams, LabeledDataset, RandomForest, fit_forest
from latentrisk.ica import fit_ica, match_components
from latentrisk.svg import roc_svg, signature_svg, waterfall_svg


def tree(feature, threshold, left, right, coverage, value):
    a = lambda v, t: np.array(v, dtype=t)  # noqa: E731
    return DecisionTree(a(feature, np.int64), a(threshold, float), a(left, np.int64), a(right, np.int64), a(coverage, float), a(value, float))


def forest(*trees, k):
    return RandomForest(tuple(trees), HyperParams(n_trees=len(trees)), k)


# x0 AND x1 on a uniform {0,1}^2 population
AND_TREE = tree([0, -1, 1, -1, -1], [0.5, 0, 0.5, 0, 0], [1, -1, 3, -1, -1], [2, -1, 4, -1, -1], [4, 2, 2, 1, 1], [0.25, 0, 0.5, 0, 1])


def test_constant_model_has_zero_contributions():
    t = tree([2, -1, -1], [0.0, 0, 0], [1, -1, -1], [2, -1, -1], [10, 4, 6], [0.3, 0.3, 0.3])
    s = tree_shap(forest(t, k=4), np.array([1.0, -1.0, 5.0, 0.0]))
    assert np.all(s.contributions == 0.0)
    assert abs(s.base_value - 0.3) < 1e-15 and s.prediction == 0.3


def test_stump_only_its_feature_contributes():
    t = tree([3, -1, -1], [0.0, 0, 0], [1, -1, -1], [2, -1, -1], [10, 4, 6], [0.5, 0.0, 1.0])
    s = tree_shap(forest(t, k=6), np.array([0, 0, 0, 2.0, 0, 0]))
    assert np.flatnonzero(s.contributions).tolist() == [3]
    assert abs(s.contributions[3] - 0.4) < 1e-15 and abs(s.base_value - 0.6) < 1e-15


def test_symmetric_and_tree():
    m = forest(AND_TREE, k=2)
    for sv in (tree_shap(m, np.ones(2)), brute_force_shap(m, np.ones(2))):
        assert abs(sv.contributions[0] - sv.contributions[1]) < 1e-15
        assert abs(sv.contributions[0] - 0.375) < 1e-15


def test_single_feature_model_gets_full_gap():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((80, 1))
    f = fit_forest(LabeledDataset(X, (X[:, 0] > 0).astype(int), np.arange(80)), HyperParams(n_trees=4, max_depth=3, seed=1))
    for x in X[:10]:
        b = brute_force_shap(f, x)
        assert abs(b.contributions[0] - (b.prediction - b.base_value)) < 1e-15
        assert abs(tree_shap(f, x).contributions[0] - b.contributions[0]) < 1e-12


@pytest.mark.parametrize("seed", range(8))
def test_matches_exhaustive_oracle(seed):
    f, X = random_forest(seed, k=10 if seed % 2 else None, n_trees=4)
    base, phi, pred = tree_shap_matrix(f, X[:15])
    assert abs(base - expected_value(f)) < 1e-15
    for i in range(15):
        b = brute_force_shap(f, X[i])
        assert np.max(np.abs(phi[i] - b.contributions)) < 1e-9
        assert abs(b.base_value - base) < 1e-12 and abs(b.prediction - pred[i]) < 1e-12
        assert abs(base + phi[i].sum() - pred[i]) < 1e-9


def test_unused_features_get_exact_zero():
    f, X = random_forest(21, k=12, n_trees=2, max_depth=2)
    unused = sorted(set(range(12)) - f.used_features())
    assert unused
    _, phi, _ = tree_shap_matrix(f, X)
    assert np.all(phi[:, unused] == 0.0)


def test_positive_contribution_pushes_prediction_up():
    f, X = random_forest(5, k=3, n_trees=1, max_depth=1)
    _, phi, pred = tree_shap_matrix(f, X)
    base = expected_value(f)
    assert np.all(np.sign(phi.sum(axis=1)) == np.sign(np.round(pred - base, 12)))


def test_brute_force_refuses_wide_models():
    f, X = random_forest(1, k=20, n_trees=30, max_depth=6)
    assert len(f.used_features()) > 15
    with pytest.raises(InputError):
        brute_force_shap(f, X[0])


def test_missing_coverage_is_artifact_error():
    t = tree([0, -1, -1], [0.0, 0, 0], [1, -1, -1], [2, -1, -1], [0, 0, 0], [0.5, 0.0, 1.0])
    with pytest.raises(ModelArtifactError):
        tree_shap(forest(t, k=1), np.zeros(1))
    with pytest.raises(SchemaError):
        tree_shap(forest(AND_TREE, k=2), np.zeros(3))


def test_background_reproduces_training_coverage():
    grid = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    m = forest(AND_TREE, k=2)
    b = brute_force_shap(m, np.ones(2), background=grid)
    assert np.allclose(b.contributions, brute_force_shap(m, np.ones(2)).contributions, atol=1e-15)
    skewed = brute_force_shap(m, np.ones(2), background=grid[[0, 0, 0, 3]])
    assert abs(skewed.base_value - 0.25) < 1e-15 and skewed.local_accuracy_error < 1e-15


# ---------------------------------------------------------------- rankings


def test_rare_versus_consistent_source():
    S = np.zeros((1000, 3))
    S[17, 0] = 0.5
    S[:, 1] = 0.001
    S[::2, 2] = -0.0002
    by_mean = rank_sources(S, "mean_abs")
    by_max = rank_sources(S, "max_abs")
    assert by_max.order()[0] == 0
    assert by_mean.order() == [1, 0, 2]
    assert abs(by_mean.entries[1].mean_abs - 0.0005) < 1e-15
    assert by_mean.entries[0].max_abs == 0.001


def test_ranking_single_record_and_order_invariance():
    r = rank_sources(np.array([0.1, -0.3, 0.2]))
    assert r.order() == [1, 2, 0]
    rng = np.random.default_rng(0)
    S = rng.standard_normal((50, 6))
    S[:, 4] = S[:, 2]
    a = rank_sources(S)
    b = rank_sources(S[rng.permutation(50)])
    assert a.order() == b.order()
    assert a.order().index(2) < a.order().index(4)
    with pytest.raises(InputError):
        rank_sources(S, "median")


# ---------------------------------------------------------------- signatures


def test_identity_signature():
    d = describe_signature(np.eye(5), 2, top_n=1, variable_names=list("abcde"))
    assert [(e.variable, e.weight, e.bar) for e in d.entries] == [("c", 1.0, 1.0)]


def test_signature_top_n_clamped_and_index_error():
    A = np.random.default_rng(0).standard_normal((4, 2))
    assert len(describe_signature(A, 0, top_n=10).entries) == 4
    with pytest.raises(IndexError):
        describe_signature(A, 2)


def test_planted_loadings_top_three_after_recovery():
    rng = np.random.default_rng(1)
    m, k, n = 10, 3, 6000
    A = 0.05 * rng.standard_normal((m, k))
    planted = [1, 4, 7]
    A[planted, 0] = [1.0, -0.8, 0.6]
    A[[0, 2], 1] = [1.0, 0.7]
    A[[5, 9], 2] = [0.9, -1.0]
    S = rng.laplace(size=(k, n))
    model, est = fit_ica(A @ S, k, seed=0)
    perm, _ = match_components(est.values, S)
    d = describe_signature(model.mixing, int(perm[0]), top_n=3, expressions=est.values[perm[0]])
    assert sorted(int(e.variable[1:]) for e in d.entries) == planted
    assert d.hist_counts.sum() == n and len(d.hist_edges) == 31
    assert np.allclose(d.log_counts, np.log10(1 + d.hist_counts))


# ---------------------------------------------------------------- waterfall


def test_waterfall_all_zero_is_flat():
    wf = waterfall(ShapVector(0.3, np.zeros(5), 0.3))
    assert wf.steps == () and wf.base_value == wf.prediction


def test_waterfall_no_aggregation_when_top_n_is_k():
    rng = np.random.default_rng(2)
    phi = rng.standard_normal(8)
    sv = ShapVector(0.2, phi, 0.2 + phi.sum())
    wf = waterfall(sv, top_n=8)
    assert len(wf.steps) == 8 and abs(wf.steps[-1].end - sv.prediction) < 1e-12
    assert [abs(s.value) for s in wf.steps] == sorted(np.abs(phi), reverse=True)


def test_waterfall_other_is_exact_residual():
    rng = np.random.default_rng(3)
    phi = rng.standard_normal(10)
    wf = waterfall(ShapVector(0.0, phi, phi.sum()), top_n=3)
    assert len(wf.steps) == 4 and wf.steps[-1].label == "other sources (7)"
    top = np.argsort(-np.abs(phi))[:3]
    assert abs(wf.steps[-1].value - (phi.sum() - phi[top].sum())) < 1e-12
    assert abs(wf.steps[-1].end - phi.sum()) < 1e-12


def test_log_odds_transform_keeps_additivity():
    sv = ShapVector(0.3, np.array([0.2, -0.05, 0.1]), 0.55)
    lo = to_log_odds(sv)
    assert abs(lo.base_value - np.log(0.3 / 0.7)) < 1e-12
    assert abs(lo.prediction - np.log(0.55 / 0.45)) < 1e-12
    assert lo.local_accuracy_error < 1e-12
    assert np.all(np.sign(lo.contributions) == np.sign(sv.contributions))


def test_expression_percentiles():
    ref = np.arange(100.0)[None, :]
    p = expression_percentiles(np.array([[-1.0, 49.0, 1000.0]]), ref)
    assert p.tolist() == [[0.0, 50.0, 100.0]]


def test_svg_outputs_are_wellformed():
    fpr, tpr = np.array([0, 0.2, 1.0]), np.array([0, 0.7, 1.0])
    wf = waterfall(ShapVector(0.1, np.array([0.3, -0.1, 0.05]), 0.35), top_n=2)
    d = describe_signature(np.eye(3), 0, expressions=np.random.default_rng(0).standard_normal(100))
    for text in (roc_svg(fpr, tpr, 0.8), waterfall_svg(wf), signature_svg(d), waterfall_svg(waterfall(ShapVector(0.1, np.zeros(2), 0.1)))):
        root = ET.fromstring(text)
        assert root.tag.endswith("svg")
    assert roc_svg(fpr, tpr, 0.8) == roc_svg(fpr, tpr, 0.8)
