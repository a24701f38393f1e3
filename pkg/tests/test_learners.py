import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from emltrack.data_model import FeatureVector, TrialKey, Window
from emltrack.learners import KINDS, ModelSpec, TrainedModel, design_matrix, feature_importance, predict, train


def separable_1d(seed=0, n=60):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(0, 1, n // 2)
    hi = rng.uniform(2, 3, n // 2)
    x = np.concatenate([lo, hi])[:, None]
    y = np.array([0] * (n // 2) + [1] * (n // 2))
    return x, y


def xor(seed=0, n=400):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, 2))
    y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)
    return x, y


def test_stump_splits_inside_gap():
    x, y = separable_1d()
    m = train(ModelSpec("decision_tree", {"max_depth": 1}), x, y)
    tree = m.params["trees"][0]
    thr = tree.threshold[0]
    assert x[y == 0].max() < thr < x[y == 1].min()
    assert np.all(np.array([lab for lab, _ in predict(m, x)]) == y)


def test_gbt_learns_xor():
    x, y = xor()
    m = train(ModelSpec("gbt", {"n_rounds": 30, "max_depth": 3}), x, y)
    acc = np.mean((m.predict_proba(x) >= 0.5) == y)
    assert acc >= 0.95


def test_logistic_separable():
    rng = np.random.default_rng(2)
    a = rng.normal([-2, -2], 0.5, (50, 2))
    b = rng.normal([2, 2], 0.5, (50, 2))
    x = np.vstack([a, b])
    y = np.array([0] * 50 + [1] * 50)
    m = train(ModelSpec("logistic_regression"), x, y)
    assert np.mean((m.predict_proba(x) >= 0.5) == y) == 1.0


def test_max_margin_separable_and_calibrated():
    rng = np.random.default_rng(3)
    x = np.vstack([rng.normal(-1.5, 0.4, (40, 3)), rng.normal(1.5, 0.4, (40, 3))])
    y = np.array([0] * 40 + [1] * 40)
    m = train(ModelSpec("max_margin"), x, y)
    p = m.predict_proba(x)
    assert np.mean((p >= 0.5) == y) == 1.0
    assert np.all((m.margin(x) > 0) == (p >= 0.5))
    assert np.all((p > 0) & (p < 1))


def test_overfit_tree_memorises():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(80, 4))
    y = rng.integers(0, 2, 80)
    m = train(ModelSpec("decision_tree", {"max_depth": 30}), x, y)
    assert np.array_equal((m.predict_proba(x) >= 0.5).astype(int), y)


def test_duplicate_rows_same_output():
    x, y = xor(1, 100)
    m = train(ModelSpec("gbt", {"n_rounds": 5}), x, y)
    dup = np.vstack([x[:1], x[:1]])
    p = m.predict_proba(dup)
    assert p[0] == p[1]


@given(st.floats(-50, 50))
def test_sigmoid_complement(s):
    assert abs(expit(s) + expit(-s) - 1.0) <= 1e-12


def test_probability_monotone_in_raw_score():
    x, y = xor(2, 200)
    m = train(ModelSpec("gbt", {"n_rounds": 10}), x, y)
    s = m.raw_score(x)
    p = m.predict_proba(x)
    order = np.argsort(s)
    ds, dp = np.diff(s[order]), np.diff(p[order])
    assert np.all(dp[ds > 1e-9] > 0)


def test_zero_raw_score_means_half():
    x, y = xor(3, 100)
    m = train(ModelSpec("gbt", {"n_rounds": 1, "max_depth": 1, "learning_rate": 0.0}), x, y)
    # learning_rate 0 keeps every leaf at 0, so the raw score is base_score = 0
    assert np.all(m.raw_score(x) == 0) and np.all(m.predict_proba(x) == 0.5)


@pytest.mark.parametrize("kind", ["gbt", "decision_tree"])
def test_thresholds_between_observed_values(kind):
    rng = np.random.default_rng(5)
    x = np.round(rng.normal(size=(300, 3)), 2)
    x[rng.random((300, 3)) < 0.1] = np.nan
    y = (np.nan_to_num(x[:, 0]) + 0.5 * np.nan_to_num(x[:, 1]) > 0).astype(int)
    m = train(ModelSpec(kind, {"max_bins": 16}), x, y)
    for t in m.params["trees"]:
        for f, thr in zip(t.feature, t.threshold):
            if f < 0:
                continue
            col = x[:, f][~np.isnan(x[:, f])]
            assert np.any(col < thr) and np.any(col > thr) and not np.any(col == thr)


@pytest.mark.parametrize("kind", KINDS)
def test_serialization_deterministic(kind):
    x, y = xor(6, 120)
    a = train(ModelSpec(kind), x, y, seed=3).to_bytes()
    b = train(ModelSpec(kind), x, y, seed=3).to_bytes()
    assert a == b
    m = TrainedModel.from_bytes(a)
    np.testing.assert_array_equal(m.predict_proba(x), train(ModelSpec(kind), x, y, seed=3).predict_proba(x))


def test_unknown_hyperparameter():
    with pytest.raises(ValueError, match="unknown hyperparameter"):
        ModelSpec("gbt", {"depth": 3})
    with pytest.raises(ValueError):
        ModelSpec("svm")


def test_training_preconditions():
    x, y = xor(7, 40)
    with pytest.raises(ValueError):
        train(ModelSpec("gbt"), x[:5], y[:5])
    with pytest.raises(ValueError):
        train(ModelSpec("gbt"), x, np.zeros(40))
    with pytest.raises(ValueError):
        train(ModelSpec("gbt"), x, y * 2)


def planted(seed=0, n=300):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 6))
    x[:, 5] = 1.0
    y = (x[:, 2] > 0).astype(int)
    return x, y, [f"f{j}" for j in range(6)]


@pytest.mark.parametrize("kind", KINDS)
def test_importance_planted_feature(kind):
    x, y, names = planted()
    m = train(ModelSpec(kind), x, y, names=names)
    imp = feature_importance(m, x, y)
    scores = dict(imp)
    assert imp[0][0] == "f2" and imp[0][1] > 0.9
    assert scores["f5"] == 0.0
    assert all(v >= 0 for v in scores.values()) and math.isclose(sum(scores.values()), 1.0, rel_tol=1e-12)


def test_importance_noise_is_spread():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(400, 5))
    y = rng.integers(0, 2, 400)
    m = train(ModelSpec("gbt", {"n_rounds": 20, "max_depth": 3}), x, y, names=list("abcde"))
    scores = [v for _, v in feature_importance(m)]
    assert max(scores) < 0.4


def test_missing_values_routed():
    x, y = separable_1d(1)
    x = np.column_stack([x, np.ones(len(x))])
    m = train(ModelSpec("gbt", {"n_rounds": 5}), x, y)
    p = m.predict_proba(np.array([[np.nan, 1.0]]))
    assert np.isfinite(p).all()


def test_feature_vectors_as_input():
    w = Window(TrialKey("u", 1), 0, 30, 0)
    rng = np.random.default_rng(9)
    fvs = [FeatureVector(w, {"a": float(v), "b": 1.0}, {"a": "IMU", "b": "GYR"}) for v in rng.normal(size=40)]
    y = np.array([int(fv.features["a"] > 0) for fv in fvs])
    m = train(ModelSpec("logistic_regression"), fvs, y)
    assert m.feature_names == ("a", "b")
    np.testing.assert_array_equal(m.predict_proba(fvs), m.predict_proba(design_matrix(fvs, ["a", "b"])))
