import math

import numpy as np
import pytest
from scipy.optimize import minimize

from fairtopk.learners import (
    FOREST,
    LOGISTIC,
    MAX_ESTIMATORS,
    TREE,
    LogisticParams,
    ModelError,
    ModelSpec,
    TrainedModel,
    _best_split,
    _smooth_logistic,
    bootstrap_tree,
    default_grid,
    dumps_model,
    forest_tree_seeds,
    load_model,
    loads_model,
    logistic_loss,
    minimize_composite,
    save_model,
    score,
    stationarity,
    train,
    tree_scores,
)

from helpers import finite_difference_check, from_arrays


def _toy(n=200, d=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (rng.random(n) < 1 / (1 + np.exp(-(1.5 * X[:, 0] - X[:, 1])))).astype(int)
    groups = np.where(rng.random(n) < 0.4, "P", "NP")
    return from_arrays(X, y, groups)


# --- specs and grids -------------------------------------------------------------


def test_spec_defaults_and_key():
    s = ModelSpec(LOGISTIC)
    assert s.hyperparameters == {"penalty": "l2", "c": 1.0}
    assert s.key == "logistic_regression(c=1.0,penalty=l2)"
    assert ModelSpec.parse(s.key) == s


@pytest.mark.parametrize(
    "family, hp",
    [
        (LOGISTIC, {"penalty": "l3"}),
        (LOGISTIC, {"c": 0}),
        (LOGISTIC, {"max_depth": 3}),
        (TREE, {"max_depth": 0}),
        (TREE, {"min_samples_split": 1.5}),
        (TREE, {"criterion": "mse"}),
        (FOREST, {"n_estimators": MAX_ESTIMATORS + 1}),
        (FOREST, {"max_features": "half"}),
        ("adaboost", {}),
    ],
)
def test_spec_rejects_bad_values(family, hp):
    with pytest.raises(ModelError):
        ModelSpec(family, hp)


def test_small_grid():
    grid = default_grid("small")
    assert len(grid) <= 12
    assert {s.family for s in grid} == {LOGISTIC, TREE, FOREST}
    for s in grid:
        assert ModelSpec.parse(s.key) == s


def test_paper_like_grid_logistic_pairs():
    grid = default_grid("paper_like")
    pairs = {
        (s.hyperparameters["penalty"], s.hyperparameters["c"]) for s in grid if s.family == LOGISTIC
    }
    cs = (0.0001, 0.001, 0.01, 0.1, 1.0, 10.0)
    assert pairs == {(p, c) for p in ("l1", "l2") for c in cs}
    assert all(s.hyperparameters.get("n_estimators", 0) <= MAX_ESTIMATORS for s in grid)
    assert len(set(grid)) == len(grid)


def test_unknown_grid():
    with pytest.raises(ModelError):
        default_grid("huge")


# --- logistic regression -----------------------------------------------------------


@pytest.mark.parametrize("penalty", ["l1", "l2"])
def test_logistic_gradient_matches_finite_differences(penalty):
    ds = _toy(seed=1)
    X, y = ds.features, ds.labels.astype(float)
    rng = np.random.default_rng(7)
    for _ in range(10):
        theta = rng.normal(size=X.shape[1] + 1)
        if penalty == "l1":
            # keep every weight well away from the kink at zero
            theta[:-1] = np.sign(theta[:-1]) * (0.1 + np.abs(theta[:-1]))
        err, _, _ = finite_difference_check(lambda t: logistic_loss(t, X, y, penalty, 0.5), theta)
        assert err < 1e-5


def test_lr_matches_independent_optimizer():
    ds = _toy(seed=2)
    X, y = ds.features, ds.labels.astype(float)
    model = train(ModelSpec(LOGISTIC, {"penalty": "l2", "c": 0.1}), ds)
    theta = np.append(model.parameters.weights, model.parameters.intercept)
    ref = minimize(
        lambda t: logistic_loss(t, X, y, "l2", 0.1), np.zeros(4), jac=True, method="BFGS",
        options={"gtol": 1e-10},
    )
    np.testing.assert_allclose(theta, ref.x, atol=1e-5)
    _, g = logistic_loss(theta, X, y, "l2", 0.1)
    assert np.linalg.norm(g) <= 1e-6


def test_l1_solution_is_stationary_and_sparse():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 6))
    y = (X[:, 0] + 0.3 * rng.normal(size=300) > 0).astype(float)
    fn, l1 = _smooth_logistic(X, y, "l1", 0.02)
    theta, converged = minimize_composite(fn, np.zeros(7), l1)
    assert converged
    assert stationarity(theta, fn(theta)[1], l1) <= 1e-6
    assert theta[0] > 0
    assert np.count_nonzero(theta[1:6]) < 5


def test_converged_start_is_returned_unchanged():
    ds = _toy(seed=4)
    X, y = ds.features, ds.labels.astype(float)
    fn, l1 = _smooth_logistic(X, y, "l2", 1.0)
    theta, _ = minimize_composite(fn, np.zeros(4), l1)
    again, converged = minimize_composite(fn, theta, l1)
    assert converged
    assert np.array_equal(again, theta)


def test_separable_data_fits_perfectly():
    X = np.array([[0.0, 0.0], [1.0, 0.2], [0.2, 1.0], [3.0, 3.0], [4.0, 2.5], [2.5, 4.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    ds = from_arrays(X, y, ["P", "NP"] * 3)
    model = train(ModelSpec(LOGISTIC, {"penalty": "l2", "c": 1.0}), ds)
    assert ((score(model, ds) >= 0.5) == y.astype(bool)).all()


def test_single_informative_feature_gets_positive_weight():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(400, 3))
    y = (X[:, 0] > 0).astype(int)
    model = train(ModelSpec(LOGISTIC), from_arrays(X, y, ["P"] * 200 + ["NP"] * 200))
    assert model.parameters.weights[0] > 0
    assert abs(model.parameters.weights[0]) > 5 * np.abs(model.parameters.weights[1:]).max()


def test_zero_weights_score_one_half():
    ds = _toy(n=10)
    model = TrainedModel(ModelSpec(LOGISTIC), LogisticParams(np.zeros(3), 0.0), 0, ds.schema)
    assert np.array_equal(score(model, ds), np.full(10, 0.5))


def test_single_class_rejected():
    ds = from_arrays(np.zeros((4, 1)), [1, 1, 1, 1], ["P", "NP", "P", "NP"])
    for spec in default_grid("small")[:1] + [ModelSpec(TREE), ModelSpec(FOREST)]:
        with pytest.raises(ModelError):
            train(spec, ds)


def test_schema_mismatch():
    ds = _toy(n=20)
    model = train(ModelSpec(LOGISTIC), ds)
    other = from_arrays(np.zeros((2, 2)), [0, 1], ["P", "NP"])
    with pytest.raises(ModelError, match="schema"):
        score(model, other)


# --- trees ----------------------------------------------------------------------------


def _brute_split(X, y, criterion="gini"):
    """Lowest weighted impurity over all (feature, midpoint) pairs, scanned in order."""
    def imp(labels):
        if len(labels) == 0:
            return 0.0
        p = labels.mean()
        if criterion == "gini":
            return 1 - p * p - (1 - p) ** 2
        return -sum(q * math.log2(q) for q in (p, 1 - p) if q > 0)

    best = None
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (lo + hi)
            left = X[:, f] <= thr
            w = (left.sum() * imp(y[left]) + (~left).sum() * imp(y[~left])) / len(y)
            if best is None or w < best[0] - 1e-12:
                best = (w, f, thr)
    return best


@pytest.mark.parametrize("criterion", ["gini", "entropy"])
def test_best_split_matches_brute_force(criterion):
    rng = np.random.default_rng(11)
    for _ in range(25):
        n = int(rng.integers(4, 40))
        X = rng.integers(0, 6, size=(n, 3)).astype(float)
        y = (rng.random(n) < 0.5).astype(float)
        got = _best_split(X, y, np.arange(3), criterion)
        want = _brute_split(X, y, criterion)
        if want is None:
            assert got is None
            continue
        assert got[1] == want[1] and got[2] == want[2]
        assert got[0] == pytest.approx(want[0], abs=1e-12)


def test_split_ties_prefer_lower_feature_then_threshold():
    # columns 0 and 1 are identical, so every split ties across features
    X = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], dtype=float)
    y = np.array([0.0, 1.0, 0.0, 1.0])
    _, f, thr = _best_split(X, y, np.arange(2), "gini")
    assert f == 0
    assert thr == 0.5


def test_stump_cannot_fit_xor():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 10, dtype=float)
    y = np.array([0, 1, 1, 0] * 10)
    ds = from_arrays(X, y, ["P", "NP"] * 20)
    model = train(ModelSpec(TREE, {"max_depth": 1}), ds)
    acc = ((score(model, ds) >= 0.5) == y.astype(bool)).mean()
    assert acc <= 0.75
    deep = train(ModelSpec(TREE, {"max_depth": 2}), ds)
    assert ((score(deep, ds) >= 0.5) == y.astype(bool)).all()


def test_single_leaf_scores_positive_rate():
    ds = from_arrays(np.zeros((4, 1)), [1, 1, 1, 0], ["P", "NP", "P", "NP"])
    model = train(ModelSpec(TREE, {"min_samples_split": 10}), ds)
    assert np.array_equal(score(model, ds), np.full(4, 0.75))


def test_tree_respects_limits():
    ds = _toy(n=300, seed=6)
    model = train(ModelSpec(TREE, {"max_depth": 3, "min_samples_split": 20}), ds)
    t = model.parameters
    depth = {0: 0}
    for i in range(t.n_nodes):
        if t.feature[i] >= 0:
            depth[t.left[i]] = depth[t.right[i]] = depth[i] + 1
    assert max(depth.values()) <= 3


def test_forest_of_one_tree_equals_seeded_tree():
    ds = _toy(n=150, seed=8)
    spec = ModelSpec(FOREST, {"n_estimators": 1, "max_depth": 4})
    forest = train(spec, ds, seed=123)
    seq = forest_tree_seeds(123, 1)[0]
    tree = bootstrap_tree(ds.features, ds.labels.astype(float), seq, spec.hyperparameters)
    assert np.array_equal(score(forest, ds), tree_scores(tree, ds.features))


def test_forest_of_identical_trees_equals_one_tree():
    ds = _toy(n=100, seed=9)
    spec = ModelSpec(FOREST, {"n_estimators": 1})
    single = train(spec, ds, seed=5)
    tree = single.parameters.trees[0]
    from fairtopk.learners import ForestParams

    triple = TrainedModel(spec, ForestParams((tree, tree, tree)), 5, ds.schema)
    np.testing.assert_array_equal(score(triple, ds), score(single, ds))


def test_training_is_deterministic_per_seed():
    ds = _toy(n=200, seed=10)
    spec = ModelSpec(FOREST, {"n_estimators": 5, "max_depth": 4})
    a = dumps_model(train(spec, ds, seed=1))
    assert a == dumps_model(train(spec, ds, seed=1))
    assert a != dumps_model(train(spec, ds, seed=2))


def test_scores_in_unit_interval():
    ds = _toy(n=200, seed=12)
    for spec in default_grid("small"):
        s = score(train(spec, ds, seed=0), ds)
        assert np.isfinite(s).all() and (s >= 0).all() and (s <= 1).all()


# --- serialization ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "spec",
    [
        ModelSpec(LOGISTIC, {"penalty": "l1", "c": 0.3}),
        ModelSpec(TREE, {"max_depth": 4, "criterion": "entropy"}),
        ModelSpec(FOREST, {"n_estimators": 3, "max_features": "log2"}),
    ],
)
def test_model_round_trip(tmp_path, spec):
    ds = _toy(n=120, seed=13)
    model = train(spec, ds, seed=4)
    path = tmp_path / "m.txt"
    save_model(model, path)
    back = load_model(path)
    assert back.spec == model.spec
    assert back.train_seed == 4 and back.feature_schema == ds.schema
    assert np.array_equal(score(back, ds), score(model, ds))
    assert dumps_model(back) == path.read_text()


def test_bad_model_file():
    with pytest.raises(ModelError):
        loads_model("something else\n")
