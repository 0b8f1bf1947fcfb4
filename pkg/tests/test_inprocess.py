import numpy as np
import pytest

from fairtopk.inprocess import (
    EPSILON,
    FairnessConstraint,
    fit_constrained,
    hard_fnr_gap,
    penalized_objective,
    soft_fnr_gap,
    train_constrained,
)
from fairtopk.learners import LOGISTIC, LogisticParams, ModelError, ModelSpec, TrainedModel, train
from fairtopk.synthetic import SyntheticSpec, generate_synthetic

from helpers import finite_difference_check, from_arrays


def _fixed_model(schema):
    w = np.zeros(len(schema))
    w[0] = 1.0
    return TrainedModel(ModelSpec(LOGISTIC), LogisticParams(w, 0.0), 0, tuple(schema))


def test_hard_gap_hand_count():
    # P positives: 2 of 5 below zero; NP positives: 1 of 10 below zero
    x = [-1, -2, 1, 2, 3] + [-1] + [1] * 9 + [5, 5]
    y = [1] * 15 + [0, 0]
    g = ["P"] * 5 + ["NP"] * 10 + ["P", "NP"]
    ds = from_arrays(np.array(x, dtype=float)[:, None], y, g)
    assert hard_fnr_gap(_fixed_model(ds.schema), ds) == pytest.approx(0.3, abs=1e-15)


def test_hard_gap_zero_when_all_positives_above_cutoff():
    ds = from_arrays(np.array([[1.0], [2.0], [3.0], [-4.0]]), [1, 1, 1, 0], ["P", "NP", "P", "NP"])
    assert hard_fnr_gap(_fixed_model(ds.schema), ds) == 0.0


def test_hard_gap_mirrored_groups():
    x = np.array([-1.0, 0.5, 2.0, -3.0])
    ds = from_arrays(np.concatenate([x, x])[:, None], [1, 1, 1, 0] * 2, ["P"] * 4 + ["NP"] * 4)
    assert hard_fnr_gap(_fixed_model(ds.schema), ds) == 0.0


def test_hard_gap_needs_positives_in_both_groups():
    ds = from_arrays(np.array([[1.0], [2.0]]), [1, 0], ["P", "NP"])
    with pytest.raises(ModelError):
        hard_fnr_gap(_fixed_model(ds.schema), ds)


def test_constraint_validation():
    with pytest.raises(ValueError):
        FairnessConstraint(epsilon=-1)
    with pytest.raises(ValueError):
        FairnessConstraint(temperature=0)
    with pytest.raises(ValueError):
        FairnessConstraint(penalty_growth=1.0)
    assert FairnessConstraint().schedule() == [1.0, 10.0, 100.0, 1000.0, 10000.0, 100000.0]


def _gap_data(n=3000, seed=0):
    spec = SyntheticSpec(
        n=n, informative_weight_p=1.0, informative_weight_np=3.0, noise_sd=0.5, seed=seed
    )
    return generate_synthetic(spec)


@pytest.mark.parametrize("penalty", ["l1", "l2"])
def test_penalized_gradient(penalty):
    ds = _gap_data(800, seed=1)
    X, y = ds.features, ds.labels.astype(float)
    pos = ds.labels == 1
    X_p, X_np = X[pos & ds.is_protected], X[pos & ~ds.is_protected]
    rng = np.random.default_rng(2)
    for temperature in (0.05, 0.1, 1.0):
        c = FairnessConstraint(epsilon=EPSILON, temperature=temperature)
        fn, _ = penalized_objective(X, y, X_p, X_np, penalty, 1.0, c, lam=50.0)
        checked = 0
        while checked < 5:
            theta = rng.normal(scale=0.3, size=X.shape[1] + 1)
            gap, _ = soft_fnr_gap(theta, X_p, X_np, temperature)
            if abs(abs(gap) - EPSILON) < 1e-3:
                continue  # too close to the penalty's kink
            err, _, _ = finite_difference_check(fn, theta)
            assert err < 1e-5
            checked += 1


def test_soft_gap_sign():
    X_p = np.array([[-1.0], [-2.0]])
    X_np = np.array([[1.0], [2.0]])
    gap, _ = soft_fnr_gap(np.array([1.0, 0.0]), X_p, X_np, 0.1)
    assert gap > 0.9


def test_inactive_constraint_matches_plain_training():
    ds = _gap_data(1500, seed=3)
    hp = {"penalty": "l2", "c": 1.0}
    plain = train(ModelSpec(LOGISTIC, hp), ds)
    fit = fit_constrained(ds, hp, FairnessConstraint(epsilon=10.0))
    assert np.array_equal(fit.model.parameters.weights, plain.parameters.weights)
    assert fit.model.parameters.intercept == plain.parameters.intercept
    assert all(v == 0 for v in fit.violations)


@pytest.mark.parametrize("penalty", ["l1", "l2"])
def test_constraint_reduces_train_gap(penalty):
    ds = _gap_data(3000, seed=4)
    hp = {"penalty": penalty, "c": 1.0}
    plain = train(ModelSpec(LOGISTIC, hp), ds)
    fit = fit_constrained(ds, hp, FairnessConstraint(epsilon=EPSILON))
    before = hard_fnr_gap(plain, ds)
    after = hard_fnr_gap(fit.model, ds)
    assert before > 0.05
    assert after < before


def test_violation_is_non_increasing_across_rounds():
    ds = _gap_data(2000, seed=5)
    fit = fit_constrained(ds, {"penalty": "l2", "c": 1.0}, FairnessConstraint())
    v = fit.violations
    assert len(v) == 6
    assert all(b <= a + 1e-8 for a, b in zip(v, v[1:]))


def test_constrained_model_scores_like_any_lr():
    ds = _gap_data(1000, seed=6)
    model = train_constrained(ds, {"penalty": "l2", "c": 1.0}, FairnessConstraint())
    assert model.spec.family == LOGISTIC
    assert model.feature_schema == ds.schema


def test_group_without_positives():
    ds = from_arrays(np.array([[1.0], [2.0], [0.0]]), [1, 0, 0], ["NP", "P", "P"])
    with pytest.raises(ModelError):
        fit_constrained(ds, {}, FairnessConstraint())
