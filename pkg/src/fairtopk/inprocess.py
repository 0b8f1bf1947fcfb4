"""Logistic regression trained under a false-negative-rate parity constraint.

The constraint ``|FNR(P) - FNR(NP)| <= epsilon`` is enforced with a quadratic
penalty on a smooth surrogate: the hard miss indicator ``score < 0.5`` for a
positive example becomes ``sigmoid(-logit / temperature)``. The penalty weight
grows geometrically over a fixed number of warm-started rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .dataset import Dataset
from .learners import (
    LOGISTIC,
    LogisticParams,
    ModelError,
    ModelSpec,
    TrainedModel,
    _smooth_logistic,
    minimize_composite,
    score,
)

EPSILON = 0.0001


@dataclass(frozen=True)
class FairnessConstraint:
    epsilon: float = EPSILON
    temperature: float = 0.1
    penalty_start: float = 1.0
    penalty_growth: float = 10.0
    max_outer_iters: int = 6

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.penalty_start <= 0 or self.penalty_growth <= 1:
            raise ValueError("penalty schedule needs start > 0 and growth > 1")
        if self.max_outer_iters <= 0:
            raise ValueError("max_outer_iters must be positive")

    def schedule(self) -> list[float]:
        return [self.penalty_start * self.penalty_growth**j for j in range(self.max_outer_iters)]


def _positive_groups(data: Dataset):
    pos = data.labels == 1
    prot = data.is_protected
    g_p, g_np = pos & prot, pos & ~prot
    if not g_p.any() or not g_np.any():
        raise ModelError("both groups need at least one positive example")
    return g_p, g_np


def soft_fnr_gap(theta, X_p, X_np, temperature):
    """Signed surrogate gap ``softFNR(P) - softFNR(NP)`` and its gradient."""
    out = []
    for Xg in (X_p, X_np):
        z = Xg @ theta[:-1] + theta[-1]
        s = expit(-z / temperature)
        ds = -s * (1.0 - s) / temperature  # d s / d z
        g = np.empty_like(theta)
        g[:-1] = Xg.T @ ds / len(Xg)
        g[-1] = ds.mean()
        out.append((s.mean(), g))
    (f_p, g_p), (f_np, g_np) = out
    return f_p - f_np, g_p - g_np


def surrogate_violation(theta, X_p, X_np, constraint: FairnessConstraint) -> float:
    gap, _ = soft_fnr_gap(theta, X_p, X_np, constraint.temperature)
    return max(0.0, abs(gap) - constraint.epsilon)


def penalized_objective(X, y, X_p, X_np, penalty, c, constraint: FairnessConstraint, lam):
    """Smooth part of the penalized objective plus the L1 weights for the prox step."""
    base, l1 = _smooth_logistic(X, y, penalty, c)
    eps, temp = constraint.epsilon, constraint.temperature

    def fn(theta):
        f, g = base(theta)
        gap, dgap = soft_fnr_gap(theta, X_p, X_np, temp)
        excess = abs(gap) - eps
        if excess > 0:
            f = f + lam * excess * excess
            g = g + 2.0 * lam * excess * np.sign(gap) * dgap
        return f, g

    return fn, l1


@dataclass
class ConstrainedFit:
    model: TrainedModel
    unconstrained: np.ndarray
    # surrogate violation after each outer round
    violations: list = field(default_factory=list)


def fit_constrained(
    train: Dataset, lr_hyperparameters: dict, constraint: FairnessConstraint, seed: int = 0
) -> ConstrainedFit:
    spec = ModelSpec(LOGISTIC, dict(lr_hyperparameters))
    if len(train) == 0 or train.labels.min() == train.labels.max():
        raise ModelError("training data must contain both labels")
    g_p, g_np = _positive_groups(train)
    X = np.asarray(train.features, dtype=float)
    y = train.labels.astype(float)
    X_p, X_np = X[g_p], X[g_np]
    hp = spec.hyperparameters

    base, l1 = _smooth_logistic(X, y, hp["penalty"], hp["c"])
    theta, _ = minimize_composite(base, np.zeros(X.shape[1] + 1), l1)
    start = theta.copy()
    violations = []
    for lam in constraint.schedule():
        fn, l1 = penalized_objective(X, y, X_p, X_np, hp["penalty"], hp["c"], constraint, lam)
        theta, _ = minimize_composite(fn, theta, l1)
        if not np.isfinite(theta).all():
            raise ModelError("non-finite parameters in constrained training")
        violations.append(surrogate_violation(theta, X_p, X_np, constraint))
    model = TrainedModel(
        spec, LogisticParams(theta[:-1].copy(), float(theta[-1])), int(seed), tuple(train.schema)
    )
    return ConstrainedFit(model, start, violations)


def train_constrained(
    train: Dataset, lr_hyperparameters: dict, constraint: FairnessConstraint, seed: int = 0
) -> TrainedModel:
    return fit_constrained(train, lr_hyperparameters, constraint, seed).model


def hard_fnr_gap(model: TrainedModel, data: Dataset, cutoff: float = 0.5) -> float:
    """``|FNR(P) - FNR(NP)|`` where a positive scored below ``cutoff`` is a miss."""
    g_p, g_np = _positive_groups(data)
    missed = score(model, data) < cutoff
    return float(abs(missed[g_p].mean() - missed[g_np].mean()))
