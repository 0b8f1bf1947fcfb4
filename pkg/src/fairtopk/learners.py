"""Score-producing learners and the model grids they are trained over.

Three families are available: L1/L2 logistic regression, CART-style decision
trees, and bagged random forests. Every trained model maps a feature row to a
risk score in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, xlogy

LOGISTIC = "logistic_regression"
TREE = "decision_tree"
FOREST = "random_forest"
FAMILIES = (LOGISTIC, TREE, FOREST)

# Table-2 grids list up to 5000 trees; capped for desk-scale runs.
MAX_ESTIMATORS = 100

GRAD_TOL = 1e-6
MAX_ITER = 10_000

_DEFAULTS = {
    LOGISTIC: {"penalty": "l2", "c": 1.0},
    TREE: {"criterion": "gini", "max_depth": None, "min_samples_split": 2},
    FOREST: {
        "criterion": "gini",
        "max_depth": None,
        "min_samples_split": 2,
        "n_estimators": 10,
        "max_features": "sqrt",
    },
}


class ModelError(ValueError):
    pass


def _check_positive_int(name, v, allow_none=False):
    if v is None and allow_none:
        return
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v <= 0:
        raise ModelError(f"{name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class ModelSpec:
    family: str
    hyperparameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown model family {self.family!r}")
        allowed = _DEFAULTS[self.family]
        unknown = set(self.hyperparameters) - set(allowed)
        if unknown:
            raise ModelError(f"{self.family} does not take {sorted(unknown)}")
        hp = {**allowed, **self.hyperparameters}
        if self.family == LOGISTIC:
            if hp["penalty"] not in ("l1", "l2"):
                raise ModelError(f"penalty must be l1 or l2, got {hp['penalty']!r}")
            hp["c"] = float(hp["c"])
            if not hp["c"] > 0 or not math.isfinite(hp["c"]):
                raise ModelError("c must be a positive real")
        else:
            if hp["criterion"] not in ("gini", "entropy"):
                raise ModelError(f"criterion must be gini or entropy, got {hp['criterion']!r}")
            _check_positive_int("max_depth", hp["max_depth"], allow_none=True)
            _check_positive_int("min_samples_split", hp["min_samples_split"])
            if self.family == FOREST:
                _check_positive_int("n_estimators", hp["n_estimators"])
                if hp["n_estimators"] > MAX_ESTIMATORS:
                    raise ModelError(f"n_estimators is capped at {MAX_ESTIMATORS}")
                if hp["max_features"] not in ("sqrt", "log2", "all"):
                    raise ModelError("max_features must be sqrt, log2 or all")
        object.__setattr__(self, "hyperparameters", hp)

    @property
    def key(self) -> str:
        args = ",".join(f"{k}={self.hyperparameters[k]}" for k in sorted(self.hyperparameters))
        return f"{self.family}({args})"

    def __hash__(self):
        return hash(self.key)

    def __eq__(self, other):
        return isinstance(other, ModelSpec) and self.key == other.key

    @classmethod
    def parse(cls, text: str) -> "ModelSpec":
        """Inverse of :attr:`key`."""
        family, _, rest = text.strip().partition("(")
        hp = {}
        for item in filter(None, rest.rstrip(")").split(",")):
            name, _, value = item.partition("=")
            hp[name] = _parse_value(value)
        return cls(family, hp)


def _parse_value(text: str):
    text = text.strip()
    if text == "None":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


@dataclass(frozen=True, eq=False)
class LogisticParams:
    weights: np.ndarray
    intercept: float


@dataclass(frozen=True, eq=False)
class TreeParams:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass(frozen=True, eq=False)
class ForestParams:
    trees: tuple


@dataclass(frozen=True, eq=False)
class TrainedModel:
    spec: ModelSpec
    parameters: object
    train_seed: int
    feature_schema: tuple


# --- logistic regression -------------------------------------------------


def logistic_loss(theta: np.ndarray, X: np.ndarray, y: np.ndarray, penalty: str, c: float):
    """Regularized mean negative log-likelihood and its (sub)gradient.

    ``theta`` is ``[w..., b]``. The penalty is ``(1/(c*n)) * ||w||_1`` or
    ``(1/(c*n)) * ||w||^2 / 2``; the intercept is not penalized.
    """
    w, b = theta[:-1], theta[-1]
    n = len(y)
    z = X @ w + b
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    r = expit(z) - y
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ r / n
    grad[-1] = r.mean()
    lam = 1.0 / (c * n)
    if penalty == "l2":
        loss += 0.5 * lam * w @ w
        grad[:-1] += lam * w
    else:
        loss += lam * np.abs(w).sum()
        grad[:-1] += lam * np.sign(w)
    return loss, grad


def _smooth_logistic(X, y, penalty, c):
    n = len(y)
    lam = 1.0 / (c * n)

    def fn(theta):
        w, b = theta[:-1], theta[-1]
        z = X @ w + b
        loss = np.mean(np.logaddexp(0.0, z) - y * z)
        r = expit(z) - y
        grad = np.empty_like(theta)
        grad[:-1] = X.T @ r / n
        grad[-1] = r.mean()
        if penalty == "l2":
            loss += 0.5 * lam * w @ w
            grad[:-1] += lam * w
        return loss, grad

    l1 = np.zeros(X.shape[1] + 1)
    if penalty == "l1":
        l1[:-1] = lam
    return fn, l1


def _soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def stationarity(theta, grad, l1):
    """Norm of the minimum-norm subgradient of ``f + sum(l1 * |theta|)``."""
    g = np.where(theta != 0, grad + l1 * np.sign(theta), _soft_threshold(grad, l1))
    return float(np.linalg.norm(g))


def minimize_composite(
    fn: Callable,
    theta0: np.ndarray,
    l1: np.ndarray,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
) -> tuple[np.ndarray, bool]:
    """Accelerated proximal gradient with backtracking and adaptive restart.

    Minimizes ``fn(theta)[0] + sum(l1 * |theta|)``. Returns the first point
    whose minimum-norm subgradient is at most ``tol`` (so a converged start
    point is returned unchanged), or the last iterate after ``max_iter``.
    """
    x = np.array(theta0, dtype=float)
    y = x.copy()
    t_mom = 1.0
    L = 1.0
    fx = fn(x)[0] + l1 @ np.abs(x)
    for _ in range(max_iter):
        fy, gy = fn(y)
        if not np.isfinite(fy):
            raise ModelError("non-finite loss during optimization")
        if stationarity(y, gy, l1) <= tol:
            return y, True
        while True:
            x_new = _soft_threshold(y - gy / L, l1 / L)
            d = x_new - y
            f_new = fn(x_new)[0]
            if f_new <= fy + gy @ d + 0.5 * L * (d @ d) + 1e-12 * abs(fy):
                break
            L *= 2.0
        F_new = f_new + l1 @ np.abs(x_new)
        if F_new > fx:
            # restart momentum from the current point
            t_mom = 1.0
            y = x.copy()
            continue
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
        y = x_new + ((t_mom - 1.0) / t_next) * (x_new - x)
        x, fx, t_mom = x_new, F_new, t_next
    return x, False


def _fit_logistic(X, y, penalty, c, theta0=None):
    fn, l1 = _smooth_logistic(X, y.astype(float), penalty, c)
    if theta0 is None:
        theta0 = np.zeros(X.shape[1] + 1)
    theta, _ = minimize_composite(fn, theta0, l1)
    return theta


# --- trees ---------------------------------------------------------------


def _impurity(pos, n, criterion):
    p = np.divide(pos, n, out=np.zeros_like(pos, dtype=float), where=n > 0)
    if criterion == "gini":
        return 2.0 * p * (1.0 - p)
    return -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p)) / math.log(2.0)


def _n_features(max_features, d):
    if max_features == "sqrt":
        return max(1, int(math.sqrt(d)))
    if max_features == "log2":
        return max(1, int(math.log2(d))) if d > 1 else 1
    return d


def _best_split(Xn, yn, features, criterion):
    """Lowest weighted child impurity; ties go to lower feature, then threshold."""
    m = len(yn)
    best = None
    order = np.argsort(Xn[:, features], axis=0, kind="stable")
    total_pos = yn.sum()
    n_left = np.arange(1, m)
    for j, f in enumerate(features):
        xs = Xn[order[:, j], f]
        cum = np.cumsum(yn[order[:, j]])[:-1]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        imp = (
            n_left * _impurity(cum, n_left, criterion)
            + (m - n_left) * _impurity(total_pos - cum, m - n_left, criterion)
        ) / m
        imp = np.where(valid, imp, np.inf)
        i = int(np.argmin(imp))
        if best is None or imp[i] < best[0]:
            thr = 0.5 * (xs[i] + xs[i + 1])
            if not xs[i] <= thr < xs[i + 1]:
                thr = xs[i]
            best = (imp[i], f, thr)
    return best


def _build_tree(X, y, index, rng, criterion, max_depth, min_samples_split, max_features):
    d = X.shape[1]
    k = _n_features(max_features, d)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(feature) - 1

    stack = [(new_node(index), index, 0)]
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        pos = yn.sum()
        if (
            len(idx) < min_samples_split
            or (max_depth is not None and depth >= max_depth)
            or pos == 0
            or pos == len(idx)
        ):
            continue
        if k < d:
            feats = np.sort(rng.choice(d, size=k, replace=False))
        else:
            feats = np.arange(d)
        split = _best_split(X[idx], yn, feats, criterion)
        if split is None:
            continue
        _, f, thr = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = int(f), float(thr)
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return TreeParams(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=float),
    )


def tree_scores(tree: TreeParams, X: np.ndarray) -> np.ndarray:
    node = np.zeros(len(X), dtype=np.int64)
    active = tree.feature[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        nd = node[idx]
        go_left = X[idx, tree.feature[nd]] <= tree.threshold[nd]
        node[idx] = np.where(go_left, tree.left[nd], tree.right[nd])
        active = tree.feature[node] >= 0
    return tree.value[node]


def forest_tree_seeds(seed: int, n_estimators: int):
    return np.random.SeedSequence(seed).spawn(n_estimators)


def bootstrap_tree(X, y, seed_seq, hp):
    """One forest member: bootstrap sample, then a tree with feature subsampling."""
    rng = np.random.default_rng(seed_seq)
    index = rng.integers(0, len(y), size=len(y))
    return _build_tree(
        X, y, index, rng, hp["criterion"], hp["max_depth"], hp["min_samples_split"],
        hp["max_features"],
    )


# --- public API ----------------------------------------------------------


def _xy(data):
    return np.asarray(data.features, dtype=float), np.asarray(data.labels)


def train(spec: ModelSpec, train: "Dataset", seed: int = 0) -> TrainedModel:
    if len(train) == 0:
        raise ModelError("cannot train on an empty dataset")
    X, y = _xy(train)
    if y.min() == y.max():
        raise ModelError("training data must contain both labels")
    hp = spec.hyperparameters
    if spec.family == LOGISTIC:
        theta = _fit_logistic(X, y, hp["penalty"], hp["c"])
        params = LogisticParams(theta[:-1].copy(), float(theta[-1]))
    elif spec.family == TREE:
        rng = np.random.default_rng(seed)
        params = _build_tree(
            X, y.astype(float), np.arange(len(y)), rng, hp["criterion"], hp["max_depth"],
            hp["min_samples_split"], "all",
        )
    else:
        yf = y.astype(float)
        params = ForestParams(
            tuple(bootstrap_tree(X, yf, s, hp) for s in forest_tree_seeds(seed, hp["n_estimators"]))
        )
    return TrainedModel(spec, params, int(seed), tuple(train.schema))


def score(model: TrainedModel, records) -> np.ndarray:
    """Risk scores in ``[0, 1]``; higher means higher risk."""
    if tuple(records.schema) != model.feature_schema:
        raise ModelError(
            f"schema mismatch: model expects {model.feature_schema}, got {tuple(records.schema)}"
        )
    X = np.asarray(records.features, dtype=float)
    p = model.parameters
    if isinstance(p, LogisticParams):
        return expit(X @ p.weights + p.intercept)
    if isinstance(p, TreeParams):
        return tree_scores(p, X)
    return np.mean([tree_scores(t, X) for t in p.trees], axis=0)


def default_grid(profile: str = "small") -> list[ModelSpec]:
    if profile == "small":
        specs = [ModelSpec(LOGISTIC, {"penalty": p, "c": c}) for p, c in product(("l1", "l2"), (0.01, 1.0))]
        specs += [
            ModelSpec(TREE, {"max_depth": d, "min_samples_split": 50}) for d in (1, 3, 5, 10)
        ]
        specs += [
            ModelSpec(FOREST, {"n_estimators": 10, "max_depth": d, "min_samples_split": 50})
            for d in (3, 6)
        ]
        return specs
    if profile == "paper_like":
        specs = []
        rf = sorted(
            {
                (min(n, MAX_ESTIMATORS), mss, d)
                for n, mss, d in product((100, 500, 1000), (10, 50), (10, 50, 100))
            }
        )
        specs += [
            ModelSpec(FOREST, {"n_estimators": n, "min_samples_split": mss, "max_depth": d})
            for n, mss, d in rf
        ]
        specs += [
            ModelSpec(TREE, {"max_depth": d, "min_samples_split": mss})
            for d, mss in product((1, 5, 10, 20, 50, 100), (2, 5, 10, 100, 1000))
        ]
        specs += [
            ModelSpec(LOGISTIC, {"penalty": p, "c": c})
            for c, p in product((0.0001, 0.001, 0.01, 0.1, 1, 10), ("l1", "l2"))
        ]
        return specs
    raise ModelError(f"unknown grid profile {profile!r}")


# --- serialization -------------------------------------------------------

_HEADER = "fairtopk-model 1"


def _num(v) -> str:
    return repr(float(v))


def _tree_lines(t: TreeParams, tag: str):
    yield f"{tag} {t.n_nodes}"
    for i in range(t.n_nodes):
        yield f"node {t.feature[i]} {_num(t.threshold[i])} {t.left[i]} {t.right[i]} {_num(t.value[i])}"


def dumps_model(model: TrainedModel) -> str:
    lines = [_HEADER, f"family {model.spec.family}"]
    for k in sorted(model.spec.hyperparameters):
        lines.append(f"hyperparameter {k} {model.spec.hyperparameters[k]}")
    lines.append(f"train_seed {model.train_seed}")
    lines.extend(f"feature {name}" for name in model.feature_schema)
    p = model.parameters
    if isinstance(p, LogisticParams):
        lines.append(f"intercept {_num(p.intercept)}")
        lines.extend(f"weight {_num(w)}" for w in p.weights)
    elif isinstance(p, TreeParams):
        lines.extend(_tree_lines(p, "tree"))
    else:
        for t in p.trees:
            lines.extend(_tree_lines(t, "tree"))
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> TrainedModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != _HEADER:
        raise ModelError("not a fairtopk model file")
    family, hp, seed, schema = None, {}, 0, []
    weights, intercept, trees = [], 0.0, []
    it = iter(lines[1:])
    for line in it:
        tag, _, rest = line.partition(" ")
        if tag == "family":
            family = rest
        elif tag == "hyperparameter":
            name, _, value = rest.partition(" ")
            hp[name] = _parse_value(value)
        elif tag == "train_seed":
            seed = int(rest)
        elif tag == "feature":
            schema.append(rest)
        elif tag == "intercept":
            intercept = float(rest)
        elif tag == "weight":
            weights.append(float(rest))
        elif tag == "tree":
            rows = [next(it).split()[1:] for _ in range(int(rest))]
            trees.append(
                TreeParams(
                    np.array([int(r[0]) for r in rows], dtype=np.int64),
                    np.array([float(r[1]) for r in rows]),
                    np.array([int(r[2]) for r in rows], dtype=np.int64),
                    np.array([int(r[3]) for r in rows], dtype=np.int64),
                    np.array([float(r[4]) for r in rows]),
                )
            )
        elif line.strip():
            raise ModelError(f"unrecognized model line {line!r}")
    spec = ModelSpec(family, hp)
    if family == LOGISTIC:
        params = LogisticParams(np.array(weights, dtype=float), intercept)
    elif family == TREE:
        params = trees[0]
    else:
        params = ForestParams(tuple(trees))
    return TrainedModel(spec, params, seed, tuple(schema))


def save_model(model: TrainedModel, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def load_model(path) -> TrainedModel:
    return loads_model(Path(path).read_text(encoding="utf-8"))
