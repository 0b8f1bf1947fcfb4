"""Synthetic two-group data with built-in recall disparity.

Disparity comes from two sources: a lower protected base rate and a weaker
link between the informative feature and the label in the protected group.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .dataset import Dataset

PROTECTED_COLUMN = "protected"


class SyntheticError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 20_000
    protected_fraction: float = 0.3
    base_rate_p: float = 0.12
    base_rate_np: float = 0.24
    n_features: int = 5
    informative_weight_p: float = 2.5
    informative_weight_np: float = 3.0
    noise_sd: float = 0.25
    start: dt.date = dt.date(2010, 1, 1)
    end: dt.date = dt.date(2011, 7, 1)
    seed: int = 0
    protected_token: str = "P"
    nonprotected_token: str = "NP"

    def __post_init__(self):
        if self.n <= 0 or self.n_features <= 0:
            raise SyntheticError("n and n_features must be positive")
        for name in ("protected_fraction", "base_rate_p", "base_rate_np"):
            if not 0 < getattr(self, name) < 1:
                raise SyntheticError(f"{name} must lie strictly between 0 and 1")
        if self.noise_sd <= 0:
            raise SyntheticError("noise_sd must be positive")
        if self.end <= self.start:
            raise SyntheticError("time span end must follow start")


def _calibrate_offset(base: np.ndarray, target: float) -> float:
    """Offset ``o`` with ``mean(sigmoid(base + o)) == target``."""
    f = lambda o: expit(base + o).mean() - target
    lo, hi = -60.0, 60.0
    if not f(lo) < 0 < f(hi):
        raise SyntheticError(f"base rate {target} is unattainable for this signal")
    return brentq(f, lo, hi, xtol=1e-12)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    """Features ``x0..x{d-1}`` ~ N(0, 1) plus a protected-membership column.

    Only ``x0`` carries signal: ``P(y=1) = sigmoid(w_g * x0 + o_g + noise)``
    with the group offset ``o_g`` solved so the group's mean probability
    equals its target base rate.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    prot = rng.random(n) < spec.protected_fraction
    X = rng.standard_normal((n, spec.n_features))
    noise = rng.normal(0.0, spec.noise_sd, n)
    logit = np.empty(n)
    for mask, w, rate in (
        (prot, spec.informative_weight_p, spec.base_rate_p),
        (~prot, spec.informative_weight_np, spec.base_rate_np),
    ):
        if not mask.any():
            raise SyntheticError("a group received no records; increase n")
        base = w * X[mask, 0] + noise[mask]
        logit[mask] = base + _calibrate_offset(base, rate)
    labels = (rng.random(n) < expit(logit)).astype(np.int8)
    days = (spec.end - spec.start).days
    times = np.datetime64(spec.start, "D") + rng.integers(0, days, size=n)
    features = np.column_stack([X, prot.astype(float)])
    schema = tuple(f"x{j}" for j in range(spec.n_features)) + (PROTECTED_COLUMN,)
    width = len(str(n))
    return Dataset(
        schema=schema,
        entity_ids=np.array([f"e{i:0{width}d}" for i in range(n)]),
        as_of_time=times,
        features=features,
        labels=labels,
        groups=np.where(prot, spec.protected_token, spec.nonprotected_token),
        protected_token=spec.protected_token,
        nonprotected_token=spec.nonprotected_token,
        protected_feature_index=spec.n_features,
    )
