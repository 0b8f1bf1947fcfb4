"""Top-k selection, precision@k, per-group recall and recall disparity."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

INF = math.inf
CI_Z = 1.96


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class TopKSelection:
    k: int
    selected_ids: frozenset
    tie_seed: int
    # positions of the selected entries in the scored population, best first
    indices: tuple = ()

    def __len__(self) -> int:
        return len(self.selected_ids)


def _tie_keys(ids: np.ndarray, tie_seed: int) -> np.ndarray:
    """Random keys assigned in sorted-id order, so they follow the entity."""
    n = len(ids)
    keys = np.empty(n)
    order = np.argsort(np.asarray(ids).astype(str), kind="stable")
    keys[order] = np.random.default_rng(tie_seed).random(n)
    return keys


def rank_order(scores, ids, tie_seed: int) -> np.ndarray:
    """Positions sorted by descending score; equal scores in seeded random order."""
    scores = np.asarray(scores, dtype=float)
    keys = _tie_keys(np.asarray(ids), tie_seed)
    return np.lexsort((np.arange(len(scores)), keys, -scores))


def select_top_k(scores, ids, k: int, tie_seed: int = 0) -> TopKSelection:
    scores = np.asarray(scores, dtype=float)
    ids = np.asarray(ids)
    if k <= 0:
        raise MetricError("k must be positive")
    if len(ids) != len(scores):
        raise MetricError("ids and scores differ in length")
    if not np.isfinite(scores).all():
        raise MetricError("scores must be finite")
    top = rank_order(scores, ids, tie_seed)[:k]
    return TopKSelection(k, frozenset(ids[top].tolist()), tie_seed, tuple(top.tolist()))


def precision_at_k(selection: TopKSelection, labels: Mapping) -> float:
    if not selection.selected_ids:
        raise MetricError("empty selection")
    hits = 0
    for i in selection.selected_ids:
        if i not in labels:
            raise MetricError(f"selected id {i!r} has no label")
        hits += int(labels[i])
    return hits / len(selection.selected_ids)


def recall_by_group(selection: TopKSelection, labels: Mapping, groups: Mapping) -> dict:
    """TPR per group; ``None`` for a group without positives."""
    positives: dict = {}
    found: dict = {}
    for i, y in labels.items():
        g = groups[i]
        positives.setdefault(g, 0)
        found.setdefault(g, 0)
        if y == 1:
            positives[g] += 1
            if i in selection.selected_ids:
                found[g] += 1
    return {g: (found[g] / positives[g] if positives[g] else None) for g in positives}


def recall_disparity(tpr_protected: Optional[float], tpr_nonprotected: Optional[float]) -> float:
    """``TPR(NP) / TPR(P)``: 1 is parity, above 1 favours the non-protected group."""
    if tpr_protected is None or tpr_nonprotected is None:
        raise MetricError("recall disparity needs both group TPRs")
    if tpr_protected == 0:
        return 1.0 if tpr_nonprotected == 0 else INF
    return tpr_nonprotected / tpr_protected


def reciprocal_disparity(d: float) -> float:
    if d == 0:
        return INF
    return 0.0 if math.isinf(d) else 1.0 / d


@dataclass(frozen=True)
class Aggregate:
    mean: float
    standard_error: float
    ci_low: float
    ci_high: float
    n: int
    n_infinite: int = 0


def aggregate(values: Sequence[float]) -> Aggregate:
    """Mean, standard error and normal 95% interval; infinities are counted apart."""
    vals = [float(v) for v in values]
    n_inf = sum(1 for v in vals if math.isinf(v))
    finite = np.array([v for v in vals if math.isfinite(v)])
    if finite.size == 0:
        raise MetricError("aggregate needs at least one finite value")
    mean = float(finite.mean())
    se = float(finite.std(ddof=1) / math.sqrt(finite.size)) if finite.size > 1 else 0.0
    return Aggregate(mean, se, mean - CI_Z * se, mean + CI_Z * se, int(finite.size), n_inf)


# --- array helpers used by the pipeline ---------------------------------


@dataclass(frozen=True)
class SplitMetrics:
    precision_at_k: float
    recall_protected: Optional[float]
    recall_nonprotected: Optional[float]
    disparity: Optional[float]


def evaluate_indices(selected: np.ndarray, labels: np.ndarray, is_protected: np.ndarray) -> SplitMetrics:
    """Metrics for a selection given as positions into aligned arrays."""
    chosen = np.zeros(len(labels), dtype=bool)
    chosen[np.asarray(selected, dtype=np.int64)] = True
    pos = labels == 1
    prec = float(pos[chosen].mean())
    tprs = []
    for g in (is_protected, ~is_protected):
        npos = int((pos & g).sum())
        tprs.append(float((pos & g & chosen).sum()) / npos if npos else None)
    disparity = None
    if tprs[0] is not None and tprs[1] is not None:
        disparity = recall_disparity(tprs[0], tprs[1])
    return SplitMetrics(prec, tprs[0], tprs[1], disparity)
