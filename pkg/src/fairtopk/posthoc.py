"""Group-specific top-k quotas that equalize recall at a fixed budget.

Within a group, recall only grows as more of its top-scored members are
taken, so a single scan over ``k_P = 0..k`` (with ``k_NP = k - k_P``) finds
the split of the budget with the smallest recall gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import MetricError, TopKSelection, rank_order


class QuotaError(ValueError):
    pass


@dataclass(frozen=True)
class GroupQuota:
    k_total: int
    k_protected: int
    k_nonprotected: int
    achieved_gap: float
    # True when the recall difference meets or changes sign over the feasible
    # splits; with a fixed total this always holds, kept as a checked diagnostic
    crossing: bool = True

    def __post_init__(self):
        if self.k_protected + self.k_nonprotected != self.k_total:
            raise QuotaError("group quotas must sum to k_total")
        if min(self.k_protected, self.k_nonprotected) < 0:
            raise QuotaError("group quotas must be nonnegative")

    @property
    def at_boundary(self) -> bool:
        return self.k_protected in (0, self.k_total) or self.k_nonprotected == 0


def _positions(ids, n):
    return np.arange(n) if ids is None else np.asarray(ids)


def _group_curve(scores, labels, ids, mask, tie_seed):
    """Cumulative positives among the group's top-j members, j = 0..n_g."""
    idx = np.flatnonzero(mask)
    order = idx[rank_order(scores[idx], ids[idx], tie_seed)]
    cum = np.concatenate([[0], np.cumsum(labels[order] == 1)])
    return order, cum


def _protected_mask(groups, protected):
    groups = np.asarray(groups)
    if groups.dtype == bool:
        return groups
    return groups == protected


def equalize_tpr_quota(
    scores, labels, groups, k: int, tie_seed: int = 0, *, protected="P", ids=None
) -> GroupQuota:
    """Budget split minimizing ``|TPR(P) - TPR(NP)|``.

    Gap ties go to the higher combined precision, then the smaller protected
    quota. ``groups`` is either a boolean protected mask or group tokens
    compared against ``protected``.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    prot = _protected_mask(groups, protected)
    ids = _positions(ids, len(scores))
    n_p, n_np = int(prot.sum()), int((~prot).sum())
    if k <= 0:
        raise QuotaError("k must be positive")
    if k > n_p + n_np:
        raise QuotaError(f"k={k} exceeds population {n_p + n_np}")
    _, cum_p = _group_curve(scores, labels, ids, prot, tie_seed)
    _, cum_np = _group_curve(scores, labels, ids, ~prot, tie_seed)
    pos_p, pos_np = int(cum_p[-1]), int(cum_np[-1])
    if pos_p == 0 or pos_np == 0:
        raise QuotaError("both groups need at least one positive")

    kp = np.arange(max(0, k - n_np), min(k, n_p) + 1)
    hit_p, hit_np = cum_p[kp], cum_np[k - kp]
    # TPR(P) - TPR(NP) scaled by pos_p * pos_np: exact integers
    diff = hit_p * pos_np - hit_np * pos_p
    gap = np.abs(diff)
    hits = hit_p + hit_np
    best = np.lexsort((kp, -hits, gap))[0]
    crossing = bool((diff <= 0).any() and (diff >= 0).any())
    return GroupQuota(
        k, int(kp[best]), int(k - kp[best]), float(gap[best]) / (pos_p * pos_np), crossing
    )


def apply_quota(scores, groups, quota: GroupQuota, tie_seed: int = 0, *, protected="P", ids=None) -> TopKSelection:
    """Take the top ``k_g`` members of each group independently."""
    scores = np.asarray(scores, dtype=float)
    prot = _protected_mask(groups, protected)
    pos_ids = _positions(ids, len(scores))
    chosen = []
    for mask, kg in ((prot, quota.k_protected), (~prot, quota.k_nonprotected)):
        idx = np.flatnonzero(mask)
        if kg > len(idx):
            raise QuotaError(f"quota {kg} exceeds group population {len(idx)}")
        chosen.append(idx[rank_order(scores[idx], pos_ids[idx], tie_seed)[:kg]])
    top = np.concatenate(chosen)
    return TopKSelection(
        quota.k_total, frozenset(pos_ids[top].tolist()), tie_seed, tuple(top.tolist())
    )
