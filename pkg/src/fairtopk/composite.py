"""Composite models: one model per group, joined into a single top-k list.

Per-group models come either from the shared grid (coupled selection) or from
the shared grid plus models trained on the group alone (decoupled training).
Because scores from different models are not comparable, the default join is
the recall-equalizing quota from :mod:`fairtopk.posthoc`; a pooled single
threshold is kept for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .dataset import Dataset
from .learners import ModelError, ModelSpec, TrainedModel, score, train
from .metrics import TopKSelection, rank_order, select_top_k
from .posthoc import apply_quota, equalize_tpr_quota

COUPLED = "coupled_selection"
DECOUPLED = "decoupled_training"
TPR_QUOTA = "tpr_quota"
SINGLE_THRESHOLD = "single_threshold"


class CompositeError(ValueError):
    pass


@dataclass
class CompositePolicy:
    mode: str
    per_group_spec: dict
    per_group_model: dict
    combine: str = TPR_QUOTA

    def __post_init__(self):
        if set(self.per_group_spec) != set(self.per_group_model):
            raise CompositeError("every group needs exactly one chosen model")
        if self.combine not in (TPR_QUOTA, SINGLE_THRESHOLD):
            raise CompositeError(f"unknown combine rule {self.combine!r}")


@dataclass
class GroupDepthTable:
    """Each candidate's precision among a group's top ``depth[g]`` members."""

    depth: dict
    precision: dict
    reference: int


def group_depth_table(
    score_rows: Sequence[np.ndarray],
    labels: np.ndarray,
    groups: np.ndarray,
    k: int,
    *,
    tokens: tuple = ("P", "NP"),
    ids=None,
    tie_seed: int = 0,
    reference: Optional[int] = None,
) -> GroupDepthTable:
    """Per-group precision at the depth the reference model's top-k implies.

    ``reference`` defaults to the candidate with the highest overall
    precision@k. Candidate rows score the whole population; only each
    group's members are ranked for that group. Results are keyed by the
    group tokens in ``tokens``.
    """
    labels = np.asarray(labels)
    ids = np.arange(len(labels)) if ids is None else np.asarray(ids)
    groups = np.asarray(groups)
    groups = {t: groups == t for t in tokens}
    for g, mask in groups.items():
        if not mask.any():
            raise CompositeError(f"group {g!r} is absent from the validation data")
    if reference is None:
        precs = []
        for s in score_rows:
            top = select_top_k(s, ids, k, tie_seed).indices
            precs.append(labels[list(top)].mean())
        reference = int(np.argmax(precs))
    top = np.array(select_top_k(score_rows[reference], ids, k, tie_seed).indices)
    depth = {g: int(mask[top].sum()) for g, mask in groups.items()}
    precision = {}
    for g, mask in groups.items():
        idx = np.flatnonzero(mask)
        n_g = depth[g]
        row = []
        for s in score_rows:
            if n_g == 0:
                row.append(0.0)
                continue
            order = idx[rank_order(s[idx], ids[idx], tie_seed)[:n_g]]
            row.append(float(labels[order].mean()))
        precision[g] = np.array(row)
    return GroupDepthTable(depth, precision, reference)


def select_per_group_index(table: GroupDepthTable) -> dict:
    """Best candidate per group; ties keep the lower index."""
    out = {}
    for g, row in table.precision.items():
        if table.depth[g] == 0:
            out[g] = table.reference
        else:
            out[g] = int(np.argmax(row))
    return out


def select_per_group(candidates: Sequence[ModelSpec], table: GroupDepthTable) -> dict:
    return {g: candidates[i] for g, i in select_per_group_index(table).items()}


def train_decoupled(grid: Sequence[ModelSpec], train_data: Dataset, seed: int = 0) -> dict:
    """Per group: pooled models followed by models trained on that group only.

    Keys are group tokens. Pooled candidates come first, so with the
    lower-index tie rule a group-only model must be strictly better to win.
    """
    pooled = [train(spec, train_data, seed) for spec in grid]
    out = {}
    for token in (train_data.protected_token, train_data.nonprotected_token):
        sub = train_data.group_subset(token)
        if len(sub) < 2 or sub.labels.min() == sub.labels.max():
            raise ModelError(f"group {token!r} training data must contain both labels")
        out[token] = pooled + [train(spec, sub, seed) for spec in grid]
    return out


def composite_scores(policy: CompositePolicy, data) -> np.ndarray:
    """Each record scored by its own group's model."""
    groups = np.asarray(data.groups)
    out = np.empty(len(groups))
    for token, model in policy.per_group_model.items():
        mask = groups == token
        if mask.any():
            out[mask] = score(model, _rows(data, mask))
    return out


@dataclass
class _Rows:
    features: np.ndarray
    schema: tuple


def _rows(data, mask):
    return _Rows(np.asarray(data.features)[mask], tuple(data.schema))


def combine(
    policy: CompositePolicy,
    adjustment: Dataset,
    k: int,
    tie_seed: int = 0,
    evaluation=None,
) -> TopKSelection:
    """Top-k over ``evaluation`` (default: ``adjustment``) from the per-group models.

    With the quota rule the per-group budget is fitted on ``adjustment``'s
    labels; with the single threshold the raw scores are pooled.
    """
    evaluation = adjustment if evaluation is None else evaluation
    groups = np.asarray(evaluation.groups)
    for token in policy.per_group_model:
        if not (groups == token).any():
            raise CompositeError(f"group {token!r} is empty")
    ids = np.asarray(evaluation.entity_ids)
    eval_scores = composite_scores(policy, evaluation)
    if policy.combine == SINGLE_THRESHOLD:
        return select_top_k(eval_scores, ids, k, tie_seed)
    protected = adjustment.protected_token
    quota = equalize_tpr_quota(
        composite_scores(policy, adjustment),
        adjustment.labels,
        adjustment.groups,
        k,
        tie_seed,
        protected=protected,
        ids=adjustment.entity_ids,
    )
    return apply_quota(eval_scores, groups, quota, tie_seed, protected=protected, ids=ids)
