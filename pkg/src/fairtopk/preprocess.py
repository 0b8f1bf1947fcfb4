"""Protected-attribute removal and the six group/label resampling strategies.

A resampling target fixes, for each group, the positive rate within the group
and, across groups, the size ratio ``|NonProtected| / |Protected|``. Anything
left unset is held at its original value. Integer cell counts satisfy a
target when every ratio is met to within half a record:

* ``|n_pos(g) - rate(g) * n(g)| <= 1/2`` for each group ``g``
* ``|n(NP) - alpha * n(P)| <= 1/2``

Among all cell counts meeting these bounds (and only adding, or only
removing, records) the one closest in size to the input is used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .dataset import DataError, Dataset, GroupStats, empirical_stats

OVERSAMPLE = "oversample"
UNDERSAMPLE = "undersample"
MODES = (OVERSAMPLE, UNDERSAMPLE)
_MODE_ALIASES = {"over": OVERSAMPLE, "under": UNDERSAMPLE}

HALF = Fraction(1, 2)
_SEARCH_LIMIT = 10_000_000


class SamplingError(ValueError):
    pass


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise SamplingError(f"unknown sampling mode {mode!r}")
    return mode


@dataclass(frozen=True)
class SamplingTarget:
    alpha: Optional[Fraction] = None
    beta_p: Optional[Fraction] = None
    beta_np: Optional[Fraction] = None
    mode: str = OVERSAMPLE
    strategy_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", normalize_mode(self.mode))
        if self.alpha is None and self.beta_p is None and self.beta_np is None:
            raise SamplingError("a sampling target needs alpha, beta_p or beta_np")
        for name in ("alpha", "beta_p", "beta_np"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, Fraction(v))
        if self.alpha is not None and self.alpha <= 0:
            raise SamplingError("alpha must be positive")
        for name in ("beta_p", "beta_np"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise SamplingError(f"{name} must lie in [0, 1]")
        sid = self.strategy_id
        if sid is not None and sid in _FIXED_STRATEGIES:
            if (self.alpha, self.beta_p, self.beta_np) != _FIXED_STRATEGIES[sid]:
                raise SamplingError(f"fields disagree with strategy {sid}")

    @property
    def gamma(self) -> Optional[Fraction]:
        if self.beta_p is None or self.beta_np is None or self.beta_p == 0:
            return None
        return self.beta_np / self.beta_p


_ONE, _HALF50 = Fraction(1), Fraction(1, 2)
_FIXED_STRATEGIES = {
    1: (_ONE, None, None),
    2: (None, _HALF50, _HALF50),
    4: (None, _HALF50, None),
    5: (_ONE, _HALF50, _HALF50),
}
STRATEGY_IDS = (1, 2, 3, 4, 5, 6)


def resolve_strategy(strategy_id: int, stats: GroupStats, mode: str = OVERSAMPLE) -> SamplingTarget:
    """Sampling target for one of the six preset strategies.

    Strategies 3 and 6 set the protected positive rate to the non-protected
    one; the non-protected rate is left untouched.
    """
    if strategy_id not in STRATEGY_IDS:
        raise SamplingError(f"strategy must be 1-6, got {strategy_id}")
    if not stats.n_protected or not stats.n_nonprotected:
        raise SamplingError("both groups must be present")
    if strategy_id in _FIXED_STRATEGIES:
        alpha, bp, bnp = _FIXED_STRATEGIES[strategy_id]
    else:
        alpha = _ONE if strategy_id == 6 else None
        bp, bnp = stats.rate_nonprotected, None
    return SamplingTarget(alpha, bp, bnp, mode, strategy_id)


@dataclass
class ResampleReport:
    before: dict
    after: dict
    duplicated_count: int = 0
    removed_count: int = 0

    def rows(self):
        for key in self.before:
            yield (*key, self.before[key], self.after[key])


def remove_protected_attribute(dataset: Dataset) -> Dataset:
    idx = dataset.protected_feature_index
    if idx is None:
        raise DataError("dataset has no protected feature column to remove")
    keep = [i for i in range(len(dataset.schema)) if i != idx]
    return replace(
        dataset,
        schema=tuple(dataset.schema[i] for i in keep),
        features=dataset.features[:, keep],
        protected_feature_index=None,
    )


# --- cell-count search ---------------------------------------------------


@dataclass(frozen=True)
class CellCounts:
    """Record counts per (group, label) cell."""

    p_pos: int
    p_neg: int
    np_pos: int
    np_neg: int

    @property
    def n_p(self) -> int:
        return self.p_pos + self.p_neg

    @property
    def n_np(self) -> int:
        return self.np_pos + self.np_neg

    @property
    def total(self) -> int:
        return self.n_p + self.n_np

    def as_tuple(self) -> tuple:
        return (self.p_pos, self.p_neg, self.np_pos, self.np_neg)


@dataclass(frozen=True)
class _Rates:
    rate_p: Fraction
    rate_np: Fraction
    alpha: Fraction


def _effective_rates(cells: CellCounts, target: SamplingTarget) -> _Rates:
    rate_p = target.beta_p if target.beta_p is not None else Fraction(cells.p_pos, cells.n_p)
    rate_np = (
        target.beta_np if target.beta_np is not None else Fraction(cells.np_pos, cells.n_np)
    )
    alpha = target.alpha if target.alpha is not None else Fraction(cells.n_np, cells.n_p)
    return _Rates(rate_p, rate_np, alpha)


def round_half_up(x: Fraction) -> int:
    return math.floor(x + HALF)


def _best_positive_count(pos: int, neg: int, rate: Fraction, size: int, mode: str):
    """Positive count for a group of ``size`` records, or None if infeasible."""
    if mode == OVERSAMPLE:
        lo, hi = pos, size - neg
    else:
        lo, hi = max(0, size - neg), min(pos, size)
    c = round_half_up(rate * size)
    if lo <= c <= hi:
        return c, abs(c - rate * size)
    return None


def solve_cell_counts(cells: CellCounts, target: SamplingTarget) -> CellCounts:
    """Cell counts meeting ``target`` with the smallest change in size.

    Every targeted count is its real value rounded half up: the positive
    count of a group of size ``N`` is ``round(rate * N)`` and the
    non-protected size is ``round(alpha * N_P)``. The search walks the
    protected size away from its current value and stops once no larger
    (oversample) or smaller (undersample) size can do better.
    """
    if cells.n_p == 0 or cells.n_np == 0:
        raise SamplingError("resampling needs both groups present")
    rates = _effective_rates(cells, target)
    for name, rate, pos, neg in (
        ("protected", rates.rate_p, cells.p_pos, cells.p_neg),
        ("non-protected", rates.rate_np, cells.np_pos, cells.np_neg),
    ):
        if rate > 0 and pos == 0:
            raise SamplingError(f"target needs positives in the {name} group, which has none")
        if rate < 1 and neg == 0:
            raise SamplingError(f"target needs negatives in the {name} group, which has none")
        if target.mode == OVERSAMPLE and ((rate == 0 and pos) or (rate == 1 and neg)):
            raise SamplingError(f"oversampling cannot remove records from the {name} group")

    mode = target.mode
    over = mode == OVERSAMPLE
    best = None  # (total, ranking key, CellCounts)
    n_p = cells.n_p
    steps = 0
    while 1 <= n_p and steps < _SEARCH_LIMIT:
        steps += 1
        n_np = round_half_up(rates.alpha * n_p)
        if over:
            bound = n_p + max(cells.n_np, n_np)
            if best is not None and bound > best[0]:
                break
        else:
            bound = n_p + min(cells.n_np, n_np)
            if best is not None and bound < best[0]:
                break
        p_opt = _best_positive_count(cells.p_pos, cells.p_neg, rates.rate_p, n_p, mode)
        size_ok = n_np >= 1 and (n_np >= cells.n_np if over else n_np <= cells.n_np)
        if p_opt is not None and size_ok:
            np_opt = _best_positive_count(cells.np_pos, cells.np_neg, rates.rate_np, n_np, mode)
            if np_opt is not None:
                total = n_p + n_np
                dev = p_opt[1] + np_opt[1] + abs(n_np - rates.alpha * n_p)
                key = (total if over else -total, dev, n_p)
                if best is None or key < best[1]:
                    counts = CellCounts(p_opt[0], n_p - p_opt[0], np_opt[0], n_np - np_opt[0])
                    best = (total, key, counts)
        n_p += 1 if over else -1
    if best is None:
        verb = "duplicating" if over else "removing"
        raise SamplingError(
            f"no way of {verb} records meets the targets while keeping the untargeted "
            f"ratio and rates; try the other sampling mode"
        )
    return best[2]


def satisfies_target(before: CellCounts, after: CellCounts, target: SamplingTarget) -> bool:
    """Whether ``after`` meets ``target`` (rates measured against ``before``)."""
    rates = _effective_rates(before, target)
    if after.n_p < 1 or after.n_np < 1:
        return False
    return (
        after.p_pos == round_half_up(rates.rate_p * after.n_p)
        and after.np_pos == round_half_up(rates.rate_np * after.n_np)
        and after.n_np == round_half_up(rates.alpha * after.n_p)
    )


def cell_counts(dataset: Dataset) -> CellCounts:
    s = empirical_stats(dataset)
    return CellCounts(
        s.pos_protected,
        s.n_protected - s.pos_protected,
        s.pos_nonprotected,
        s.n_nonprotected - s.pos_nonprotected,
    )


def _cell_masks(dataset: Dataset):
    prot = dataset.is_protected
    pos = dataset.labels == 1
    return (prot & pos, prot & ~pos, ~prot & pos, ~prot & ~pos)


def _cell_keys(dataset: Dataset):
    p, q = dataset.protected_token, dataset.nonprotected_token
    return ((p, 1), (p, 0), (q, 1), (q, 0))


def resample(dataset: Dataset, target: SamplingTarget, seed: int) -> tuple[Dataset, ResampleReport]:
    """Duplicate or drop records so the group/label mix meets ``target``.

    Oversampling appends copies drawn uniformly with replacement from each
    cell; undersampling drops records drawn uniformly without replacement.
    """
    before = cell_counts(dataset)
    after = solve_cell_counts(before, target)
    rng = np.random.default_rng(seed)
    masks = _cell_masks(dataset)
    keys = _cell_keys(dataset)
    report = ResampleReport(
        before=dict(zip(keys, before.as_tuple())), after=dict(zip(keys, after.as_tuple()))
    )
    if target.mode == OVERSAMPLE:
        extra = []
        for mask, have, want in zip(masks, before.as_tuple(), after.as_tuple()):
            if want > have:
                extra.append(rng.choice(np.flatnonzero(mask), size=want - have, replace=True))
        index = np.concatenate([np.arange(len(dataset))] + extra)
        report.duplicated_count = after.total - before.total
    else:
        keep = np.ones(len(dataset), dtype=bool)
        for mask, have, want in zip(masks, before.as_tuple(), after.as_tuple()):
            if want < have:
                drop = rng.choice(np.flatnonzero(mask), size=have - want, replace=False)
                keep[drop] = False
        index = np.flatnonzero(keep)
        report.removed_count = before.total - after.total
    if len(index) == len(dataset) and np.array_equal(index, np.arange(len(dataset))):
        return dataset, report
    return dataset.take(index), report
