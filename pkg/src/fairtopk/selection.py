"""Fairness-aware model selection over grid summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .learners import ModelSpec

DISPARITY = "disparity"
ACCURACY = "accuracy"
LEVEL_LABELS = "ABCDEFGH"
LEVELS = {
    DISPARITY: (5.0, 2.0, 1.5, 1.3, 1.2, 1.1, 1.05, 1.0),
    ACCURACY: (0.0, 0.05, 0.10, 0.15, 0.2, 0.25, 0.5, 0.6),
}


class SelectionError(ValueError):
    pass


def normalized_disparity(d: float) -> float:
    """``max(d, 1/d)``: distance from parity regardless of direction."""
    if math.isinf(d) or d == 0:
        return math.inf
    return max(d, 1.0 / d)


@dataclass(frozen=True)
class SelectionConstraint:
    kind: str
    level_label: str
    value: float = None

    def __post_init__(self):
        if self.kind not in LEVELS:
            raise SelectionError(f"constraint kind must be disparity or accuracy, got {self.kind!r}")
        if self.level_label not in LEVEL_LABELS or len(self.level_label) != 1:
            raise SelectionError(f"level must be one of A-H, got {self.level_label!r}")
        expected = LEVELS[self.kind][LEVEL_LABELS.index(self.level_label)]
        if self.value is None:
            object.__setattr__(self, "value", expected)
        elif self.value != expected:
            raise SelectionError(
                f"{self.kind} level {self.level_label} is {expected}, not {self.value}"
            )

    @classmethod
    def custom(cls, kind: str, value: float) -> "SelectionConstraint":
        """A constraint at an arbitrary cutoff, outside the A-H ladder."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "kind", kind)
        object.__setattr__(obj, "level_label", "")
        object.__setattr__(obj, "value", float(value))
        return obj


def all_levels(kind: str) -> list[SelectionConstraint]:
    return [SelectionConstraint(kind, label) for label in LEVEL_LABELS]


@dataclass(frozen=True)
class GridEntry:
    spec: ModelSpec
    mean_precision: float
    mean_disparity: float

    @property
    def normalized_disparity(self) -> float:
        return normalized_disparity(self.mean_disparity)


@dataclass(frozen=True)
class GridResult:
    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> GridEntry:
        return self.entries[i]


@dataclass
class SelectionAudit:
    index: int
    constraint: Optional[SelectionConstraint]
    qualifying: list = field(default_factory=list)
    fallback: bool = False
    best_precision: float = math.nan


def _best_by(indices, key):
    return min(indices, key=lambda i: (key(i), i))


def select_original(grid: GridResult) -> ModelSpec:
    return grid[select_original_index(grid)].spec


def select_original_index(grid: GridResult) -> int:
    if not len(grid):
        raise SelectionError("empty grid")
    return _best_by(range(len(grid)), lambda i: -grid[i].mean_precision)


def select_model(grid: GridResult, constraint: SelectionConstraint) -> tuple[ModelSpec, SelectionAudit]:
    """Soft disparity cap or hard precision-loss cap.

    Disparity: best precision among models with normalized disparity at most
    the cutoff, else the model whose disparity is closest above it. Accuracy:
    lowest normalized disparity among models within ``value`` of the best
    precision. Ties go to higher precision, then lower grid index.
    """
    if not len(grid):
        raise SelectionError("empty grid")
    idx = range(len(grid))
    prec = [e.mean_precision for e in grid.entries]
    nd = [e.normalized_disparity for e in grid.entries]
    best_prec = max(prec)
    audit = SelectionAudit(-1, constraint, best_precision=best_prec)
    if constraint.kind == DISPARITY:
        ok = [i for i in idx if math.isfinite(nd[i]) and nd[i] <= constraint.value]
        audit.qualifying = ok
        if ok:
            choice = _best_by(ok, lambda i: -prec[i])
        else:
            audit.fallback = True
            choice = _best_by(idx, lambda i: (nd[i] - constraint.value, -prec[i]))
    else:
        ok = [i for i in idx if prec[i] >= best_prec - constraint.value]
        audit.qualifying = ok
        choice = _best_by(ok, lambda i: (nd[i], -prec[i]))
    audit.index = choice
    return grid[choice].spec, audit


# --- grid summary CSV ----------------------------------------------------

GRID_COLUMNS = ("model", "mean_precision_at_k", "mean_disparity")


def write_grid_csv(grid: GridResult, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for e in grid.entries:
            w.writerow([e.spec.key, repr(e.mean_precision), repr(e.mean_disparity)])


def read_grid_csv(path) -> GridResult:
    entries = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            entries.append(
                GridEntry(
                    ModelSpec.parse(row["model"]),
                    float(row["mean_precision_at_k"]),
                    float(row["mean_disparity"]),
                )
            )
    return GridResult(entries)
