"""Data model, CSV ingestion and leakage-safe temporal splits."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
from dateutil.relativedelta import relativedelta

RESERVED_COLUMNS = ("entity_id", "as_of_time", "label", "group")


class DataError(ValueError):
    """Raised for malformed input data or violated dataset invariants."""


class Record(NamedTuple):
    entity_id: str
    as_of_time: dt.date
    features: tuple
    label: int
    group: str


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, immutable collection of records.

    ``features`` is an ``(n, d)`` float array; ``groups`` holds the raw group
    tokens. Exactly two tokens are allowed, one designated protected.
    """

    schema: tuple
    entity_ids: np.ndarray
    as_of_time: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    protected_token: str
    nonprotected_token: str
    protected_feature_index: Optional[int] = None

    def __post_init__(self):
        n = len(self.entity_ids)
        features = np.asarray(self.features, dtype=float).reshape(n, len(self.schema))
        labels = np.asarray(self.labels, dtype=np.int8)
        groups = np.asarray(self.groups, dtype=str)
        as_of = np.asarray(self.as_of_time, dtype="datetime64[D]")
        ids = np.asarray(self.entity_ids, dtype=str)
        if not (len(labels) == len(groups) == len(as_of) == n):
            raise DataError("column lengths differ")
        if self.protected_token == self.nonprotected_token:
            raise DataError("protected and non-protected tokens must differ")
        if n and not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if not np.isfinite(features).all():
            raise DataError("features must be finite")
        known = np.isin(groups, (self.protected_token, self.nonprotected_token))
        if not known.all():
            bad = groups[~known][0]
            raise DataError(f"unknown group token {bad!r}")
        idx = self.protected_feature_index
        if idx is not None:
            if not 0 <= idx < len(self.schema):
                raise DataError(f"protected_feature_index {idx} outside schema")
            expected = (groups == self.protected_token).astype(float)
            if n and not np.array_equal(features[:, idx], expected):
                raise DataError(
                    f"column {self.schema[idx]!r} does not match group membership"
                )
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "entity_ids", _frozen(ids))
        object.__setattr__(self, "as_of_time", _frozen(as_of))
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "groups", _frozen(groups))

    def __len__(self) -> int:
        return len(self.entity_ids)

    @property
    def is_protected(self) -> np.ndarray:
        return self.groups == self.protected_token

    @property
    def records(self) -> list[Record]:
        return list(self)

    def __iter__(self) -> Iterator[Record]:
        for i in range(len(self)):
            yield Record(
                str(self.entity_ids[i]),
                self.as_of_time[i].astype(dt.date),
                tuple(float(v) for v in self.features[i]),
                int(self.labels[i]),
                str(self.groups[i]),
            )

    def take(self, index) -> "Dataset":
        """Rows selected by an integer index array or boolean mask, in order."""
        index = np.asarray(index)
        return replace(
            self,
            entity_ids=self.entity_ids[index],
            as_of_time=self.as_of_time[index],
            features=self.features[index],
            labels=self.labels[index],
            groups=self.groups[index],
        )

    def group_subset(self, token: str) -> "Dataset":
        return self.take(self.groups == token)

    def unlabeled(self) -> "FeatureView":
        return FeatureView(self.entity_ids, self.features, self.groups, self.schema)

    def label_map(self) -> dict:
        return dict(zip(self.entity_ids.tolist(), self.labels.tolist()))

    def group_map(self) -> dict:
        return dict(zip(self.entity_ids.tolist(), self.groups.tolist()))

    def digest(self) -> str:
        """Content hash used to assert a dataset was not modified."""
        h = hashlib.sha256()
        for arr in (self.entity_ids, self.as_of_time, self.features, self.labels, self.groups):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.schema, self.protected_token, self.nonprotected_token)).encode())
        return h.hexdigest()

    def equals(self, other: "Dataset") -> bool:
        return self.digest() == other.digest()


class FeatureView(NamedTuple):
    """What a method may see of a validation block: no labels."""

    entity_ids: np.ndarray
    features: np.ndarray
    groups: np.ndarray
    schema: tuple


@dataclass(frozen=True)
class ColumnRoles:
    """Column names and group tokens used when reading a CSV."""

    protected_token: str = "P"
    nonprotected_token: str = "NP"
    entity_id: str = "entity_id"
    as_of_time: str = "as_of_time"
    label: str = "label"
    group: str = "group"
    protected_feature: Optional[str] = None


def load_csv(path, roles: ColumnRoles = ColumnRoles()) -> Dataset:
    """Read a dataset; any malformed row raises :class:`DataError` naming it.

    Rows are numbered from 1, excluding the header.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        role_cols = [roles.entity_id, roles.as_of_time, roles.label, roles.group]
        for col in role_cols:
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        pos = {name: header.index(name) for name in role_cols}
        feature_cols = [i for i, name in enumerate(header) if name not in role_cols]
        schema = tuple(header[i] for i in feature_cols)
        tokens = (roles.protected_token, roles.nonprotected_token)

        ids, times, labels, groups, rows = [], [], [], [], []
        for rowno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {rowno}: expected {len(header)} cells, got {len(row)}")
            label = row[pos[roles.label]].strip()
            if label not in ("0", "1"):
                raise DataError(f"row {rowno}: label {label!r} is not 0 or 1")
            group = row[pos[roles.group]].strip()
            if group not in tokens:
                raise DataError(f"row {rowno}: unknown group token {group!r}")
            try:
                when = dt.date.fromisoformat(row[pos[roles.as_of_time]].strip())
            except ValueError:
                raise DataError(
                    f"row {rowno}: bad date {row[pos[roles.as_of_time]]!r}"
                ) from None
            values = []
            for i in feature_cols:
                cell = row[i].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"row {rowno}: non-numeric value {cell!r} in column {header[i]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"row {rowno}: missing or non-finite value in {header[i]!r}")
                values.append(v)
            ids.append(row[pos[roles.entity_id]])
            times.append(when)
            labels.append(int(label))
            groups.append(group)
            rows.append(values)

    pf_index = None
    if roles.protected_feature is not None:
        if roles.protected_feature not in schema:
            raise DataError(f"{path}: missing column {roles.protected_feature!r}")
        pf_index = schema.index(roles.protected_feature)
    return Dataset(
        schema=schema,
        entity_ids=np.array(ids, dtype=str),
        as_of_time=np.array(times, dtype="datetime64[D]"),
        features=np.array(rows, dtype=float).reshape(len(ids), len(schema)),
        labels=np.array(labels, dtype=np.int8),
        groups=np.array(groups, dtype=str),
        protected_token=roles.protected_token,
        nonprotected_token=roles.nonprotected_token,
        protected_feature_index=pf_index,
    )


def format_float(v: float) -> str:
    return repr(float(v))


def write_csv(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(RESERVED_COLUMNS) + list(dataset.schema))
        for i in range(len(dataset)):
            w.writerow(
                [
                    dataset.entity_ids[i],
                    str(dataset.as_of_time[i]),
                    int(dataset.labels[i]),
                    dataset.groups[i],
                    *(format_float(v) for v in dataset.features[i]),
                ]
            )


def roles_for(dataset: Dataset) -> ColumnRoles:
    """Roles that read back a CSV written by :func:`write_csv`."""
    pf = None
    if dataset.protected_feature_index is not None:
        pf = dataset.schema[dataset.protected_feature_index]
    return ColumnRoles(dataset.protected_token, dataset.nonprotected_token, protected_feature=pf)


# --- empirical distributions ---------------------------------------------


@dataclass(frozen=True)
class GroupStats:
    """Group marginals and within-group positive rates as exact fractions.

    A rate is ``None`` when its group has no records.
    """

    n_protected: int
    n_nonprotected: int
    pos_protected: int
    pos_nonprotected: int

    @property
    def n(self) -> int:
        return self.n_protected + self.n_nonprotected

    @property
    def p_protected(self) -> Fraction:
        return Fraction(self.n_protected, self.n)

    @property
    def p_nonprotected(self) -> Fraction:
        return Fraction(self.n_nonprotected, self.n)

    @property
    def rate_protected(self) -> Optional[Fraction]:
        return Fraction(self.pos_protected, self.n_protected) if self.n_protected else None

    @property
    def rate_nonprotected(self) -> Optional[Fraction]:
        if not self.n_nonprotected:
            return None
        return Fraction(self.pos_nonprotected, self.n_nonprotected)


def empirical_stats(dataset: Dataset) -> GroupStats:
    if len(dataset) == 0:
        raise DataError("empirical_stats needs a nonempty dataset")
    prot = dataset.is_protected
    y = dataset.labels.astype(bool)
    return GroupStats(
        n_protected=int(prot.sum()),
        n_nonprotected=int((~prot).sum()),
        pos_protected=int((y & prot).sum()),
        pos_nonprotected=int((y & ~prot).sum()),
    )


# --- temporal splits -----------------------------------------------------


@dataclass(frozen=True)
class TemporalSplitPlan:
    start: dt.date
    end: dt.date
    block_months: int = 3
    min_train_blocks: int = 1
    sliding: bool = False

    def __post_init__(self):
        if self.end <= self.start:
            raise DataError("split plan end must be after start")
        if self.block_months <= 0:
            raise DataError("block_months must be positive")
        if self.min_train_blocks <= 0:
            raise DataError("min_train_blocks must be positive")

    def boundaries(self) -> list[dt.date]:
        out = []
        j = 0
        while True:
            b = self.start + relativedelta(months=j * self.block_months)
            if b > self.end:
                return out
            out.append(b)
            j += 1


@dataclass(frozen=True, eq=False)
class TemporalSplit:
    index: int
    train: Dataset
    validation: Dataset
    train_start: dt.date
    train_end: dt.date
    validation_start: dt.date
    validation_end: dt.date

    @property
    def empty_validation(self) -> bool:
        return len(self.validation) == 0

    def __iter__(self):
        yield self.train
        yield self.validation


def _window_mask(dataset: Dataset, lo: dt.date, hi: dt.date) -> np.ndarray:
    t = dataset.as_of_time
    return (t >= np.datetime64(lo, "D")) & (t < np.datetime64(hi, "D"))


def make_temporal_splits(dataset: Dataset, plan: TemporalSplitPlan) -> list[TemporalSplit]:
    """Train on ``[window start, cutoff)``, validate on the block after it.

    The train window expands from ``plan.start`` unless ``plan.sliding``, in
    which case it keeps ``min_train_blocks`` blocks. Splits whose validation
    block holds no records are kept and report ``empty_validation``.
    """
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    bounds = plan.boundaries()
    n_blocks = len(bounds) - 1
    m = plan.min_train_blocks
    if n_blocks < m + 1:
        raise DataError(
            f"plan window holds {max(n_blocks, 0)} block(s); need at least {m + 1}"
        )
    occupied = {
        j for j in range(n_blocks) if _window_mask(dataset, bounds[j], bounds[j + 1]).any()
    }
    if len(occupied) < 2:
        raise DataError("all records fall in one block; no validation block is available")

    splits = []
    for i in range(n_blocks - m):
        cut = m + i
        lo = bounds[cut - m] if plan.sliding else bounds[0]
        train_mask = _window_mask(dataset, lo, bounds[cut])
        val_mask = _window_mask(dataset, bounds[cut], bounds[cut + 1])
        splits.append(
            TemporalSplit(
                index=i,
                train=dataset.take(train_mask),
                validation=dataset.take(val_mask),
                train_start=lo,
                train_end=bounds[cut],
                validation_start=bounds[cut],
                validation_end=bounds[cut + 1],
            )
        )
    return splits
