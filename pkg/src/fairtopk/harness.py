"""End-to-end experiment runner.

The run has two stages. First, for every temporal split and every training
variant (pooled, attribute removed, each resampling, constrained, per group),
the grid is trained and the validation block is scored. Models only ever see
validation features and groups. Second, each method turns those score tables
into one top-k selection per split, and labels are used only to compute the
metrics of that selection.
"""

from __future__ import annotations

import configparser
import csv
import datetime as dt
import logging
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import composite, inprocess, learners, posthoc, preprocess, selection
from .dataset import ColumnRoles, DataError, Dataset, TemporalSplitPlan, load_csv, make_temporal_splits
from .metrics import Aggregate, SplitMetrics, aggregate, evaluate_indices, reciprocal_disparity, select_top_k
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)

WORKERS_ENV = "FAIRTOPK_WORKERS"

ORIGINAL = "original"
NO_PROTECTED = "no_protected"
INPROCESS = "inprocess"
POSTHOC = "posthoc"
COMPOSITE_COUPLED = "composite_coupled"
COMPOSITE_DECOUPLED = "composite_decoupled"
COMPOSITE_SINGLE = "composite_single_threshold"
POST_METHODS = (POSTHOC, COMPOSITE_COUPLED, COMPOSITE_DECOUPLED, COMPOSITE_SINGLE)

RESULT_COLUMNS = (
    "method", "split", "precision_at_k", "recall_p", "recall_np", "disparity",
    "disparity_reciprocal", "status", "model",
)
AGGREGATE_COLUMNS = (
    "method", "metric", "mean", "standard_error", "ci_low", "ci_high", "n", "n_infinite",
)


class ConfigError(ValueError):
    pass


def sampling_method(strategy: int, mode: str) -> str:
    return f"sampling_{strategy}_{'over' if preprocess.normalize_mode(mode) == preprocess.OVERSAMPLE else 'under'}"


def selection_method(kind: str, level: str) -> str:
    return f"selection_{kind}_{level}"


def all_methods() -> list[str]:
    out = [ORIGINAL, NO_PROTECTED]
    out += [sampling_method(s, m) for s in preprocess.STRATEGY_IDS for m in ("over", "under")]
    out += [INPROCESS, *POST_METHODS]
    out += [
        selection_method(kind, lvl)
        for kind in (selection.DISPARITY, selection.ACCURACY)
        for lvl in selection.LEVEL_LABELS
    ]
    return out


def parse_method(name: str) -> tuple:
    if name in (ORIGINAL, NO_PROTECTED, INPROCESS, *POST_METHODS):
        return (name,)
    parts = name.split("_")
    if parts[0] == "sampling" and len(parts) == 3 and parts[1].isdigit():
        sid = int(parts[1])
        if sid in preprocess.STRATEGY_IDS and parts[2] in ("over", "under"):
            return ("sampling", sid, parts[2])
    if parts[0] == "selection" and len(parts) == 3:
        if parts[1] in selection.LEVELS and parts[2] in selection.LEVEL_LABELS:
            return ("selection", parts[1], parts[2])
    raise ConfigError(f"unknown method {name!r}")


@dataclass
class ExperimentConfig:
    plan: TemporalSplitPlan
    k: int = 500
    grid_profile: str = "small"
    methods: tuple = (ORIGINAL,)
    seed: int = 0
    output_dir: Path = Path("results")
    synthetic: Optional[SyntheticSpec] = None
    csv_path: Optional[Path] = None
    roles: ColumnRoles = ColumnRoles()
    constraint: inprocess.FairnessConstraint = inprocess.FairnessConstraint()
    workers: int = 1

    def __post_init__(self):
        if (self.synthetic is None) == (self.csv_path is None):
            raise ConfigError("exactly one data source (csv or synthetic) is required")
        if self.k <= 0:
            raise ConfigError("k must be positive")
        learners.default_grid(self.grid_profile)
        methods = [ORIGINAL] + [m for m in self.methods if m != ORIGINAL]
        for m in methods:
            parse_method(m)
        self.methods = tuple(dict.fromkeys(methods))
        self.output_dir = Path(self.output_dir)


def reference_config(output_dir="results", methods=None, seed: int = 0) -> ExperimentConfig:
    """Desk-scale reference run: 20k records, 30% protected, k=500, 5 splits."""
    spec = SyntheticSpec(seed=seed)
    return ExperimentConfig(
        plan=TemporalSplitPlan(spec.start, spec.end, block_months=3, min_train_blocks=1),
        k=500,
        grid_profile="small",
        methods=tuple(methods) if methods is not None else tuple(all_methods()),
        seed=seed,
        output_dir=Path(output_dir),
        synthetic=spec,
        roles=ColumnRoles("P", "NP", protected_feature="protected"),
    )


# --- config file -----------------------------------------------------------


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def _methods_from_section(sec) -> list[str]:
    methods = _csv_list(sec.get("baseline", ORIGINAL))
    strategies = _csv_list(sec.get("sampling", ""))
    modes = _csv_list(sec.get("sampling_modes", "over, under"))
    methods += [sampling_method(int(s), m) for s in strategies for m in modes]
    if sec.getboolean("inprocess", fallback=False):
        methods.append(INPROCESS)
    methods += _csv_list(sec.get("postprocess", ""))
    levels = _csv_list(sec.get("selection_levels", ",".join(selection.LEVEL_LABELS)))
    methods += [selection_method(kind, lvl) for kind in _csv_list(sec.get("selection", "")) for lvl in levels]
    methods += _csv_list(sec.get("include", ""))
    return methods


def load_config(path) -> ExperimentConfig:
    """Read an INI-style ``key = value`` experiment file.

    Relative paths are resolved against the config file's directory.
    """
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config {path}")
    base = path.parent
    try:
        data = cp["data"]
        exp = cp["experiment"] if cp.has_section("experiment") else {}
        roles = ColumnRoles(
            data.get("protected", "P"),
            data.get("nonprotected", "NP"),
            protected_feature=data.get("protected_feature") or None,
        )
        seed = int(exp.get("seed", 0))
        synthetic, csv_path = None, None
        source = data.get("source", "synthetic")
        if source == "synthetic":
            s = cp["synthetic"] if cp.has_section("synthetic") else {}
            defaults = SyntheticSpec()
            kw = {}
            for name, conv in (
                ("n", int), ("protected_fraction", float), ("base_rate_p", float),
                ("base_rate_np", float), ("n_features", int), ("informative_weight_p", float),
                ("informative_weight_np", float), ("noise_sd", float), ("seed", int),
                ("start", dt.date.fromisoformat), ("end", dt.date.fromisoformat),
            ):
                if name in s:
                    kw[name] = conv(s[name])
            kw.setdefault("seed", seed)
            synthetic = SyntheticSpec(
                protected_token=roles.protected_token,
                nonprotected_token=roles.nonprotected_token,
                **kw,
            )
            roles = ColumnRoles(roles.protected_token, roles.nonprotected_token, protected_feature="protected")
            default_span = (synthetic.start, synthetic.end)
        else:
            csv_path = (base / source).resolve()
            default_span = None
        sp = cp["split"] if cp.has_section("split") else {}
        if "start" in sp:
            span = (dt.date.fromisoformat(sp["start"]), dt.date.fromisoformat(sp["end"]))
        elif default_span is not None:
            span = default_span
        else:
            raise ConfigError("[split] start and end are required for CSV data")
        plan = TemporalSplitPlan(
            span[0],
            span[1],
            block_months=int(sp.get("block_months", 3)),
            min_train_blocks=int(sp.get("min_train_blocks", 1)),
            sliding=str(sp.get("sliding", "no")).lower() in ("1", "yes", "true", "on"),
        )
        methods = _methods_from_section(cp["methods"]) if cp.has_section("methods") else [ORIGINAL]
        ip = cp["inprocess"] if cp.has_section("inprocess") else {}
        constraint = inprocess.FairnessConstraint(
            epsilon=float(ip.get("epsilon", inprocess.EPSILON)),
            temperature=float(ip.get("temperature", 0.1)),
            penalty_start=float(ip.get("penalty_start", 1.0)),
            penalty_growth=float(ip.get("penalty_growth", 10.0)),
            max_outer_iters=int(ip.get("max_outer_iters", 6)),
        )
        return ExperimentConfig(
            plan=plan,
            k=int(exp.get("k", 500)),
            grid_profile=exp.get("grid", "small"),
            methods=tuple(methods),
            seed=seed,
            output_dir=(base / exp.get("output", "results")).resolve(),
            synthetic=synthetic,
            csv_path=csv_path,
            roles=roles,
            constraint=constraint,
            workers=int(exp.get("workers", 1)),
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc


# --- stage 1: score tables -------------------------------------------------


def derive_seed(base: int, *parts) -> int:
    entropy = [int(base) & 0xFFFFFFFF] + [zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


@dataclass
class ScoreTable:
    """Validation scores of every candidate model trained in one variant."""

    variant: str
    split: int
    specs: list
    scores: Optional[np.ndarray] = None
    error: Optional[str] = None
    notes: list = field(default_factory=list)


BASE = "base"


def _group_variant(token: str) -> str:
    return f"group:{token}"


def _variants(config: ExperimentConfig, tokens) -> list[str]:
    out = {BASE}
    for m in config.methods:
        p = parse_method(m)
        if p[0] == NO_PROTECTED:
            out.add(NO_PROTECTED)
        elif p[0] == "sampling":
            out.add(m)
        elif p[0] == INPROCESS:
            out.add(INPROCESS)
        elif p[0] == COMPOSITE_DECOUPLED:
            out.update(_group_variant(t) for t in tokens)
    order = [BASE, NO_PROTECTED] + [m for m in all_methods() if m.startswith("sampling")]
    order += [INPROCESS] + [_group_variant(t) for t in tokens]
    return [v for v in order if v in out]


def _lr_specs(grid):
    specs = [s for s in grid if s.family == learners.LOGISTIC]
    return specs or [learners.ModelSpec(learners.LOGISTIC)]


def _score_variant(task) -> ScoreTable:
    variant, split_index, train_data, validation, grid, seed, constraint = task
    view = validation.unlabeled()
    table = ScoreTable(variant, split_index, list(grid))
    try:
        if variant == NO_PROTECTED:
            train_data = preprocess.remove_protected_attribute(train_data)
            view = preprocess.remove_protected_attribute(validation).unlabeled()
        elif variant.startswith("sampling"):
            _, sid, mode = parse_method(variant)
            before = validation.digest()
            target = preprocess.resolve_strategy(
                sid, preprocess.empirical_stats(train_data), mode
            )
            train_data, report = preprocess.resample(
                train_data, target, derive_seed(seed, "resample", split_index, variant)
            )
            if validation.digest() != before:
                raise AssertionError("validation data changed during preprocessing")
            table.notes.append(
                f"duplicated={report.duplicated_count} removed={report.removed_count}"
            )
        elif variant.startswith("group:"):
            train_data = train_data.group_subset(variant.split(":", 1)[1])
        if len(validation) == 0:
            table.scores = np.zeros((len(grid), 0))
            return table
        rows = []
        if variant == INPROCESS:
            table.specs = _lr_specs(grid)
            for spec in table.specs:
                fit = inprocess.fit_constrained(
                    train_data, spec.hyperparameters, constraint,
                    derive_seed(seed, "train", split_index, variant, spec.key),
                )
                rows.append(learners.score(fit.model, view))
                plain = learners.TrainedModel(
                    spec,
                    learners.LogisticParams(fit.unconstrained[:-1], float(fit.unconstrained[-1])),
                    0,
                    tuple(train_data.schema),
                )
                table.notes.append(
                    f"{spec.key}: train FNR gap at 0.5 "
                    f"{inprocess.hard_fnr_gap(plain, train_data):.4f} -> "
                    f"{inprocess.hard_fnr_gap(fit.model, train_data):.4f}"
                )
        else:
            for spec in grid:
                model = learners.train(
                    spec, train_data, derive_seed(seed, "train", split_index, variant, spec.key)
                )
                rows.append(learners.score(model, view))
        table.scores = np.vstack(rows)
    except (ValueError, AssertionError) as exc:
        table.error = f"{type(exc).__name__}: {exc}"
    return table


# --- stage 2: methods ------------------------------------------------------


@dataclass
class ResultRow:
    method: str
    split: int
    metrics: Optional[SplitMetrics] = None
    status: str = "ok"
    model: str = ""

    @property
    def failed(self) -> bool:
        return self.status.startswith("error")


@dataclass
class ExperimentResult:
    rows: list
    aggregates: dict
    grid: Optional[selection.GridResult]
    report: str
    notes: list

    @property
    def failed(self) -> bool:
        return any(r.failed for r in self.rows)

    def rows_for(self, method: str) -> list:
        return [r for r in self.rows if r.method == method]


class _Context:
    def __init__(self, config, splits, tables, grid):
        self.config = config
        self.splits = splits
        self.tables = tables
        self.grid = grid
        self.k = config.k
        self.seed = config.seed
        self._metrics = {}

    def tie_seed(self, split: int) -> int:
        return derive_seed(self.seed, "ties", split) % (2**63)

    def validation(self, split: int) -> Dataset:
        return self.splits[split].validation

    def table(self, variant: str, split: int) -> ScoreTable:
        return self.tables[(variant, split)]

    def top_k(self, scores, split: int) -> np.ndarray:
        v = self.validation(split)
        return np.array(select_top_k(scores, v.entity_ids, self.k, self.tie_seed(split)).indices)

    def evaluate(self, selected, split: int) -> SplitMetrics:
        v = self.validation(split)
        return evaluate_indices(selected, v.labels, v.is_protected)

    def variant_metrics(self, variant: str) -> dict:
        """``{split: [SplitMetrics per spec]}`` for splits that scored."""
        if variant not in self._metrics:
            out = {}
            for s in range(len(self.splits)):
                t = self.table(variant, s)
                if t.error is None and len(self.validation(s)):
                    out[s] = [self.evaluate(self.top_k(row, s), s) for row in t.scores]
            self._metrics[variant] = out
        return self._metrics[variant]


def _mean_finite_or_inf(values) -> float:
    vals = [v for v in values if v is not None]
    if not vals:
        return math.nan
    if any(math.isinf(v) for v in vals):
        return math.inf
    return float(np.mean(vals))


def _grid_result(ctx: _Context, variant: str) -> tuple[selection.GridResult, list]:
    per_split = ctx.variant_metrics(variant)
    specs = next((ctx.table(variant, s).specs for s in per_split), [])
    entries = []
    for j, spec in enumerate(specs):
        ms = [per_split[s][j] for s in sorted(per_split)]
        entries.append(
            selection.GridEntry(
                spec,
                float(np.mean([m.precision_at_k for m in ms])),
                _mean_finite_or_inf([m.disparity for m in ms]),
            )
        )
    return selection.GridResult(entries), specs


def _rows_for_choice(ctx, method, variant, index, spec) -> list[ResultRow]:
    per_split = ctx.variant_metrics(variant)
    rows = []
    for s in range(len(ctx.splits)):
        t = ctx.table(variant, s)
        if t.error is not None:
            rows.append(ResultRow(method, s, status=f"error: {t.error}"))
        elif not len(ctx.validation(s)):
            rows.append(ResultRow(method, s, status="degenerate: empty validation", model=spec.key))
        else:
            rows.append(ResultRow(method, s, per_split[s][index], model=spec.key))
    return rows


def _single_model_method(ctx, method, variant) -> list[ResultRow]:
    grid, specs = _grid_result(ctx, variant)
    if not len(grid):
        errs = [ctx.table(variant, s).error for s in range(len(ctx.splits))]
        msg = next((e for e in errs if e), "no split produced scores")
        return [ResultRow(method, s, status=f"error: {msg}") for s in range(len(ctx.splits))]
    i = selection.select_original_index(grid)
    return _rows_for_choice(ctx, method, variant, i, specs[i])


def _selection_method(ctx, method, kind, level) -> list[ResultRow]:
    grid, specs = _grid_result(ctx, BASE)
    spec, audit = selection.select_model(grid, selection.SelectionConstraint(kind, level))
    rows = _rows_for_choice(ctx, method, BASE, audit.index, spec)
    if audit.fallback:
        for r in rows:
            if r.status == "ok":
                r.status = "ok: no model met the cutoff, closest chosen"
    return rows


def _quota_status(quota: posthoc.GroupQuota) -> str:
    if quota.at_boundary:
        return f"ok: quota at the boundary k_P={quota.k_protected}, k_NP={quota.k_nonprotected}"
    return "ok"


def _adjusted_rows(ctx, method, choose) -> list[ResultRow]:
    """Methods fitted on split ``s-1`` and applied to split ``s``.

    ``choose(a)`` returns ``(scores_on_a, apply_scores(s), label, mode)`` where
    mode is ``"quota"`` or ``"single"``.
    """
    rows = [ResultRow(method, 0, status="skipped: no earlier split to fit on")]
    cfg = ctx.config
    for s in range(1, len(ctx.splits)):
        a = s - 1
        va, vs = ctx.validation(a), ctx.validation(s)
        if not len(vs):
            rows.append(ResultRow(method, s, status="degenerate: empty validation"))
            continue
        if not len(va):
            rows.append(ResultRow(method, s, status="degenerate: empty adjustment split"))
            continue
        try:
            fit_scores, apply_scores, label, mode = choose(a, s)
            if mode == "single":
                selected = ctx.top_k(apply_scores, s)
                status = "ok"
            else:
                quota = posthoc.equalize_tpr_quota(
                    fit_scores, va.labels, va.is_protected, min(ctx.k, len(va)),
                    ctx.tie_seed(a), ids=va.entity_ids,
                )
                if quota.k_total != ctx.k:
                    quota = _rescale_quota(quota, ctx.k)
                sel = posthoc.apply_quota(
                    apply_scores, vs.is_protected, _fit_quota(quota, vs), ctx.tie_seed(s),
                    ids=vs.entity_ids,
                )
                selected = np.array(sel.indices)
                status = _quota_status(quota)
            rows.append(ResultRow(method, s, ctx.evaluate(selected, s), status, label))
        except (ValueError, KeyError) as exc:
            rows.append(ResultRow(method, s, status=f"error: {type(exc).__name__}: {exc}"))
    return rows


def _rescale_quota(quota, k):
    kp = int(round(quota.k_protected * k / quota.k_total))
    return posthoc.GroupQuota(k, kp, k - kp, quota.achieved_gap, quota.crossing)


def _fit_quota(quota, data):
    """Clamp to group sizes when the application block is smaller than k."""
    n_p = int(data.is_protected.sum())
    n_np = len(data) - n_p
    k = min(quota.k_total, len(data))
    kp = min(quota.k_protected, n_p)
    knp = min(k - kp, n_np)
    kp = min(k - knp, n_p)
    return posthoc.GroupQuota(kp + knp, kp, knp, quota.achieved_gap, quota.crossing)


def _posthoc(ctx, chosen_index, spec) -> list[ResultRow]:
    def choose(a, s):
        fa = ctx.table(BASE, a)
        fs = ctx.table(BASE, s)
        for t in (fa, fs):
            if t.error:
                raise ValueError(t.error)
        return fa.scores[chosen_index], fs.scores[chosen_index], spec.key, "quota"

    return _adjusted_rows(ctx, POSTHOC, choose)


def _composite(ctx, method) -> list[ResultRow]:
    tokens = (ctx.config.roles.protected_token, ctx.config.roles.nonprotected_token)
    decoupled = method == COMPOSITE_DECOUPLED

    def candidates(split):
        base = ctx.table(BASE, split)
        if base.error:
            raise ValueError(base.error)
        rows = {t: list(base.scores) for t in tokens}
        labels = {t: [sp.key for sp in base.specs] for t in tokens}
        if decoupled:
            for t in tokens:
                g = ctx.table(_group_variant(t), split)
                if g.error:
                    raise ValueError(g.error)
                rows[t] += list(g.scores)
                labels[t] += [f"{sp.key}[{t} only]" for sp in g.specs]
        return rows, labels

    def choose(a, s):
        va, vs = ctx.validation(a), ctx.validation(s)
        rows_a, labels = candidates(a)
        rows_s, _ = candidates(s)
        picks = {}
        for t in tokens:
            table = composite.group_depth_table(
                rows_a[t], va.labels, va.groups, ctx.k, tokens=tokens,
                ids=va.entity_ids, tie_seed=ctx.tie_seed(a),
            )
            picks[t] = composite.select_per_group_index(table)[t]
        fit = np.where(va.is_protected, rows_a[tokens[0]][picks[tokens[0]]], rows_a[tokens[1]][picks[tokens[1]]])
        apply = np.where(vs.is_protected, rows_s[tokens[0]][picks[tokens[0]]], rows_s[tokens[1]][picks[tokens[1]]])
        label = " | ".join(f"{t}: {labels[t][picks[t]]}" for t in tokens)
        return fit, apply, label, "single" if method == COMPOSITE_SINGLE else "quota"

    return _adjusted_rows(ctx, method, choose)


def _run_methods(ctx: _Context) -> list[ResultRow]:
    rows = []
    base_grid, base_specs = _grid_result(ctx, BASE)
    original_index = selection.select_original_index(base_grid) if len(base_grid) else None
    for method in ctx.config.methods:
        p = parse_method(method)
        if p[0] == ORIGINAL:
            rows += _single_model_method(ctx, method, BASE)
        elif p[0] == NO_PROTECTED:
            rows += _single_model_method(ctx, method, NO_PROTECTED)
        elif p[0] == "sampling":
            rows += _single_model_method(ctx, method, method)
        elif p[0] == INPROCESS:
            rows += _single_model_method(ctx, method, INPROCESS)
        elif p[0] == POSTHOC:
            rows += _posthoc(ctx, original_index, base_specs[original_index])
        elif p[0] in (COMPOSITE_COUPLED, COMPOSITE_DECOUPLED, COMPOSITE_SINGLE):
            rows += _composite(ctx, method)
        elif p[0] == "selection":
            rows += _selection_method(ctx, method, p[1], p[2])
    return rows


# --- output ----------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf"
    return repr(float(v))


def aggregate_rows(rows) -> dict:
    """``{method: {metric: Aggregate}}`` over the splits with metrics."""
    out = {}
    for method in dict.fromkeys(r.method for r in rows):
        mrows = [r.metrics for r in rows if r.method == method and r.metrics is not None]
        out[method] = {}
        for metric, get in (
            ("precision_at_k", lambda m: m.precision_at_k),
            ("recall_p", lambda m: m.recall_protected),
            ("recall_np", lambda m: m.recall_nonprotected),
            ("disparity", lambda m: m.disparity),
        ):
            vals = [get(m) for m in mrows if get(m) is not None]
            if vals and all(math.isinf(v) for v in vals):
                # nothing finite to average: report the infinities alone
                out[method][metric] = Aggregate(math.inf, math.nan, math.inf, math.inf, 0, len(vals))
            elif vals:
                out[method][metric] = aggregate(vals)
    return out


def write_results(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            m = r.metrics
            if m is None:
                w.writerow([r.method, r.split, "", "", "", "", "", r.status, r.model])
            else:
                recip = None if m.disparity is None else reciprocal_disparity(m.disparity)
                w.writerow(
                    [
                        r.method, r.split, _fmt(m.precision_at_k), _fmt(m.recall_protected),
                        _fmt(m.recall_nonprotected), _fmt(m.disparity), _fmt(recip),
                        r.status, r.model,
                    ]
                )


def write_aggregates(aggs: dict, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for method, metrics in aggs.items():
            for metric, a in metrics.items():
                w.writerow(
                    [method, metric, _fmt(a.mean), _fmt(a.standard_error), _fmt(a.ci_low),
                     _fmt(a.ci_high), a.n, a.n_infinite]
                )


def _report(config, splits, rows, aggs, notes) -> str:
    lines = ["fairtopk experiment report", ""]
    lines.append(f"k = {config.k}; grid = {config.grid_profile}; seed = {config.seed}")
    lines.append(f"splits = {len(splits)}")
    for sp in splits:
        flag = "  [empty validation]" if sp.empty_validation else ""
        lines.append(
            f"  split {sp.index}: train {sp.train_start}..{sp.train_end} ({len(sp.train)} rows), "
            f"validate {sp.validation_start}..{sp.validation_end} ({len(sp.validation)} rows){flag}"
        )
    lines += ["", "method aggregates (mean +/- 1.96 SE over splits):"]
    for method, metrics in aggs.items():
        parts = []
        for metric in ("precision_at_k", "disparity"):
            a = metrics.get(metric)
            if a is not None:
                extra = f", {a.n_infinite} inf" if a.n_infinite else ""
                parts.append(f"{metric} {a.mean:.4f} [{a.ci_low:.4f}, {a.ci_high:.4f}]{extra}")
        lines.append(f"  {method}: " + ("; ".join(parts) if parts else "no metrics"))
    flagged = [r for r in rows if r.metrics is not None and r.metrics.disparity is not None and math.isinf(r.metrics.disparity)]
    lines += ["", "infinite disparities (protected group had positives but none selected):"]
    lines += [f"  {r.method} split {r.split}" for r in flagged] or ["  none"]
    odd = [r for r in rows if r.status != "ok"]
    lines += ["", "non-ok rows:"]
    lines += [f"  {r.method} split {r.split}: {r.status}" for r in odd] or ["  none"]
    if notes:
        lines += ["", "notes:"] + [f"  {n}" for n in notes]
    return "\n".join(lines) + "\n"


# --- entry point ------------------------------------------------------------


def _load_data(config: ExperimentConfig) -> Dataset:
    if config.synthetic is not None:
        return generate_synthetic(config.synthetic)
    return load_csv(config.csv_path, config.roles)


def _worker_count(config: ExperimentConfig) -> int:
    env = os.environ.get(WORKERS_ENV)
    n = config.workers
    if env:
        n = min(n, int(env)) if n > 1 else int(env)
    return max(1, n)


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    data = _load_data(config)
    splits = make_temporal_splits(data, config.plan)
    for sp in splits:
        if len(sp.validation) and config.k > len(sp.validation):
            raise ConfigError(
                f"k={config.k} exceeds validation block {sp.index} size {len(sp.validation)}"
            )
    grid = learners.default_grid(config.grid_profile)
    tokens = (data.protected_token, data.nonprotected_token)
    tasks = [
        (v, sp.index, sp.train, sp.validation, grid, config.seed, config.constraint)
        for sp in splits
        for v in _variants(config, tokens)
    ]
    workers = _worker_count(config)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_score_variant, tasks))
    else:
        results = [_score_variant(t) for t in tasks]
    tables = {(t.variant, t.split): t for t in results}

    notes = []
    for t in results:
        if t.variant == INPROCESS:
            notes += [f"inprocess split {t.split}: {n}" for n in t.notes]
    ctx = _Context(config, splits, tables, grid)
    rows = _run_methods(ctx)
    order = {m: i for i, m in enumerate(config.methods)}
    rows.sort(key=lambda r: (order[r.method], r.split))
    aggs = aggregate_rows(rows)
    grid_result, _ = _grid_result(ctx, BASE)
    if INPROCESS in config.methods:
        notes.append(
            "inprocess: the constraint is fitted at the 0.5 cutoff; compare its top-k "
            "disparity with the original model's to see whether it carries over."
        )
    report = _report(config, splits, rows, aggs, notes)
    result = ExperimentResult(rows, aggs, grid_result, report, notes)
    if write:
        out = config.output_dir
        out.mkdir(parents=True, exist_ok=True)
        write_results(rows, out / "results.csv")
        write_aggregates(aggs, out / "aggregates.csv")
        selection.write_grid_csv(grid_result, out / "grid.csv")
        (out / "report.txt").write_text(report, encoding="utf-8")
    return result
