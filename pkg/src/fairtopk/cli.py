"""Command-line entry point: ``fairtopk <command> ...``."""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from pathlib import Path

import numpy as np

from . import composite, harness, inprocess, learners, posthoc, preprocess, selection
from .dataset import ColumnRoles, DataError, empirical_stats, load_csv, write_csv
from .synthetic import SyntheticSpec, generate_synthetic


def _add_roles(p: argparse.ArgumentParser) -> None:
    p.add_argument("--protected", default="P", help="group token of the protected group")
    p.add_argument("--nonprotected", default="NP", help="group token of the other group")
    p.add_argument(
        "--protected-feature",
        default=None,
        help="feature column that encodes protected membership, if any",
    )


def _roles(args) -> ColumnRoles:
    return ColumnRoles(args.protected, args.nonprotected, protected_feature=args.protected_feature)


# --- resample ----------------------------------------------------------------


def cmd_resample(args) -> int:
    data = load_csv(args.inp, _roles(args))
    mode = preprocess.normalize_mode(args.mode)
    target = preprocess.resolve_strategy(args.strategy, empirical_stats(data), mode)
    out, report = preprocess.resample(data, target, args.seed)
    write_csv(out, args.out)
    if args.report:
        with Path(args.report).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "label", "count_before", "count_after"])
            w.writerows(report.rows())
    print(
        f"strategy {args.strategy} ({mode}): {len(data)} -> {len(out)} records, "
        f"duplicated {report.duplicated_count}, removed {report.removed_count}"
    )
    return 0


# --- train / train-constrained -------------------------------------------------


def read_spec_file(path) -> learners.ModelSpec:
    """``[model]`` section with ``family`` plus hyperparameter keys."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path, encoding="utf-8"):
        raise learners.ModelError(f"cannot read spec file {path}")
    if not cp.has_section("model") or "family" not in cp["model"]:
        raise learners.ModelError(f"{path}: [model] section needs a family key")
    sec = dict(cp["model"])
    family = sec.pop("family").strip()
    hp = {k: learners._parse_value(v) for k, v in sec.items()}
    return learners.ModelSpec(family, hp)


def cmd_train(args) -> int:
    spec = read_spec_file(args.spec)
    data = load_csv(args.inp, _roles(args))
    model = learners.train(spec, data, args.seed)
    learners.save_model(model, args.out)
    print(f"trained {spec.key} on {len(data)} records")
    return 0


def cmd_train_constrained(args) -> int:
    data = load_csv(args.inp, _roles(args))
    constraint = inprocess.FairnessConstraint(
        epsilon=args.epsilon,
        temperature=args.temperature,
        penalty_start=args.penalty_start,
        penalty_growth=args.penalty_growth,
        max_outer_iters=args.max_outer_iters,
    )
    fit = inprocess.fit_constrained(data, {"penalty": args.penalty, "c": args.c}, constraint, args.seed)
    learners.save_model(fit.model, args.out)
    gap = inprocess.hard_fnr_gap(fit.model, data)
    print(f"train FNR gap at 0.5: {gap:.6f}; surrogate violation per round: "
          + ", ".join(f"{v:.3g}" for v in fit.violations))
    return 0


# --- score files and adjust ----------------------------------------------------


SCORE_COLUMNS = ("entity_id", "score", "label", "group")


def read_scores(path, need_labels: bool):
    """Columns ``entity_id,score,label,group``; labels may be blank when unused."""
    ids, scores, labels, groups = [], [], [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("entity_id", "score", "group") if c not in (reader.fieldnames or [])]
        if missing or (need_labels and "label" not in reader.fieldnames):
            raise DataError(f"{path}: score file needs columns {', '.join(SCORE_COLUMNS)}")
        for row_no, row in enumerate(reader, start=1):
            try:
                s = float(row["score"])
            except ValueError:
                raise DataError(f"{path}: row {row_no}: score {row['score']!r} is not numeric")
            lab = (row.get("label") or "").strip()
            if need_labels and lab not in ("0", "1"):
                raise DataError(f"{path}: row {row_no}: label must be 0 or 1, got {lab!r}")
            ids.append(row["entity_id"])
            scores.append(s)
            labels.append(int(lab) if lab in ("0", "1") else -1)
            groups.append(row["group"])
    return np.array(ids), np.array(scores), np.array(labels), np.array(groups)


def write_selection(path, ids, groups, scores, indices) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", "group", "score"])
        for i in sorted(indices, key=lambda i: (-scores[i], str(ids[i]))):
            w.writerow([ids[i], groups[i], repr(float(scores[i]))])


def _check_groups(path, groups, tokens):
    unknown = sorted(set(groups.tolist()) - set(tokens))
    if unknown:
        raise DataError(f"{path}: unknown group token {unknown[0]!r}")


def cmd_adjust(args) -> int:
    tokens = (args.protected, args.nonprotected)
    ids_a, s_a, y_a, g_a = read_scores(args.scores, need_labels=True)
    ids_b, s_b, _, g_b = read_scores(args.apply_to, need_labels=False)
    _check_groups(args.scores, g_a, tokens)
    _check_groups(args.apply_to, g_b, tokens)
    quota = posthoc.equalize_tpr_quota(
        s_a, y_a, g_a, args.k, args.tie_seed, protected=args.protected, ids=ids_a
    )
    sel = posthoc.apply_quota(s_b, g_b, quota, args.tie_seed, protected=args.protected, ids=ids_b)
    write_selection(args.out, ids_b, g_b, s_b, sel.indices)
    note = " (quota sits at the end of the feasible range)" if quota.at_boundary else ""
    print(
        f"quota {args.protected}={quota.k_protected} {args.nonprotected}={quota.k_nonprotected}, "
        f"gap on adjustment scores {quota.achieved_gap:.6f}{note}"
    )
    return 0


# --- composite -----------------------------------------------------------------


def cmd_composite(args) -> int:
    roles = _roles(args)
    train_data = load_csv(args.train, roles)
    adjust = load_csv(args.adjust, roles)
    future = load_csv(args.apply_to, roles) if args.apply_to else adjust
    grid = learners.default_grid(args.grid)
    tokens = (train_data.protected_token, train_data.nonprotected_token)
    if args.mode == "decoupled":
        candidates = composite.train_decoupled(grid, train_data, args.seed)
    else:
        pooled = [learners.train(spec, train_data, args.seed) for spec in grid]
        candidates = {t: pooled for t in tokens}
    picks = {}
    for t in tokens:
        rows = [learners.score(m, adjust) for m in candidates[t]]
        table = composite.group_depth_table(
            rows, adjust.labels, adjust.groups, args.k, tokens=tokens,
            ids=adjust.entity_ids, tie_seed=args.tie_seed,
        )
        picks[t] = candidates[t][composite.select_per_group_index(table)[t]]
    policy = composite.CompositePolicy(
        composite.DECOUPLED if args.mode == "decoupled" else composite.COUPLED,
        {t: m.spec for t, m in picks.items()},
        picks,
        composite.TPR_QUOTA if args.combine == "quota" else composite.SINGLE_THRESHOLD,
    )
    sel = composite.combine(policy, adjust, args.k, args.tie_seed, evaluation=future)
    scores = composite.composite_scores(policy, future)
    write_selection(args.out, future.entity_ids, future.groups, scores, sel.indices)
    for t in tokens:
        print(f"{t}: {picks[t].spec.key}")
    return 0


# --- select --------------------------------------------------------------------


def cmd_select(args) -> int:
    grid = selection.read_grid_csv(args.grid)
    constraint = selection.SelectionConstraint(args.constraint, args.level)
    spec, audit = selection.select_model(grid, constraint)
    entry = grid[audit.index]
    print(f"{args.constraint} level {args.level} ({constraint.value}): {spec.key}")
    print(
        f"mean precision@k {entry.mean_precision:.6f}, mean disparity {entry.mean_disparity:.6f}, "
        f"normalized {entry.normalized_disparity:.6f}"
    )
    if audit.fallback:
        print("no model met the cutoff; chose the closest one")
    return 0


# --- run / generate --------------------------------------------------------------


def cmd_run(args) -> int:
    config = harness.load_config(args.config)
    result = harness.run_experiment(config)
    print(result.report)
    failed = [r for r in result.rows if r.status.startswith("error")]
    if failed:
        print(f"{len(failed)} method/split rows failed", file=sys.stderr)
        return 1
    return 0


def cmd_generate(args) -> int:
    spec = SyntheticSpec(
        n=args.n,
        protected_fraction=args.protected_fraction,
        base_rate_p=args.base_rate_p,
        base_rate_np=args.base_rate_np,
        seed=args.seed,
    )
    write_csv(generate_synthetic(spec), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairtopk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("resample", help="resample a training CSV to a strategy's targets")
    p.add_argument("--strategy", type=int, required=True, choices=preprocess.STRATEGY_IDS)
    p.add_argument("--mode", choices=("over", "under"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="CSV of cell counts before and after")
    _add_roles(p)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("train", help="train one model from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_roles(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-constrained", help="logistic regression with an FNR-gap penalty")
    p.add_argument("--epsilon", type=float, default=inprocess.EPSILON)
    p.add_argument("--penalty", choices=("l1", "l2"), default="l2")
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--penalty-start", type=float, default=1.0)
    p.add_argument("--penalty-growth", type=float, default=10.0)
    p.add_argument("--max-outer-iters", type=int, default=6)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_roles(p)
    p.set_defaults(func=cmd_train_constrained)

    p = sub.add_parser("adjust", help="fit recall-equalizing quotas and apply them")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--scores", required=True, help="labelled scores used to fit the quota")
    p.add_argument("--apply-to", required=True, help="scores the quota is applied to")
    p.add_argument("--out", required=True)
    p.add_argument("--tie-seed", type=int, default=0)
    p.add_argument("--protected", default="P")
    p.add_argument("--nonprotected", default="NP")
    p.set_defaults(func=cmd_adjust)

    p = sub.add_parser("composite", help="per-group models joined into one top-k list")
    p.add_argument("--mode", choices=("coupled", "decoupled"), required=True)
    p.add_argument("--combine", choices=("quota", "single"), default="quota")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--adjust", required=True, help="labelled split used for selection and quotas")
    p.add_argument("--apply-to", default=None, help="split to select from (default: --adjust)")
    p.add_argument("--grid", choices=("small", "paper_like"), default="small")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tie-seed", type=int, default=0)
    _add_roles(p)
    p.set_defaults(func=cmd_composite)

    p = sub.add_parser("select", help="choose a model from grid results under a constraint")
    p.add_argument("--constraint", choices=(selection.DISPARITY, selection.ACCURACY), required=True)
    p.add_argument("--level", choices=list(selection.LEVEL_LABELS), required=True)
    p.add_argument("--grid", required=True, help="grid CSV written by the run command")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=SyntheticSpec.n)
    p.add_argument("--protected-fraction", type=float, default=SyntheticSpec.protected_fraction)
    p.add_argument("--base-rate-p", type=float, default=SyntheticSpec.base_rate_p)
    p.add_argument("--base-rate-np", type=float, default=SyntheticSpec.base_rate_np)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"fairtopk: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
