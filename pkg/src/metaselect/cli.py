"""Command line entry points.

Subcommands: fit, select, tree, ensemble, simulate, report.  Outputs are
written to fixed filenames inside --out.  Exit codes: 0 success, 2 usage
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    MetaDataset,
    ModelSpec,
    load_dataset,
    standardize,
)
from .ensemble import (
    EnsembleOptions,
    fit_ensemble,
    heatmap_svg,
    selection_matrix,
    threshold_select,
)
from .errors import DataError, IndexOutOfRange, MarginalityViolation, NumericError
from .estimation import FitOptions, fit
from .linear import (
    SelectionResult,
    forward_ic_select,
    forward_test_select,
    univariate_select,
)
from .simulate import GridConfig, hot_deck_impute, run_grid
from .tree import (
    PruneRule,
    TreeControls,
    default_prune_c,
    grow_tree,
    prune_tree,
    tree_to_spec,
)

_METHOD_LABELS = (
    ("uni-test", "uni_test"),
    ("multi-test", "multi_test"),
    ("AICc", "aicc"),
    ("BIC", "bic"),
    ("FEmrt", "femrt"),
    ("REmrt", "remrt"),
    ("S-FEmrt", "sfemrt"),
    ("S-REmrt", "sremrt"),
)


def _add_data_arguments(parser: argparse.ArgumentParser,
                        missing_default: str = "drop") -> None:
    parser.add_argument("--data", required=True, help="study table CSV")
    parser.add_argument("--schema", required=True,
                        help="covariate schema JSON")
    parser.add_argument("--missing", choices=("error", "drop", "keep"),
                        default=missing_default,
                        help="policy for missing covariate cells "
                             f"(default: {missing_default})")
    parser.add_argument("--standardize", action=argparse.BooleanOptionalAction,
                        default=True,
                        help="center and scale metric covariates first")
    parser.add_argument("--out", default=".", help="output directory")


def _load(args) -> MetaDataset:
    ds = load_dataset(args.data, args.schema, missing=args.missing)
    if args.standardize:
        ds = standardize(ds)
    return ds


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec_dict(spec: ModelSpec, names) -> dict:
    return {
        "mains": [names[j] for j in spec.mains],
        "interactions": [[names[a], names[b]] for a, b in spec.interactions],
        "main_indices": list(spec.mains),
        "interaction_indices": [list(p) for p in spec.interactions],
    }


def _parse_spec(args, ds: MetaDataset) -> ModelSpec:
    mains = []
    if args.mains:
        mains = [ds.index(tok.strip()) for tok in args.mains.split(",")
                 if tok.strip()]
    pairs = []
    if args.interactions:
        for tok in args.interactions.split(","):
            tok = tok.strip()
            if not tok:
                continue
            parts = tok.split(":")
            if len(parts) != 2:
                raise DataError(
                    f"interaction {tok!r} must be written as name:name"
                )
            pairs.append((ds.index(parts[0].strip()),
                          ds.index(parts[1].strip())))
    return ModelSpec(tuple(mains), tuple(pairs))


def _tau2_method(token: str):
    low = token.lower()
    if low in ("reml", "dl"):
        return low
    try:
        return float(token)
    except ValueError:
        raise DataError(
            f"--tau2-method must be reml, dl, or a number, got {token!r}"
        ) from None


def _resolve_jobs(value) -> int:
    env = os.environ.get("METASELECT_JOBS")
    if env is not None:
        return max(1, int(env))
    if value is not None:
        return max(1, int(value))
    return max(1, os.cpu_count() or 1)


def _selection_json(result: SelectionResult, names) -> str:
    payload = {
        "spec": _spec_dict(result.spec, names),
        "stopped_reason": result.stopped_reason,
        "final_fit": None if result.final_fit is None
        else result.final_fit.to_dict(),
        "trace": [
            {"candidate": step.candidate, "score": step.score,
             "accepted": step.accepted}
            for step in result.trace
        ],
    }
    return json.dumps(payload, indent=2)


def _trace_csv(result: SelectionResult) -> str:
    lines = ["candidate,score,accepted"]
    for step in result.trace:
        lines.append(f"{step.candidate},{step.score!r},{step.accepted}")
    return "\n".join(lines) + "\n"


def _cmd_fit(args) -> int:
    ds = _load(args)
    spec = _parse_spec(args, ds)
    options = FitOptions(tau2_method=_tau2_method(args.tau2_method))
    result = fit(ds, spec, options)
    out = _out_dir(args)
    (out / "fit.json").write_text(json.dumps(result.to_dict(), indent=2))
    print(f"wrote {out / 'fit.json'}")
    return 0


def _cmd_select(args) -> int:
    ds = _load(args)
    if args.method == "uni-test":
        result = univariate_select(ds, args.alpha)
    elif args.method == "multi-test":
        result = forward_test_select(ds, args.alpha, args.se_cap)
    else:
        result = forward_ic_select(ds, args.method, args.se_cap)
    out = _out_dir(args)
    (out / "selection.json").write_text(_selection_json(result, ds.names))
    (out / "selection_trace.csv").write_text(_trace_csv(result))
    print(f"wrote {out / 'selection.json'} and {out / 'selection_trace.csv'}")
    return 0


def _controls_from(args) -> TreeControls:
    return TreeControls(minsplit=args.minsplit, minbucket=args.minbucket,
                        maxdepth=args.maxdepth, cv_folds=args.cv_folds)


def _add_control_arguments(parser) -> None:
    parser.add_argument("--minsplit", type=int, default=20)
    parser.add_argument("--minbucket", type=int, default=7)
    parser.add_argument("--maxdepth", type=int, default=30)
    parser.add_argument("--cv-folds", type=int, default=10)


def _cmd_tree(args) -> int:
    ds = _load(args)
    controls = _controls_from(args)
    tree = grow_tree(ds, args.mode, controls)
    if args.prune_c == "auto":
        c = default_prune_c(args.mode, ds.k)
    else:
        c = float(args.prune_c)
    tree = prune_tree(ds, tree, PruneRule(c), seed=args.seed)
    out = _out_dir(args)
    (out / "tree.json").write_text(tree.to_json(ds.names))
    (out / "tree.txt").write_text(tree.render(ds.names) + "\n")
    spec = tree_to_spec(tree)
    (out / "selection.json").write_text(
        json.dumps({"spec": _spec_dict(spec, ds.names), "prune_c": c},
                   indent=2)
    )
    print(f"wrote {out / 'tree.json'}, {out / 'tree.txt'}, "
          f"{out / 'selection.json'}")
    return 0


def _cmd_ensemble(args) -> int:
    ds = _load(args)
    opts = EnsembleOptions(B=args.B, lam=args.lam, seed=args.seed,
                           controls=_controls_from(args))
    trees = fit_ensemble(ds, args.mode, opts, n_jobs=_resolve_jobs(args.jobs))
    matrix = selection_matrix(trees, ds.p)
    spec = threshold_select(matrix, args.lam)
    out = _out_dir(args)
    (out / "amatrix.csv").write_text(matrix.to_csv(ds.names))
    (out / "amatrix.json").write_text(matrix.to_json(ds.names))
    (out / "amatrix.svg").write_text(heatmap_svg(matrix, names=ds.names))
    (out / "selection.json").write_text(
        json.dumps({"spec": _spec_dict(spec, ds.names),
                    "lambda": args.lam, "B": args.B, "mode": args.mode},
                   indent=2)
    )
    print(f"wrote {out / 'amatrix.csv'}, {out / 'amatrix.json'}, "
          f"{out / 'amatrix.svg'}, {out / 'selection.json'}")
    return 0


def _cmd_simulate(args) -> int:
    config = GridConfig.from_json(args.grid)
    if args.seed is not None:
        config.master_seed = int(args.seed)
    base = load_dataset(args.data, args.schema, missing="keep")
    rng = np.random.default_rng(
        np.random.SeedSequence((config.master_seed, 202)))
    base = hot_deck_impute(base, rng)
    base = standardize(base)
    report = run_grid(base, config, n_jobs=_resolve_jobs(args.jobs))
    out = _out_dir(args)
    (out / "grid_report.csv").write_text(report.to_csv())
    (out / "grid_report.json").write_text(report.to_json())
    print(f"wrote {out / 'grid_report.csv'} and {out / 'grid_report.json'}")
    return 0


def _effect_order(specs: list[ModelSpec]) -> tuple[list[int], list[tuple]]:
    mains = sorted({j for s in specs for j in s.mains})
    pairs = sorted({p for s in specs for p in s.interactions})
    return mains, pairs


def _cmd_report(args) -> int:
    ds = _load(args)
    names = ds.names
    seed_seq = np.random.SeedSequence(args.seed)
    kids = seed_seq.spawn(4)

    selections: dict[str, ModelSpec] = {}
    notes: dict[str, str] = {}
    selections["uni-test"] = univariate_select(ds, args.alpha).spec
    multi = forward_test_select(ds, args.alpha)
    selections["multi-test"] = multi.spec
    notes["multi-test"] = multi.stopped_reason
    selections["AICc"] = forward_ic_select(ds, "aicc").spec
    selections["BIC"] = forward_ic_select(ds, "bic").spec
    for label, mode, kid in (("FEmrt", "fe", kids[0]), ("REmrt", "re", kids[1])):
        tree = grow_tree(ds, mode)
        rule = PruneRule(default_prune_c(mode, ds.k))
        pruned = prune_tree(ds, tree, rule,
                            seed=int(kid.generate_state(1, np.uint64)[0]))
        selections[label] = tree_to_spec(pruned)
    for label, mode, kid in (("S-FEmrt", "fe", kids[2]),
                             ("S-REmrt", "re", kids[3])):
        opts = EnsembleOptions(B=args.B, lam=args.lam,
                               seed=int(kid.generate_state(1, np.uint64)[0]))
        trees = fit_ensemble(ds, mode, opts, n_jobs=_resolve_jobs(args.jobs))
        selections[label] = threshold_select(
            selection_matrix(trees, ds.p), args.lam)

    labels = [label for label, _ in _METHOD_LABELS]
    refits = {}
    for label in labels:
        spec = selections[label]
        try:
            refits[label] = fit(ds, spec)
        except NumericError:
            refits[label] = None

    mains, pairs = _effect_order(list(selections.values()))
    effects: list[tuple[str, object]] = [("intercept", None)]
    effects += [(names[j], ("main", j)) for j in mains]
    effects += [(f"{names[a]}:{names[b]}", ("ie", (a, b)))
                for a, b in pairs]

    def cell(label: str, effect) -> str:
        spec = selections[label]
        refit = refits[label]
        if refit is None:
            return "n/a" if effect is None else ""
        if effect is None:
            idx = 0
        else:
            kind, ref = effect
            if kind == "main":
                if ref not in spec.mains:
                    return ""
                idx = 1 + spec.mains.index(ref)
            else:
                if tuple(ref) not in spec.interactions:
                    return ""
                idx = 1 + len(spec.mains) + spec.interactions.index(tuple(ref))
        est = refit.beta[idx]
        se = refit.se[idx]
        return f"{est:.2f} ({se:.2f})"

    lines = ["# Effect selection summary", ""]
    lines.append(f"Studies: {ds.k}. Covariates: {ds.p}. "
                 f"alpha = {args.alpha}, lambda = {args.lam}, B = {args.B}.")
    lines.append("")
    lines.append("| effect | " + " | ".join(labels) + " |")
    lines.append("|" + "---|" * (len(labels) + 1))
    for effect_name, effect in effects:
        row = [cell(label, effect) for label in labels]
        lines.append(f"| {effect_name} | " + " | ".join(row) + " |")
    tau_row = [
        "" if refits[label] is None else f"{refits[label].tau2:.3f}"
        for label in labels
    ]
    lines.append("| tau2 (refit) | " + " | ".join(tau_row) + " |")
    lines.append("")
    lines.append("Cells show the coefficient (standard error) of each "
                 "effect refitted in the model selected by that method; "
                 "blank cells mean the effect was not selected.")
    out = _out_dir(args)
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'report.md'}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaselect",
        description="Variable selection for interaction effects in "
                    "random effects meta-regression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit one model spec")
    _add_data_arguments(p_fit)
    p_fit.add_argument("--mains", default="",
                       help="comma separated covariate names")
    p_fit.add_argument("--interactions", default="",
                       help="comma separated name:name pairs")
    p_fit.add_argument("--tau2-method", default="reml",
                       help="reml, dl, or a fixed nonnegative value")
    p_fit.set_defaults(func=_cmd_fit)

    p_sel = sub.add_parser("select", help="run one selection procedure")
    _add_data_arguments(p_sel)
    p_sel.add_argument("--method", required=True,
                       choices=("uni-test", "multi-test", "aicc", "bic"))
    p_sel.add_argument("--alpha", type=float, default=0.05)
    p_sel.add_argument("--se-cap", type=float, default=100.0)
    p_sel.set_defaults(func=_cmd_select)

    p_tree = sub.add_parser("tree", help="grow and prune one tree")
    _add_data_arguments(p_tree)
    p_tree.add_argument("--mode", required=True, choices=("fe", "re"))
    p_tree.add_argument("--prune-c", default="auto",
                        help="pruning strength; auto uses the k-based rule")
    p_tree.add_argument("--seed", type=int, default=0,
                        help="cross-validation fold seed")
    _add_control_arguments(p_tree)
    p_tree.set_defaults(func=_cmd_tree)

    p_ens = sub.add_parser("ensemble", help="bootstrap tree ensemble")
    _add_data_arguments(p_ens)
    p_ens.add_argument("--mode", required=True, choices=("fe", "re"))
    p_ens.add_argument("--B", type=int, default=100, help="number of trees")
    p_ens.add_argument("--lambda", dest="lam", type=float, default=0.5,
                       help="selection threshold")
    p_ens.add_argument("--seed", type=int, required=True)
    p_ens.add_argument("--jobs", type=int, default=None)
    _add_control_arguments(p_ens)
    p_ens.set_defaults(func=_cmd_ensemble)

    p_sim = sub.add_parser("simulate", help="run a simulation grid")
    p_sim.add_argument("--grid", required=True, help="grid config JSON")
    p_sim.add_argument("--data", required=True, help="base table CSV")
    p_sim.add_argument("--schema", required=True)
    p_sim.add_argument("--seed", type=int, default=None,
                       help="override the config's master seed")
    p_sim.add_argument("--jobs", type=int, default=None)
    p_sim.add_argument("--out", default=".")
    p_sim.set_defaults(func=_cmd_simulate)

    p_rep = sub.add_parser("report", help="side by side method comparison")
    _add_data_arguments(p_rep)
    p_rep.add_argument("--alpha", type=float, default=0.05)
    p_rep.add_argument("--B", type=int, default=100)
    p_rep.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p_rep.add_argument("--seed", type=int, required=True)
    p_rep.add_argument("--jobs", type=int, default=None)
    p_rep.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, MarginalityViolation, IndexOutOfRange, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
