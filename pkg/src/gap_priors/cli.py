"""Command-line front end: ``generate``, ``run``, ``ablate`` and ``eval``."""

from __future__ import annotations

import argparse
import csv
import functools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (METHOD_LABELS, PRESETS, ConfigError, ExperimentConfig, MethodConfig, load_config, resolve,
                     set_override)
from .datagen import SPLIT_TAGS, GroupedDataset, load_csv, make_spurious_gaussian, save_csv
from .evalreport import EvalReport, aggregate, evaluate, report_rows, write_report_csv, write_report_json
from .gap import GapConfig
from .model import CheckpointError, MlpSpec, load_checkpoint, save_checkpoint
from .trainer import finetune_gap, run_seeds, train_erm

log = logging.getLogger("gap_priors")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3

ABLATION_AXES = ("rho", "gamma", "lam")


def _dump(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- data ----------------------------------------------------------------------

def load_datasets(exp: ExperimentConfig) -> dict[str, GroupedDataset]:
    if exp.data_dir is not None:
        out = {}
        for tag in SPLIT_TAGS:
            path = Path(exp.data_dir) / f"{tag}.csv"
            if not path.is_file():
                raise FileNotFoundError(str(path))
            out[tag] = load_csv(path, split_tag=tag)
        return out
    return dict(zip(SPLIT_TAGS, make_spurious_gaussian(exp.shift, exp.data_seed)))


def train_proportions(train: GroupedDataset) -> dict[int, float]:
    return {g: c / len(train) for g, c in train.group_counts.items()}


# -- per-seed pipeline (module level so worker processes can unpickle it) ------

def seed_pipeline(seed: int, exp: ExperimentConfig, data: dict, methods: list[str], spec: MlpSpec,
                  gap_overrides: dict | None = None) -> dict:
    train, val_context, val_tune, test = (data[t] for t in SPLIT_TAGS)
    props = train_proportions(train)
    erm_cfg = _with_seed(exp.erm, seed)
    params_erm, rec = train_erm(spec, train, erm_cfg, monitor=val_tune)
    out = {"erm": {"params": params_erm, "record": rec.to_dict(),
                   "report": evaluate(params_erm, spec, test, props).to_dict()}}
    for name in methods:
        if name == "erm":
            continue
        m = exp.methods[name]
        gap_cfg = m.gap if not gap_overrides else GapConfig(**{**m.gap.to_dict(), **gap_overrides})
        q, rec = finetune_gap(params_erm, spec, val_context, gap_cfg, _with_seed(m.train, seed),
                              train=train, monitor=val_tune)
        out[name] = {"params": q, "record": rec.to_dict(), "report": evaluate(q, spec, test, props).to_dict()}
    return out


def _with_seed(cfg, seed):
    from dataclasses import replace
    return replace(cfg, seed=seed)


def _methods_to_run(exp: ExperimentConfig, requested=None) -> list[str]:
    names = ["erm"] + list(exp.methods)
    if requested:
        unknown = set(requested) - set(names)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; configured: {names}")
        names = ["erm"] + [n for n in requested if n != "erm"]
    return names


def _execute(exp: ExperimentConfig, methods: list[str], jobs: int, gap_overrides=None):
    data = load_datasets(exp)
    train = data["train"]
    spec = exp.model_spec(train.n_features, train.n_classes)
    pipeline = functools.partial(seed_pipeline, exp=exp, data=data, methods=methods, spec=spec,
                                 gap_overrides=gap_overrides)
    outcomes = run_seeds(exp.n_seeds, pipeline, base_seed=exp.base_seed, jobs=jobs)
    return data, spec, outcomes


def _aggregate_rows(outcomes, methods) -> list[dict]:
    rows = []
    for name in methods:
        reps = [EvalReport.from_dict(o.result[name]["report"]) for o in outcomes if o.ok]
        if not reps:
            continue
        agg = aggregate(reps)
        avg = agg.get("weighted_avg_acc", agg["overall_acc"])
        rows.append({
            "Method": METHOD_LABELS.get(name, name),
            "Worst": agg["worst_group_acc"]["mean"],
            "Worst SE": agg["worst_group_acc"]["se"],
            "Average": avg["mean"],
            "Average SE": avg["se"],
            "n": agg["worst_group_acc"]["n"],
        })
    return rows


def _write_table(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def _manifest(exp: ExperimentConfig, command: str, extra: dict | None = None) -> dict:
    seeds = list(range(exp.base_seed, exp.base_seed + exp.n_seeds))
    m = {
        "tool": "gap_priors",
        "version": __version__,
        "command": command,
        "config": exp.raw,
        "seeds": seeds,
        "data_seed": exp.data_seed,
    }
    if extra:
        m.update(extra)
    return m


def _persist_seed_outputs(out_dir: Path, outcomes, methods, spec, props, tag: str = "") -> list[list]:
    csv_rows = []
    for o in outcomes:
        if not o.ok:
            continue
        for name in methods:
            res = o.result[name]
            stem = f"{name}{tag}_seed{o.seed}"
            ckpt = out_dir / "checkpoints" / f"{stem}.gapckpt"
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt, res["params"], spec, {"method": name, "seed": o.seed,
                                                         "train_proportions": {str(g): p for g, p in props.items()}})
            record = dict(res["record"], checkpoint=str(ckpt.relative_to(out_dir)))
            _dump(out_dir / "records" / f"{stem}.json", record)
            _dump(out_dir / "reports" / f"{stem}.json", res["report"])
            csv_rows += report_rows(name + tag, o.seed, EvalReport.from_dict(res["report"]))
    return csv_rows


def _exit_code(outcomes) -> int:
    failed = [o for o in outcomes if not o.ok]
    if not failed:
        return EXIT_OK
    for o in failed:
        log.error("seed %d failed: %s", o.seed, o.error)
    return EXIT_FAILED if len(failed) == len(outcomes) else EXIT_PARTIAL


# -- commands --------------------------------------------------------------------

def _experiment_from_args(args) -> ExperimentConfig:
    if args.config:
        doc = load_config(args.config)
    elif args.preset:
        doc = resolve({"preset": args.preset})
    else:
        raise ConfigError("give --config FILE or --preset NAME")
    for assignment in getattr(args, "set", None) or []:
        set_override(doc, assignment)
    if getattr(args, "n_seeds", None) is not None:
        doc["n_seeds"] = args.n_seeds
    env_base = os.environ.get("GAP_SEED_BASE")
    if env_base is not None:
        doc["base_seed"] = int(env_base)
    if getattr(args, "out", None):
        doc["output_dir"] = args.out
    return ExperimentConfig.from_dict(doc)


def cmd_generate(args) -> int:
    exp = _experiment_from_args(args)
    if args.seed is not None:
        exp.data_seed = args.seed
    if exp.shift is None:
        raise ConfigError("generate needs a synthetic data spec, not a data directory")
    out = Path(args.out or exp.output_dir or "data")
    if args.dry_run:
        print(json.dumps({"spec": exp.shift.to_dict(), "seed": exp.data_seed, "out": str(out)}, indent=2))
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    splits = make_spurious_gaussian(exp.shift, exp.data_seed)
    files = {}
    for tag, ds in zip(SPLIT_TAGS, splits):
        save_csv(ds, out / f"{tag}.csv")
        files[tag] = {"file": f"{tag}.csv", "group_counts": {str(g): c for g, c in ds.group_counts.items()}}
    _dump(out / "manifest.json", {
        "tool": "gap_priors", "version": __version__, "seed": exp.data_seed,
        "spec": exp.shift.to_dict(), "splits": files,
    })
    print(f"wrote {len(files)} splits to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    exp = _experiment_from_args(args)
    methods = _methods_to_run(exp, args.methods)
    out = Path(exp.output_dir or "runs/latest")
    if args.dry_run:
        print(json.dumps({"resolved_config": exp.raw, "methods": methods, "output_dir": str(out),
                          "seeds": list(range(exp.base_seed, exp.base_seed + exp.n_seeds))}, indent=2, sort_keys=True))
        return EXIT_OK
    data, spec, outcomes = _execute(exp, methods, args.jobs)
    props = train_proportions(data["train"])
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "manifest.json", _manifest(exp, "run", {"methods": methods, "model": spec.to_dict()}))
    rows = _persist_seed_outputs(out, outcomes, methods, spec, props)
    write_report_csv(out / "reports.csv", rows)
    table = _aggregate_rows(outcomes, methods)
    _write_table(out / "aggregate.csv", table, ["Method", "Worst", "Worst SE", "Average", "Average SE", "n"])
    failures = {str(o.seed): o.error for o in outcomes if not o.ok}
    if failures:
        _dump(out / "failures.json", failures)
    for r in table:
        print(f"{r['Method']:<16} worst {100 * r['Worst']:5.1f} ± {100 * r['Worst SE']:.1f}   "
              f"average {100 * r['Average']:5.1f} ± {100 * r['Average SE']:.1f}")
    return _exit_code(outcomes)


def _parse_values(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"could not parse values {text!r}") from None
    if not vals:
        raise ConfigError("ablation needs at least one value")
    return vals


def cmd_ablate(args) -> int:
    exp = _experiment_from_args(args)
    method = args.method or exp.ablation_method
    if method not in exp.methods:
        raise ConfigError(f"method {method!r} is not configured")
    values = _parse_values(args.values)
    out = Path(exp.output_dir or "runs/latest")
    if args.dry_run:
        print(json.dumps({"resolved_config": exp.raw, "axis": args.axis, "values": values,
                          "method": method, "output_dir": str(out)}, indent=2, sort_keys=True))
        return EXIT_OK
    data = load_datasets(exp)
    spec = exp.model_spec(data["train"].n_features, data["train"].n_classes)
    props = train_proportions(data["train"])
    pipeline = functools.partial(ablation_pipeline, exp=exp, data=data, method=method, spec=spec,
                                 axis=args.axis, values=values)
    outcomes = run_seeds(exp.n_seeds, pipeline, base_seed=exp.base_seed, jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "manifest.json", _manifest(exp, "ablate", {"axis": args.axis, "values": values,
                                                           "method": method, "model": spec.to_dict()}))
    table = []
    csv_rows = []
    for k, v in enumerate(values):
        tag = f"_{args.axis}{v:g}"
        sub = [_pick(o, k) for o in outcomes]
        csv_rows += _persist_seed_outputs(out, sub, [method], spec, props, tag)
        reps = [EvalReport.from_dict(o.result[method]["report"]) for o in sub if o.ok]
        if not reps:
            continue
        agg = aggregate(reps)
        avg = agg.get("weighted_avg_acc", agg["overall_acc"])
        table.append({"value": v, "wga_mean": agg["worst_group_acc"]["mean"], "wga_se": agg["worst_group_acc"]["se"],
                      "avg_mean": avg["mean"], "avg_se": avg["se"], "n": len(reps)})
    write_report_csv(out / f"ablation_{args.axis}_reports.csv", csv_rows)
    _write_table(out / f"ablation_{args.axis}.csv", table, ["value", "wga_mean", "wga_se", "avg_mean", "avg_se", "n"])
    for r in table:
        print(f"{args.axis}={r['value']:<8g} worst {100 * r['wga_mean']:5.1f} ± {100 * r['wga_se']:.1f}   "
              f"average {100 * r['avg_mean']:5.1f} ± {100 * r['avg_se']:.1f}")
    if args.plot and table:
        plot_sweep(out / f"ablation_{args.axis}.svg", args.axis, table)
    return _exit_code(outcomes)


def ablation_pipeline(seed, exp, data, method, spec, axis, values) -> list:
    """ERM once per seed, then the GAP stage for every swept value."""
    train, val_context, val_tune, test = (data[t] for t in SPLIT_TAGS)
    props = train_proportions(train)
    params_erm, _ = train_erm(spec, train, _with_seed(exp.erm, seed), monitor=val_tune)
    m: MethodConfig = exp.methods[method]
    results = []
    for v in values:
        gap_cfg = GapConfig(**{**m.gap.to_dict(), axis: v})
        q, rec = finetune_gap(params_erm, spec, val_context, gap_cfg, _with_seed(m.train, seed),
                              train=train, monitor=val_tune)
        results.append({method: {"params": q, "record": rec.to_dict(),
                                 "report": evaluate(q, spec, test, props).to_dict()}})
    return results


def _pick(outcome, k):
    from .trainer import SeedOutcome
    if not outcome.ok:
        return outcome
    return SeedOutcome(outcome.seed, outcome.result[k])


def plot_sweep(path: Path, axis: str, table: list[dict]) -> Path:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "gap_priors"
    xs = [r["value"] for r in table]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for key, label in (("wga", "worst group"), ("avg", "average")):
        ax.errorbar(xs, [100 * r[f"{key}_mean"] for r in table], yerr=[100 * r[f"{key}_se"] for r in table],
                    marker="o", capsize=3, label=label)
    ax.set_xlabel(axis)
    ax.set_ylabel("test accuracy (%)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def cmd_eval(args) -> int:
    for p in (args.checkpoint, args.dataset):
        if not Path(p).is_file():
            print(f"error: no such file: {p}", file=sys.stderr)
            return EXIT_USAGE
    try:
        params, spec, meta = load_checkpoint(args.checkpoint)
        data = load_csv(args.dataset)
    except (CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if data.n_features != spec.input_dim or data.n_classes > spec.num_classes:
        print(f"error: dataset {args.dataset} has {data.n_features} features / {data.n_classes} classes, "
              f"checkpoint model expects {spec.input_dim} / {spec.num_classes}", file=sys.stderr)
        return EXIT_USAGE
    if args.train_proportions:
        props = {k: float(v) for k, v in enumerate(args.train_proportions.split(","))}
    else:
        props = {int(g): p for g, p in meta.get("train_proportions", {}).items()} or None
    report = evaluate(params, spec, data, props)
    out = Path(args.out or Path(args.checkpoint).with_suffix(""))
    out.mkdir(parents=True, exist_ok=True)
    extra = {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset), "split": data.split_tag}
    write_report_json(out / "eval.json", report, extra)
    write_report_csv(out / "eval.csv", report_rows(meta.get("method", "checkpoint"), meta.get("seed", -1), report))
    flag = " (in-sample: training split)" if report.in_sample else ""
    print(f"worst group {100 * report.worst_group_acc:.1f}  overall {100 * report.overall_acc:.1f}{flag}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gap-prior", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=True):
        sp.add_argument("--config", help="experiment JSON (may name a preset and override it)")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="use a shipped preset as-is")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. n_seeds=3")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--dry-run", action="store_true", help="print the resolved configuration and exit")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="seeds run in parallel")
            sp.add_argument("--n-seeds", type=int)

    g = sub.add_parser("generate", help="write a synthetic dataset as CSV splits")
    common(g, jobs=False)
    g.add_argument("--seed", type=int, help="data seed (defaults to the config's data.seed)")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="ERM followed by GAP finetuning over several seeds")
    common(r)
    r.add_argument("--methods", nargs="+", help="subset of configured methods")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="sweep one GAP hyperparameter")
    common(a)
    a.add_argument("--axis", choices=ABLATION_AXES, required=True)
    a.add_argument("--values", required=True, help="comma-separated values, e.g. 1,2,4")
    a.add_argument("--method", help="GAP variant to sweep (default: last-layer)")
    a.add_argument("--plot", action="store_true", help="also write an SVG chart of the sweep")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset CSV")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--out")
    e.add_argument("--train-proportions", help="comma-separated group proportions for the weighted average")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
