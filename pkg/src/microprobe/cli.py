"""Command-line entry points.

Subcommands: synth, pixel-rf, pixel-deap, object-rf, object-obap, eval,
report. Exit code 0 on success, 2 on validation errors (bad arguments,
malformed manifests, missing files). The MICROPROBE_WORKERS environment
variable bounds worker processes for forest fitting.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np


def _parse_budgets(text: str, allow_all: bool) -> tuple:
    budgets = []
    for token in text.split(","):
        token = token.strip()
        if token == "all":
            if not allow_all:
                raise ValueError('"all" budgets only apply to object tasks')
            budgets.append(None)
        else:
            budgets.append(int(token))
    return tuple(budgets)


def _add_experiment_args(sub, probe_task: bool):
    sub.add_argument("--manifest", required=True, help="path to manifest.json")
    sub.add_argument("--model", required=True,
                     help='feature source: a model key from the manifest or "filterbank"')
    sub.add_argument("--budgets", required=True,
                     help='comma-separated label budgets, e.g. "100,1000" (+ "all" for objects)')
    sub.add_argument("--folds", type=int, default=5)
    sub.add_argument("--repeats", type=int, default=5)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--no-times", action="store_true",
                     help="write zero timings so result files are byte-reproducible")
    sub.add_argument("--no-predictions", action="store_true",
                     help="skip writing per-image prediction files")
    sub.add_argument("--feature-grid", type=int, default=256,
                     help="grid resolution for forest-task feature resampling")
    sub.add_argument("--trees", type=int, default=100)
    if probe_task:
        sub.add_argument("--iterations", type=int, default=10_000)
        sub.add_argument("--learning-rate", type=float, default=1e-3)
        sub.add_argument("--width", type=int, default=256)
        sub.add_argument("--heads", type=int, default=4)
        sub.add_argument("--val-interval", type=int, default=250)
        sub.add_argument("--n-max", type=int, default=256)


def _experiment_spec(args, task: str):
    from .pipelines import ExperimentSpec

    kwargs = dict(
        task=task,
        model_key=args.model,
        budgets=_parse_budgets(args.budgets, task.startswith("object")),
        out_dir=args.out,
        folds=args.folds,
        repeats=args.repeats,
        seed=args.seed,
        feature_grid=args.feature_grid,
        rf_trees=args.trees,
        measure_times=not args.no_times,
        save_predictions=not args.no_predictions,
    )
    if task in ("pixel-deap", "object-obap"):
        kwargs.update(iterations=args.iterations,
                      learning_rate=args.learning_rate,
                      probe_width=args.width, probe_heads=args.heads,
                      val_interval=args.val_interval, n_max=args.n_max)
    if hasattr(args, "aggregators") and args.aggregators:
        kwargs["aggregators"] = tuple(args.aggregators.split(","))
    return ExperimentSpec(**kwargs)


def _cmd_synth(args) -> int:
    from .synth import generate_object_dataset, generate_pixel_dataset

    kwargs = dict(n_classes=args.classes, n_images=args.images, seed=args.seed,
                  noise=args.noise, image_size=args.image_size,
                  feature_size=args.feature_size)
    if args.kind == "pixel":
        path = generate_pixel_dataset(args.out, amplitude=args.amplitude, **kwargs)
    else:
        path = generate_object_dataset(args.out, **kwargs)
    print(path)
    return 0


def _cmd_experiment(args, task: str) -> int:
    from .metrics import aggregate_runs
    from .pipelines import run_experiment

    spec = _experiment_spec(args, task)
    records = run_experiment(spec, args.manifest)
    for key, (mean, std) in sorted(aggregate_runs(records).items()):
        print(f"{key[0]} model={key[1]} budget={key[2]}: "
              f"F1 {mean:.4f} +- {std:.4f} ({spec.out_dir}/results.csv)")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import evaluate_objects, evaluate_pixels, macro_f1
    from .store import (load_manifest, read_label_image, read_object_labels,
                        read_instance_mask)
    from .probes import object_labels_from_pixels

    manifest = load_manifest(args.manifest)
    pred_dir = Path(args.predictions)
    k = manifest.n_classes
    cm = None
    if args.task == "pixel":
        for rec in manifest.split(args.split):
            if rec.labels is None:
                continue
            pred_path = pred_dir / f"{Path(rec.image).stem}.lbl"
            if not pred_path.exists():
                raise FileNotFoundError(f"missing prediction raster {pred_path}")
            part = evaluate_pixels(read_label_image(pred_path),
                                   read_label_image(manifest.resolve(rec.labels)), k)
            cm = part if cm is None else cm.merge(part)
    else:
        truth_all, pred_all = {}, {}
        for ti, rec in enumerate(manifest.split(args.split)):
            if rec.instances is None:
                continue
            if rec.object_labels is not None:
                truth = read_object_labels(manifest.resolve(rec.object_labels), k)
            elif rec.labels is not None:
                truth = object_labels_from_pixels(
                    read_label_image(manifest.resolve(rec.labels)),
                    read_instance_mask(manifest.resolve(rec.instances)))
            else:
                continue
            pred_path = pred_dir / f"{Path(rec.image).stem}.csv"
            if not pred_path.exists():
                raise FileNotFoundError(f"missing prediction table {pred_path}")
            pred = read_object_labels(pred_path, k)
            for oid, cls in truth.items():
                truth_all[(ti, oid)] = cls
                pred_all[(ti, oid)] = pred[oid]
        cm = evaluate_objects(pred_all, truth_all, k)
    if cm is None:
        raise ValueError(f"no evaluable records in split {args.split!r}")
    print(f"macro_f1 {macro_f1(cm):.6f}")
    return 0


def _cmd_report(args) -> int:
    from .metrics import aggregate_runs, read_records_csv, write_summary_csv

    records = []
    for path in args.results:
        records.extend(read_records_csv(path))
    summary = aggregate_runs(records)
    for (method, model, budget), (mean, std) in sorted(summary.items()):
        print(f"{method:12s} {model:12s} budget={budget:>6s}  "
              f"F1 {mean:.4f} +- {std:.4f}")
    if args.out:
        write_summary_csv(summary, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microprobe",
        description="Pixel and object classification on precomputed feature volumes.")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--kind", choices=("pixel", "object"), required=True)
    synth.add_argument("--classes", type=int, default=3)
    synth.add_argument("--images", type=int, default=50)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--noise", type=float, default=0.5)
    synth.add_argument("--amplitude", type=float, default=0.5,
                       help="class-signal strength of pixel-kind feature channels")
    synth.add_argument("--image-size", type=int, default=64)
    synth.add_argument("--feature-size", type=int, default=16)
    synth.add_argument("--out", required=True)

    for task in ("pixel-rf", "pixel-deap"):
        sub = commands.add_parser(task, help=f"run the {task} experiment")
        _add_experiment_args(sub, probe_task=(task == "pixel-deap"))

    for task in ("object-rf", "object-obap"):
        sub = commands.add_parser(task, help=f"run the {task} experiment")
        _add_experiment_args(sub, probe_task=(task == "object-obap"))
        sub.add_argument("--aggregators", default="mean,area",
                         help='comma-separated subset of "mean,std,area" (object-rf)')

    ev = commands.add_parser("eval", help="score saved predictions against a manifest")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--predictions", required=True,
                    help="directory with per-image .lbl rasters or .csv tables")
    ev.add_argument("--task", choices=("pixel", "object"), required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))

    rep = commands.add_parser("report", help="aggregate result CSVs")
    rep.add_argument("results", nargs="+", help="results.csv paths")
    rep.add_argument("--out", help="write the summary CSV here")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command in ("pixel-rf", "pixel-deap", "object-rf", "object-obap"):
            return _cmd_experiment(args, args.command)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "report":
            return _cmd_report(args)
        parser.error(f"unknown command {args.command}")
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
