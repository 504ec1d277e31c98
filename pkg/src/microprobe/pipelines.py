"""End-to-end experiment pipelines over manifest datasets.

Every (fold, repeat, budget) cell derives its own seed from the experiment
seed, so results are independent of execution order and bit-reproducible
from (manifest, spec, seed). Folds reseed the samplers over the fixed train
split; they are not data folds. Training for the probe tasks runs once per
(fold, budget) with no repeats.

Wall-clock timings are recorded when ``measure_times`` is on; with it off
the time columns are written as zero, which makes whole result files
byte-reproducible across reruns.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import load_feature_volume
from .forest import RandomForestClassifier
from .metrics import (ConfusionMatrix, RunRecord, evaluate_objects,
                      evaluate_pixels, macro_f1, write_records_csv)
from .probes import (ObapProbe, TrainConfig, deap_train, obap_train,
                     object_centroids, object_labels_from_pixels)
from .sampling import ObjectBudget, PixelBudget, inverse_frequency_indices
from .store import (load_manifest, project_labels, read_instance_mask,
                    read_label_image, read_object_labels, resize_features,
                    resize_nearest_raster, write_label_image,
                    write_object_labels)

TASKS = ("pixel-rf", "pixel-deap", "object-rf", "object-obap")
AGGREGATORS = ("mean", "std", "area")
WORKERS_ENV = "MICROPROBE_WORKERS"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to rerun an experiment bit-for-bit."""

    task: str
    model_key: str
    budgets: tuple
    out_dir: str
    folds: int = 5
    repeats: int = 5
    seed: int = 0
    aggregators: tuple = ("mean", "area")
    feature_grid: int = 256
    rf_trees: int = 100
    iterations: int = 10_000
    learning_rate: float = 1e-3
    probe_width: int = 256
    probe_heads: int = 4
    probe_sigma_init: float = 8.0
    n_max: int = 256
    val_interval: int = 250
    batch_size: int = 1
    measure_times: bool = True
    save_predictions: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not self.budgets:
            raise ValueError("budgets must be non-empty")
        finite = [b for b in self.budgets if b is not None]
        if any(b < 1 for b in finite):
            raise ValueError("budgets must be positive")
        if list(finite) != sorted(finite):
            raise ValueError(f"budgets must be ascending, got {self.budgets}")
        if None in self.budgets and self.budgets.index(None) != len(self.budgets) - 1:
            raise ValueError('"all" must be the last budget')
        if None in self.budgets and not self.task.startswith("object"):
            raise ValueError('"all" budgets only apply to object tasks')
        unknown = set(self.aggregators) - set(AGGREGATORS)
        if unknown:
            raise ValueError(f"unknown aggregators {sorted(unknown)}")
        if not self.aggregators:
            raise ValueError("need at least one aggregator")
        if self.folds < 1 or self.repeats < 1:
            raise ValueError("folds and repeats must be >= 1")


def cell_seed(base_seed: int, fold: int, repeat: int, budget_index: int) -> int:
    seq = np.random.SeedSequence(base_seed, spawn_key=(fold, repeat, budget_index))
    return int(seq.generate_state(1)[0])


def _budget_str(budget) -> str:
    return "all" if budget is None else str(budget)


def _clock(spec: ExperimentSpec):
    return time.perf_counter if spec.measure_times else (lambda: 0.0)


def run_experiment(spec: ExperimentSpec, manifest_path) -> list[RunRecord]:
    """Dispatch on task; writes results.csv and prediction outputs to out_dir."""
    manifest = load_manifest(manifest_path)
    runner = {
        "pixel-rf": run_pixel_rf,
        "pixel-deap": run_pixel_deap,
        "object-rf": run_object_rf,
        "object-obap": run_object_obap,
    }[spec.task]
    records = runner(spec, manifest)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(records, out / "results.csv")
    return records


# -- pixel classification with a random forest ---------------------------------------


def _pixel_pool(spec: ExperimentSpec, manifest, records):
    """Two passes keep memory bounded: classes first, features on demand."""
    side = spec.feature_grid
    classes = []
    index = []  # (record position, flat position at grid resolution)
    for ri, rec in enumerate(records):
        labels = project_labels(read_label_image(manifest.resolve(rec.labels)),
                                side, side).reshape(-1)
        flat = np.flatnonzero(labels > 0)
        classes.append(labels[flat])
        index.append((ri, flat))
    if not classes:
        raise ValueError("no labeled pixels in the train split")
    pool_classes = np.concatenate(classes)
    return pool_classes, index


def _gather_pixel_features(spec: ExperimentSpec, manifest, records, index,
                           chosen: np.ndarray):
    """Feature vectors for chosen pool rows, loading each image at most once."""
    side = spec.feature_grid
    offsets = np.cumsum([0] + [len(flat) for _, flat in index])
    by_record: dict[int, list[int]] = {}
    for row in chosen:
        ri = int(np.searchsorted(offsets, row, side="right") - 1)
        by_record.setdefault(ri, []).append(row)
    pieces = {}
    for ri, rows in by_record.items():
        rec = records[index[ri][0]]
        vol = resize_features(load_feature_volume(manifest, rec, spec.model_key),
                              side, side, mode="bilinear")
        flat_feats = vol.values.reshape(side * side, -1)
        local = index[ri][1][np.asarray(rows) - offsets[ri]]
        pieces[ri] = (rows, flat_feats[local])
    dim = next(iter(pieces.values()))[1].shape[1]
    out = np.empty((len(chosen), dim), dtype=np.float32)
    position = {int(row): i for i, row in enumerate(chosen)}
    for rows, feats in pieces.values():
        for row, vec in zip(rows, feats):
            out[position[int(row)]] = vec
    return out


def run_pixel_rf(spec: ExperimentSpec, manifest) -> list[RunRecord]:
    """Forest over per-pixel features at grid resolution, budgets x folds x repeats."""
    train = [r for r in manifest.split("train") if r.labels is not None]
    test = [r for r in manifest.split("test") if r.labels is not None]
    if not train or not test:
        raise ValueError("pixel-rf needs labeled train and test records")
    side = spec.feature_grid
    k = manifest.n_classes
    clock = _clock(spec)

    pool_classes, index = _pixel_pool(spec, manifest, train)
    records_out = []
    for budget_index, budget in enumerate(spec.budgets):
        for fold in range(spec.folds):
            for repeat in range(spec.repeats):
                seed = cell_seed(spec.seed, fold, repeat, budget_index)
                chosen = inverse_frequency_indices(pool_classes, budget, seed)
                features = _gather_pixel_features(spec, manifest, train, index, chosen)
                labels = pool_classes[chosen]

                forest = RandomForestClassifier(n_trees=spec.rf_trees, seed=seed,
                                                n_jobs=worker_count())
                t0 = clock()
                forest.fit(features, labels, classes=range(1, k + 1))
                train_s = clock() - t0

                cm = None
                infer_total = 0.0
                for rec in test:
                    vol = resize_features(
                        load_feature_volume(manifest, rec, spec.model_key),
                        side, side, mode="bilinear")
                    t0 = clock()
                    flat = forest.predict(vol.values.reshape(side * side, -1))
                    infer_total += clock() - t0
                    truth = read_label_image(manifest.resolve(rec.labels))
                    pred = resize_nearest_raster(
                        flat.reshape(side, side).astype(np.uint16), *truth.shape)
                    part = evaluate_pixels(pred, truth, k)
                    cm = part if cm is None else cm.merge(part)
                    if spec.save_predictions:
                        _save_raster(spec, rec, pred,
                                     budget, fold, repeat)
                records_out.append(RunRecord(
                    method=spec.task, model=spec.model_key,
                    budget=_budget_str(budget), fold=fold, repeat=repeat,
                    f1=macro_f1(cm), train_s=train_s,
                    infer_s_per_image=infer_total / len(test)))
    return records_out


def _save_raster(spec: ExperimentSpec, rec, pred, budget, fold, repeat):
    stem = Path(rec.image).stem
    cell = f"b{_budget_str(budget)}_f{fold}_r{repeat}"
    directory = Path(spec.out_dir) / "predictions" / spec.task / spec.model_key / cell
    directory.mkdir(parents=True, exist_ok=True)
    write_label_image(pred, directory / f"{stem}.lbl")


def _save_object_predictions(spec: ExperimentSpec, rec, table, budget, fold, repeat):
    stem = Path(rec.image).stem
    cell = f"b{_budget_str(budget)}_f{fold}_r{repeat}"
    directory = Path(spec.out_dir) / "predictions" / spec.task / spec.model_key / cell
    directory.mkdir(parents=True, exist_ok=True)
    write_object_labels(table, directory / f"{stem}.csv")


# -- pixel classification with the dense probe ----------------------------------------


def run_pixel_deap(spec: ExperimentSpec, manifest) -> list[RunRecord]:
    """Dense-probe training once per (fold, budget); repeats are not run."""
    test = [r for r in manifest.split("test") if r.labels is not None]
    if not test:
        raise ValueError("pixel-deap needs labeled test records")
    k = manifest.n_classes
    clock = _clock(spec)
    records_out = []
    for budget_index, budget in enumerate(spec.budgets):
        for fold in range(spec.folds):
            seed = cell_seed(spec.seed, fold, 0, budget_index)
            cfg = TrainConfig(iterations=spec.iterations,
                              learning_rate=spec.learning_rate,
                              batch_size=spec.batch_size, seed=seed,
                              val_interval=spec.val_interval)
            probe, report = deap_train(manifest, spec.model_key,
                                       PixelBudget(budget, seed), cfg,
                                       width=spec.probe_width,
                                       heads=spec.probe_heads,
                                       sigma_init=spec.probe_sigma_init)
            cm = None
            infer_total = 0.0
            for rec in test:
                vol = load_feature_volume(manifest, rec, spec.model_key)
                t0 = clock()
                pred = probe.predict(vol)
                infer_total += clock() - t0
                truth = read_label_image(manifest.resolve(rec.labels))
                if pred.shape != truth.shape:
                    pred = resize_nearest_raster(pred, *truth.shape)
                part = evaluate_pixels(pred, truth, k)
                cm = part if cm is None else cm.merge(part)
                if spec.save_predictions:
                    _save_raster(spec, rec, pred, budget, fold, 0)
            records_out.append(RunRecord(
                method=spec.task, model=spec.model_key,
                budget=_budget_str(budget), fold=fold, repeat=0,
                f1=macro_f1(cm),
                train_s=report["train_seconds"] if spec.measure_times else 0.0,
                infer_s_per_image=infer_total / len(test)))
    return records_out


# -- object classification -------------------------------------------------------------


def _object_items(spec: ExperimentSpec, manifest, split: str):
    """Per-record object features, labels and areas for the forest task."""
    side = spec.feature_grid
    items = []
    for rec in manifest.split(split):
        if rec.instances is None:
            continue
        mask = read_instance_mask(manifest.resolve(rec.instances))
        if rec.object_labels is not None:
            table = read_object_labels(manifest.resolve(rec.object_labels),
                                       manifest.n_classes)
        elif rec.labels is not None:
            table = object_labels_from_pixels(
                read_label_image(manifest.resolve(rec.labels)), mask)
        else:
            table = {}
        vol = resize_features(load_feature_volume(manifest, rec, spec.model_key),
                              side, side, mode="bilinear")
        grid_mask = resize_nearest_raster(mask, side, side)
        flat = vol.values.reshape(side * side, -1)
        grid_flat = grid_mask.reshape(-1)
        features = {}
        for oid, _, _ in object_centroids(mask):
            rows = np.flatnonzero(grid_flat == oid)
            if rows.size == 0:
                # object vanished at grid resolution; use its centroid cell
                centroid = [c for c in object_centroids(mask) if c[0] == oid][0]
                rr = min(side - 1, int(centroid[1] * side / mask.shape[0]))
                cc = min(side - 1, int(centroid[2] * side / mask.shape[1]))
                rows = np.array([rr * side + cc])
            vectors = flat[rows]
            area = float((mask == oid).sum())
            parts = []
            for agg in spec.aggregators:
                if agg == "mean":
                    parts.append(vectors.mean(axis=0))
                elif agg == "std":
                    parts.append(vectors.std(axis=0))
                elif agg == "area":
                    parts.append(np.array([area], dtype=np.float32))
            features[oid] = np.concatenate(parts).astype(np.float32)
        items.append({"record": rec, "labels": table, "features": features})
    return items


def run_object_rf(spec: ExperimentSpec, manifest) -> list[RunRecord]:
    """Forest over aggregated per-object features, budgets x folds x repeats."""
    train = _object_items(spec, manifest, "train")
    test = _object_items(spec, manifest, "test")
    if not train or not test:
        raise ValueError("object-rf needs train and test records with instances")
    k = manifest.n_classes
    clock = _clock(spec)

    pool = [(i, oid) for i, item in enumerate(train)
            for oid in sorted(item["labels"])]
    pool_classes = np.array([train[i]["labels"][oid] for i, oid in pool])
    if not len(pool):
        raise ValueError("no labeled objects in the train split")

    records_out = []
    for budget_index, budget in enumerate(spec.budgets):
        for fold in range(spec.folds):
            for repeat in range(spec.repeats):
                seed = cell_seed(spec.seed, fold, repeat, budget_index)
                if budget is None:
                    chosen = np.arange(len(pool))
                else:
                    chosen = inverse_frequency_indices(pool_classes, budget, seed)
                feats = np.stack([train[pool[j][0]]["features"][pool[j][1]]
                                  for j in chosen])
                labels = pool_classes[chosen]
                forest = RandomForestClassifier(n_trees=spec.rf_trees, seed=seed,
                                                n_jobs=worker_count())
                t0 = clock()
                forest.fit(feats, labels, classes=range(1, k + 1))
                train_s = clock() - t0

                truth, pred = {}, {}
                infer_total = 0.0
                for ti, item in enumerate(test):
                    oids = sorted(item["labels"])
                    if not oids:
                        continue
                    x = np.stack([item["features"][oid] for oid in oids])
                    t0 = clock()
                    picks = forest.predict(x)
                    infer_total += clock() - t0
                    table = {}
                    for oid, cls in zip(oids, picks):
                        truth[(ti, oid)] = item["labels"][oid]
                        pred[(ti, oid)] = int(cls)
                        table[oid] = int(cls)
                    if spec.save_predictions:
                        _save_object_predictions(spec, item["record"], table,
                                                 budget, fold, repeat)
                cm = evaluate_objects(pred, truth, k)
                records_out.append(RunRecord(
                    method=spec.task, model=spec.model_key,
                    budget=_budget_str(budget), fold=fold, repeat=repeat,
                    f1=macro_f1(cm), train_s=train_s,
                    infer_s_per_image=infer_total / len(test)))
    return records_out


def run_object_obap(spec: ExperimentSpec, manifest) -> list[RunRecord]:
    """Object-probe training once per (fold, budget); repeats are not run."""
    test_records = [r for r in manifest.split("test") if r.instances is not None]
    if not test_records:
        raise ValueError("object-obap needs test records with instances")
    k = manifest.n_classes
    clock = _clock(spec)
    records_out = []
    for budget_index, budget in enumerate(spec.budgets):
        for fold in range(spec.folds):
            seed = cell_seed(spec.seed, fold, 0, budget_index)
            cfg = TrainConfig(iterations=spec.iterations,
                              learning_rate=spec.learning_rate,
                              batch_size=spec.batch_size, seed=seed,
                              val_interval=spec.val_interval,
                              dice_weight=0.0, ce_weight=1.0)
            probe, report = obap_train(manifest, spec.model_key,
                                       ObjectBudget(budget, seed), cfg,
                                       n_max=spec.n_max, width=spec.probe_width,
                                       heads=spec.probe_heads,
                                       sigma_init=spec.probe_sigma_init)
            truth, pred = {}, {}
            infer_total = 0.0
            for ti, rec in enumerate(test_records):
                mask = read_instance_mask(manifest.resolve(rec.instances))
                centroids = object_centroids(mask)
                if rec.object_labels is not None:
                    table = read_object_labels(manifest.resolve(rec.object_labels), k)
                elif rec.labels is not None:
                    table = object_labels_from_pixels(
                        read_label_image(manifest.resolve(rec.labels)), mask)
                else:
                    continue
                vol = load_feature_volume(manifest, rec, spec.model_key)
                t0 = clock()
                picks = probe.predict(vol, centroids, mask.shape)
                infer_total += clock() - t0
                saved = {}
                for oid, cls in table.items():
                    truth[(ti, oid)] = cls
                    pred[(ti, oid)] = picks[oid]
                    saved[oid] = picks[oid]
                if spec.save_predictions:
                    _save_object_predictions(spec, rec, saved, budget, fold, 0)
            cm = evaluate_objects(pred, truth, k)
            records_out.append(RunRecord(
                method=spec.task, model=spec.model_key,
                budget=_budget_str(budget), fold=fold, repeat=0,
                f1=macro_f1(cm),
                train_s=report["train_seconds"] if spec.measure_times else 0.0,
                infer_s_per_image=infer_total / len(test_records)))
    return records_out
