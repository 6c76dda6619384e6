"""Multi-seed training-size sweeps, schedule comparison and CSV reporting."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PairedSample, derive_seed, detect_objects_oracle, generate_test_split, generate_train_split
from .encoders import Model
from .errors import OOCError
from .inference import Prediction, Thresholds, classify_true_caption
from .metrics import MetricsReport, confusion, evaluate
from .stats import paired_t_test
from .training import TrainConfig, train

DEFAULT_SIZES = tuple(range(50, 501, 50))
DEFAULT_SEEDS = (0, 1, 2)
DEFAULT_TEST_SIZE = 100
TEST_SEED = 12345

# the no-contrastive schedule is an ablation of this architecture, not a pretrained-backbone baseline
MODEL_TAGS = {"cross": "cross", "joint": "joint", "baseline": "baseline-ablation-no-contrastive"}

METRIC_COLUMNS = ["size", "schedule", "seed", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall", "f1"]
SIM_GRID = tuple(round(x, 2) for x in np.arange(0.50, 1.0001, 0.01))


@dataclass
class CellResult:
    size: int
    schedule: str
    seed: int
    report: MetricsReport | None = None
    true_caption_test: float | None = None      # on the labelled test split
    true_caption_heldout: float | None = None   # on held-out matched/random pairs
    sim_curve: list[tuple[float, float]] = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.report is None

    @property
    def accuracy(self) -> float | None:
        return None if self.report is None else self.report.accuracy


@dataclass
class SweepResult:
    sizes: list[int]
    schedules: list[str]
    seeds: list[int]
    cells: dict[tuple[int, str, int], CellResult]

    def cell(self, size: int, schedule: str, seed: int) -> CellResult:
        return self.cells[(size, schedule, seed)]

    def accuracies(self, schedule: str, seed: int) -> list[float | None]:
        """Accuracy per size for one (schedule, seed)."""
        return [self.cell(n, schedule, seed).accuracy for n in self.sizes]

    def mean_curve(self, schedule: str) -> list[tuple[int, float | None, float | None]]:
        """(size, mean accuracy, std accuracy) over seeds; None when every seed failed."""
        rows = []
        for n in self.sizes:
            accs = [a for a in (self.cell(n, schedule, s).accuracy for s in self.seeds) if a is not None]
            if accs:
                rows.append((n, float(np.mean(accs)), float(np.std(accs))))
            else:
                rows.append((n, None, None))
        return rows

    def across_size_std(self, schedule: str) -> float:
        """Spread of the seed-mean accuracy curve across training sizes."""
        means = [m for _, m, _ in self.mean_curve(schedule)]
        if any(m is None for m in means):
            raise ValueError(f"schedule {schedule!r} has sizes where every seed failed")
        return float(np.std(means))

    def mean_accuracy(self, size: int, schedule: str) -> float:
        accs = [self.cell(size, schedule, s).accuracy for s in self.seeds]
        if any(a is None for a in accs):
            raise ValueError(f"cell ({size}, {schedule}) has failed seeds")
        return float(np.mean(accs))

    def write_metrics_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS + ["model_tag", "status"])
            for (n, sch, seed), c in sorted(self.cells.items()):
                w.writerow(_metric_row(c) + [MODEL_TAGS[sch], "failed: " + c.error if c.failed else "ok"])

    def write_plotdata_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "schedule", "mean_accuracy", "std_accuracy", "model_tag"])
            for sch in self.schedules:
                for n, m, s in self.mean_curve(sch):
                    w.writerow([n, sch, _fmt(m), _fmt(s), MODEL_TAGS[sch]])

    def write_thresholds_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "schedule", "seed", "sim_threshold", "accuracy"])
            for (n, sch, seed), c in sorted(self.cells.items()):
                for thr, acc in c.sim_curve:
                    w.writerow([n, sch, seed, thr, repr(acc)])

    def write_true_caption_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "schedule", "seed", "test_split_accuracy", "heldout_pairs_accuracy"])
            for (n, sch, seed), c in sorted(self.cells.items()):
                w.writerow([n, sch, seed, _fmt(c.true_caption_test), _fmt(c.true_caption_heldout)])


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _metric_row(c: CellResult) -> list:
    if c.report is None:
        return [c.size, c.schedule, c.seed] + [""] * 8
    r = c.report
    return [c.size, c.schedule, c.seed, r.tp, r.fp, r.tn, r.fn,
            _fmt(r.accuracy), _fmt(r.precision), _fmt(r.recall), _fmt(r.f1)]


def sim_threshold_curve(preds: Sequence[Prediction], labels: Sequence[bool], thresholds: Thresholds,
                        grid: Sequence[float] = SIM_GRID) -> list[tuple[float, float]]:
    """Accuracy for each S_sim threshold with the IoU threshold held fixed."""
    curve = []
    for thr in grid:
        verdicts = [p.iou > thresholds.iou_threshold and p.s_sim < thr for p in preds]
        curve.append((float(thr), confusion(labels, verdicts).accuracy))
    return curve


def true_caption_split(n: int, seed: int) -> list[PairedSample]:
    """Held-out matched/random pairs with the true caption's slot randomized."""
    rng = np.random.default_rng(derive_seed(seed, "true-caption"))
    out = []
    for s in generate_train_split(n, derive_seed(seed, "true-caption-corpus")):
        if rng.integers(2):
            s = replace(s, caption_1=s.caption_2, caption_2=s.caption_1, match_index=2)
        else:
            s = replace(s, match_index=1)
        out.append(s)
    return out


def true_caption_accuracy(model: Model, samples: Sequence[PairedSample]) -> float:
    """Fraction of records whose own caption is picked by the pooled-object classifier."""
    embedder = model.make_embedder()
    hits = 0
    for s in samples:
        pick = classify_true_caption(model, s.image, detect_objects_oracle(s), s.caption_1, s.caption_2, embedder)
        hits += pick == (s.match_index or 1)
    return hits / len(samples)


def run_cell(pool: Sequence[PairedSample], test_set: Sequence[PairedSample], size: int, schedule: str,
             seed: int, config: TrainConfig, thresholds: Thresholds = Thresholds(),
             true_caption_set: Sequence[PairedSample] | None = None, out_dir=None) -> CellResult:
    """Train on the first ``size`` records of ``pool`` and evaluate; failures are recorded, not raised."""
    if size > len(pool):
        raise ValueError(f"training size {size} exceeds the corpus of {len(pool)} records")
    cfg = replace(config, schedule=schedule, seed=seed)
    try:
        result = train(pool[:size], cfg)
        report, preds = evaluate(result.model, test_set, thresholds, seed=seed,
                                 model_tag=MODEL_TAGS[schedule], train_size=size)
    except (OOCError, ValueError, FloatingPointError, ArithmeticError) as exc:
        return CellResult(size, schedule, seed, error=f"{type(exc).__name__}: {exc}")
    labels = [s.ooc_label for s in test_set]
    cell = CellResult(size, schedule, seed, report, sim_curve=sim_threshold_curve(preds, labels, thresholds))
    cell.true_caption_test = sum(p.true_caption_pred == s.match_index for p, s in zip(preds, test_set)) / len(preds)
    if true_caption_set:
        cell.true_caption_heldout = true_caption_accuracy(result.model, true_caption_set)
    if out_dir is not None:
        cell_dir = Path(out_dir) / "cells" / f"{schedule}-n{size}-s{seed}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        result.write_losses_csv(cell_dir / "losses.csv")
        with open(cell_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            w.writerow(_metric_row(cell))
    return cell


@dataclass(frozen=True)
class SweepSpec:
    corpus_size: int
    test_size: int
    test_seed: int
    true_caption_size: int


def _pool(seed: int, corpus_size: int) -> list[PairedSample]:
    # nested prefixes: every size of a seed trains on the head of one fixed corpus
    return generate_train_split(corpus_size, seed)


def _cell_job(args):
    size, schedule, seed, config, thresholds, spec, out_dir = args
    pool = _pool(seed, spec.corpus_size)
    test_set = generate_test_split(spec.test_size, spec.test_seed)
    tc = true_caption_split(spec.true_caption_size, spec.test_seed) if spec.true_caption_size else None
    return run_cell(pool, test_set, size, schedule, seed, config, thresholds, tc, out_dir)


def sweep(sizes: Sequence[int] = DEFAULT_SIZES, schedules: Sequence[str] = ("baseline", "cross", "joint"),
          seeds: Sequence[int] = DEFAULT_SEEDS, config: TrainConfig = TrainConfig(),
          thresholds: Thresholds = Thresholds(), corpus_size: int | None = None,
          test_size: int = DEFAULT_TEST_SIZE, test_seed: int = TEST_SEED, true_caption_size: int = 0,
          out_dir=None, workers: int = 1) -> SweepResult:
    """Train and evaluate every (size, schedule, seed) cell.

    Schedules share the training data of a seed, and all cells share one test
    set. With ``out_dir`` each cell writes its own files and the merged
    metrics.csv, plotdata.csv, thresholds.csv and true_caption.csv are
    written at the end.
    """
    sizes = [int(n) for n in sizes]
    if not sizes:
        raise ValueError("no training sizes given")
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ValueError(f"sizes must be strictly ascending, got {sizes}")
    if sizes[0] < 2:
        raise ValueError("training sizes must be at least 2")
    corpus_size = max(sizes) if corpus_size is None else corpus_size
    if sizes[-1] > corpus_size:
        raise ValueError(f"training size {sizes[-1]} exceeds the corpus of {corpus_size} records")
    unknown = [s for s in schedules if s not in MODEL_TAGS]
    if unknown:
        raise ValueError(f"unknown schedules {unknown}")
    spec = SweepSpec(corpus_size, test_size, test_seed, true_caption_size)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(n, sch, seed, config, thresholds, spec, out_dir)
            for seed in seeds for sch in schedules for n in sizes]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_cell_job, jobs))
    else:
        results = _run_serial(jobs, spec)
    cells = {(c.size, c.schedule, c.seed): c for c in results}
    out = SweepResult(sizes, list(schedules), list(seeds), cells)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out.write_metrics_csv(out_dir / "metrics.csv")
        out.write_plotdata_csv(out_dir / "plotdata.csv")
        out.write_thresholds_csv(out_dir / "thresholds.csv")
        out.write_true_caption_csv(out_dir / "true_caption.csv")
    return out


def _run_serial(jobs, spec: SweepSpec) -> list[CellResult]:
    # generate shared data once instead of once per cell
    test_set = generate_test_split(spec.test_size, spec.test_seed)
    tc = true_caption_split(spec.true_caption_size, spec.test_seed) if spec.true_caption_size else None
    pools: dict[int, list[PairedSample]] = {}
    results = []
    for size, schedule, seed, config, thresholds, _, out_dir in jobs:
        if seed not in pools:
            pools[seed] = _pool(seed, spec.corpus_size)
        results.append(run_cell(pools[seed], test_set, size, schedule, seed, config, thresholds, tc, out_dir))
    return results


def read_metrics_csv(path) -> list[dict]:
    """Metric rows with numeric fields parsed; blank ratios come back as None."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = dict(row)
            for key in ("size", "seed", "tp", "fp", "tn", "fn"):
                parsed[key] = int(row[key]) if row[key] else None
            for key in ("accuracy", "precision", "recall", "f1"):
                parsed[key] = float(row[key]) if row[key] else None
            rows.append(parsed)
    return rows


@dataclass
class ScheduleComparison:
    t_statistic: float
    p_value: float
    cross: list[float]
    joint: list[float]

    def as_dict(self) -> dict:
        return {"t": self.t_statistic, "p": self.p_value, "cross": self.cross, "joint": self.joint}


def compare_schedules(result: SweepResult, a: str = "cross", b: str = "joint") -> ScheduleComparison:
    """Paired t-test over sizes between the seed-mean accuracies of two schedules."""
    ma = [m for _, m, _ in result.mean_curve(a)]
    mb = [m for _, m, _ in result.mean_curve(b)]
    if any(x is None for x in ma + mb):
        raise ValueError("cannot compare schedules with failed cells")
    t, p = paired_t_test(ma, mb)
    return ScheduleComparison(t, p, ma, mb)


def write_summary(result: SweepResult, path) -> dict:
    """Aggregate numbers a reader wants first, as JSON."""
    summary = {"sizes": result.sizes, "seeds": result.seeds, "schedules": {}}
    for sch in result.schedules:
        curve = result.mean_curve(sch)
        summary["schedules"][sch] = {
            "model_tag": MODEL_TAGS[sch],
            "mean_accuracy": [m for _, m, _ in curve],
            "across_size_std": None if any(m is None for _, m, _ in curve) else result.across_size_std(sch),
            "failed_cells": sum(c.failed for (n, s, _), c in result.cells.items() if s == sch),
            "true_caption_test_mean": _mean_of(c.true_caption_test for (n, s, _), c in result.cells.items() if s == sch),
            "true_caption_heldout_mean": _mean_of(c.true_caption_heldout for (n, s, _), c in result.cells.items()
                                                  if s == sch),
        }
    if "cross" in result.schedules and "joint" in result.schedules and len(result.sizes) >= 2:
        try:
            summary["cross_vs_joint"] = compare_schedules(result).as_dict()
        except (ValueError, OOCError) as exc:
            summary["cross_vs_joint"] = {"error": str(exc)}
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def _mean_of(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
