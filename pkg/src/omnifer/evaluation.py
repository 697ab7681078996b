"""Accuracy reports, the three-condition comparison and the snapshot probe."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LabeledDataset, concat, split
from .distill import DistilledSet
from .model import Architecture, ModelParams, TrainConfig, init_params, predict, train_classifier

RECORD_FIELDS = ("condition", "seed", "epoch", "split", "accuracy", "seconds")
CONDITIONS = ("baseline", "vas", "das")

# full-scale reference timings, kept as context for the cost report; never asserted
REFERENCE_SECONDS_PER_EPOCH = {"baseline": 155.0, "vas": 1625.0, "das": 156.0}


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    count: int
    seconds: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class_accuracy],
            "confusion": self.confusion.tolist(),
            "count": self.count,
            "seconds": self.seconds,
        }


def confusion_report(y_true: np.ndarray, y_pred: np.ndarray, m: int, seconds: float = 0.0) -> EvalReport:
    cm = np.zeros((m, m), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, np.diag(cm) / np.maximum(rows, 1), np.nan)
    total = int(cm.sum())
    acc = float(np.trace(cm) / total) if total else 0.0
    return EvalReport(acc, per_class, cm, total, seconds)


def evaluate(params: ModelParams, dataset: LabeledDataset) -> EvalReport:
    if dataset.num_classes != params.arch.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, model outputs {params.arch.num_classes}")
    start = time.perf_counter()
    pred = predict(params, dataset.images) if len(dataset) else np.zeros(0, dtype=np.int64)
    return confusion_report(dataset.labels, pred, dataset.num_classes, time.perf_counter() - start)


def distilled_as_dataset(ds: DistilledSet, m: int) -> LabeledDataset:
    return LabeledDataset(ds.x_tilde, ds.labels, m, "distilled")


# ---------------------------------------------------------------------------
# condition comparison
# ---------------------------------------------------------------------------

@dataclass
class CostReport:
    seconds_per_epoch: dict[str, float]
    sizes: dict[str, int]
    reference: dict[str, float] = field(default_factory=lambda: dict(REFERENCE_SECONDS_PER_EPOCH))


@dataclass
class Comparison:
    rows: list[dict]
    summary: dict[str, dict]
    cost: CostReport

    def margin_over_baseline(self, condition: str) -> tuple[float, float]:
        """(mean gain over baseline, pooled standard deviation)."""
        a = [r["accuracy"] for r in self.rows if r["condition"] == condition]
        b = [r["accuracy"] for r in self.rows if r["condition"] == "baseline"]
        pooled = float(np.sqrt((np.var(a, ddof=1) + np.var(b, ddof=1)) / 2))
        return float(np.mean(a) - np.mean(b)), pooled


class ConditionFailed(RuntimeError):
    pass


def training_sets(anchor: LabeledDataset, aux_vanilla: LabeledDataset | None,
                  distilled: DistilledSet | None) -> dict[str, LabeledDataset]:
    sets = {"baseline": anchor}
    if aux_vanilla is not None:
        sets["vas"] = concat(anchor, aux_vanilla, "anchor+vas")
    if distilled is not None:
        sets["das"] = concat(anchor, distilled_as_dataset(distilled, anchor.num_classes), "anchor+das")
    return sets


def compare_conditions(anchor: LabeledDataset, aux_vanilla: LabeledDataset | None,
                       distilled: DistilledSet | None, arch: Architecture, cfg: TrainConfig,
                       seeds: Sequence[int], test: LabeledDataset) -> Comparison:
    """Train anchor-only, anchor+VAS and anchor+DAS models for every seed.

    Seconds per epoch is the median over the epochs of one run, averaged over
    seeds.
    """
    if len(seeds) < 3:
        raise ValueError("at least three seeds are required")
    if cfg.epochs < 3:
        raise ValueError("timing needs at least three epochs")
    sets = training_sets(anchor, aux_vanilla, distilled)
    rows, timings = [], {c: [] for c in sets}
    for seed in seeds:
        for condition, data in sets.items():
            try:
                result = train_classifier(init_params(arch, seed), data, replace(cfg, seed=seed))
            except Exception as exc:
                raise ConditionFailed(f"condition {condition!r}, seed {seed}: {exc}") from exc
            spe = statistics.median(result.epoch_seconds)
            timings[condition].append(spe)
            report = evaluate(result.params, test)
            rows.append({"condition": condition, "seed": int(seed), "epoch": cfg.epochs,
                         "split": "test", "accuracy": report.accuracy, "seconds": spe})
    summary = {}
    for condition in sets:
        accs = [r["accuracy"] for r in rows if r["condition"] == condition]
        summary[condition] = {"mean": float(np.mean(accs)), "sd": float(np.std(accs, ddof=1)),
                              "seconds_per_epoch": float(np.mean(timings[condition])),
                              "size": len(sets[condition])}
    cost = CostReport({c: summary[c]["seconds_per_epoch"] for c in sets},
                      {c: len(d) for c, d in sets.items()})
    return Comparison(rows, summary, cost)


# ---------------------------------------------------------------------------
# snapshot probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    curve: list[float]
    n_train: int
    n_test: int
    losses: list[float]


def pattern_probe(snapshots: Sequence[DistilledSet], probe_arch: Architecture, cfg: TrainConfig,
                  split_seed: int = 0, ratio=(5, 1)) -> ProbeResult:
    """Train a fresh classifier on pooled snapshot images; test on a held-out share.

    Returns the held-out accuracy after every epoch.
    """
    if len(snapshots) < 6:
        raise ValueError("the probe needs at least six snapshots")
    first = snapshots[0]
    for s in snapshots[1:]:
        if s.x_tilde.shape != first.x_tilde.shape or not np.array_equal(s.labels, first.labels):
            raise ValueError("snapshots must share image shape and labels")
    m = probe_arch.num_classes
    pooled = LabeledDataset(np.concatenate([s.x_tilde for s in snapshots]),
                            np.concatenate([s.labels for s in snapshots]), m, "snapshots")
    train, test = split(pooled, ratio, split_seed)
    if len(test) < m:
        raise ValueError(f"only {len(test)} held-out images for {m} classes")
    curve: list[float] = []
    result = train_classifier(init_params(probe_arch, cfg.seed), train, cfg,
                              on_epoch=lambda e, p: curve.append(evaluate(p, test).accuracy))
    return ProbeResult(curve, len(train), len(test), result.losses)


# ---------------------------------------------------------------------------
# record output
# ---------------------------------------------------------------------------

def append_records(path, records: Sequence[dict]) -> None:
    """Append line-delimited JSON records; existing lines are never rewritten."""
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec.get(k) for k in RECORD_FIELDS}, sort_keys=False) + "\n")


def read_records(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def plot_columns(ys: Sequence[float], xs: Sequence[float] | None = None) -> str:
    xs = range(1, len(ys) + 1) if xs is None else xs
    return "".join(f"{x}\t{y:.6f}\n" for x, y in zip(xs, ys))
