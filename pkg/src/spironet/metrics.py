"""Confusion counts and the four segmentation metrics.

All metrics use the convention that a degenerate denominator yields 0, which
keeps empty-mask synthetic cases well defined. Per-image values are averaged
per dataset; cross-seed aggregation happens in the CLI layer.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import SpiroNetParams, predict
from .tensor import Tensor

__all__ = [
    "ConfusionCounts",
    "confusion",
    "sensitivity",
    "f1",
    "iou",
    "mcc",
    "evaluate_dataset",
    "write_metrics_csv",
    "METRIC_NAMES",
]

METRIC_NAMES = ("sen", "f1", "iou", "mcc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_binary(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    p = _check_binary(pred, "pred")
    g = _check_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def sensitivity(c: ConfusionCounts) -> float:
    d = c.tp + c.fn
    return c.tp / d if d else 0.0


def f1(c: ConfusionCounts) -> float:
    d = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / d if d else 0.0


def iou(c: ConfusionCounts) -> float:
    d = c.tp + c.fp + c.fn
    return c.tp / d if d else 0.0


def mcc(c: ConfusionCounts) -> float:
    d = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if d == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(d)


def all_metrics(c: ConfusionCounts) -> dict[str, float]:
    return {"sen": sensitivity(c), "f1": f1(c), "iou": iou(c), "mcc": mcc(c)}


def evaluate_dataset(params: SpiroNetParams, samples) -> tuple[list[dict], dict, dict]:
    """Per-image metrics plus their mean and population standard deviation."""
    samples = list(samples)
    if not samples:
        raise ValueError("evaluate_dataset: empty dataset")
    rows = []
    for s in samples:
        x = Tensor(s.image[None, None].astype(params.config.dtype))
        mask = predict(params, x)[0, 0]
        c = confusion(mask, s.mask)
        row = {"image_id": s.id}
        row.update(all_metrics(c))
        rows.append(row)
    mean = {m: float(np.mean([r[m] for r in rows])) for m in METRIC_NAMES}
    std = {m: float(np.std([r[m] for r in rows])) for m in METRIC_NAMES}
    return rows, mean, std


def write_metrics_csv(path: str | Path, rows: list[dict], mean: dict, std: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", *METRIC_NAMES])
        for r in rows:
            w.writerow([r["image_id"], *(f"{r[m]:.10g}" for m in METRIC_NAMES)])
        w.writerow(["mean", *(f"{mean[m]:.10g}" for m in METRIC_NAMES)])
        w.writerow(["std", *(f"{std[m]:.10g}" for m in METRIC_NAMES)])
