"""Dice loss for training and confusion-derived pixel metrics for reporting.

Conventions, fixed for reproducible reports:

* zero-denominator ratios (precision/recall/f1/iou) are 1.0 when tp=fp=fn=0
  (both masks empty, i.e. a correct all-background prediction) and 0.0
  otherwise;
* f1 is computed as 2*iou/(1+iou), which is the Sorensen-Dice value and
  makes the f1/iou identity hold exactly;
* kappa is 0.0 when the chance agreement p_e equals 1 (both marginals
  degenerate), where the usual formula is 0/0.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .errors import EvaluationError, InputDomainError, ShapeError

ZERO_DENOMINATOR_CONVENTION = (
    "precision/recall/f1/iou = 1.0 if tp=fp=fn=0 else 0.0 on zero denominator; "
    "kappa = 0.0 when p_e = 1"
)

AGGREGATION_MODES = ("per-image-mean", "global-pool")

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "iou", "kappa")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp,
            self.fn + other.fn, self.tn + other.tn,
        )


@dataclass(frozen=True)
class MetricScores:
    accuracy: float
    precision: float
    recall: float
    f1: float
    iou: float
    kappa: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class ImageResult:
    """Per-image evaluation record: counts plus derived scores."""

    source_id: str
    counts: ConfusionCounts
    scores: MetricScores


@dataclass
class MetricsReport:
    scores: MetricScores
    aggregation: str
    per_image: list[ImageResult]
    convention: str = ZERO_DENOMINATOR_CONVENTION


def dice_loss(pred: torch.Tensor, target: torch.Tensor,
              smooth: float = 1.0) -> torch.Tensor:
    """Smoothed Sorensen-Dice loss, differentiable in pred.

    1 - (2*sum(pred*target) + smooth) / (sum(pred) + sum(target) + smooth)
    """
    if smooth <= 0:
        raise InputDomainError(f"smooth must be > 0, got {smooth}")
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(
            f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}"
        )
    intersection = (pred * target).sum()
    denom = pred.sum() + target.sum() + smooth
    return 1.0 - (2.0 * intersection + smooth) / denom


def confusion(pred_mask: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    """Exact pixel counts of a binary prediction against a binary target."""
    pred = np.asarray(pred_mask)
    truth = np.asarray(target)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {truth.shape}")
    for name, arr in (("pred", pred), ("target", truth)):
        values = np.unique(arr)
        if not np.isin(values, (0, 1)).all():
            raise InputDomainError(
                f"{name} mask is not binary, found values {values[:8].tolist()}"
            )
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def metrics_from_counts(counts: ConfusionCounts) -> MetricScores:
    """Derive the full metric suite from confusion counts."""
    n = counts.total
    if n == 0:
        raise EvaluationError("cannot compute metrics over an empty region")
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    both_empty = tp == 0 and fp == 0 and fn == 0

    def ratio(num: int, den: int) -> float:
        if den == 0:
            return 1.0 if both_empty else 0.0
        return num / den

    accuracy = (tp + tn) / n
    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    iou = ratio(tp, tp + fp + fn)
    f1 = 2.0 * iou / (1.0 + iou)

    p_o = accuracy
    pred_pos = (tp + fp) / n
    true_pos = (tp + fn) / n
    p_e = pred_pos * true_pos + (1.0 - pred_pos) * (1.0 - true_pos)
    kappa = 0.0 if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)

    return MetricScores(accuracy=accuracy, precision=precision, recall=recall,
                        f1=f1, iou=iou, kappa=kappa)


def score_pair(pred_mask: np.ndarray, target: np.ndarray,
               source_id: str = "") -> ImageResult:
    counts = confusion(pred_mask, target)
    return ImageResult(source_id=source_id, counts=counts,
                       scores=metrics_from_counts(counts))


def aggregate(results: list[ImageResult], mode: str = "per-image-mean") -> MetricsReport:
    """Combine per-image results.

    per-image-mean averages each metric across images (the usual "Mean X"
    table figure); global-pool sums the confusion counts first and derives
    metrics once, which weighs images by their pixel counts.
    """
    if not results:
        raise EvaluationError("cannot aggregate an empty result list")
    if mode not in AGGREGATION_MODES:
        raise EvaluationError(
            f"unknown aggregation mode {mode!r}, expected one of {AGGREGATION_MODES}"
        )
    if mode == "per-image-mean":
        means = {
            name: float(np.mean([getattr(r.scores, name) for r in results]))
            for name in METRIC_NAMES
        }
        scores = MetricScores(**means)
    else:
        pooled = results[0].counts
        for r in results[1:]:
            pooled = pooled + r.counts
        scores = metrics_from_counts(pooled)
    return MetricsReport(scores=scores, aggregation=mode, per_image=list(results))


def report_payload(results: list[ImageResult], variant: str, split: str,
                   threshold: float) -> dict:
    """JSON-serializable report with both aggregation modes."""
    by_mode = {mode: aggregate(results, mode).scores.as_dict()
               for mode in AGGREGATION_MODES}
    return {
        "variant": variant,
        "split": split,
        "threshold": threshold,
        "convention": ZERO_DENOMINATOR_CONVENTION,
        "aggregates": by_mode,
        "per_image": [
            {"source_id": r.source_id, "counts": asdict(r.counts),
             "scores": r.scores.as_dict()}
            for r in results
        ],
    }


def write_report(payload: dict, json_path: str | Path,
                 csv_path: str | Path | None = None) -> None:
    Path(json_path).write_text(json.dumps(payload, indent=2) + "\n")
    if csv_path is None:
        return
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "split", "aggregation", *METRIC_NAMES])
        for mode, scores in payload["aggregates"].items():
            writer.writerow([
                payload["variant"], payload["split"], mode,
                *[f"{scores[name]:.6f}" for name in METRIC_NAMES],
            ])
