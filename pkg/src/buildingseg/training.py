"""Training loop, history tracking, checkpointing, evaluation, prediction.

A run is reproducible bit-for-bit given a fixed seed and single-worker data
loading. train() seeds shuffling and augmentation draws itself, but weight
init draws from the global RNG at model construction time, so call
seed_everything(seed) before building the model (the CLI does). History is
appended to CSV one epoch at a time so a crashed run keeps its record; the
best checkpoint (by validation IoU, earlier epoch on ties) is rewritten
whenever it improves.
"""
from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    InputDomainError,
    ManifestError,
)
from .manifest import DatasetManifest
from .metrics import ConfusionCounts, ImageResult, dice_loss, confusion, \
    metrics_from_counts, report_payload
from .tiles import make_loader
from .transforms import AugmentationPolicy, RasterSample, downsample_pair, normalize
from .unetpp import PrunedModel, SegmentationModel, SegmentationOutput, \
    predict_mask, prune

CHECKPOINT_FORMAT_VERSION = 1

HISTORY_FIELDS = ("epoch", "train_dice_loss", "val_dice_loss", "train_iou", "val_iou")


@dataclass
class TrainConfig:
    variant: str = "b0"
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    optimizer: str = "adam"  # or "sgd"
    seed: int = 0
    threshold: float = 0.5
    deep_supervision: bool = True
    loss: str = "dice"  # or "dice+bce"
    loss_heads: str = "mean"  # supervision heads in the loss: "mean" or "final"
    smooth: float = 1.0
    workers: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("dice", "dice+bce"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.loss_heads not in ("mean", "final"):
            raise ConfigError(f"unknown loss_heads {self.loss_heads!r}")

    @classmethod
    def from_run_dict(cls, run: dict) -> "TrainConfig":
        names = set(cls.__dataclass_fields__)
        picked = {k: v for k, v in run.items() if k in names}
        if "encoder" in run:
            picked["variant"] = run["encoder"]
        return cls(**picked)


@dataclass
class EpochRecord:
    epoch: int
    train_dice_loss: float
    val_dice_loss: float
    train_iou: float
    val_iou: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    # raw per-batch train dice values, one list per epoch (not persisted to CSV)
    step_losses: list[list[float]] = field(default_factory=list)

    def epoch_median_loss(self, epoch: int) -> float:
        return float(np.median(self.step_losses[epoch - 1]))

    def best_val_iou(self) -> float:
        return max(r.val_iou for r in self.records)


def write_history_header(path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(HISTORY_FIELDS)


def append_history_row(path: str | Path, record: EpochRecord) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow([
            record.epoch,
            repr(record.train_dice_loss), repr(record.val_dice_loss),
            repr(record.train_iou), repr(record.val_iou),
        ])


def read_history(path: str | Path) -> TrainingHistory:
    """Parse a history CSV; a malformed row fails with its line number."""
    path = Path(path)
    if not path.exists():
        raise InputDomainError(f"history file not found: {path}")
    history = TrainingHistory()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                if row != list(HISTORY_FIELDS):
                    raise InputDomainError(
                        f"{path} line 1: bad header {row!r}"
                    )
                continue
            if not row:
                continue
            try:
                record = EpochRecord(int(row[0]), *(float(v) for v in row[1:5]))
                if len(row) != 5:
                    raise ValueError("wrong column count")
            except (ValueError, IndexError) as exc:
                raise InputDomainError(f"{path} line {lineno}: {exc}") from None
            history.records.append(record)
    return history


@dataclass
class Checkpoint:
    """Versioned container: weights plus the config snapshot that made them."""

    state_dict: dict
    config: dict
    best_val_iou: float
    epoch: int
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def save(self, path: str | Path) -> None:
        torch.save({
            "format_version": self.format_version,
            "config": self.config,
            "state_dict": self.state_dict,
            "best_val_iou": self.best_val_iou,
            "epoch": self.epoch,
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        version = payload.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format {version!r} unsupported "
                f"(expected {CHECKPOINT_FORMAT_VERSION})"
            )
        return cls(state_dict=payload["state_dict"], config=payload["config"],
                   best_val_iou=payload["best_val_iou"], epoch=payload["epoch"])


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def make_optimizer(model: torch.nn.Module, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=0.9)


def batch_objective(output: SegmentationOutput, target: torch.Tensor,
                    config: TrainConfig) -> torch.Tensor:
    """Training objective for one batch; target is the one-hot (N,2,H,W)."""
    fg = target[:, 1:2]
    if output.head_outputs and config.loss_heads == "mean":
        maps = output.head_outputs
    elif output.head_outputs:
        maps = [output.head_outputs[-1]]
    else:
        maps = [output.probabilities]
    losses = [dice_loss(m, fg, smooth=config.smooth) for m in maps]
    if config.loss == "dice+bce":
        eps = 1e-7
        losses += [F.binary_cross_entropy(m.clamp(eps, 1 - eps), fg) for m in maps]
    return torch.stack(losses).mean()


def _final_dice(output: SegmentationOutput, target: torch.Tensor,
                smooth: float) -> float:
    return float(dice_loss(output.probabilities, target[:, 1:2], smooth=smooth))


def _batch_counts(output: SegmentationOutput, target: torch.Tensor,
                  threshold: float) -> ConfusionCounts:
    pred = predict_mask(output.probabilities, threshold)
    truth = (target[:, 1:2] > 0.5).cpu().numpy().astype(np.uint8)
    return confusion(pred, truth)


def _epoch_iou(counts: ConfusionCounts) -> float:
    return metrics_from_counts(counts).iou


def train(config: TrainConfig, manifest: DatasetManifest,
          model: SegmentationModel, policy: AugmentationPolicy | None = None,
          out_dir: str | Path | None = None,
          config_snapshot: dict | None = None,
          ) -> tuple[TrainingHistory, Checkpoint]:
    """Train over the manifest's train split, validating each epoch.

    Returns the epoch-wise history and the checkpoint holding the weights of
    the epoch with maximal validation IoU (earliest on ties). With out_dir
    set, history.csv grows one row per epoch and checkpoint.pt is rewritten
    each time validation improves.
    """
    for split in ("train", "val"):
        if not manifest.ids(split):
            raise ManifestError(f"{split} split is empty; cannot train")

    seed_everything(config.seed)
    train_loader = make_loader(manifest, "train", config.batch_size, shuffle=True,
                               seed=config.seed, workers=config.workers,
                               policy=policy)
    val_loader = make_loader(manifest, "val", config.batch_size)

    optimizer = make_optimizer(model, config)
    history = TrainingHistory()
    best = Checkpoint(state_dict={}, config=config_snapshot or asdict(config),
                      best_val_iou=-1.0, epoch=0)

    history_path = checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        history_path = out_dir / "history.csv"
        checkpoint_path = out_dir / "checkpoint.pt"
        write_history_header(history_path)

    for epoch in range(1, config.epochs + 1):
        model.train()
        step_dice = []
        train_counts = ConfusionCounts(0, 0, 0, 0)
        for step, (x, y) in enumerate(train_loader, start=1):
            optimizer.zero_grad()
            output = model(x)
            loss = batch_objective(output, y, config)
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss {loss_value} at epoch {epoch} step {step}"
                )
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                detached = SegmentationOutput(output.probabilities.detach(), [])
                step_dice.append(_final_dice(detached, y, config.smooth))
                train_counts = train_counts + _batch_counts(detached, y,
                                                            config.threshold)

        model.eval()
        val_dice = []
        val_counts = ConfusionCounts(0, 0, 0, 0)
        with torch.no_grad():
            for x, y in val_loader:
                output = model(x)
                val_dice.append(_final_dice(output, y, config.smooth))
                val_counts = val_counts + _batch_counts(output, y, config.threshold)

        record = EpochRecord(
            epoch=epoch,
            train_dice_loss=float(np.mean(step_dice)),
            val_dice_loss=float(np.mean(val_dice)),
            train_iou=_epoch_iou(train_counts),
            val_iou=_epoch_iou(val_counts),
        )
        if not all(math.isfinite(v) for v in
                   (record.train_dice_loss, record.val_dice_loss,
                    record.train_iou, record.val_iou)):
            raise DivergenceError(f"non-finite history record at epoch {epoch}")
        history.records.append(record)
        history.step_losses.append(step_dice)
        if history_path is not None:
            append_history_row(history_path, record)

        if record.val_iou > best.best_val_iou:
            best = Checkpoint(
                state_dict={k: v.detach().clone()
                            for k, v in model.state_dict().items()},
                config=config_snapshot or asdict(config),
                best_val_iou=record.val_iou,
                epoch=epoch,
            )
            if checkpoint_path is not None:
                best.save(checkpoint_path)

    return history, best


def inference_model(model: SegmentationModel,
                    prune_level: int | None) -> torch.nn.Module:
    return model if prune_level is None else prune(model, prune_level)


def evaluate_model(model: torch.nn.Module, manifest: DatasetManifest, split: str,
                   threshold: float = 0.5) -> list[ImageResult]:
    """Per-image confusion and metrics for one split, in manifest order."""
    ids = manifest.ids(split)
    if not ids:
        raise ManifestError(f"{split} split is empty; nothing to evaluate")
    loader = make_loader(manifest, split, batch_size=4)
    model.eval()
    results = []
    cursor = 0
    with torch.no_grad():
        for x, y in loader:
            output = model(x)
            pred = predict_mask(output.probabilities, threshold)
            truth = (y[:, 1:2] > 0.5).numpy().astype(np.uint8)
            for b in range(x.shape[0]):
                counts = confusion(pred[b, 0], truth[b, 0])
                results.append(ImageResult(
                    source_id=ids[cursor], counts=counts,
                    scores=metrics_from_counts(counts),
                ))
                cursor += 1
    return results


def evaluate(checkpoint: Checkpoint, manifest: DatasetManifest,
             split: str) -> dict:
    """Rebuild the model from a checkpoint and report metrics on a split."""
    from .runconfig import RunConfig

    run = RunConfig.from_dict(checkpoint.config)
    model = run.build_model()
    model.load_state_dict(checkpoint.state_dict)
    net = inference_model(model, run.prune_level)
    results = evaluate_model(net, manifest, split, threshold=run.threshold)
    return report_payload(results, variant=run.variant, split=split,
                          threshold=run.threshold)


def predict(checkpoint: Checkpoint, image_path: str | Path,
            out_path: str | Path, composite: bool = False) -> Path:
    """Write the predicted building mask (8-bit 0/255 PNG) for one image.

    Oversized inputs go through the standard downsample path first. With
    composite=True a side-by-side input/mask preview lands next to the mask.
    """
    from .runconfig import RunConfig

    image_path = Path(image_path)
    if not image_path.exists():
        raise FileNotFoundError(f"input image not found: {image_path}")
    run = RunConfig.from_dict(checkpoint.config)
    model = run.build_model()
    model.load_state_dict(checkpoint.state_dict)
    net = inference_model(model, run.prune_level)
    net.eval()

    image = np.asarray(Image.open(image_path).convert("RGB"))
    tile_size = run.tile_size
    sample = RasterSample(
        image=image, mask=np.zeros(image.shape[:2], dtype=np.uint8),
        source_id=image_path.stem, split="test",
    )
    if image.shape[:2] != (tile_size, tile_size):
        sample = downsample_pair(sample, tile_size)
    data = normalize(sample.image).astype(np.float32)
    x = torch.from_numpy(data).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        output = net(x)
    mask = predict_mask(output.probabilities, run.threshold)[0, 0]

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask * 255).save(out_path)
    if composite:
        panel = np.concatenate(
            [sample.image, np.stack([mask * 255] * 3, axis=-1)], axis=1
        )
        side = out_path.with_name(out_path.stem + "_composite.png")
        Image.fromarray(panel).save(side)
    return out_path
