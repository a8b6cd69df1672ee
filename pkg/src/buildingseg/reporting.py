"""Cross-run comparison tables and training-history plots.

compare() is a pure function of the run directories' persisted reports: it
never re-evaluates models. Reference rows from the shipped data file are
opt-in and always carry source="reported" so externally published figures
cannot be mistaken for locally measured ones.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import EvaluationError  # noqa: E402
from .metrics import AGGREGATION_MODES, METRIC_NAMES  # noqa: E402
from .training import TrainingHistory, read_history  # noqa: E402

log = logging.getLogger(__name__)

REPORT_NAME = "report.json"
CHECKPOINT_NAME = "checkpoint.pt"
HISTORY_NAME = "history.csv"

COMPARE_COLUMNS = (
    "run", "variant", "source", "split",
    *[f"mean_{name}" for name in METRIC_NAMES],
    *[f"pooled_{name}" for name in METRIC_NAMES],
)


def load_reference_results() -> dict:
    """Shipped externally reported results (percent units, see the file)."""
    text = resources.files("buildingseg").joinpath("reference_results.json").read_text()
    return json.loads(text)


@dataclass
class CompareRow:
    run: str
    variant: str
    source: str  # "measured" or "reported"
    split: str
    mean: dict[str, float]          # per-image-mean scores
    pooled: dict[str, float | None]  # global-pool scores; None for reported rows

    def as_list(self) -> list:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        return [self.run, self.variant, self.source, self.split,
                *[fmt(self.mean.get(n)) for n in METRIC_NAMES],
                *[fmt(self.pooled.get(n)) for n in METRIC_NAMES]]


def _row_from_run(run_dir: Path) -> CompareRow | None:
    if not (run_dir / CHECKPOINT_NAME).exists():
        log.warning("skipping %s: no %s (incomplete run)", run_dir, CHECKPOINT_NAME)
        return None
    report_path = run_dir / REPORT_NAME
    if not report_path.exists():
        log.warning("skipping %s: no %s (run not evaluated)", run_dir, REPORT_NAME)
        return None
    payload = json.loads(report_path.read_text())
    aggregates = payload["aggregates"]
    return CompareRow(
        run=run_dir.name,
        variant=payload["variant"],
        source="measured",
        split=payload["split"],
        mean=aggregates[AGGREGATION_MODES[0]],
        pooled=aggregates[AGGREGATION_MODES[1]],
    )


def _reference_rows() -> list[CompareRow]:
    data = load_reference_results()
    rows = []
    for entry in sorted(data["rows"], key=lambda e: -e["iou"]):
        mean = {name: entry[name] / 100.0 for name in METRIC_NAMES
                if name in entry}
        mean.setdefault("kappa", None)
        rows.append(CompareRow(
            run="reported", variant=entry["variant"], source="reported",
            split="test", mean=mean,
            pooled={name: None for name in METRIC_NAMES},
        ))
    return rows


def compare(run_dirs: list[str | Path], out_dir: str | Path,
            include_reference: bool = False) -> list[CompareRow]:
    """Build compare.csv and compare.md over completed runs.

    Rows are sorted by per-image-mean IoU descending; reference rows, when
    requested, are appended after the measured block.
    """
    rows = [r for r in (_row_from_run(Path(d)) for d in run_dirs) if r is not None]
    if not rows:
        raise EvaluationError("no completed runs to compare")
    rows.sort(key=lambda r: -(r.mean.get("iou") or 0.0))
    if include_reference:
        rows.extend(_reference_rows())

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARE_COLUMNS)
        for row in rows:
            writer.writerow(row.as_list())

    lines = [
        "# Variant comparison",
        "",
        "Scores are fractions in [0, 1]. `mean_*` columns average each metric",
        "over images (per-image-mean); `pooled_*` columns derive metrics from",
        "summed confusion counts (global-pool). Rows with source `reported`",
        "are externally published figures shipped with this repository, not",
        "results measured here; their pooled columns are unavailable.",
        "",
        "| " + " | ".join(COMPARE_COLUMNS) + " |",
        "|" + "|".join(["---"] * len(COMPARE_COLUMNS)) + "|",
    ]
    for row in rows:
        lines.append("| " + " | ".join(str(v) for v in row.as_list()) + " |")
    (out_dir / "compare.md").write_text("\n".join(lines) + "\n")
    return rows


def _plot_series(history: TrainingHistory, train_field: str, val_field: str,
                 ylabel: str, title: str, out_path: Path) -> None:
    epochs = [r.epoch for r in history.records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [getattr(r, train_field) for r in history.records],
            marker="o", markersize=3, label="train")
    ax.plot(epochs, [getattr(r, val_field) for r in history.records],
            marker="s", markersize=3, label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_history(history_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Render IoU and dice-loss curves (train and val) from a history CSV."""
    history = read_history(history_path)
    if not history.records:
        raise EvaluationError(f"history {history_path} has no epochs to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    iou_path = out_dir / "history_iou.png"
    loss_path = out_dir / "history_dice_loss.png"
    _plot_series(history, "train_iou", "val_iou", "IoU",
                 "Training history: IoU", iou_path)
    _plot_series(history, "train_dice_loss", "val_dice_loss", "dice loss",
                 "Training history: dice loss", loss_path)
    return [iou_path, loss_path]
