"""Command-line surface: prepare, train, evaluate, predict, compare, plot-history.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(dataset layout, unreadable inputs, missing checkpoints), 3 runtime failure
(training divergence, unexpected errors). Diagnostics go to stderr; data
goes to stdout or files.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .errors import (
    BuildingSegError,
    CheckpointError,
    ConfigError,
    DivergenceError,
    InputDomainError,
    ManifestError,
    ShapeError,
)
from .manifest import DatasetManifest
from .metrics import AGGREGATION_MODES, write_report
from .runconfig import RunConfig
from .tiles import prepare_dataset
from .training import Checkpoint, evaluate, predict, seed_everything, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

_DATA_ERRORS = (ManifestError, InputDomainError, ShapeError, CheckpointError,
                FileNotFoundError)

log = logging.getLogger("buildingseg")


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    data problems, so usage errors are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="buildingseg",
        description="Building-footprint segmentation: nested U-Net decoders "
                    "over compound-scaled encoders.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="build manifest and normalized tile cache")
    p.add_argument("--root", required=True, help="dataset root with "
                   "{train,val,test}/{images,masks} directories")
    p.add_argument("--out", required=True, help="output directory for the cache")
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--tiling", choices=("downsample", "crop"), default="downsample")

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--data", required=True, help="prepared cache directory")
    p.add_argument("--out", required=True, help="run directory for history, "
                   "checkpoint, and config snapshot")
    p.add_argument("--config", help="YAML run config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (repeatable)")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--run", help="run directory containing checkpoint.pt")
    p.add_argument("--checkpoint", help="explicit checkpoint path")
    p.add_argument("--data", required=True, help="prepared cache directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="where to write report.json/csv "
                   "(default: the run directory)")

    p = sub.add_parser("predict", help="write a predicted mask for one image")
    p.add_argument("--run", help="run directory containing checkpoint.pt")
    p.add_argument("--checkpoint", help="explicit checkpoint path")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask PNG path")
    p.add_argument("--composite", action="store_true",
                   help="also write an input/mask side-by-side preview")

    p = sub.add_parser("compare", help="tabulate evaluated runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", required=True, help="output directory for "
                   "compare.csv and compare.md")
    p.add_argument("--reference", action="store_true",
                   help="append externally reported rows (labeled as such)")

    p = sub.add_parser("plot-history", help="plot IoU and dice-loss curves")
    p.add_argument("--run", help="run directory containing history.csv")
    p.add_argument("--history", help="explicit history CSV path")
    p.add_argument("--out", required=True, help="output directory for PNGs")

    return parser


def _checkpoint_path(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if args.run:
        return Path(args.run) / "checkpoint.pt"
    raise ConfigError("provide --run or --checkpoint")


def cmd_prepare(args) -> int:
    manifest = prepare_dataset(args.root, args.out, tile_size=args.tile_size,
                               tiling=args.tiling)
    counts = manifest.counts()
    log.info("prepared %s: train=%d val=%d test=%d tiles", args.out, *counts)
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    config = config.apply_overrides(args.overrides)
    manifest = DatasetManifest.load(Path(args.data) / "manifest.json")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    effective = yaml.safe_dump(config.to_dict(), sort_keys=True)
    (out_dir / "config.yaml").write_text(effective)
    with open(out_dir / "run.log", "w") as fh:
        fh.write("effective config:\n")
        fh.write(effective)
    log.info("effective config:\n%s", effective.rstrip())

    # weight init draws from the global RNG, so seed before building
    seed_everything(config.seed)
    model = config.build_model()
    history, checkpoint = train(
        config.train_config(), manifest, model, policy=config.policy(),
        out_dir=out_dir, config_snapshot=config.to_dict(),
    )
    with open(out_dir / "run.log", "a") as fh:
        fh.write(f"best epoch {checkpoint.epoch} val_iou {checkpoint.best_val_iou}\n")
    log.info("trained %d epochs; best epoch %d with val IoU %.4f",
             len(history.records), checkpoint.epoch, checkpoint.best_val_iou)
    print(out_dir / "checkpoint.pt")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    checkpoint = Checkpoint.load(_checkpoint_path(args))
    manifest = DatasetManifest.load(Path(args.data) / "manifest.json")
    payload = evaluate(checkpoint, manifest, args.split)

    out_dir = Path(args.out) if args.out else \
        (Path(args.run) if args.run else _checkpoint_path(args).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(payload, out_dir / "report.json", out_dir / "report.csv")
    for mode in AGGREGATION_MODES:
        scores = payload["aggregates"][mode]
        print(f"{payload['variant']} {args.split} {mode}: "
              + " ".join(f"{k}={v:.4f}" for k, v in scores.items()))
    return EXIT_OK


def cmd_predict(args) -> int:
    checkpoint = Checkpoint.load(_checkpoint_path(args))
    out = predict(checkpoint, args.image, args.out, composite=args.composite)
    print(out)
    return EXIT_OK


def cmd_compare(args) -> int:
    from .reporting import compare

    rows = compare(args.runs, args.out, include_reference=args.reference)
    log.info("compared %d rows", len(rows))
    print(Path(args.out) / "compare.md")
    return EXIT_OK


def cmd_plot_history(args) -> int:
    from .reporting import plot_history

    if args.history:
        history_path = Path(args.history)
    elif args.run:
        history_path = Path(args.run) / "history.csv"
    else:
        raise ConfigError("provide --run or --history")
    for path in plot_history(history_path, args.out):
        print(path)
    return EXIT_OK


_HANDLERS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "compare": cmd_compare,
    "plot-history": cmd_plot_history,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_RUNTIME
    except BuildingSegError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except Exception:  # noqa: BLE001  (every error path must exit nonzero)
        log.exception("unexpected failure")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
