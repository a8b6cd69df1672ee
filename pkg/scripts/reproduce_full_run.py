#!/usr/bin/env python3
"""Full five-variant reproduction run.

Prepares the tile cache, trains b0 through b4 with the reference
hyperparameters (100 epochs, batch 8, Adam at 1e-4, dice loss, 256 px
tiles), evaluates every run on the test split, and renders the comparison
table next to the externally reported numbers plus per-run history plots.

This is a long job: at full scale each variant is hours on a GPU and far
longer on CPU. For a quick end-to-end check, shrink it, e.g.:

    python3 scripts/reproduce_full_run.py --root data/raw --out runs \
        --variants b0 --epochs 2 --batch-size 2 --tile-size 64

Expects the raw dataset layout:

    <root>/{train,val,test}/{images,masks}/<id>.<png|tif|tiff>

Every step goes through the `buildingseg` CLI, so the artifacts match what
the command-line tool produces: <out>/cache/manifest.json, one run
directory per variant with config.yaml, history.csv, checkpoint.pt,
report.json/csv and history plots, and <out>/compare.{csv,md}.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from buildingseg.cli import main as cli

VARIANTS = ("b0", "b1", "b2", "b3", "b4")


def run(step: list[str]) -> None:
    print(f"$ buildingseg {' '.join(step)}", flush=True)
    code = cli(step)
    if code != 0:
        sys.exit(code)


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", required=True,
                        help="raw dataset root ({train,val,test}/{images,masks})")
    parser.add_argument("--out", required=True,
                        help="workspace for the cache and run directories")
    parser.add_argument("--variants", nargs="+", default=list(VARIANTS),
                        choices=VARIANTS, metavar="bN")
    parser.add_argument("--tile-size", type=int, default=256)
    parser.add_argument("--tiling", choices=("downsample", "crop"),
                        default="downsample")
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--learning-rate", type=float, default=1e-4)
    parser.add_argument("--seed", type=int, default=0)
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    out = Path(args.out)
    cache = out / "cache"

    if not (cache / "manifest.json").exists():
        run(["prepare", "--root", args.root, "--out", str(cache),
             "--tile-size", str(args.tile_size), "--tiling", args.tiling])
    else:
        print(f"reusing cache {cache}", flush=True)

    run_dirs = []
    for variant in args.variants:
        run_dir = out / f"run_{variant}"
        run_dirs.append(run_dir)
        if (run_dir / "checkpoint.pt").exists():
            print(f"reusing run {run_dir}", flush=True)
        else:
            run(["train", "--data", str(cache), "--out", str(run_dir),
                 "--set", f"encoder={variant}",
                 "--set", f"tile_size={args.tile_size}",
                 "--set", f"epochs={args.epochs}",
                 "--set", f"batch_size={args.batch_size}",
                 "--set", f"learning_rate={args.learning_rate}",
                 "--set", f"seed={args.seed}"])
        run(["evaluate", "--run", str(run_dir), "--data", str(cache),
             "--split", "test"])
        run(["plot-history", "--run", str(run_dir), "--out", str(run_dir)])

    run(["compare", *map(str, run_dirs), "--out", str(out), "--reference"])
    print(f"done; see {out / 'compare.md'}", flush=True)


if __name__ == "__main__":
    main()
