"""Shared fixtures: synthetic raster datasets, prepared caches, trained runs.

The synthetic scenes are noise backgrounds with high-contrast rectangles as
buildings, which a small model can overfit quickly on CPU. Session scope
amortizes dataset preparation and the short training run that several CLI
and reporting tests inspect.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings
from PIL import Image

from buildingseg.cli import main as cli_main
from buildingseg.tiles import prepare_dataset

settings.register_profile("suite", max_examples=50, deadline=None)
settings.load_profile("suite")

FIXTURE_TILE = 64


def write_scene(images_dir: Path, masks_dir: Path, name: str,
                rng: np.random.Generator, size: int = FIXTURE_TILE,
                rectangles: int = 2) -> None:
    """One noise scene with bright rectangles; mask marks the rectangles."""
    img = rng.normal(100, 25, (size, size, 3)).clip(0, 255).astype(np.uint8)
    mask = np.zeros((size, size), dtype=np.uint8)
    for _ in range(rectangles):
        h, w = rng.integers(size // 4, size // 2, 2)
        r, c = rng.integers(0, size - size // 2, 2)
        mask[r:r + h, c:c + w] = 255
        block = rng.normal(0, 20, (h, w, 3)) + (200, 60, 60)
        img[r:r + h, c:c + w] = block.clip(0, 255).astype(np.uint8)
    Image.fromarray(img).save(images_dir / f"{name}.png")
    Image.fromarray(mask).save(masks_dir / f"{name}.png")


def write_dataset(root: Path, counts: dict[str, int], seed: int,
                  size: int = FIXTURE_TILE, rectangles: int = 2) -> Path:
    rng = np.random.default_rng(seed)
    for split, n in counts.items():
        images = root / split / "images"
        masks = root / split / "masks"
        images.mkdir(parents=True)
        masks.mkdir(parents=True)
        for i in range(n):
            write_scene(images, masks, f"{split}{i}", rng, size=size,
                        rectangles=rectangles)
    return root


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory) -> Path:
    """4 train / 1 val / 1 test scenes at 64 px: the overfit fixture."""
    root = tmp_path_factory.mktemp("toy_root")
    return write_dataset(root, {"train": 4, "val": 1, "test": 1}, seed=11)


@pytest.fixture(scope="session")
def toy_cache(toy_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_cache")
    manifest = prepare_dataset(toy_root, out, tile_size=FIXTURE_TILE)
    return out, manifest


@pytest.fixture(scope="session")
def trend_cache(tmp_path_factory):
    """16 train / 2 val / 2 test scenes for the loss-trend check."""
    root = write_dataset(tmp_path_factory.mktemp("trend_root"),
                         {"train": 16, "val": 2, "test": 2}, seed=23)
    out = tmp_path_factory.mktemp("trend_cache")
    manifest = prepare_dataset(root, out, tile_size=FIXTURE_TILE)
    return out, manifest


@pytest.fixture(scope="session")
def trained_run(toy_root, toy_cache, tmp_path_factory) -> Path:
    """A short but real CLI run: train 2 epochs, then evaluate the test split.

    Yields the run directory containing config.yaml, run.log, history.csv,
    checkpoint.pt, report.json, and report.csv.
    """
    cache, _ = toy_cache
    run_dir = tmp_path_factory.mktemp("run_b0")
    code = cli_main([
        "train", "--data", str(cache), "--out", str(run_dir),
        "--set", f"tile_size={FIXTURE_TILE}",
        "--set", "epochs=2", "--set", "batch_size=2",
        "--set", "learning_rate=0.001",
    ])
    assert code == 0
    code = cli_main([
        "evaluate", "--run", str(run_dir), "--data", str(cache),
        "--split", "test",
    ])
    assert code == 0
    return run_dir


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for key in ("passed", "failed"):
        for report in terminalreporter.stats.get(key, []):
            if "test_acceptance.py" in report.nodeid and report.when == "call":
                status = "PASS" if report.passed else "FAIL"
                name = report.nodeid.split("::")[-1]
                lines.append(f"ACCEPTANCE {status}: {name}")
    if lines:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for line in sorted(lines):
            terminalreporter.write_line(line)
