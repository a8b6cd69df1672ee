"""Prepared-tile cache and the torch dataset over it.

`prepare_dataset` turns the raw directory layout into training-ready arrays:
per tile a normalized float32 image (`<id>.x.npy`) and a one-hot float32
target (`<id>.y.npy`) under `<out>/tiles/<split>/`, plus `manifest.json`.
Plain .npy files keep re-runs byte-identical, so preparation is idempotent.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from .errors import ManifestError
from .manifest import DatasetManifest, SPLITS, build_manifest, find_raster
from .transforms import (
    AugmentationPolicy,
    NormalizedTile,
    RasterSample,
    augment,
    binarize_mask,
    normalize,
    one_hot,
    tile_from_sample,
)


def load_sample(root: str | Path, split: str, sid: str) -> RasterSample:
    """Read one image/mask pair from the raw layout and binarize the mask."""
    image_path = find_raster(root, split, "images", sid)
    mask_path = find_raster(root, split, "masks", sid)
    image = np.asarray(Image.open(image_path).convert("RGB"))
    mask = binarize_mask(np.asarray(Image.open(mask_path).convert("L")))
    return RasterSample(image=image, mask=mask, source_id=sid, split=split)


def _crop_tiles(sample: RasterSample, tile_size: int):
    """Non-overlapping tile_size crops; edge remainders are discarded."""
    h, w = sample.image.shape[:2]
    for r in range(h // tile_size):
        for c in range(w // tile_size):
            ys, xs = r * tile_size, c * tile_size
            yield (
                f"{sample.source_id}_r{r}_c{c}",
                NormalizedTile(
                    data=normalize(sample.image[ys:ys + tile_size, xs:xs + tile_size]),
                    target=one_hot(sample.mask[ys:ys + tile_size, xs:xs + tile_size]),
                ),
            )


def tiles_dir(prepared_root: str | Path, split: str) -> Path:
    return Path(prepared_root) / "tiles" / split


def save_tile(prepared_root: str | Path, split: str, tile_id: str,
              tile: NormalizedTile) -> None:
    out = tiles_dir(prepared_root, split)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / f"{tile_id}.x.npy", tile.data.astype(np.float32))
    np.save(out / f"{tile_id}.y.npy", tile.target.astype(np.float32))


def load_tile(prepared_root: str | Path, split: str, tile_id: str) -> NormalizedTile:
    src = tiles_dir(prepared_root, split)
    x_path = src / f"{tile_id}.x.npy"
    y_path = src / f"{tile_id}.y.npy"
    if not x_path.exists() or not y_path.exists():
        raise ManifestError(f"missing prepared tile {tile_id!r} under {src}")
    return NormalizedTile(data=np.load(x_path), target=np.load(y_path))


def prepare_dataset(root: str | Path, out_dir: str | Path, tile_size: int = 256,
                    tiling: str = "downsample") -> DatasetManifest:
    """Build the manifest from the raw layout and cache normalized tiles.

    tiling="downsample" (the default pipeline) resamples whole scenes to
    tile_size; tiling="crop" instead cuts non-overlapping tile_size crops of
    the full-resolution scene.
    """
    if tiling not in ("downsample", "crop"):
        raise ManifestError(f"unknown tiling mode {tiling!r}")
    source = build_manifest(root, tile_size=tile_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = DatasetManifest(root_path=str(out), tile_size=tile_size, tiling=tiling)
    for split in SPLITS:
        tile_ids = []
        for sid in source.ids(split):
            sample = load_sample(root, split, sid)
            if tiling == "downsample":
                save_tile(out, split, sid, tile_from_sample(sample, tile_size))
                tile_ids.append(sid)
            else:
                for tile_id, tile in _crop_tiles(sample, tile_size):
                    save_tile(out, split, tile_id, tile)
                    tile_ids.append(tile_id)
        getattr(prepared, f"{split}_ids").extend(sorted(tile_ids))
    prepared.validate()
    prepared.save(out / "manifest.json")
    return prepared


class TileDataset(Dataset):
    """Prepared tiles of one split as (3xHxW image, 2xHxW target) tensors.

    Augmentation draws come from a generator seeded by the policy, so runs
    with identical seeds and access order see identical transforms.
    """

    def __init__(self, manifest: DatasetManifest, split: str,
                 policy: AugmentationPolicy | None = None):
        self.root = Path(manifest.root_path)
        self.split = split
        self.ids = list(manifest.ids(split))
        self.policy = policy
        self._rng = policy.rng() if policy is not None else None

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int):
        tile = load_tile(self.root, self.split, self.ids[index])
        if self._rng is not None:
            tile = augment(tile, self.policy, self._rng)
        x = torch.from_numpy(np.ascontiguousarray(tile.data)).permute(2, 0, 1)
        y = torch.from_numpy(np.ascontiguousarray(tile.target)).permute(2, 0, 1)
        return x.contiguous(), y.contiguous()


def make_loader(manifest: DatasetManifest, split: str, batch_size: int,
                shuffle: bool = False, seed: int = 0, workers: int = 0,
                policy: AugmentationPolicy | None = None) -> DataLoader:
    dataset = TileDataset(manifest, split, policy=policy)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle,
                      num_workers=workers, generator=generator)
