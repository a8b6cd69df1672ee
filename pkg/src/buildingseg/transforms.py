"""Raster transforms: normalization, resampling, one-hot masks, augmentation.

Images are HxWx3 uint8 rasters, masks are HxW rasters with building pixels
as foreground. All functions are pure; augmentation takes an explicit
numpy Generator so workers can share nothing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import InputDomainError, ShapeError

# Pixel intensities are mapped linearly from [0, 255] onto [-1, 1].
NORM_SCALE = 127.5

# Raw mask rasters are near-binary PNGs; foreground iff value > this.
MASK_BINARIZE_THRESHOLD = 127


@dataclass
class RasterSample:
    """One aerial image paired with its binary building mask."""

    image: np.ndarray  # HxWx3 uint8
    mask: np.ndarray   # HxW uint8 in {0, 1}
    source_id: str
    split: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape[:2]:
            raise ShapeError(
                f"sample {self.source_id!r}: image {self.image.shape[:2]} and "
                f"mask {self.mask.shape[:2]} dimensions differ"
            )
        if len(np.unique(self.mask)) > 2:
            raise InputDomainError(
                f"sample {self.source_id!r}: mask has more than 2 distinct values; "
                "binarize it first"
            )


@dataclass
class NormalizedTile:
    """Training-ready tile: normalized image data plus one-hot target."""

    data: np.ndarray    # HxWx3 float32 in [-1, 1]
    target: np.ndarray  # HxWxC float32, per-pixel channel sum == 1

    def __post_init__(self):
        if self.data.shape[:2] != self.target.shape[:2]:
            raise ShapeError(
                f"tile data {self.data.shape[:2]} and target "
                f"{self.target.shape[:2]} dimensions differ"
            )


@dataclass
class AugmentationPolicy:
    """Label-preserving geometric augmentation probabilities.

    Every transform is applied jointly to data and target, so the per-tile
    class histogram is unchanged. Identical seeds reproduce identical draws.
    """

    horizontal_flip_prob: float = 0.5
    vertical_flip_prob: float = 0.5
    rotate90_prob: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("horizontal_flip_prob", "vertical_flip_prob", "rotate90_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InputDomainError(f"{name}={p} outside [0, 1]")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def identity_policy() -> AugmentationPolicy:
    return AugmentationPolicy(0.0, 0.0, 0.0)


def normalize(image: np.ndarray) -> np.ndarray:
    """Map integer intensities in [0, 255] linearly onto [-1, 1].

    Raises InputDomainError naming the first offending coordinate if any
    value falls outside [0, 255].
    """
    arr = np.asarray(image)
    bad = (arr < 0) | (arr > 255)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InputDomainError(
            f"pixel value {arr[idx]} at {idx} outside [0, 255]"
        )
    # float64 keeps the affine identity (a-b)/127.5 exact; the tile cache
    # narrows to float32 at save time
    return (arr.astype(np.float64) / NORM_SCALE) - 1.0


def denormalize(tensor: np.ndarray) -> np.ndarray:
    """Invert normalize(): round-half-up((x + 1) * 127.5), clamped to [0, 255].

    Round-half-up (not banker's rounding) is fixed so the round trip is
    bit-exact for every integer intensity.
    """
    arr = np.asarray(tensor, dtype=np.float64)
    scaled = (arr + 1.0) * NORM_SCALE
    rounded = np.floor(scaled + 0.5)  # round half up
    return np.clip(rounded, 0, 255).astype(np.uint8)


def binarize_mask(raw: np.ndarray) -> np.ndarray:
    """Collapse a near-binary mask raster to {0, 1} uint8."""
    return (np.asarray(raw) > MASK_BINARIZE_THRESHOLD).astype(np.uint8)


def downsample_pair(sample: RasterSample, tile_size: int) -> RasterSample:
    """Resample a sample to tile_size x tile_size.

    The image uses bilinear (area-weighted on reduction) interpolation; the
    mask uses nearest-neighbor and is re-binarized so no fractional labels
    survive.
    """
    h, w = sample.image.shape[:2]
    if h < tile_size or w < tile_size:
        raise ShapeError(
            f"sample {sample.source_id!r}: source {h}x{w} smaller than "
            f"tile size {tile_size}"
        )
    size = (tile_size, tile_size)
    image = np.asarray(
        Image.fromarray(sample.image).resize(size, Image.BILINEAR)
    )
    mask = np.asarray(
        Image.fromarray(sample.mask).resize(size, Image.NEAREST)
    )
    mask = (mask > 0).astype(np.uint8)
    return RasterSample(image=image, mask=mask, source_id=sample.source_id,
                        split=sample.split)


def one_hot(mask: np.ndarray) -> np.ndarray:
    """Encode a binary HxW mask as HxWx2: channel 0 background, 1 building."""
    arr = np.asarray(mask)
    values = np.unique(arr)
    if not np.isin(values, (0, 1)).all():
        raise InputDomainError(
            f"mask is not binary, found values {values[:8].tolist()}"
        )
    fg = arr.astype(np.float32)
    return np.stack([1.0 - fg, fg], axis=-1)


def augment(tile: NormalizedTile, policy: AugmentationPolicy,
            draw: np.random.Generator) -> NormalizedTile:
    """Apply flips/90-degree rotations jointly to data and target.

    With all probabilities 0 this is the identity. Draw order is fixed
    (hflip, vflip, rot90) so a given generator state reproduces exactly.
    """
    data, target = tile.data, tile.target
    if draw.random() < policy.horizontal_flip_prob:
        data, target = np.flip(data, axis=1), np.flip(target, axis=1)
    if draw.random() < policy.vertical_flip_prob:
        data, target = np.flip(data, axis=0), np.flip(target, axis=0)
    if draw.random() < policy.rotate90_prob:
        k = int(draw.integers(1, 4))
        data, target = np.rot90(data, k, axes=(0, 1)), np.rot90(target, k, axes=(0, 1))
    return NormalizedTile(
        data=np.ascontiguousarray(data),
        target=np.ascontiguousarray(target),
    )


def tile_from_sample(sample: RasterSample, tile_size: int) -> NormalizedTile:
    """Full ingestion path: downsample, normalize, one-hot encode."""
    small = downsample_pair(sample, tile_size)
    return NormalizedTile(data=normalize(small.image), target=one_hot(small.mask))
