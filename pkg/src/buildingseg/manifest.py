"""Dataset manifests over the on-disk layout.

Expected layout::

    <root>/{train,val,test}/{images,masks}/<id>.<png|tif|tiff>

Image and mask share the basename. The manifest records the split
membership and is serialized as JSON next to prepared tiles.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .errors import ManifestError

SPLITS = ("train", "val", "test")
RASTER_EXTENSIONS = (".png", ".tif", ".tiff")

MANIFEST_VERSION = 1


@dataclass
class DatasetManifest:
    root_path: str
    tile_size: int = 256
    tiling: str = "downsample"  # or "crop"
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}, expected one of {SPLITS}")
        return getattr(self, f"{split}_ids")

    def counts(self) -> tuple[int, int, int]:
        return (len(self.train_ids), len(self.val_ids), len(self.test_ids))

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for split in SPLITS:
            for sid in self.ids(split):
                if sid in seen:
                    raise ManifestError(
                        f"id {sid!r} appears in both {seen[sid]!r} and {split!r}"
                    )
                seen[sid] = split

    def to_json(self) -> str:
        payload = {"manifest_version": MANIFEST_VERSION, **asdict(self)}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"manifest not found: {path}")
        payload = json.loads(path.read_text())
        payload.pop("manifest_version", None)
        manifest = cls(**payload)
        manifest.validate()
        return manifest


def _scan_split(split_dir: Path) -> tuple[list[str], list[str]]:
    """Return (paired ids, orphan descriptions) for one split directory."""
    images_dir = split_dir / "images"
    masks_dir = split_dir / "masks"
    missing = [d for d in (images_dir, masks_dir) if not d.is_dir()]
    if missing:
        raise ManifestError(
            f"missing directories: {', '.join(str(d) for d in missing)}"
        )

    def stems(d: Path) -> dict[str, Path]:
        out: dict[str, Path] = {}
        for p in sorted(d.iterdir()):
            if p.suffix.lower() in RASTER_EXTENSIONS:
                if p.stem in out:
                    raise ManifestError(f"duplicate id {p.stem!r} in {d}")
                out[p.stem] = p
        return out

    images = stems(images_dir)
    masks = stems(masks_dir)
    paired = sorted(set(images) & set(masks))
    orphans = [f"{images[s]} (no mask)" for s in sorted(set(images) - set(masks))]
    orphans += [f"{masks[s]} (no image)" for s in sorted(set(masks) - set(images))]
    return paired, orphans


def find_raster(root: str | Path, split: str, kind: str, sid: str) -> Path:
    """Locate the raster file for an id, trying the known extensions."""
    base = Path(root) / split / kind
    for ext in RASTER_EXTENSIONS:
        p = base / f"{sid}{ext}"
        if p.exists():
            return p
    raise ManifestError(f"no {kind} raster for id {sid!r} under {base}")


def build_manifest(root_path: str | Path, tile_size: int = 256) -> DatasetManifest:
    """Scan a dataset root and pair images with masks per split.

    Raises ManifestError listing every orphan (image without mask or vice
    versa) and when the root contains no samples at all.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise ManifestError(f"dataset root does not exist: {root}")

    manifest = DatasetManifest(root_path=str(root), tile_size=tile_size)
    all_orphans: list[str] = []
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            raise ManifestError(f"missing split directory: {split_dir}")
        paired, orphans = _scan_split(split_dir)
        getattr(manifest, f"{split}_ids").extend(paired)
        all_orphans.extend(orphans)

    if all_orphans:
        listing = "\n  ".join(all_orphans)
        raise ManifestError(f"unpaired rasters:\n  {listing}")
    if sum(manifest.counts()) == 0:
        raise ManifestError(
            f"no samples under {root}; split counts "
            f"train/val/test = {manifest.counts()}"
        )
    manifest.validate()
    return manifest
