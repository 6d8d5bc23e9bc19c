"""Dataset manifests and image/mask loading.

A manifest is a UTF-8 CSV with header
``id,image_path,disease,group,split,mask_path``; empty strings encode an
absent group or mask. Paths are relative to the manifest's directory.
Unconstrained annotation sets (groups without disease parents) are the
one sanctioned exception to the group-implies-disease rule and are
detected by their record shape.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pnm
from .errors import FormatError, InputError
from .evidence import BinaryMask
from .triplets import HierLabel

MANIFEST_HEADER = ["id", "image_path", "disease", "group", "split", "mask_path"]
SPLITS = ("train", "test")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    image_path: str
    disease: str
    group: str
    split: str
    mask_path: str

    @property
    def label(self) -> HierLabel:
        return HierLabel(self.disease or None, self.group or None)


@dataclass
class DatasetManifest:
    root: Path
    records: list[SampleRecord]
    unconstrained: bool = False

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise FormatError(f"duplicate id {rec.sample_id!r} in manifest")
            seen.add(rec.sample_id)
            if rec.split not in SPLITS:
                raise FormatError(f"bad split {rec.split!r} for {rec.sample_id!r}")
            if rec.group and not rec.disease and not self.unconstrained:
                raise FormatError(
                    f"{rec.sample_id!r} has a group but no disease in a "
                    "hierarchical manifest")

    def __len__(self):
        return len(self.records)

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.sample_id: r for r in self.records}

    def labels(self) -> dict[str, HierLabel]:
        return {r.sample_id: r.label for r in self.records}

    def split(self, which: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == which]

    def image_file(self, rec: SampleRecord) -> Path:
        return self.root / rec.image_path

    def mask_file(self, rec: SampleRecord) -> Path | None:
        return (self.root / rec.mask_path) if rec.mask_path else None


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([r.sample_id, r.image_path, r.disease, r.group,
                             r.split, r.mask_path])


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"bad manifest header {header} in {path}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise FormatError(f"bad manifest row {row} in {path}")
            records.append(SampleRecord(*row))
    # a manifest whose groups never sit under a disease is an unconstrained set
    unconstrained = bool(records) and all(not r.disease for r in records) \
        and any(r.group for r in records)
    manifest = DatasetManifest(root=path.parent, records=records,
                               unconstrained=unconstrained)
    if check_files:
        for rec in manifest.records:
            img = manifest.image_file(rec)
            if not img.is_file():
                raise FormatError(f"missing image file {img} for {rec.sample_id!r}")
            mask = manifest.mask_file(rec)
            if mask is not None and not mask.is_file():
                raise FormatError(f"missing mask file {mask} for {rec.sample_id!r}")
    return manifest


def load_image(path) -> np.ndarray:
    """P6 PPM file -> (3, H, W) float64 tensor scaled to [0, 1]."""
    pixels = pnm.read_pnm(path)
    if pixels.ndim != 3:
        raise FormatError(f"{path} is not a color PPM image")
    return pixels.astype(np.float64).transpose(2, 0, 1) / 255.0


def load_mask(path) -> BinaryMask:
    """P5 PGM file -> BinaryMask (pixel >= 128 is foreground)."""
    pixels = pnm.read_pnm(path)
    if pixels.ndim != 2:
        raise FormatError(f"{path} is not a grayscale PGM mask")
    return BinaryMask(pixels >= 128)


def save_image(path, tensor: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] -> P6 PPM file."""
    t = np.asarray(tensor)
    if t.ndim != 3 or t.shape[0] != 3:
        raise InputError(f"expected (3,H,W) tensor, got shape {t.shape}")
    pixels = np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    pnm.write_pnm(path, pixels.transpose(1, 2, 0))


def save_mask(path, mask: BinaryMask) -> None:
    pnm.write_pnm(path, np.where(mask.bits, 255, 0).astype(np.uint8))


def load_split_images(manifest: DatasetManifest, which: str | None = None,
                      dtype=np.float64) -> dict[str, np.ndarray]:
    """Load every image of a split (or all) keyed by sample id."""
    records = manifest.records if which is None else manifest.split(which)
    return {r.sample_id: load_image(manifest.image_file(r)).astype(dtype)
            for r in records}
