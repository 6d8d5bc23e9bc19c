"""Deterministic synthetic dermoscopy-analog dataset.

Every image is a skin-tone background (random tone, gradient, and fine
noise, all independent of the label) with one elliptical lesion blob.
The disease fixes an appearance family (color anchor, border
irregularity range, texture frequency band); each similarity group under
a disease fixes a concrete sub-style (exact color offset, eccentricity,
texture phase, boundary harmonics); each image adds small jitter on top.
Masks record the exact lesion support.

The label signal therefore lives entirely in the lesion while raw pixel
distances are dominated by background variation, which is what makes the
set a meaningful metric-learning benchmark: nearest neighbors in pixel
space are mostly background matches, nearest neighbors in a trained
embedding are style matches.

Everything derives from the master seed: per-image generators are seeded
with sha256(seed, sample_id), so generation is reproducible and order
independent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data_io
from .data_io import DatasetManifest, SampleRecord
from .errors import ConfigError
from .evidence import BinaryMask
from .triplets import BENIGN_NEVUS, DISEASES, MELANOMA, SEBORRHEIC_KERATOSIS


@dataclass
class SynthConfig:
    n_train: int = 600
    n_test: int = 200
    groups_per_disease: tuple[int, int, int] = (5, 3, 4)
    image_size: int = 64
    seed: int = 7
    n_unconstrained: int = 240          # extra pool for joint-style annotation
    n_unconstrained_groups: int = 11

    def __post_init__(self):
        if len(self.groups_per_disease) != len(DISEASES):
            raise ConfigError("groups_per_disease must list one count per disease")
        if any(g < 1 for g in self.groups_per_disease):
            raise ConfigError("groups_per_disease entries must be positive")
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")


# Appearance families. Lesion color is coded RELATIVE to each image's own
# background tone (a per-channel contrast factor), so absolute pixel values
# carry almost no label signal; what identifies a disease is its texture
# frequency band, border irregularity range, and a (deliberately
# overlapping) luminance-contrast band. Untrained features rank images by
# background tone and clutter; the cues here are what training surfaces.
DISEASE_STYLES = {
    MELANOMA: dict(lum=(0.56, 0.84), tilt=(-0.14, -0.04), irregularity=(0.10, 0.20),
                   freq=(5.5, 7.5), radius=(0.16, 0.22)),
    SEBORRHEIC_KERATOSIS: dict(lum=(0.66, 0.94), tilt=(0.04, 0.14), irregularity=(0.05, 0.11),
                               freq=(3.0, 4.5), radius=(0.16, 0.22)),
    BENIGN_NEVUS: dict(lum=(0.60, 0.88), tilt=(-0.05, 0.05), irregularity=(0.02, 0.06),
                       freq=(1.2, 2.4), radius=(0.16, 0.22)),
}

CONTRAST_TILT_SPAN = 0.07    # group-level per-channel tilt inside the band
IMAGE_CONTRAST_JITTER = 0.03
TEXTURE_AMP = 0.07
BACKGROUND_NOISE = 0.025
# label-independent background clutter (freckle/hair-like blotches)
CLUTTER_BLOBS = (7, 13)
CLUTTER_COLOR_STD = 0.16
CLUTTER_SIGMA = (3.5, 10.0)
# per-image photometric gain (illumination nuisance): multiplies the whole
# composed image channelwise. It scrambles absolute color statistics (what
# an untrained embedding ranks by) while preserving the lesion/background
# contrast ratios that carry the label signal.
GAIN_RANGE = (0.50, 1.50)


def _rng_for(seed: int, *parts) -> np.random.Generator:
    digest = hashlib.sha256(":".join([str(seed), *map(str, parts)]).encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


@dataclass(frozen=True)
class GroupStyle:
    contrast: tuple[float, float, float]    # lesion = background * contrast
    eccentricity: float
    irregularity: float
    harmonics: tuple[float, float, float]   # amplitudes for k = 2, 3, 5
    freq: float
    tex_angle: float
    radius: float                            # fraction of image size


def _group_style(seed: int, disease: str, group_idx: int,
                 style: dict | None = None) -> GroupStyle:
    base = style or DISEASE_STYLES[disease]
    rng = _rng_for(seed, "group", disease, group_idx)
    lum = rng.uniform(*base["lum"])
    tilt = rng.uniform(*base.get("tilt", (-0.06, 0.06)))
    # contrast per channel: shared luminance + a red/blue opponent tilt +
    # free per-group wiggle
    wiggle = rng.uniform(-CONTRAST_TILT_SPAN, CONTRAST_TILT_SPAN, 3)
    contrast = tuple(np.clip(
        np.array([lum + tilt, lum, lum - tilt]) + wiggle, 0.30, 1.20))
    harm = rng.uniform(0.3, 1.0, 3)
    harm /= harm.sum()
    return GroupStyle(
        contrast=contrast,
        eccentricity=float(rng.uniform(0.05, 0.45)),
        irregularity=float(rng.uniform(*base["irregularity"])),
        harmonics=tuple(harm),
        freq=float(rng.uniform(*base["freq"])),
        tex_angle=float(rng.uniform(0, np.pi)),
        radius=float(rng.uniform(*base["radius"])),
    )


def _unconstrained_style(seed: int, group_idx: int) -> GroupStyle:
    # styles roam the union of the disease families, so pool groups are
    # visual clusters that need not respect disease boundaries
    rng = _rng_for(seed, "ugroup", group_idx)
    base = dict(lum=tuple(sorted(rng.uniform(0.56, 0.94, 2))),
                tilt=tuple(sorted(rng.uniform(-0.14, 0.14, 2))),
                irregularity=tuple(sorted(rng.uniform(0.02, 0.20, 2))),
                freq=tuple(sorted(rng.uniform(1.2, 7.5, 2))),
                radius=(0.16, 0.22))
    return _group_style(seed, f"pool{group_idx}", 0, style=base)


def render_sample(seed: int, sample_id: str, style: GroupStyle, size: int):
    """Render one (image, mask) pair; image (3,H,W) floats, mask bool."""
    rng = _rng_for(seed, "image", sample_id)

    # background: random skin tone + linear gradient + colored clutter
    # blotches + fine noise, all independent of the label
    r0 = rng.uniform(0.60, 0.92)
    g0 = r0 * rng.uniform(0.72, 0.88)
    b0 = g0 * rng.uniform(0.78, 0.95)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    gdir = rng.uniform(0, 2 * np.pi)
    gamp = rng.uniform(0.04, 0.16)
    gradient = gamp * ((xx - 0.5) * np.cos(gdir) + (yy - 0.5) * np.sin(gdir))
    img = np.empty((3, size, size))
    for ch, tone in enumerate((r0, g0, b0)):
        img[ch] = tone + gradient
    n_blobs = int(rng.integers(*CLUTTER_BLOBS))
    px = np.arange(size)
    for _ in range(n_blobs):
        bx, by = rng.uniform(0, size - 1, 2)
        sigma = rng.uniform(*CLUTTER_SIGMA)
        splat = np.exp(-((px[None, :] - bx) ** 2 + (px[:, None] - by) ** 2)
                       / (2 * sigma * sigma))
        tint = rng.normal(0.0, CLUTTER_COLOR_STD, 3)
        img += tint[:, None, None] * splat[None, :, :]
    img += rng.normal(0.0, BACKGROUND_NOISE, size=(3, size, size))

    # lesion geometry: jittered center, rotated ellipse, wavy boundary.
    # Orientation and boundary phases are per-image so raw pixel matching
    # cannot align same-group lesions; the group cue is the distributional
    # shape (eccentricity, irregularity profile), not a pixel template.
    cx = size / 2 + rng.uniform(-0.09, 0.09) * size
    cy = size / 2 + rng.uniform(-0.09, 0.09) * size
    radius = style.radius * size * rng.uniform(0.85, 1.15)
    angle = rng.uniform(0, np.pi)
    dx = (np.arange(size)[None, :] - cx)
    dy = (np.arange(size)[:, None] - cy)
    ux = dx * np.cos(angle) + dy * np.sin(angle)
    uy = -dx * np.sin(angle) + dy * np.cos(angle)
    e = np.clip(style.eccentricity + rng.uniform(-0.05, 0.05), 0.0, 0.5)
    rr = np.sqrt((ux / (1 + e)) ** 2 + (uy / (1 - e)) ** 2)
    theta = np.arctan2(uy, ux)
    boundary = np.zeros_like(theta)
    for (k, amp) in zip((2, 3, 5), style.harmonics):
        boundary += amp * np.sin(k * theta + rng.uniform(0, 2 * np.pi))
    r_edge = radius * (1.0 + style.irregularity * boundary)

    feather = 1.5
    alpha = np.clip((r_edge - rr) / feather + 0.5, 0.0, 1.0)
    mask = alpha >= 0.5

    # lesion appearance: contrast against this image's own base tone (so
    # absolute color tracks the background), plus banded texture
    factors = np.clip(np.array(style.contrast) +
                      rng.uniform(-IMAGE_CONTRAST_JITTER, IMAGE_CONTRAST_JITTER, 3),
                      0.30, 1.20)
    color = np.array((r0, g0, b0)) * factors
    tex_angle = style.tex_angle + rng.uniform(-0.5, 0.5)
    band = np.sin(2 * np.pi * style.freq *
                  (xx * np.cos(tex_angle) + yy * np.sin(tex_angle))
                  + rng.uniform(0, 2 * np.pi))
    lesion = color[:, None, None] * (1.0 + TEXTURE_AMP * band)[None, :, :]
    lesion = lesion + rng.normal(0.0, 0.015, size=(3, size, size))

    img = img * (1 - alpha)[None, :, :] + lesion * alpha[None, :, :]
    gain = rng.uniform(*GAIN_RANGE, 3)
    img *= gain[:, None, None]
    return np.clip(img, 0.0, 1.0), mask


def _disease_of(seed: int, index: int) -> str:
    return DISEASES[index % len(DISEASES)]


def generate_synthetic(config: SynthConfig, out_dir) -> DatasetManifest:
    """Write images, masks, and manifests; returns the main manifest.

    Alongside ``manifest.csv`` an unconstrained annotation pool (standalone
    groups, no disease labels, no masks) is written to
    ``unconstrained.csv`` for joint-regime training.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    styles = {
        disease: [_group_style(config.seed, disease, g)
                  for g in range(config.groups_per_disease[di])]
        for di, disease in enumerate(DISEASES)
    }

    records = []
    for split, count, prefix in (("train", config.n_train, "tr"),
                                 ("test", config.n_test, "te")):
        for i in range(count):
            sample_id = f"{prefix}{i:04d}"
            disease = _disease_of(config.seed, i)
            group_idx = int(_rng_for(config.seed, "assign", sample_id)
                            .integers(len(styles[disease])))
            group = f"g{group_idx:02d}"
            img, mask = render_sample(config.seed, sample_id,
                                      styles[disease][group_idx], config.image_size)
            image_path = f"images/{sample_id}.ppm"
            mask_path = f"masks/{sample_id}.pgm"
            data_io.save_image(out / image_path, img)
            data_io.save_mask(out / mask_path, BinaryMask(mask))
            records.append(SampleRecord(sample_id, image_path, disease, group,
                                        split, mask_path))
    manifest = DatasetManifest(root=out, records=records)
    data_io.save_manifest(manifest, out / "manifest.csv")

    pool_records = []
    if config.n_unconstrained:
        pool_styles = [_unconstrained_style(config.seed, g)
                       for g in range(config.n_unconstrained_groups)]
        for i in range(config.n_unconstrained):
            sample_id = f"un{i:04d}"
            group_idx = int(_rng_for(config.seed, "assign", sample_id)
                            .integers(len(pool_styles)))
            img, _ = render_sample(config.seed, sample_id,
                                   pool_styles[group_idx], config.image_size)
            image_path = f"images/{sample_id}.ppm"
            data_io.save_image(out / image_path, img)
            pool_records.append(SampleRecord(sample_id, image_path, "",
                                             f"u{group_idx:02d}", "train", ""))
        pool = DatasetManifest(root=out, records=pool_records, unconstrained=True)
        data_io.save_manifest(pool, out / "unconstrained.csv")
    return manifest
