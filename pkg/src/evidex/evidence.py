"""Query-result activation maps: where a retrieval distance came from.

For a query q and a retrieved result r, each pre-GAP filter map is
weighted by the squared difference of the corresponding embedding
elements, w_z = (f_z(q) - f_z(r))^2, and summed into a single spatial
map. Computed once from q's maps (the query activation map) and once
from r's maps (the result activation map), the pair localizes the image
regions that contributed most to the distance between the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .model import EmbeddingOutput


@dataclass
class BinaryMask:
    bits: np.ndarray  # (H, W) bool, True = foreground

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise InputError(f"mask must be 2-D, got shape {self.bits.shape}")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass
class ActivationMapPair:
    qam: np.ndarray              # (n, n)
    ram: np.ndarray              # (n, n)
    weights: np.ndarray          # (d,) = squared embedding differences
    query_id: str = ""
    result_id: str = ""

    @property
    def distance(self) -> float:
        return float(self.weights.sum())


def activation_pair(q: EmbeddingOutput, r: EmbeddingOutput) -> ActivationMapPair:
    """Weight both samples' filter maps by squared embedding differences."""
    if q.embedding.shape != r.embedding.shape:
        raise InputError(f"embedding dims differ: {q.embedding.shape} vs {r.embedding.shape}")
    if q.filter_maps.shape != r.filter_maps.shape:
        raise InputError(f"filter map shapes differ: {q.filter_maps.shape} "
                         f"vs {r.filter_maps.shape}")
    w = (q.embedding - r.embedding) ** 2
    qam = np.tensordot(w, q.filter_maps, axes=([0], [0]))
    ram = np.tensordot(w, r.filter_maps, axes=([0], [0]))
    return ActivationMapPair(qam=qam, ram=ram, weights=w,
                             query_id=q.sample_id, result_id=r.sample_id)


def upsample_map(m: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-D map to (H, W)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InputError(f"expected a 2-D map, got shape {m.shape}")
    h_out, w_out = target
    h_in, w_in = m.shape
    if h_out < h_in or w_out < w_in:
        raise InputError(f"target {target} smaller than source {m.shape}")

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out), np.zeros(n_out, dtype=np.intp)
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(pos.astype(np.intp), n_in - 2)
        return pos - lo, lo

    fy, y0 = coords(h_out, h_in)
    fx, x0 = coords(w_out, w_in)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    tl = m[np.ix_(y0, x0)]
    tr = m[np.ix_(y0, x1)]
    bl = m[np.ix_(y1, x0)]
    br = m[np.ix_(y1, x1)]
    top = tl + (tr - tl) * fx[None, :]
    bot = bl + (br - bl) * fx[None, :]
    return top + (bot - top) * fy[:, None]


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max to [0,1]; a constant map normalizes to all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo = m.min()
    hi = m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def binarize_map(m: np.ndarray, tau: float = 0.5) -> BinaryMask:
    """Threshold the min-max-normalized map at tau (>= tau is foreground).

    A constant map has no usable contrast and binarizes to all background.
    """
    if not 0 <= tau <= 1:
        raise InputError(f"tau must be in [0,1], got {tau}")
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0 or m.max() == m.min():
        return BinaryMask(np.zeros(m.shape, dtype=bool))
    return BinaryMask(normalize_map(m) >= tau)


def jaccard(a: BinaryMask, b: BinaryMask) -> float:
    """|a AND b| / |a OR b|; two empty masks score 0."""
    if a.bits.shape != b.bits.shape:
        raise InputError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 0.0
    inter = int(np.logical_and(a.bits, b.bits).sum())
    return inter / union


def _build_color_table() -> np.ndarray:
    """Fixed 256-entry blue-to-red ramp (classic jet shape), values in [0,1]."""
    t = np.arange(256) / 255.0
    r = np.clip(1.5 - np.abs(4 * t - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * t - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * t - 1), 0, 1)
    return np.stack([r, g, b], axis=1)


COLOR_TABLE = _build_color_table()


def render_heatmap(m: np.ndarray, base_image: np.ndarray, alpha: float) -> np.ndarray:
    """Alpha-blend the colorized map over a (3,H,W) image in [0,1]."""
    if not 0 <= alpha <= 1:
        raise InputError(f"alpha must be in [0,1], got {alpha}")
    base = np.asarray(base_image, dtype=np.float64)
    if base.ndim != 3 or base.shape[0] != 3:
        raise InputError(f"base image must be (3,H,W), got shape {base.shape}")
    m = np.asarray(m)
    if m.shape != base.shape[1:]:
        raise InputError(f"map shape {m.shape} does not match image {base.shape[1:]}")
    idx = np.minimum((normalize_map(m) * 255).astype(np.intp), 255)
    colors = COLOR_TABLE[idx].transpose(2, 0, 1)
    return (1.0 - alpha) * base + alpha * colors
