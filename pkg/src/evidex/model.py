"""Embedding network: conv blocks into a final d-filter conv, then GAP.

The network is deliberately small: stacked 3x3 conv blocks with ReLU and
2x2 max pooling, where the last conv produces exactly embed_dim filter
maps. Global average pooling of those maps is the embedding, and the maps
themselves are retained for evidence rendering.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import ParamSet
from .errors import ConfigError, FormatError, InputError

WEIGHTS_MAGIC = b"CHAIW001"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    pool: bool = True


def desk_conv_specs(embed_dim: int) -> tuple[ConvSpec, ...]:
    return (ConvSpec(8), ConvSpec(16), ConvSpec(embed_dim))


@dataclass
class ModelConfig:
    """Architecture + init seed. Defaults train on a CPU in minutes.

    pixel_offset is subtracted from every input channel before the first
    conv; training from scratch is far more stable on centered inputs
    (see the desk pipeline, which uses 0.5 for [0,1]-scaled images).
    """
    input_size: int = 64
    channels_in: int = 3
    embed_dim: int = 64
    conv_specs: tuple[ConvSpec, ...] = field(default=None)
    seed: int = 0
    pixel_offset: float = 0.0

    def __post_init__(self):
        if self.conv_specs is None:
            self.conv_specs = desk_conv_specs(self.embed_dim)
        else:
            self.conv_specs = tuple(self.conv_specs)
        if self.channels_in not in (1, 3):
            raise ConfigError(f"channels_in must be 1 or 3, got {self.channels_in}")
        if self.conv_specs[-1].filters != self.embed_dim:
            raise ConfigError("final conv layer must have embed_dim filters "
                              f"({self.conv_specs[-1].filters} != {self.embed_dim})")
        if self.map_size < 2:
            raise ConfigError(f"spatial size after all layers is {self.map_size}; "
                              "activation maps would be degenerate")

    @property
    def map_size(self) -> int:
        """Spatial side length of the pre-GAP filter maps."""
        size = self.input_size
        for spec in self.conv_specs:
            size = core.conv_output_size(size, spec.kernel, spec.stride, spec.pad)
            if spec.pool:
                size = (size - 2) // 2 + 1
        return size


def save_model_config(config: ModelConfig, path) -> None:
    lines = [
        f"input_size={config.input_size}",
        f"channels_in={config.channels_in}",
        f"embed_dim={config.embed_dim}",
        "conv_specs=" + ",".join(
            f"{s.filters}:{s.kernel}:{s.stride}:{s.pad}:{int(s.pool)}"
            for s in config.conv_specs),
        f"seed={config.seed}",
        f"pixel_offset={config.pixel_offset}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model_config(path) -> ModelConfig:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"bad config line: {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    try:
        specs = tuple(
            ConvSpec(*(int(p) for p in item.split(":")[:4]),
                     pool=bool(int(item.split(":")[4])))
            for item in values["conv_specs"].split(","))
        return ModelConfig(
            input_size=int(values["input_size"]),
            channels_in=int(values["channels_in"]),
            embed_dim=int(values["embed_dim"]),
            conv_specs=specs,
            seed=int(values["seed"]),
            pixel_offset=float(values.get("pixel_offset", 0.0)),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"invalid model config file {path}: {exc}") from exc


@dataclass
class EmbeddingOutput:
    """Embedding plus the retained pre-GAP filter maps it was pooled from."""
    embedding: np.ndarray          # (d,)
    filter_maps: np.ndarray        # (d, n, n)
    sample_id: str = ""


def init_model(config: ModelConfig) -> ParamSet:
    """Deterministic fan-in-scaled uniform init, zero biases.

    Weights draw from U(-sqrt(3/fan_in), sqrt(3/fan_in)) so their variance
    is 1/fan_in. The last conv block is assigned the "head" rate group, all
    earlier blocks "backbone".
    """
    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = ParamSet()
    c_in = config.channels_in
    n_layers = len(config.conv_specs)
    for i, spec in enumerate(config.conv_specs):
        fan_in = c_in * spec.kernel * spec.kernel
        bound = np.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(spec.filters, c_in, spec.kernel, spec.kernel))
        group = "head" if i == n_layers - 1 else "backbone"
        params.add(f"conv{i + 1}.weight", w, group=group)
        params.add(f"conv{i + 1}.bias", np.zeros(spec.filters), group=group)
        c_in = spec.filters
    return params


def _check_image_batch(config: ModelConfig, images: np.ndarray) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != config.channels_in or \
            x.shape[2] != config.input_size or x.shape[3] != config.input_size:
        raise InputError(
            f"expected images shaped ({config.channels_in},{config.input_size},"
            f"{config.input_size}), got {images.shape}")
    return x


def forward_maps(params: ParamSet, config: ModelConfig, x_nhwc: np.ndarray) -> np.ndarray:
    """Run the conv stack on a channels-last batch; returns pre-GAP maps."""
    h = x_nhwc
    if config.pixel_offset:
        h = h - np.asarray(config.pixel_offset, dtype=h.dtype)
    for i, spec in enumerate(config.conv_specs):
        w = params.params[f"conv{i + 1}.weight"]
        b = params.params[f"conv{i + 1}.bias"]
        h = core.conv2d_nhwc(h, w.astype(h.dtype, copy=False),
                             b.astype(h.dtype, copy=False), spec.stride, spec.pad)
        np.maximum(h, 0, out=h)
        if spec.pool:
            h, _ = core.maxpool2d_nhwc(h, 2, 2)
    return h


def prepare_input(config: ModelConfig, x_nhwc: np.ndarray) -> np.ndarray:
    """Apply the model's pixel offset (for paths that bypass forward_maps)."""
    if config.pixel_offset:
        return x_nhwc - np.asarray(config.pixel_offset, dtype=x_nhwc.dtype)
    return x_nhwc


def embed_batch(params: ParamSet, config: ModelConfig, images: np.ndarray):
    """Embed a (N,C,H,W) batch; returns (embeddings (N,d), maps (N,d,n,n))."""
    x = _check_image_batch(config, images)
    maps = forward_maps(params, config, np.ascontiguousarray(x.transpose(0, 2, 3, 1)))
    emb = core.gap_nhwc(maps)
    return emb, maps.transpose(0, 3, 1, 2)


def embed(params: ParamSet, config: ModelConfig, image: np.ndarray,
          sample_id: str = "") -> EmbeddingOutput:
    """Embed one (C,H,W) image, retaining its pre-GAP filter maps."""
    emb, maps = embed_batch(params, config, image)
    return EmbeddingOutput(embedding=emb[0], filter_maps=maps[0], sample_id=sample_id)


def forward_on_tape(tape: core.Tape, param_nodes: dict[str, core.Node],
                    config: ModelConfig, x_node: core.Node,
                    need_input_grad: bool = False) -> core.Node:
    """Record the image -> embedding forward pass; returns the (N,d) node.

    x_node is a tape leaf holding a channels-last image batch (already
    shifted by pixel_offset via prepare_input). Training never needs
    gradients w.r.t. the images themselves, so the first conv skips its
    input backward unless need_input_grad is set.
    """
    h = x_node
    for i, spec in enumerate(config.conv_specs):
        w = param_nodes[f"conv{i + 1}.weight"]
        b = param_nodes[f"conv{i + 1}.bias"]
        h = tape.conv2d(h, w, b, spec.stride, spec.pad,
                        need_dx=(i > 0 or need_input_grad))
        h = tape.relu(h)
        if spec.pool:
            h = tape.maxpool2d(h, 2, 2)
    return tape.gap(h)


# ---------------------------------------------------------------------------
# Weights file: magic, version, then per-tensor records, little-endian f32
# ---------------------------------------------------------------------------

def save_weights(params: ParamSet, path) -> None:
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    names = list(params.params)
    buf.write(struct.pack("<II", WEIGHTS_VERSION, len(names)))
    for name in names:
        raw = name.encode("utf-8")
        tensor = params.params[name]
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated weights file while reading {what}")
    return data


def load_weights(path) -> ParamSet:
    """Load a weights file; parameters come back float32, zero velocity."""
    params = ParamSet()
    with open(path, "rb") as fh:
        magic = fh.read(len(WEIGHTS_MAGIC))
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"bad weights magic {magic!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported weights version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents"))
            n_items = int(np.prod(shape)) if rank else 1
            payload = _read_exact(fh, 4 * n_items, f"payload of {name}")
            tensor = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            params.add(name, tensor)
        if fh.read(1):
            raise FormatError("trailing bytes after last tensor record")
    return params


def assign_groups(params: ParamSet, config: ModelConfig) -> ParamSet:
    """Re-derive rate groups (lost by serialization) from the layer index."""
    last = len(config.conv_specs)
    for name in params.params:
        layer = int(name.split(".")[0].removeprefix("conv"))
        params.groups[name] = "head" if layer == last else "backbone"
    return params
