"""Deterministic tensor kernels with exact reverse-mode gradients.

All values are plain numpy arrays (row-major, float64 in verification runs,
float32 allowed for speed). Forward ops are pure; gradients come from a
small tape that records each primitive in creation order and replays
vector-Jacobian products in reverse.

Internally the batched kernels use channels-last (N, H, W, C) layout so the
convolution reduces to one im2col copy plus one BLAS matmul; the public
single-image ops keep the channels-first shapes of the rest of the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, NumericDomainError, UsageError

Array = np.ndarray


def check_finite(x: Array, what: str = "tensor") -> None:
    """Raise NumericDomainError if x holds NaN or Inf."""
    if not np.isfinite(x).all():
        raise NumericDomainError(f"{what} contains non-finite values")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# Batched channels-last kernels (the fast path used by model and training)
# ---------------------------------------------------------------------------

def kernel_matrix(kernel: Array) -> Array:
    """Flatten a (Co, Ci, kh, kw) kernel to the (Ci*kh*kw, Co) matmul layout."""
    co, ci, kh, kw = kernel.shape
    return np.ascontiguousarray(kernel.transpose(1, 2, 3, 0)).reshape(ci * kh * kw, co)


def conv2d_nhwc(x: Array, kernel: Array, bias: Array, stride: int = 1, pad: int = 0,
                return_cols: bool = False):
    """Cross-correlate x (N,H,W,Ci) with kernel (Co,Ci,kh,kw), zero padded.

    Returns (N,H2,W2,Co); with return_cols=True also the im2col matrix
    needed by the backward pass.
    """
    n, h, w, ci = x.shape
    co, ci_k, kh, kw = kernel.shape
    if ci_k != ci:
        raise InputError(f"kernel expects {ci_k} input channels, image has {ci}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise InputError("kernel larger than padded input")
    if stride < 1 or pad < 0:
        raise InputError("stride must be >= 1 and pad >= 0")
    h2 = conv_output_size(h, kh, stride, pad)
    w2 = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win).reshape(n * h2 * w2, ci * kh * kw)
    y = cols @ kernel_matrix(kernel).astype(x.dtype, copy=False)
    y += bias.astype(x.dtype, copy=False)
    y = y.reshape(n, h2, w2, co)
    if return_cols:
        return y, cols
    return y


def conv2d_nhwc_backward(grad_y: Array, cols: Array, x_shape, kernel: Array,
                         stride: int, pad: int, need_dx: bool = True):
    """Gradients of conv2d_nhwc. Returns (dx or None, dkernel, dbias)."""
    n, h, w, ci = x_shape
    co, _, kh, kw = kernel.shape
    _, h2, w2, _ = grad_y.shape
    gy = grad_y.reshape(n * h2 * w2, co)
    dmat = cols.T @ gy                                     # (Ci*kh*kw, Co)
    dkernel = dmat.reshape(ci, kh, kw, co).transpose(3, 0, 1, 2)
    dbias = gy.sum(axis=0)
    dx = None
    if need_dx:
        dcols = (gy @ kernel_matrix(kernel).astype(gy.dtype, copy=False).T)
        dcols = dcols.reshape(n, h2, w2, ci, kh, kw)
        dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, ci), dtype=grad_y.dtype)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, ki:ki + stride * h2:stride, kj:kj + stride * w2:stride, :] += \
                    dcols[:, :, :, :, ki, kj]
        dx = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
    return dx, np.ascontiguousarray(dkernel), dbias


def maxpool2d_nhwc(x: Array, window: int, stride: int):
    """Max pool over (window x window) patches. Returns (out, argmax).

    argmax holds, per output cell, the flat row-major index inside its
    window; ties resolve to the smallest flat index.
    """
    n, h, w, c = x.shape
    if window > h or window > w:
        raise InputError(f"pool window {window} larger than input {h}x{w}")
    h2 = (h - window) // stride + 1
    w2 = (w - window) // stride + 1
    if window == 2 and stride == 2:
        xc = x[:, :2 * h2, :2 * w2, :]
        a = xc[:, 0::2, 0::2, :]
        b = xc[:, 0::2, 1::2, :]
        cq = xc[:, 1::2, 0::2, :]
        d = xc[:, 1::2, 1::2, :]
        top = np.maximum(a, b)
        bot = np.maximum(cq, d)
        arg_top = np.where(a >= b, np.uint8(0), np.uint8(1))
        arg_bot = np.where(cq >= d, np.uint8(2), np.uint8(3))
        out = np.maximum(top, bot)
        arg = np.where(top >= bot, arg_top, arg_bot)
        return out, arg
    win = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    flat = np.ascontiguousarray(win).reshape(n, h2, w2, c, window * window)
    arg = flat.argmax(axis=-1).astype(np.uint8 if window * window < 256 else np.int64)
    out = np.take_along_axis(flat, arg[..., None].astype(np.int64), axis=-1)[..., 0]
    return out, arg


def maxpool2d_nhwc_backward(grad_y: Array, arg: Array, x_shape, window: int, stride: int) -> Array:
    n, h, w, c = x_shape
    _, h2, w2, _ = grad_y.shape
    dx = np.zeros(x_shape, dtype=grad_y.dtype)
    if window == 2 and stride == 2:
        for idx, (oi, oj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            view = dx[:, oi:oi + 2 * h2:2, oj:oj + 2 * w2:2, :]
            view += grad_y * (arg == idx)
        return dx
    # general (possibly overlapping) windows: scatter-add into flat indices
    base_i = (np.arange(h2) * stride)[None, :, None, None]
    base_j = (np.arange(w2) * stride)[None, None, :, None]
    wi = arg.astype(np.int64) // window
    wj = arg.astype(np.int64) % window
    rows = base_i + wi
    cols = base_j + wj
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, None, None, :]
    np.add.at(dx, (nn, rows, cols, cc), grad_y)
    return dx


def gap_nhwc(x: Array) -> Array:
    """Channelwise spatial mean: (N,H,W,C) -> (N,C)."""
    return x.mean(axis=(1, 2))


# ---------------------------------------------------------------------------
# Public single-image ops (channels-first, as used across the package)
# ---------------------------------------------------------------------------

def _as_batch(x: Array):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise InputError(f"expected a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")


def conv2d_forward(inp: Array, kernel: Array, bias: Array, stride: int = 1, pad: int = 0) -> Array:
    """2-D convolution (cross-correlation) of a (C,H,W) image, zero padded.

    output[c,i,j] = bias[c] + sum over the receptive field of input*kernel.
    """
    x, squeeze = _as_batch(np.asarray(inp))
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    if kernel.ndim != 4:
        raise InputError(f"kernel must be (Co,Ci,kh,kw), got shape {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise InputError(f"bias shape {bias.shape} does not match {kernel.shape[0]} filters")
    check_finite(x, "conv input")
    check_finite(kernel, "conv kernel")
    check_finite(bias, "conv bias")
    y = conv2d_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), kernel, bias, stride, pad)
    y = y.transpose(0, 3, 1, 2)
    return y[0] if squeeze else y


def relu_forward(inp: Array) -> Array:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(inp), 0)


def maxpool2d_forward(inp: Array, window: int, stride: int):
    """Max pool a (C,H,W) tensor; returns (pooled, argmax).

    argmax gives the within-window flat index of each max, ties toward the
    smallest flat index, as consumed by the backward pass.
    """
    x, squeeze = _as_batch(np.asarray(inp))
    out, arg = maxpool2d_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), window, stride)
    out = out.transpose(0, 3, 1, 2)
    arg = arg.transpose(0, 3, 1, 2)
    return (out[0], arg[0]) if squeeze else (out, arg)


def gap_forward(inp: Array) -> Array:
    """Global average pooling of (d,n,n) filter maps to a d-vector."""
    x = np.asarray(inp)
    if x.ndim != 3:
        raise InputError(f"expected (d,n,n) filter maps, got shape {x.shape}")
    if x.shape[1] != x.shape[2]:
        raise InputError(f"spatial dims must be square, got {x.shape[1]}x{x.shape[2]}")
    return x.mean(axis=(1, 2))


# ---------------------------------------------------------------------------
# Parameters and SGD with momentum
# ---------------------------------------------------------------------------

@dataclass
class ParamSet:
    """Named trainable tensors plus per-parameter momentum state.

    groups maps a parameter name to a learning-rate group label so layers
    can train at different rates.
    """
    params: dict[str, Array] = field(default_factory=dict)
    velocity: dict[str, Array] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, value: Array, group: str = "default") -> None:
        if name in self.params:
            raise InputError(f"duplicate parameter name {name!r}")
        self.params[name] = value
        self.velocity[name] = np.zeros_like(value)
        self.groups[name] = group

    def copy(self) -> "ParamSet":
        return ParamSet(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.velocity.items()},
            dict(self.groups),
        )

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.velocity.items()},
            dict(self.groups),
        )

    def __iter__(self):
        return iter(self.params)


def sgd_momentum_step(params: ParamSet, grads: Mapping[str, Array],
                      lr: float | Mapping[str, float], momentum: float) -> ParamSet:
    """In-place SGD update: v <- momentum*v - lr*g; p <- p + v.

    lr is a scalar or a mapping from group label to rate.
    """
    if momentum < 0 or momentum >= 1:
        raise InputError(f"momentum must be in [0, 1), got {momentum}")
    for name, g in grads.items():
        if name not in params.params:
            raise InputError(f"gradient for unknown parameter {name!r}")
        p = params.params[name]
        if g.shape != p.shape:
            raise InputError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if isinstance(lr, Mapping):
            rate = lr.get(params.groups.get(name, "default"), lr.get("default", 0.0))
        else:
            rate = lr
        if rate < 0:
            raise InputError(f"learning rate must be >= 0, got {rate}")
        v = params.velocity[name]
        v *= momentum
        v -= rate * g.astype(v.dtype, copy=False)
        p += v
    return params


# ---------------------------------------------------------------------------
# Tape-based reverse mode over the fixed primitive set
# ---------------------------------------------------------------------------

class Node:
    """One recorded value. grad is filled by Tape.backward."""

    __slots__ = ("value", "parents", "vjp", "grad", "name")

    def __init__(self, value: Array, parents=(), vjp=None, name: str | None = None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.name = name


class Tape:
    """Records primitives in creation order; backward replays them reversed.

    The primitive set is fixed (conv, relu, maxpool, gap, plus custom nodes
    such as the triplet hinge); creation order is a valid topological order,
    so no graph search is needed. A tape can be consumed exactly once.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._consumed = False

    def _record(self, node: Node) -> Node:
        self._nodes.append(node)
        return node

    def leaf(self, value: Array, name: str | None = None) -> Node:
        return self._record(Node(value, name=name))

    def conv2d(self, x: Node, kernel: Node, bias: Node, stride: int = 1, pad: int = 0,
               need_dx: bool = True) -> Node:
        """x is (N,H,W,Ci) channels-last; kernel (Co,Ci,kh,kw); bias (Co,)."""
        y, cols = conv2d_nhwc(x.value, kernel.value, bias.value, stride, pad, return_cols=True)
        x_shape = x.value.shape

        def vjp(gy):
            dx, dk, db = conv2d_nhwc_backward(gy, cols, x_shape, kernel.value,
                                              stride, pad, need_dx=need_dx)
            return dx, dk, db

        return self._record(Node(y, (x, kernel, bias), vjp))

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        y = x.value * mask

        def vjp(gy):
            return (gy * mask,)

        return self._record(Node(y, (x,), vjp))

    def maxpool2d(self, x: Node, window: int, stride: int) -> Node:
        y, arg = maxpool2d_nhwc(x.value, window, stride)
        x_shape = x.value.shape

        def vjp(gy):
            return (maxpool2d_nhwc_backward(gy, arg, x_shape, window, stride),)

        return self._record(Node(y, (x,), vjp))

    def gap(self, x: Node) -> Node:
        y = gap_nhwc(x.value)
        n, h, w, c = x.value.shape
        inv = 1.0 / (h * w)

        def vjp(gy):
            return (np.broadcast_to(gy[:, None, None, :] * inv, (n, h, w, c)).astype(gy.dtype),)

        return self._record(Node(y, (x,), vjp))

    def custom(self, value: Array, parents: tuple[Node, ...], vjp: Callable) -> Node:
        """Register an externally computed primitive (e.g. the triplet hinge)."""
        return self._record(Node(value, parents, vjp))

    def backward(self, root: Node, seed=None) -> dict[str, Array]:
        """Reverse-mode sweep from root; returns gradients of named leaves."""
        if self._consumed:
            raise UsageError("tape already consumed; build a new graph per backward pass")
        self._consumed = True
        if seed is None:
            seed = np.ones_like(root.value)
        root.grad = np.asarray(seed, dtype=root.value.dtype)
        for node in reversed(self._nodes):
            if node.grad is not None and node.vjp is not None:
                parent_grads = node.vjp(node.grad)
                for parent, g in zip(node.parents, parent_grads):
                    if g is None:
                        continue
                    if parent.grad is None:
                        parent.grad = g
                    else:
                        parent.grad = parent.grad + g
            if node.name is None and node is not root:
                # free intermediate activations and closures as we go;
                # leaves keep their grads for the caller
                node.vjp = None
                node.parents = ()
                if node.grad is not None:
                    node.grad = None
                node.value = None
        return {n.name: n.grad for n in self._nodes
                if n.name is not None and n.grad is not None}
