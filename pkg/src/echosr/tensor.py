"""Dense 4-D tensor type with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a numpy array and the
operations below record closures that propagate cotangents backwards.  All
feature maps follow the (batch, channel, height, width) layout; weights for
convolutions are (out_channels, in_channels / groups, k_h, k_w).

Values are treated as immutable after creation: no operation writes into an
input array, so tensors may be shared freely between threads.  A gradient
graph (the chain of recorded closures) must stay confined to one thread.

Set ``DEBUG_CHECK_FINITE`` (or the ECHOSR_DEBUG env var) to verify that every
operation keeps values finite.  Pass float64 arrays to run the whole engine
in "shadow" double precision for tight gradient checks; float32 is the
deployment precision.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf

DEBUG_CHECK_FINITE = bool(os.environ.get("ECHOSR_DEBUG"))

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class AllocationTracker:
    """Accumulates tensor buffer sizes created while active (bench support)."""

    def __init__(self):
        self.total_bytes = 0
        self.largest_bytes = 0

    def __enter__(self):
        _state.alloc_tracker = self
        return self

    def __exit__(self, *exc):
        _state.alloc_tracker = None
        return False

    def note(self, nbytes: int) -> None:
        self.total_bytes += nbytes
        self.largest_bytes = max(self.largest_bytes, nbytes)


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


class ConfigError(ValueError):
    """Raised for structurally invalid operation or model configuration."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    """Numpy-backed value participating in reverse-mode differentiation.

    ``data`` may have any rank; network activations are 4-D (n, c, h, w),
    biases 1-D, and learnable scales 0-D.  ``requires_grad`` marks leaves
    whose gradients are wanted; intermediate results track gradients when
    any input does and grad mode is enabled.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        tracker = getattr(_state, "alloc_tracker", None)
        if tracker is not None:
            tracker.note(arr.nbytes)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        GradGraph(self).run(seed)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    tracked = _grad_enabled() and any(p.requires_grad for p in parents)
    if tracked:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


class GradGraph:
    """Topologically ordered record of the operations reaching one root.

    Construction walks the recorded parent links; ``nodes`` lists every
    reachable tensor with inputs before consumers.  ``run`` performs one
    reverse sweep, visiting each node exactly once and accumulating
    gradients additively over fan-out.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    def run(self, seed: np.ndarray | None = None) -> None:
        root = self.root
        if seed is None:
            if root.data.size != 1:
                raise ShapeError("backward() without a seed requires a scalar root")
            seed = np.ones_like(root.data)
        root.grad = np.asarray(seed, dtype=root.data.dtype).reshape(root.data.shape)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._backward is not None):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None):
    """Run reverse-mode differentiation from a scalar loss.

    Returns the gradient arrays for ``wrt`` in order (zeros for tensors the
    loss does not depend on).  When ``wrt`` is None, gradients are left on
    every ``requires_grad`` tensor's ``.grad``.
    """
    loss.backward()
    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution (zero padding only)."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: int | None = None  # None = "same" for odd kernels at stride 1
    padding_mode: str = "zeros"

    def __post_init__(self):
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw, self.stride, self.dilation, self.groups) < 1:
            raise ConfigError("conv spec extents must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.padding_mode != "zeros":
            raise ConfigError("only zero padding is supported")

    @property
    def pad(self) -> int:
        if self.padding is not None:
            return self.padding
        kh, kw = self.kernel
        if kh != kw or kh % 2 == 0:
            raise ConfigError("implicit same-padding needs an odd square kernel")
        return (kh - 1) // 2

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        p, s, d = self.pad, self.stride, self.dilation
        oh = (h + 2 * p - d * (kh - 1) - 1) // s + 1
        ow = (w + 2 * p - d * (kw - 1) - 1) // s + 1
        return oh, ow


def _require_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a (n, c, h, w) tensor, got shape {x.data.shape}")


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int) -> np.ndarray:
    # (n, c, oh, ow, kh, kw) view, no copy
    win = sliding_window_view(xp, (kh + (kh - 1) * (dilation - 1), kw + (kw - 1) * (dilation - 1)), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    return win


def _conv_forward_arr(xp: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    kh, kw = spec.kernel
    win = _conv_windows(xp, kh, kw, spec.stride, spec.dilation)
    n, _, oh, ow = win.shape[0], win.shape[1], win.shape[2], win.shape[3]
    g = spec.groups
    icg = spec.in_channels // g
    ocg = spec.out_channels // g
    if g == spec.in_channels == spec.out_channels:
        out = np.einsum("nchwkl,ckl->nchw", win, w[:, 0], optimize=True)
    elif g == 1:
        out = np.einsum("nchwkl,ockl->nohw", win, w, optimize=True)
    else:
        wing = win.reshape(n, g, icg, oh, ow, kh, kw)
        wg = w.reshape(g, ocg, icg, kh, kw)
        out = np.einsum("ngihwkl,goikl->ngohw", wing, wg, optimize=True)
        out = out.reshape(n, spec.out_channels, oh, ow)
    return np.ascontiguousarray(out, dtype=xp.dtype)


def _conv_grad_w(xp: np.ndarray, go: np.ndarray, spec: ConvSpec) -> np.ndarray:
    kh, kw = spec.kernel
    win = _conv_windows(xp, kh, kw, spec.stride, spec.dilation)
    g = spec.groups
    icg = spec.in_channels // g
    ocg = spec.out_channels // g
    n, _, oh, ow = win.shape[:4]
    if g == spec.in_channels == spec.out_channels:
        gw = np.einsum("nchwkl,nchw->ckl", win, go, optimize=True)[:, None]
    elif g == 1:
        gw = np.einsum("nchwkl,nohw->ockl", win, go, optimize=True)
    else:
        wing = win.reshape(n, g, icg, oh, ow, kh, kw)
        gog = go.reshape(n, g, ocg, oh, ow)
        gw = np.einsum("ngihwkl,ngohw->goikl", wing, gog, optimize=True)
        gw = gw.reshape(spec.out_channels, icg, kh, kw)
    return gw.astype(xp.dtype, copy=False)


def _conv_grad_x_unit_stride(go: np.ndarray, w: np.ndarray, spec: ConvSpec, h: int, w_in: int) -> np.ndarray:
    # gradient w.r.t. the unpadded input; stride == 1 and dilation == 1 only
    kh, kw = spec.kernel
    g = spec.groups
    icg = spec.in_channels // g
    ocg = spec.out_channels // g
    w_rot = w[:, :, ::-1, ::-1]
    go_pad = np.pad(go, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    win = _conv_windows(go_pad, kh, kw, 1, 1)
    n, _, oh, ow = win.shape[:4]
    if g == spec.in_channels == spec.out_channels:
        gx_pad = np.einsum("nchwkl,ckl->nchw", win, w_rot[:, 0], optimize=True)
    elif g == 1:
        gx_pad = np.einsum("nohwkl,oikl->nihw", win, w_rot, optimize=True)
    else:
        wing = win.reshape(n, g, ocg, oh, ow, kh, kw)
        wg = w_rot.reshape(g, ocg, icg, kh, kw)
        gx_pad = np.einsum("ngohwkl,goikl->ngihw", wing, wg, optimize=True)
        gx_pad = gx_pad.reshape(n, spec.in_channels, oh, ow)
    p = spec.pad
    gx_pad = gx_pad.astype(go.dtype, copy=False)
    if p == 0:
        return gx_pad
    return gx_pad[:, :, p:-p, p:-p]


def _conv_grad_x_scatter(go: np.ndarray, w: np.ndarray, spec: ConvSpec, h: int, w_in: int) -> np.ndarray:
    # general (strided / dilated) fallback: explicit scatter-add into the padded grid
    kh, kw = spec.kernel
    p, s, d = spec.pad, spec.stride, spec.dilation
    g = spec.groups
    icg = spec.in_channels // g
    ocg = spec.out_channels // g
    n = go.shape[0]
    gx_pad = np.zeros((n, spec.in_channels, h + 2 * p, w_in + 2 * p), dtype=go.dtype)
    oh, ow = go.shape[2], go.shape[3]
    wg = w.reshape(g, ocg, icg, kh, kw)
    gog = go.reshape(n, g, ocg, oh, ow)
    for dy in range(kh):
        for dx in range(kw):
            # contribution of output grid to input positions (y*s+dy*d, x*s+dx*d)
            contrib = np.einsum("ngohw,goi->ngihw", gog, wg[:, :, :, dy, dx], optimize=True)
            contrib = contrib.reshape(n, spec.in_channels, oh, ow)
            gx_pad[
                :, :, dy * d : dy * d + oh * s : s, dx * d : dx * d + ow * s : s
            ] += contrib
    if p == 0:
        return gx_pad
    return gx_pad[:, :, p:-p, p:-p]


def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    ``weights`` is (out_c, in_c / groups, k_h, k_w); with the default
    padding of (k - 1) / 2 and stride 1 the spatial size is preserved.
    """
    if spec is None:
        raise ConfigError("conv2d requires a ConvSpec")
    _require_4d(x, "conv2d")
    n, c, h, w_in = x.data.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d input has {c} channels, spec expects {spec.in_channels}")
    kh, kw = spec.kernel
    expected_w = (spec.out_channels, spec.in_channels // spec.groups, kh, kw)
    if weights.data.shape != expected_w:
        raise ShapeError(f"conv2d weights shaped {weights.data.shape}, expected {expected_w}")
    if bias is not None and bias.data.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d bias shaped {bias.data.shape}, expected {(spec.out_channels,)}")
    p = spec.pad
    oh, ow = spec.out_size(h, w_in)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {h}x{w_in}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    out = _conv_forward_arr(xp, weights.data, spec)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = [x, weights] if bias is None else [x, weights, bias]

    def bwd(go: np.ndarray) -> None:
        if x.requires_grad or x._backward is not None:
            if spec.stride == 1 and spec.dilation == 1:
                gx = _conv_grad_x_unit_stride(go, weights.data, spec, h, w_in)
            else:
                gx = _conv_grad_x_scatter(go, weights.data, spec, h, w_in)
            _accumulate(x, gx)
        if weights.requires_grad or weights._backward is not None:
            _accumulate(weights, _conv_grad_w(xp, go, spec))
        if bias is not None and (bias.requires_grad or bias._backward is not None):
            _accumulate(bias, go.sum(axis=(0, 2, 3)))

    return _result(out, parents, bwd, "conv2d")


def pointwise_conv(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution mixing channels only."""
    out_c, in_c = weights.data.shape[0], weights.data.shape[1]
    spec = ConvSpec(in_c, out_c, (1, 1), padding=0)
    return conv2d(x, weights, bias, spec)


def depthwise_conv(x: Tensor, weights: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None) -> Tensor:
    """Per-channel convolution: groups == in_channels == out_channels."""
    if spec is None:
        c = x.data.shape[1]
        k = weights.data.shape[2]
        spec = ConvSpec(c, c, (k, k), groups=c)
    if not (spec.groups == spec.in_channels == spec.out_channels):
        raise ConfigError("depthwise_conv requires groups == in_channels == out_channels")
    return conv2d(x, weights, bias, spec)


def group_conv(x: Tensor, weights: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None) -> Tensor:
    """Grouped convolution; channels never mix across group boundaries."""
    if spec is None:
        raise ConfigError("group_conv requires a ConvSpec with groups set")
    return conv2d(x, weights, bias, spec)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BnRunningStats:
    """Exponential-moving-average statistics owned by one batch-norm layer."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    momentum: float = 0.1

    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None


BN_EPS = 1e-5


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_stats: BnRunningStats,
    mode: str = "train",
) -> Tensor:
    """Per-channel batch normalization over the (n, h, w) axes.

    Train mode normalizes with batch statistics and updates the running
    stats in place (new = (1 - momentum) * old + momentum * batch); eval
    mode uses the stored running stats and fails if they were never set.
    """
    _require_4d(x, "batch_norm")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm affine parameters must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    if mode == "eval":
        if not running_stats.initialized():
            raise ConfigError("batch_norm eval mode requires initialized running stats")
        mean = running_stats.mean.astype(x.data.dtype)
        var = running_stats.var.astype(x.data.dtype)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def bwd_eval(go: np.ndarray) -> None:
            if x.requires_grad or x._backward is not None:
                _accumulate(x, go * (gamma.data * inv_std)[None, :, None, None])
            if gamma.requires_grad or gamma._backward is not None:
                _accumulate(gamma, (go * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad or beta._backward is not None:
                _accumulate(beta, go.sum(axis=(0, 2, 3)))

        return _result(out, [x, gamma, beta], bwd_eval, "batch_norm_eval")

    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    mom = running_stats.momentum
    if running_stats.initialized():
        running_stats.mean = ((1.0 - mom) * running_stats.mean + mom * mean).astype(x.data.dtype)
        running_stats.var = ((1.0 - mom) * running_stats.var + mom * var).astype(x.data.dtype)
    else:
        running_stats.mean = mean.copy()
        running_stats.var = var.copy()

    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd_train(go: np.ndarray) -> None:
        if x.requires_grad or x._backward is not None:
            gxhat = go * gamma.data[None, :, None, None]
            mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv_std[None, :, None, None] * (gxhat - mean_g - xhat * mean_gx)
            _accumulate(x, gx.astype(x.data.dtype, copy=False))
        if gamma.requires_grad or gamma._backward is not None:
            _accumulate(gamma, (go * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad or beta._backward is not None:
            _accumulate(beta, go.sum(axis=(0, 2, 3)))

    return _result(out, [x, gamma, beta], bwd_train, "batch_norm_train")


# ---------------------------------------------------------------------------
# pooling / resampling / rearrangement


def max_pool(x: Tensor, kernel: int = 8, stride: int = 8) -> Tensor:
    """Max pooling in ceil mode: trailing partial windows are kept."""
    _require_4d(x, "max_pool")
    n, c, h, w = x.data.shape
    oh = -(-h // stride)
    ow = -(-w // stride)
    out = np.empty((n, c, oh, ow), dtype=x.data.dtype)
    argflat = np.empty((n, c, oh, ow), dtype=np.int64)
    for i in range(oh):
        y0, y1 = i * stride, min(i * stride + kernel, h)
        for j in range(ow):
            x0, x1 = j * stride, min(j * stride + kernel, w)
            window = x.data[:, :, y0:y1, x0:x1].reshape(n, c, -1)
            idx = window.argmax(axis=2)
            out[:, :, i, j] = np.take_along_axis(window, idx[:, :, None], axis=2)[:, :, 0]
            wy = idx // (x1 - x0) + y0
            wx = idx % (x1 - x0) + x0
            argflat[:, :, i, j] = wy * w + wx

    def bwd(go: np.ndarray) -> None:
        if x.requires_grad or x._backward is not None:
            gx = np.zeros((n, c, h * w), dtype=go.dtype)
            nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
            flat_idx = argflat.reshape(n, c, -1)
            np.add.at(
                gx,
                (nn[:, :, None], cc[:, :, None], flat_idx),
                go.reshape(n, c, -1),
            )
            _accumulate(x, gx.reshape(n, c, h, w))

    return _result(out, [x], bwd, "max_pool")


def _bilinear_matrix(in_size: int, out_size: int, dtype) -> np.ndarray:
    # align_corners = False: half-pixel centers, edge clamped
    m = np.zeros((out_size, in_size), dtype=np.float64)
    if in_size == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    scale = in_size / out_size
    pos = (np.arange(out_size) + 0.5) * scale - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo_c = np.clip(lo, 0, in_size - 1)
    hi_c = np.clip(lo + 1, 0, in_size - 1)
    for i in range(out_size):
        m[i, lo_c[i]] += 1.0 - frac[i]
        m[i, hi_c[i]] += frac[i]
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize to (out_h, out_w), align-corners=false convention."""
    _require_4d(x, "bilinear_upsample")
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_upsample target size must be positive")
    n, c, h, w = x.data.shape
    rows = _bilinear_matrix(h, out_h, x.data.dtype)
    cols = _bilinear_matrix(w, out_w, x.data.dtype)
    out = np.einsum("oh,nchw,pw->ncop", rows, x.data, cols, optimize=True)
    out = out.astype(x.data.dtype, copy=False)

    def bwd(go: np.ndarray) -> None:
        if x.requires_grad or x._backward is not None:
            gx = np.einsum("oh,ncop,pw->nchw", rows, go, cols, optimize=True)
            _accumulate(x, gx.astype(x.data.dtype, copy=False))

    return _result(out, [x], bwd, "bilinear_upsample")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (n, c*r^2, h, w) into (n, c, h*r, w*r) sub-pixel layout."""
    _require_4d(x, "pixel_shuffle")
    n, c, h, w = x.data.shape
    if r < 1:
        raise ConfigError("pixel_shuffle factor must be >= 1")
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle needs channels divisible by r^2, got {c} and r={r}")
    oc = c // (r * r)
    out = (
        x.data.reshape(n, oc, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, oc, h * r, w * r)
    )

    def bwd(go: np.ndarray) -> None:
        if x.requires_grad or x._backward is not None:
            gx = (
                go.reshape(n, oc, h, r, w, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, c, h, w)
            )
            _accumulate(x, gx)

    return _result(np.ascontiguousarray(out), [x], bwd, "pixel_shuffle")


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    """Split evenly along the channel axis; exact inverse of concat_channels."""
    _require_4d(x, "split_channels")
    c = x.data.shape[1]
    if c % parts:
        raise ShapeError(f"cannot split {c} channels into {parts} equal parts")
    step = c // parts
    outs = []
    for i in range(parts):
        lo = i * step

        def make_bwd(lo=lo):
            def bwd(go: np.ndarray) -> None:
                if x.requires_grad or x._backward is not None:
                    gx = np.zeros_like(x.data)
                    gx[:, lo : lo + step] = go
                    _accumulate(x, gx)

            return bwd

        piece = _result(x.data[:, lo : lo + step].copy(), [x], make_bwd(), "split_channels")
        outs.append(piece)
    return outs


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (matching n, h, w required)."""
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].data.shape
    for p in parts:
        _require_4d(p, "concat_channels")
        if p.data.shape[0] != ref[0] or p.data.shape[2:] != ref[2:]:
            raise ShapeError("concat_channels inputs disagree on (n, h, w)")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def bwd(go: np.ndarray) -> None:
        lo = 0
        for p, sz in zip(parts, sizes):
            if p.requires_grad or p._backward is not None:
                _accumulate(p, go[:, lo : lo + sz])
            lo += sz

    return _result(out, list(parts), bwd, "concat_channels")


# ---------------------------------------------------------------------------
# elementwise


def ew_add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"ew_add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def bwd(go: np.ndarray) -> None:
        _accumulate(a, go)
        _accumulate(b, go)

    return _result(out, [a, b], bwd, "ew_add")


def ew_sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"ew_sub shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data - b.data

    def bwd(go: np.ndarray) -> None:
        _accumulate(a, go)
        _accumulate(b, -go)

    return _result(out, [a, b], bwd, "ew_sub")


def ew_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"ew_mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def bwd(go: np.ndarray) -> None:
        _accumulate(a, go * b.data)
        _accumulate(b, go * a.data)

    return _result(out, [a, b], bwd, "ew_mul")


def scalar_scale(x: Tensor, lam: Tensor | float) -> Tensor:
    """Multiply by a scalar; a 0-d Tensor participates in gradients."""
    if isinstance(lam, Tensor):
        if lam.data.ndim != 0:
            raise ShapeError("scalar_scale coefficient must be 0-d")
        out = x.data * lam.data

        def bwd(go: np.ndarray) -> None:
            _accumulate(x, go * lam.data)
            _accumulate(lam, np.asarray((go * x.data).sum(), dtype=lam.data.dtype))

        return _result(out, [x, lam], bwd, "scalar_scale")

    factor = float(lam)
    out = x.data * factor

    def bwd_const(go: np.ndarray) -> None:
        _accumulate(x, go * factor)

    return _result(out, [x], bwd_const, "scalar_scale")


def activation(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact-erf form: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = x.data * phi_cdf

    def bwd(go: np.ndarray) -> None:
        if x.requires_grad or x._backward is not None:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
            _accumulate(x, go * (phi_cdf + x.data * pdf))

    return _result(out.astype(x.data.dtype, copy=False), [x], bwd, "activation")


def abs_(x: Tensor) -> Tensor:
    """Elementwise |x| with subgradient 0 at 0."""
    out = np.abs(x.data)

    def bwd(go: np.ndarray) -> None:
        _accumulate(x, go * np.sign(x.data))

    return _result(out, [x], bwd, "abs")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(go: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(go, x.data.shape).copy())

    return _result(out, [x], bwd, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    inv = 1.0 / x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bwd(go: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(go * inv, x.data.shape).astype(x.data.dtype))

    return _result(out, [x], bwd, "mean_all")


def pick(x: Tensor, index: tuple) -> Tensor:
    """Select a sub-tensor by basic indexing (used for ERF center readout)."""
    out = np.asarray(x.data[index])

    def bwd(go: np.ndarray) -> None:
        if x.requires_grad or x._backward is not None:
            gx = np.zeros_like(x.data)
            gx[index] = go
            _accumulate(x, gx)

    return _result(out.copy(), [x], bwd, "pick")


def channel_affine(x: Tensor, scale: Tensor) -> Tensor:
    """Scale each channel by a learnable per-channel coefficient."""
    _require_4d(x, "channel_affine")
    c = x.data.shape[1]
    if scale.data.shape != (c,):
        raise ShapeError(f"channel_affine scale must have shape ({c},)")
    out = x.data * scale.data[None, :, None, None]

    def bwd(go: np.ndarray) -> None:
        _accumulate(x, go * scale.data[None, :, None, None])
        if scale.requires_grad or scale._backward is not None:
            _accumulate(scale, (go * x.data).sum(axis=(0, 2, 3)))

    return _result(out, [x, scale], bwd, "channel_affine")


def broadcast_channels(x: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel map across ``channels`` channels."""
    _require_4d(x, "broadcast_channels")
    if x.data.shape[1] != 1:
        raise ShapeError("broadcast_channels expects a single-channel input")
    out = np.broadcast_to(x.data, (x.data.shape[0], channels) + x.data.shape[2:]).copy()

    def bwd(go: np.ndarray) -> None:
        _accumulate(x, go.sum(axis=1, keepdims=True))

    return _result(out, [x], bwd, "broadcast_channels")


# ---------------------------------------------------------------------------
# frequency domain


def dft2(x: Tensor) -> tuple[Tensor, Tensor]:
    """Unnormalized forward 2-D DFT of each (n, c) plane.

    Returns (real, imaginary) component tensors.  Gradients flow back via
    the adjoint transform, so L1 penalties on the components are cleanly
    differentiable.
    """
    _require_4d(x, "dft2")
    spec = np.fft.fft2(x.data.astype(np.float64), axes=(2, 3))
    re = spec.real.astype(x.data.dtype)
    im = spec.imag.astype(x.data.dtype)

    def bwd_re(go: np.ndarray) -> None:
        if x.requires_grad or x._backward is not None:
            g = np.fft.fft2(go.astype(np.float64), axes=(2, 3)).real
            _accumulate(x, g.astype(x.data.dtype))

    def bwd_im(go: np.ndarray) -> None:
        if x.requires_grad or x._backward is not None:
            g = np.fft.fft2(-1j * go.astype(np.float64), axes=(2, 3)).real
            _accumulate(x, g.astype(x.data.dtype))

    return (
        _result(re, [x], bwd_re, "dft2_re"),
        _result(im, [x], bwd_im, "dft2_im"),
    )
