"""Minimal reverse-mode differentiable array engine.

Supplies exactly the operations the canopy-height pipeline needs: 2-D
convolution, depthwise convolution, content-aware reassembly, elementwise
nonlinearities, softmax, reductions, batch normalization, and a
momentum-SGD optimizer. Arrays are channel-first ``(C, h, w)`` numpy
arrays (or scalars); gradients are plain numpy buffers of the same shape.

Not a general autodiff system: no broadcasting beyond the cases used
here, no higher-order gradients.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------

_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class DiffArray:
    """A value in the computation graph.

    ``values`` holds the forward result; ``grad`` accumulates d(loss)/d(self)
    during a backward pass. Repeated backward calls accumulate until grads
    are zeroed.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, parents=(), backward_fn=None, requires_grad=False):
        self.values = np.asarray(values)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"DiffArray(shape={self.values.shape}, requires_grad={self.requires_grad})"


class ParamTensor(DiffArray):
    """Learnable leaf with a stable name for serialization."""

    __slots__ = ("name",)

    def __init__(self, name: str, values):
        super().__init__(np.asarray(values), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.values.shape})"


def constant(values) -> DiffArray:
    """Wrap an array as a graph constant (no gradient)."""
    return DiffArray(np.asarray(values))


def _lift(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else constant(x)


def _node(values, parents, backward_fn) -> DiffArray:
    if not _grad_enabled:
        return DiffArray(values)
    return DiffArray(values, parents=parents, backward_fn=backward_fn)


def backward(loss: DiffArray) -> None:
    """Propagate gradients of a scalar loss to every reachable parameter.

    Gradients accumulate across calls; callers zero them between steps.
    """
    if loss.values.ndim != 0 and loss.values.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        return

    topo: list[DiffArray] = []
    visited: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = loss.grad + np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[DiffArray]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def add(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    if a.values.shape != b.values.shape:
        raise ValueError(f"add shape mismatch: {a.values.shape} vs {b.values.shape}")
    out_values = a.values + b.values

    def _bw(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _node(out_values, (a, b), _bw)


def sub(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    if a.values.shape != b.values.shape:
        raise ValueError(f"sub shape mismatch: {a.values.shape} vs {b.values.shape}")
    out_values = a.values - b.values

    def _bw(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad -= g

    return _node(out_values, (a, b), _bw)


def mul(a, b) -> DiffArray:
    a, b = _lift(a), _lift(b)
    if a.values.shape != b.values.shape:
        raise ValueError(f"mul shape mismatch: {a.values.shape} vs {b.values.shape}")
    out_values = a.values * b.values

    def _bw(g):
        if a.requires_grad:
            a.grad += g * b.values
        if b.requires_grad:
            b.grad += g * a.values

    return _node(out_values, (a, b), _bw)


def scale(a, k: float) -> DiffArray:
    a = _lift(a)
    k = float(k)
    out_values = a.values * k

    def _bw(g):
        if a.requires_grad:
            a.grad += g * k

    return _node(out_values, (a,), _bw)


def add_scalar(a, k: float) -> DiffArray:
    a = _lift(a)
    out_values = a.values + float(k)

    def _bw(g):
        if a.requires_grad:
            a.grad += g

    return _node(out_values, (a,), _bw)


def relu(a) -> DiffArray:
    a = _lift(a)
    out_values = np.maximum(a.values, 0.0)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * (a.values > 0)

    return _node(out_values, (a,), _bw)


def sigmoid(a) -> DiffArray:
    a = _lift(a)
    # stable piecewise form, avoids overflow in exp
    v = a.values
    out_values = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                          np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out_values = out_values.astype(v.dtype, copy=False)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * out_values * (1.0 - out_values)

    return _node(out_values, (a,), _bw)


def exp(a) -> DiffArray:
    a = _lift(a)
    out_values = np.exp(a.values)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * out_values

    return _node(out_values, (a,), _bw)


def log(a) -> DiffArray:
    a = _lift(a)
    bad = a.values <= 0
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"log of non-positive value {a.values[idx]!r} at index {idx}")
    out_values = np.log(a.values)

    def _bw(g):
        if a.requires_grad:
            a.grad += g / a.values

    return _node(out_values, (a,), _bw)


def square(a) -> DiffArray:
    a = _lift(a)
    out_values = a.values * a.values

    def _bw(g):
        if a.requires_grad:
            a.grad += g * 2.0 * a.values

    return _node(out_values, (a,), _bw)


def pow_const(a, p: float) -> DiffArray:
    a = _lift(a)
    p = float(p)
    out_values = a.values ** p

    def _bw(g):
        if a.requires_grad:
            a.grad += g * p * a.values ** (p - 1.0)

    return _node(out_values, (a,), _bw)


def clamp(a, lo: float, hi: float) -> DiffArray:
    """Clip values to [lo, hi]; gradient is zero outside the interval."""
    a = _lift(a)
    out_values = np.clip(a.values, lo, hi)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * ((a.values >= lo) & (a.values <= hi))

    return _node(out_values, (a,), _bw)


ELEMENTWISE: dict[str, Callable[[DiffArray], DiffArray]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "square": square,
    "exp": exp,
}


def elementwise(a, fn: str) -> DiffArray:
    """Dispatch a named pointwise function with its registered backward rule."""
    try:
        op = ELEMENTWISE[fn]
    except KeyError:
        raise ValueError(f"unknown elementwise function {fn!r}") from None
    return op(a)


# ---------------------------------------------------------------------------
# Softmax and reductions
# ---------------------------------------------------------------------------


def softmax(a, axis: int) -> DiffArray:
    """Numerically stabilized softmax along one axis."""
    a = _lift(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_values = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        if a.requires_grad:
            gy = g * out_values
            a.grad += gy - out_values * gy.sum(axis=axis, keepdims=True)

    return _node(out_values, (a,), _bw)


def sum_all(a) -> DiffArray:
    a = _lift(a)
    out_values = np.asarray(a.values.sum(), dtype=a.values.dtype)

    def _bw(g):
        if a.requires_grad:
            a.grad += g

    return _node(out_values, (a,), _bw)


def mean_all(a) -> DiffArray:
    a = _lift(a)
    n = a.values.size
    out_values = np.asarray(a.values.mean(), dtype=a.values.dtype)

    def _bw(g):
        if a.requires_grad:
            a.grad += g / n

    return _node(out_values, (a,), _bw)


def sum_axis(a, axis: int, keepdims: bool = False) -> DiffArray:
    a = _lift(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.grad += gg

    return _node(out_values, (a,), _bw)


# ---------------------------------------------------------------------------
# Shape ops (flip / crop / pad / reshape) for view transforms
# ---------------------------------------------------------------------------


def flip(a, axis: int) -> DiffArray:
    a = _lift(a)
    out_values = np.flip(a.values, axis=axis).copy()

    def _bw(g):
        if a.requires_grad:
            a.grad += np.flip(g, axis=axis)

    return _node(out_values, (a,), _bw)


def crop2d(a, row0: int, col0: int, height: int, width: int) -> DiffArray:
    """Spatial crop of a (..., h, w) array."""
    a = _lift(a)
    h, w = a.values.shape[-2:]
    if row0 < 0 or col0 < 0 or row0 + height > h or col0 + width > w:
        raise ValueError(
            f"crop window ({row0},{col0})+({height},{width}) outside bounds ({h},{w})")
    out_values = a.values[..., row0:row0 + height, col0:col0 + width].copy()

    def _bw(g):
        if a.requires_grad:
            a.grad[..., row0:row0 + height, col0:col0 + width] += g

    return _node(out_values, (a,), _bw)


def pad2d(a, pad: int) -> DiffArray:
    """Zero-pad the two trailing spatial axes by `pad` on every side."""
    a = _lift(a)
    if pad < 0:
        raise ValueError("pad must be non-negative")
    width = [(0, 0)] * (a.values.ndim - 2) + [(pad, pad), (pad, pad)]
    out_values = np.pad(a.values, width)

    def _bw(g):
        if a.requires_grad:
            a.grad += g[..., pad:g.shape[-2] - pad, pad:g.shape[-1] - pad]

    return _node(out_values, (a,), _bw)


def reshape(a, shape) -> DiffArray:
    a = _lift(a)
    out_values = a.values.reshape(shape)

    def _bw(g):
        if a.requires_grad:
            a.grad += g.reshape(a.values.shape)

    return _node(out_values, (a,), _bw)


def add_channel_bias(x, bias) -> DiffArray:
    """Add a per-channel bias (C,) to a (C, h, w) array."""
    x, bias = _lift(x), _lift(bias)
    if x.values.shape[0] != bias.values.shape[0] or bias.values.ndim != 1:
        raise ValueError(
            f"bias shape {bias.values.shape} does not match channels {x.values.shape[0]}")
    out_values = x.values + bias.values[:, None, None]

    def _bw(g):
        if x.requires_grad:
            x.grad += g
        if bias.requires_grad:
            bias.grad += g.sum(axis=(1, 2))

    return _node(out_values, (x, bias), _bw)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _pad_spatial(values: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return values
    width = [(0, 0)] * (values.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(values, width, mode=mode)


def _windows(x_pad: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided view of all k-by-k windows: (C, h', w', k, k)."""
    win = np.lib.stride_tricks.sliding_window_view(x_pad, (k, k), axis=(-2, -1))
    return win[..., ::stride, ::stride, :, :]


def _scatter_windows(dx_pad: np.ndarray, dwin: np.ndarray, k: int, stride: int) -> None:
    """Accumulate window gradients (C, h', w', k, k) back into the padded input."""
    hp, wp = dwin.shape[1], dwin.shape[2]
    for u in range(k):
        for v in range(k):
            dx_pad[:, u:u + stride * hp:stride, v:v + stride * wp:stride] += dwin[:, :, :, u, v]


def _unpad_grad_edge(dx_pad: np.ndarray, pad: int) -> np.ndarray:
    """Collapse gradient of an edge-replicated padding back onto the source."""
    if pad == 0:
        return dx_pad
    dx = dx_pad[..., pad:-pad, pad:-pad].copy()
    core = dx_pad[..., pad:-pad, :]
    dx[..., 0] += core[..., :pad].sum(axis=-1)
    dx[..., -1] += core[..., -pad:].sum(axis=-1)
    top = dx_pad[..., :pad, :].sum(axis=-2)
    bot = dx_pad[..., -pad:, :].sum(axis=-2)
    for band, row in ((top, 0), (bot, -1)):
        dx[..., row, :] += band[..., pad:-pad]
        dx[..., row, 0] += band[..., :pad].sum(axis=-1)
        dx[..., row, -1] += band[..., -pad:].sum(axis=-1)
    return dx


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0,
           pad_mode: str = "zero") -> DiffArray:
    """Cross-correlate (C_in, h, w) with (C_out, C_in, k, k).

    Output spatial size is floor((h + 2*padding - k) / stride) + 1.
    `pad_mode` "edge" replicates border values instead of zero-filling.
    """
    x, kernel = _lift(x), _lift(kernel)
    if x.values.ndim != 3 or kernel.values.ndim != 4:
        raise ValueError(
            f"conv2d expects input (C,h,w) and kernel (O,C,k,k); "
            f"got {x.values.shape} and {kernel.values.shape}")
    c_out, c_in, kh, kw = kernel.values.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    if x.values.shape[0] != c_in:
        raise ValueError(
            f"conv2d channel mismatch: input {x.values.shape} vs kernel {kernel.values.shape}")
    h, w = x.values.shape[1:]
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"input {x.values.shape} too small for kernel {kernel.values.shape} "
            f"with padding {padding}")

    mode = "edge" if pad_mode == "edge" else "constant"
    x_pad = _pad_spatial(x.values, padding, mode)
    win = _windows(x_pad, kh, stride)                        # (C_in, h', w', k, k)
    out_values = np.tensordot(kernel.values, win, axes=([1, 2, 3], [0, 3, 4]))
    out_values = np.ascontiguousarray(out_values)            # (C_out, h', w')
    if bias is not None:
        bias = _lift(bias)
        out_values = out_values + bias.values[:, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bw(g):
        if kernel.requires_grad:
            kernel.grad += np.tensordot(g, win, axes=([1, 2], [1, 2]))
        if bias is not None and bias.requires_grad:
            bias.grad += g.sum(axis=(1, 2))
        if x.requires_grad:
            dwin = np.tensordot(g, kernel.values, axes=([0], [0]))  # (h', w', C_in, k, k)
            dwin = np.moveaxis(dwin, 2, 0)
            dx_pad = np.zeros_like(x_pad)
            _scatter_windows(dx_pad, dwin, kh, stride)
            if padding == 0:
                x.grad += dx_pad
            elif mode == "edge":
                x.grad += _unpad_grad_edge(dx_pad, padding)
            else:
                x.grad += dx_pad[:, padding:-padding, padding:-padding]

    return _node(out_values, parents, _bw)


def depthwise_conv(x, kernel, stride: int = 1, padding: int = 0,
                   pad_mode: str = "zero") -> DiffArray:
    """Convolve each channel with its own (C,k,k) kernel or a shared (k,k) one.

    `pad_mode` "edge" replicates border values so that a normalized kernel
    preserves constant fields exactly.
    """
    x, kernel = _lift(x), _lift(kernel)
    if x.values.ndim != 3:
        raise ValueError(f"depthwise_conv expects input (C,h,w), got {x.values.shape}")
    shared = kernel.values.ndim == 2
    if not shared and kernel.values.ndim != 3:
        raise ValueError(f"kernel must be (k,k) or (C,k,k), got {kernel.values.shape}")
    k = kernel.values.shape[-1]
    if kernel.values.shape[-2] != k or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kernel.values.shape}")
    if not shared and kernel.values.shape[0] != x.values.shape[0]:
        raise ValueError(
            f"per-channel kernel count {kernel.values.shape[0]} does not match "
            f"input channels {x.values.shape[0]}")

    mode = "edge" if pad_mode == "edge" else "constant"
    x_pad = _pad_spatial(x.values, padding, mode)
    win = _windows(x_pad, k, stride)                         # (C, h', w', k, k)
    kv = kernel.values if not shared else kernel.values[None, :, :]
    out_values = np.einsum("cijuv,cuv->cij", win, np.broadcast_to(
        kv, (x.values.shape[0], k, k)), optimize=True)

    def _bw(g):
        if kernel.requires_grad:
            dk = np.einsum("cijuv,cij->cuv", win, g, optimize=True)
            kernel.grad += dk.sum(axis=0) if shared else dk
        if x.requires_grad:
            kb = np.broadcast_to(kv, (x.values.shape[0], k, k))
            dwin = g[:, :, :, None, None] * kb[:, None, None, :, :]
            dx_pad = np.zeros_like(x_pad)
            _scatter_windows(dx_pad, dwin, k, stride)
            if padding == 0:
                x.grad += dx_pad
            elif mode == "edge":
                x.grad += _unpad_grad_edge(dx_pad, padding)
            else:
                x.grad += dx_pad[:, padding:-padding, padding:-padding]

    return _node(out_values, (x, kernel), _bw)


def carafe_reassemble(x, weights, factor: int, k_up: int) -> DiffArray:
    """Content-aware reassembly: each output cell is a weighted sum of a
    k_up-by-k_up source neighborhood.

    x: (C, h, w); weights: (factor**2, k_up**2, h, w), already normalized.
    Output: (C, factor*h, factor*w). Source windows use edge replication so
    convex weights preserve constant fields at the borders.
    """
    x, weights = _lift(x), _lift(weights)
    c, h, w = x.values.shape
    f2, k2, hw_h, hw_w = weights.values.shape
    if f2 != factor * factor or k2 != k_up * k_up or (hw_h, hw_w) != (h, w):
        raise ValueError(
            f"weights shape {weights.values.shape} inconsistent with input "
            f"{x.values.shape}, factor {factor}, k_up {k_up}")
    pad = k_up // 2
    x_pad = _pad_spatial(x.values, pad, "edge")
    win = _windows(x_pad, k_up, 1).reshape(c, h, w, k2)      # (C, h, w, k2)
    # out_sub[p, c, i, j] = sum_q weights[p, q, i, j] * win[c, i, j, q]
    out_sub = np.einsum("pqij,cijq->pcij", weights.values, win, optimize=True)
    out_values = (out_sub.reshape(factor, factor, c, h, w)
                  .transpose(2, 3, 0, 4, 1)
                  .reshape(c, h * factor, w * factor))
    out_values = np.ascontiguousarray(out_values)

    def _bw(g):
        g_sub = (g.reshape(c, h, factor, w, factor)
                 .transpose(2, 4, 0, 1, 3)
                 .reshape(f2, c, h, w))
        if weights.requires_grad:
            weights.grad += np.einsum("pcij,cijq->pqij", g_sub, win, optimize=True)
        if x.requires_grad:
            dwin = np.einsum("pcij,pqij->cijq", g_sub, weights.values, optimize=True)
            dx_pad = np.zeros_like(x_pad)
            _scatter_windows(dx_pad, dwin.reshape(c, h, w, k_up, k_up), k_up, 1)
            x.grad += _unpad_grad_edge(dx_pad, pad)

    return _node(out_values, (x, weights), _bw)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


class BatchNormState:
    """Running per-channel statistics, updated in training mode."""

    def __init__(self, channels: int, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batchnorm2d(x, gamma, beta, state: BatchNormState, training: bool,
                momentum: float = 0.1, eps: float = 1e-5) -> DiffArray:
    """Per-channel affine normalization over the spatial axes of (C, h, w).

    Training mode normalizes by batch statistics and updates the running
    buffers; inference normalizes by the running statistics.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    c = x.values.shape[0]
    if gamma.values.shape != (c,) or beta.values.shape != (c,):
        raise ValueError(
            f"norm params {gamma.values.shape}/{beta.values.shape} do not match "
            f"channels {c}")

    if training:
        mean = x.values.mean(axis=(1, 2))
        var = x.values.var(axis=(1, 2))
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var = (1 - momentum) * state.running_var + momentum * var
    else:
        mean = state.running_mean.astype(x.values.dtype, copy=False)
        var = state.running_var.astype(x.values.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mean[:, None, None]) * inv_std[:, None, None]
    out_values = (gamma.values[:, None, None] * xhat + beta.values[:, None, None]).astype(
        x.values.dtype, copy=False)

    def _bw(g):
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=(1, 2))
        if beta.requires_grad:
            beta.grad += g.sum(axis=(1, 2))
        if x.requires_grad:
            gs = gamma.values[:, None, None] * inv_std[:, None, None]
            if training:
                gm = g.mean(axis=(1, 2))[:, None, None]
                gxm = (g * xhat).mean(axis=(1, 2))[:, None, None]
                x.grad += gs * (g - gm - xhat * gxm)
            else:
                x.grad += gs * g

    return _node(out_values, (x, gamma, beta), _bw)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class SGD:
    """Momentum SGD: v <- momentum*v + grad; p <- p - lr*v; grads zeroed.

    clip_grad, when set, limits each gradient element to [-clip, clip]
    before the update (tames the steep curvature of the uncertainty term
    without touching the loss itself).
    """

    def __init__(self, params: Sequence[ParamTensor], lr: float = 1e-2,
                 momentum: float = 0.9, clip_grad: float | None = None):
        names = [p.name for p in params]
        if len(names) != len(set(names)):
            raise ValueError("parameter names must be unique within a set")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_grad = clip_grad
        self._velocity = {p.name: np.zeros_like(p.values) for p in params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise RuntimeError(f"non-finite gradient in parameter {p.name!r}")
            g = p.grad
            if self.clip_grad is not None:
                g = np.clip(g, -self.clip_grad, self.clip_grad)
            v = self._velocity[p.name]
            v *= self.momentum
            v += g
            p.values -= lr * v
            p.grad[...] = 0.0


def sgd_step(params: Sequence[ParamTensor], lr: float, momentum: float,
             velocities: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """One-shot functional form of the SGD update; returns the velocity state."""
    if velocities is None:
        velocities = {p.name: np.zeros_like(p.values) for p in params}
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise RuntimeError(f"non-finite gradient in parameter {p.name!r}")
        v = velocities[p.name]
        v *= momentum
        v += p.grad
        p.values -= lr * v
        p.grad[...] = 0.0
    return velocities


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr to 0 over total_steps."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps) / total_steps
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * t))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_conv_kernel(rng: np.random.Generator, name: str, c_out: int, c_in: int,
                     k: int, dtype=np.float32) -> ParamTensor:
    """Fan-in-scaled uniform init: bound = sqrt(1 / (c_in * k * k))."""
    bound = float(np.sqrt(1.0 / (c_in * k * k)))
    values = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
    return ParamTensor(name, values)


def init_bias(name: str, channels: int, dtype=np.float32) -> ParamTensor:
    return ParamTensor(name, np.zeros(channels, dtype=dtype))


# ---------------------------------------------------------------------------
# Parameter-set serialization
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


def save_params(path, params: Sequence[tuple[str, np.ndarray]] | Sequence[ParamTensor],
                meta: dict | None = None) -> None:
    """Single-file format: one JSON manifest line (name, shape, dtype, byte
    offset per entry, plus optional meta), then concatenated little-endian
    raw values. Round-trips bit-exactly."""
    entries = []
    payload = bytearray()
    for p in params:
        name, values = (p.name, p.values) if isinstance(p, DiffArray) else p
        dtype = str(values.dtype)
        if dtype not in _DTYPE_TAGS:
            raise ValueError(f"unsupported parameter dtype {dtype}")
        raw = np.ascontiguousarray(values, dtype=_DTYPE_TAGS[dtype]).tobytes()
        entries.append({"name": name, "shape": list(values.shape),
                        "dtype": dtype, "offset": len(payload)})
        payload.extend(raw)
    names = [e["name"] for e in entries]
    if len(names) != len(set(names)):
        raise ValueError("parameter names must be unique within a set")
    manifest = {"format": "canopyhm-params", "params": entries}
    if meta:
        manifest["meta"] = meta
    header = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(bytes(payload))


def load_params_full(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"malformed parameter file header: {e}") from None
    if header.get("format") != "canopyhm-params":
        raise ValueError("not a parameter-set file")
    out = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        tag = _DTYPE_TAGS[entry["dtype"]]
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(tag).itemsize
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise ValueError(
                f"parameter payload truncated: need {start + nbytes} bytes, have {len(payload)}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=tag).reshape(shape)
        out[entry["name"]] = arr.astype(entry["dtype"])
    return out, header.get("meta", {})


def load_params(path) -> dict[str, np.ndarray]:
    return load_params_full(path)[0]
