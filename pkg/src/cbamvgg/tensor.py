"""Dense tensor primitives: conv / pool / dense / activations with exact VJPs.

Conventions used throughout the library:

* image-like data is laid out ``(batch, channels, height, width)``, row-major;
* parameters and activations are stored float32, every reduction (matmul
  accumulation, means, softmax) runs in float64 and is cast back to the
  input dtype, so results are deterministic across runs;
* ``softmax`` always returns float64 so probability rows sum to 1 within
  1e-9 regardless of the activation dtype;
* convolution is cross-correlation (no kernel flip);
* max-pool ties break to the first occurrence in row-major scan order,
  which keeps gradient and relevance routing deterministic.

Every public operation validates finiteness of its inputs and never emits
NaN/Inf for finite inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import NonFiniteError, ShapeError

Array = np.ndarray


def require_finite(name: str, x: Array) -> None:
    """Raise NonFiniteError if ``x`` contains NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains non-finite values")


def _out_dtype(*arrays: Array) -> np.dtype:
    return np.result_type(*(a.dtype for a in arrays))


@dataclass
class LayerIO:
    """Forward cache of one layer: input, output, and whatever the exact
    backward pass needs (e.g. max-pool winner coordinates)."""

    input: Array
    output: Array
    aux: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_geometry(x: Array, kernel: Array, stride: int, padding: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (N,C,H,W), got {x.ndim}-D")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D (Cout,Cin,kh,kw), got {kernel.ndim}-D")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d padding must be >= 0, got {padding}")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, kernel expects {ci}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return oh, ow


def _im2col(xp: Array, kh: int, kw: int, stride: int, oh: int, ow: int) -> Array:
    """Gather kernel windows into columns of shape (N, C*kh*kw, oh*ow)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols: Array, shape: tuple, kh: int, kw: int, stride: int,
            padding: int, oh: int, ow: int) -> Array:
    """Scatter-add column gradients back onto the (unpadded) input."""
    n, c, h, w = shape
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    g6 = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += g6[:, :, i, j]
    if padding:
        return gxp[:, :, padding : padding + h, padding : padding + w]
    return gxp


def conv2d(x: Array, kernel: Array, bias: Array, stride: int = 1, padding: int = 0) -> Array:
    """Cross-correlate ``x`` (N,Cin,H,W) with ``kernel`` (Cout,Cin,kh,kw).

    Output spatial extent is ``floor((H + 2*padding - kh)/stride) + 1``
    (same for width); every output cell is the window sum plus bias.
    """
    require_finite("conv2d input", x)
    require_finite("conv2d kernel", kernel)
    require_finite("conv2d bias", bias)
    oh, ow = _conv_geometry(x, kernel, stride, padding)
    co = kernel.shape[0]
    if bias.shape != (co,):
        raise ShapeError(f"conv2d bias must have shape ({co},), got {bias.shape}")
    n = x.shape[0]
    kh, kw = kernel.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, oh, ow).astype(np.float64)
    w2 = kernel.reshape(co, -1).astype(np.float64)
    y = np.matmul(w2, cols) + bias.astype(np.float64)[:, None]
    return y.reshape(n, co, oh, ow).astype(_out_dtype(x, kernel))


def conv2d_vjp(x: Array, kernel: Array, grad_out: Array, stride: int = 1,
               padding: int = 0) -> tuple[Array, Array, Array]:
    """Exact VJP of conv2d: returns (grad_input, grad_kernel, grad_bias)."""
    oh, ow = _conv_geometry(x, kernel, stride, padding)
    n = x.shape[0]
    co, ci, kh, kw = kernel.shape
    if grad_out.shape != (n, co, oh, ow):
        raise ShapeError(
            f"conv2d_vjp upstream gradient must have shape {(n, co, oh, ow)}, got {grad_out.shape}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, oh, ow).astype(np.float64)
    g2 = grad_out.reshape(n, co, oh * ow).astype(np.float64)
    gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
    gb = g2.sum(axis=(0, 2))
    gcols = np.matmul(kernel.reshape(co, -1).T.astype(np.float64), g2)
    gx = _col2im(gcols, x.shape, kh, kw, stride, padding, oh, ow)
    dt = _out_dtype(x, kernel)
    return gx.astype(dt), gw.astype(dt), gb.astype(dt)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def maxpool2d(x: Array, size: int, stride: int) -> tuple[Array, tuple[Array, Array]]:
    """Window max over (size x size) patches.

    Returns the pooled tensor and winner coordinates ``(rows, cols)``, the
    absolute input position of each window's argmax (first occurrence on
    ties, row-major scan).
    """
    require_finite("maxpool2d input", x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d input must be 4-D (N,C,H,W), got {x.ndim}-D")
    if stride < 1 or size < 1:
        raise ShapeError("maxpool2d size and stride must be >= 1")
    n, c, h, w = x.shape
    if size > h or size > w:
        raise ShapeError(f"maxpool2d window {size}x{size} larger than input {h}x{w}")
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    windows = np.empty((n, c, size * size, oh, ow), dtype=x.dtype)
    for i in range(size):
        for j in range(size):
            windows[:, :, i * size + j] = x[:, :, i : i + oh * stride : stride,
                                            j : j + ow * stride : stride]
    flat = windows.argmax(axis=2)
    y = np.take_along_axis(windows, flat[:, :, None], axis=2)[:, :, 0]
    base_r = (np.arange(oh) * stride)[:, None]
    base_c = (np.arange(ow) * stride)[None, :]
    rows = base_r + flat // size
    cols = base_c + flat % size
    return y, (rows, cols)


def maxpool2d_vjp(input_shape: tuple, winners: tuple[Array, Array], grad_out: Array) -> Array:
    """Route the upstream gradient exclusively to winner positions."""
    rows, cols = winners
    n, c = input_shape[:2]
    gx = np.zeros(input_shape, dtype=np.float64)
    nidx = np.arange(n)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]
    # overlapping windows can share a winner, so accumulate
    np.add.at(gx, (nidx, cidx, rows, cols), grad_out.astype(np.float64))
    return gx.astype(grad_out.dtype)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense(x: Array, weight: Array, bias: Array) -> Array:
    """Affine map ``x @ weight + bias`` for x (N,D), weight (D,K), bias (K,)."""
    require_finite("dense input", x)
    require_finite("dense weight", weight)
    require_finite("dense bias", bias)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("dense expects 2-D input and weight")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"dense inner dimension mismatch: input has {x.shape[1]} features, "
            f"weight expects {weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
    y = np.matmul(x.astype(np.float64), weight.astype(np.float64)) + bias.astype(np.float64)
    return y.astype(_out_dtype(x, weight))


def dense_vjp(x: Array, weight: Array, grad_out: Array) -> tuple[Array, Array, Array]:
    """VJP of dense: grad_input = upstream @ weight.T, plus parameter grads."""
    g = grad_out.astype(np.float64)
    gx = np.matmul(g, weight.astype(np.float64).T)
    gw = np.matmul(x.astype(np.float64).T, g)
    gb = g.sum(axis=0)
    dt = _out_dtype(x, weight)
    return gx.astype(dt), gw.astype(dt), gb.astype(dt)


# ---------------------------------------------------------------------------
# activations and softmax
# ---------------------------------------------------------------------------

def activation(x: Array, kind: str) -> Array:
    """Element-wise relu (max(x, 0)) or sigmoid (1/(1+exp(-x)))."""
    require_finite(f"{kind} input", x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        # split by sign for overflow safety
        x64 = x.astype(np.float64)
        out = np.empty_like(x64)
        pos = x64 >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x64[pos]))
        ex = np.exp(x64[~pos])
        out[~pos] = ex / (1.0 + ex)
        out = out.astype(x.dtype)
        # the true sigmoid never attains 0 or 1, but rounding at extreme
        # inputs can; pin to the nearest representable values inside (0,1)
        one = x.dtype.type(1)
        zero = x.dtype.type(0)
        return np.clip(out, np.nextafter(zero, one), np.nextafter(one, zero))
    raise ShapeError(f"unknown activation kind {kind!r}")


def relu_vjp(x: Array, grad_out: Array) -> Array:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def sigmoid_vjp(out: Array, grad_out: Array) -> Array:
    o = out.astype(np.float64)
    return (grad_out.astype(np.float64) * o * (1.0 - o)).astype(grad_out.dtype)


def softmax(logits: Array) -> Array:
    """Row-wise softmax with max-shift; returns float64 rows summing to 1."""
    require_finite("softmax logits", logits)
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise ShapeError("softmax expects a (N,K) array with K >= 1")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_vjp(probs: Array, grad_out: Array) -> Array:
    g = grad_out.astype(np.float64)
    p = probs.astype(np.float64)
    return p * (g - (g * p).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# axis reductions used by the attention gates
# ---------------------------------------------------------------------------

_AXES = {"spatial": (2, 3), "channel": (1,)}


def pool_reduce(x: Array, axis: str, kind: str) -> Array:
    """Average or maximum over the spatial plane (-> N,C,1,1) or the channel
    axis (-> N,1,H,W)."""
    require_finite("pool_reduce input", x)
    if x.ndim != 4:
        raise ShapeError(f"pool_reduce input must be 4-D, got {x.ndim}-D")
    if axis not in _AXES:
        raise ShapeError(f"pool_reduce axis must be 'spatial' or 'channel', got {axis!r}")
    dims = _AXES[axis]
    for d in dims:
        if x.shape[d] == 0:
            raise ShapeError(f"pool_reduce over empty axis {d}")
    if kind == "avg":
        return x.astype(np.float64).mean(axis=dims, keepdims=True).astype(x.dtype)
    if kind == "max":
        return x.max(axis=dims, keepdims=True)
    raise ShapeError(f"pool_reduce kind must be 'avg' or 'max', got {kind!r}")


def pool_reduce_vjp(x: Array, axis: str, kind: str, grad_out: Array) -> Array:
    """VJP of pool_reduce; max routes to the first-occurrence argmax."""
    dims = _AXES[axis]
    if kind == "avg":
        count = 1
        for d in dims:
            count *= x.shape[d]
        return (np.broadcast_to(grad_out.astype(np.float64) / count, x.shape)).astype(grad_out.dtype)
    if axis == "spatial":
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w).argmax(axis=2)
        gx = np.zeros((n, c, h * w), dtype=np.float64)
        np.put_along_axis(gx, flat[:, :, None], grad_out.reshape(n, c, 1).astype(np.float64), axis=2)
        return gx.reshape(x.shape).astype(grad_out.dtype)
    winners = x.argmax(axis=1)[:, None]
    gx = np.zeros(x.shape, dtype=np.float64)
    np.put_along_axis(gx, winners, grad_out.astype(np.float64), axis=1)
    return gx.astype(grad_out.dtype)
