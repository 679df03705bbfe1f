"""Convolutional block attention: channel gate, spatial gate, composition.

The channel gate squeezes the spatial plane with average and max pooling,
pushes both vectors through one shared bottleneck MLP (no biases, ReLU
hidden, reduction ratio ``r``), sums, and applies a sigmoid. The spatial
gate stacks channel-wise average and max maps and runs a single 7x7
convolution (scalar bias, padding 3 so the map keeps the feature size)
through a sigmoid. Refinement multiplies the feature map by the channel
gate first, then by the spatial gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import (
    Array,
    activation,
    conv2d,
    conv2d_vjp,
    pool_reduce,
    pool_reduce_vjp,
    require_finite,
    sigmoid_vjp,
)


@dataclass
class ChannelAttentionParams:
    """Shared-MLP weights of the channel gate.

    ``w0`` maps channels down to ``channels // reduction_ratio``; ``w1`` maps
    back up. The ratio must divide the channel count (default 8).
    """

    w0: Array
    w1: Array
    reduction_ratio: int = 8

    def __post_init__(self) -> None:
        c, hidden = self.w0.shape
        if self.reduction_ratio <= 0 or c % self.reduction_ratio != 0:
            raise ShapeError(
                f"reduction ratio {self.reduction_ratio} must divide channel count {c}"
            )
        if hidden != c // self.reduction_ratio:
            raise ShapeError(
                f"w0 hidden width {hidden} != channels/ratio = {c // self.reduction_ratio}"
            )
        if self.w1.shape != (hidden, c):
            raise ShapeError(f"w1 must have shape {(hidden, c)}, got {self.w1.shape}")

    @property
    def channels(self) -> int:
        return self.w0.shape[0]


@dataclass
class SpatialAttentionParams:
    """7x7 convolution over the stacked [avg; max] channel maps."""

    kernel: Array
    bias: float = 0.0

    def __post_init__(self) -> None:
        if self.kernel.shape != (1, 2, 7, 7):
            raise ShapeError(f"spatial kernel must have shape (1,2,7,7), got {self.kernel.shape}")


@dataclass
class AttentionRecord:
    """Gates captured during one refinement: channel gate (N,c,1,1), spatial
    gate (N,1,H,W), and which of the five stages produced them.

    Live gates stay strictly inside (0,1); an attention-ablated network
    records all-ones gates, so validation only pins the closed interval.
    """

    channel_gate: Array
    spatial_gate: Array
    stage_index: int

    def __post_init__(self) -> None:
        require_finite("channel gate", self.channel_gate)
        require_finite("spatial gate", self.spatial_gate)
        for name, g in (("channel", self.channel_gate), ("spatial", self.spatial_gate)):
            if g.min() < 0.0 or g.max() > 1.0:
                raise ShapeError(f"{name} gate values outside [0,1]")
        if not 1 <= self.stage_index <= 5:
            raise ShapeError(f"stage_index must be in 1..5, got {self.stage_index}")


def init_channel_params(channels: int, reduction_ratio: int, rng: np.random.Generator,
                        dtype=np.float32) -> ChannelAttentionParams:
    hidden = channels // max(reduction_ratio, 1)
    if hidden < 1 or channels % reduction_ratio != 0:
        raise ShapeError(
            f"reduction ratio {reduction_ratio} incompatible with {channels} channels"
        )
    b0 = np.sqrt(6.0 / channels)
    b1 = np.sqrt(6.0 / hidden)
    w0 = rng.uniform(-b0, b0, size=(channels, hidden)).astype(dtype)
    w1 = rng.uniform(-b1, b1, size=(hidden, channels)).astype(dtype)
    return ChannelAttentionParams(w0, w1, reduction_ratio)


def init_spatial_params(rng: np.random.Generator, dtype=np.float32) -> SpatialAttentionParams:
    bound = np.sqrt(6.0 / (2 * 7 * 7))
    kernel = rng.uniform(-bound, bound, size=(1, 2, 7, 7)).astype(dtype)
    return SpatialAttentionParams(kernel, 0.0)


def _mlp(v: Array, params: ChannelAttentionParams) -> tuple[Array, Array]:
    """Bottleneck MLP; returns (output, pre-activation hidden) for backward."""
    h_pre = np.matmul(v.astype(np.float64), params.w0.astype(np.float64))
    out = np.matmul(np.maximum(h_pre, 0), params.w1.astype(np.float64))
    return out.astype(v.dtype), h_pre.astype(v.dtype)


def channel_attention(features: Array, params: ChannelAttentionParams) -> Array:
    """Per-channel sigmoid gate of shape (N,c,1,1)."""
    gate, _ = _channel_attention_cached(features, params)
    return gate


def _channel_attention_cached(features: Array, params: ChannelAttentionParams):
    require_finite("channel attention features", features)
    if features.ndim != 4:
        raise ShapeError(f"features must be 4-D, got {features.ndim}-D")
    n, c = features.shape[:2]
    if c != params.channels:
        raise ShapeError(
            f"channel mismatch: features have {c} channels, params expect {params.channels}"
        )
    v_avg = pool_reduce(features, "spatial", "avg").reshape(n, c)
    v_max = pool_reduce(features, "spatial", "max").reshape(n, c)
    m_avg, h_avg = _mlp(v_avg, params)
    m_max, h_max = _mlp(v_max, params)
    u = m_avg + m_max
    gate_flat = activation(u, "sigmoid")
    cache = {"v_avg": v_avg, "v_max": v_max, "h_avg": h_avg, "h_max": h_max,
             "gate_flat": gate_flat}
    return gate_flat.reshape(n, c, 1, 1), cache


def spatial_attention(features: Array, params: SpatialAttentionParams) -> Array:
    """Per-location sigmoid gate of shape (N,1,H,W)."""
    gate, _ = _spatial_attention_cached(features, params)
    return gate


def _spatial_attention_cached(features: Array, params: SpatialAttentionParams):
    require_finite("spatial attention features", features)
    a = pool_reduce(features, "channel", "avg")
    m = pool_reduce(features, "channel", "max")
    stacked = np.concatenate([a, m], axis=1)
    bias = np.asarray([params.bias], dtype=stacked.dtype)
    pre = conv2d(stacked, params.kernel, bias, stride=1, padding=3)
    gate = activation(pre, "sigmoid")
    return gate, {"stacked": stacked, "gate": gate}


def cbam_apply(features: Array, ch: ChannelAttentionParams, sp: SpatialAttentionParams,
               stage_index: int = 1) -> tuple[Array, AttentionRecord]:
    """Refine ``features`` by both gates; also report the gates."""
    refined, cache = cbam_forward(features, ch, sp)
    record = AttentionRecord(cache["channel_gate"], cache["spatial_gate"], stage_index)
    return refined, record


def cbam_forward(features: Array, ch: ChannelAttentionParams,
                 sp: SpatialAttentionParams) -> tuple[Array, dict]:
    """Forward pass keeping every intermediate the exact backward needs."""
    c_gate, c_cache = _channel_attention_cached(features, ch)
    x = (features.astype(np.float64) * c_gate.astype(np.float64)).astype(features.dtype)
    s_gate, s_cache = _spatial_attention_cached(x, sp)
    refined = (x.astype(np.float64) * s_gate.astype(np.float64)).astype(features.dtype)
    cache = {
        "features": features,
        "channel_gate": c_gate,
        "channel_refined": x,
        "spatial_gate": s_gate,
        "channel": c_cache,
        "spatial": s_cache,
    }
    return refined, cache


def cbam_backward(cache: dict, ch: ChannelAttentionParams, sp: SpatialAttentionParams,
                  grad_refined: Array) -> tuple[Array, dict[str, Array]]:
    """Exact VJP through the full refinement.

    Returns the gradient w.r.t. the input features and a dict of parameter
    gradients keyed w0/w1/kernel/bias.
    """
    f = cache["features"].astype(np.float64)
    c_gate = cache["channel_gate"].astype(np.float64)
    x = cache["channel_refined"]
    s_gate = cache["spatial_gate"]
    g = grad_refined.astype(np.float64)

    # refined = x * s_gate
    g_sgate = (g * x.astype(np.float64)).sum(axis=1, keepdims=True)
    gx = g * s_gate.astype(np.float64)

    # spatial gate: sigmoid(conv7x7(concat(avg_c(x), max_c(x))))
    g_pre = sigmoid_vjp(s_gate, g_sgate.astype(s_gate.dtype)).astype(np.float64)
    stacked = cache["spatial"]["stacked"]
    g_stacked, g_kernel, g_bias = conv2d_vjp(stacked, sp.kernel, g_pre.astype(stacked.dtype),
                                             stride=1, padding=3)
    gx += pool_reduce_vjp(x, "channel", "avg", g_stacked[:, 0:1]).astype(np.float64)
    gx += pool_reduce_vjp(x, "channel", "max", g_stacked[:, 1:2]).astype(np.float64)

    # x = features * c_gate
    g_cgate = (gx * f).sum(axis=(2, 3), keepdims=True)
    gf = gx * c_gate

    # channel gate: sigmoid(mlp(v_avg) + mlp(v_max)), shared weights
    n, c = f.shape[:2]
    cc = cache["channel"]
    g_u = sigmoid_vjp(cc["gate_flat"], g_cgate.reshape(n, c).astype(cc["gate_flat"].dtype))
    g_u = g_u.astype(np.float64)
    w0 = ch.w0.astype(np.float64)
    w1 = ch.w1.astype(np.float64)
    gw0 = np.zeros_like(w0)
    gw1 = np.zeros_like(w1)
    g_pooled = {}
    for branch in ("avg", "max"):
        v = cc[f"v_{branch}"].astype(np.float64)
        h_pre = cc[f"h_{branch}"].astype(np.float64)
        h = np.maximum(h_pre, 0)
        gw1 += np.matmul(h.T, g_u)
        gh = np.matmul(g_u, w1.T)
        gh_pre = np.where(h_pre > 0, gh, 0.0)
        gw0 += np.matmul(v.T, gh_pre)
        g_pooled[branch] = np.matmul(gh_pre, w0.T)
    gf += pool_reduce_vjp(cache["features"], "spatial", "avg",
                          g_pooled["avg"].reshape(n, c, 1, 1)).astype(np.float64)
    gf += pool_reduce_vjp(cache["features"], "spatial", "max",
                          g_pooled["max"].reshape(n, c, 1, 1)).astype(np.float64)

    dt = cache["features"].dtype
    grads = {
        "w0": gw0.astype(dt),
        "w1": gw1.astype(dt),
        "kernel": g_kernel.astype(dt),
        "bias": np.asarray(g_bias, dtype=dt).reshape(1),
    }
    return gf.astype(dt), grads
