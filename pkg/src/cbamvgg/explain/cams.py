"""Gradient-weighted class activation maps and the attention-map exporter.

Both CAM variants differentiate the pre-softmax class logit with respect
to a chosen conv or attention output A. Grad-CAM weighs each channel by
its spatially averaged gradient; Grad-CAM++ weighs per-location positive
gradients by closed-form coefficients built from element-wise powers of
the same first-order gradients (the exp-score factors cancel). Maps are
rectified, bilinearly upsampled to the input side, and min-max normalized
unless identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import cbam, model
from ..errors import ConfigError
from ..imaging import bilinear_resize
from ..tensor import Array


@dataclass
class SaliencyMap:
    values: Array     # (S,S) in [0,1]
    class_id: int
    method: str
    layer: str


def _single_batch(graph: model.NetworkGraph, image: Array) -> Array:
    if image.ndim == 3:
        return image[None]
    if image.ndim == 4 and len(image) == 1:
        return image
    raise ConfigError(f"expected one (3,S,S) image, got shape {image.shape}")


def default_cam_layer(graph: model.NetworkGraph) -> str:
    """Deepest attention block, falling back to the deepest conv."""
    for node in reversed(graph.nodes):
        if node.kind == "cbam":
            return node.name
    for node in reversed(graph.nodes):
        if node.kind == "conv":
            return node.name
    raise ConfigError("graph has no conv or attention layers to target")


def _target_index(graph: model.NetworkGraph, layer: str) -> int:
    idx = graph.node_index(layer)
    if graph.nodes[idx].kind not in ("conv", "cbam"):
        raise ConfigError(f"target layer {layer!r} is a {graph.nodes[idx].kind} "
                          f"node; Grad-CAM targets conv or cbam outputs")
    return idx


def _finish(raw: Array, side: int) -> Array:
    """Upsample a non-negative (h,w) map to (side, side) and normalize."""
    up = bilinear_resize(raw, side, side)
    lo, hi = float(up.min()), float(up.max())
    # a spread at rounding noise level is a constant map, not contrast
    if hi - lo > 1e-12 * max(abs(hi), abs(lo)):
        return (up - lo) / (hi - lo)
    if hi > 0.0:  # constant positive map: full activation everywhere
        return np.ones_like(up)
    return np.zeros_like(up)


def gradcam_weights(graph: model.NetworkGraph, trace: model.ForwardTrace,
                    class_id: int, layer: str) -> Array:
    """Grad-CAM channel weights: spatial mean of d(logit)/dA, shape (N,C)."""
    g = model.logit_gradient(graph, trace, class_id, layer)
    return g.astype(np.float64).mean(axis=(2, 3))


def grad_cam(graph: model.NetworkGraph, image: Array, class_id: int,
             target_layer: str | None = None) -> SaliencyMap:
    """relu(sum_k alpha_k A_k) with alpha the spatially averaged logit gradient."""
    batch = _single_batch(graph, image)
    layer = target_layer or default_cam_layer(graph)
    idx = _target_index(graph, layer)
    _, trace = model.forward(graph, batch, capture=True)
    alpha = gradcam_weights(graph, trace, class_id, layer)
    features = trace.ios[idx].output.astype(np.float64)
    raw = np.maximum((alpha[:, :, None, None] * features).sum(axis=1), 0.0)
    return SaliencyMap(_finish(raw[0], graph.input_side), class_id, "gradcam", layer)


def grad_cam_pp(graph: model.NetworkGraph, image: Array, class_id: int,
                target_layer: str | None = None) -> SaliencyMap:
    """Grad-CAM++: per-location coefficients g^2 / (2 g^2 + sum(A g^3)),
    channel weights sum(coeff * relu(g)), then relu(sum_k w_k A_k)."""
    batch = _single_batch(graph, image)
    layer = target_layer or default_cam_layer(graph)
    idx = _target_index(graph, layer)
    _, trace = model.forward(graph, batch, capture=True)
    g = model.logit_gradient(graph, trace, class_id, layer).astype(np.float64)
    features = trace.ios[idx].output.astype(np.float64)
    g2 = g * g
    g3 = g2 * g
    denom = 2.0 * g2 + (features * g3).sum(axis=(2, 3), keepdims=True)
    coeff = np.where(denom == 0.0, 0.0, g2 / np.where(denom == 0.0, 1.0, denom))
    weights = (coeff * np.maximum(g, 0.0)).sum(axis=(2, 3))
    raw = np.maximum((weights[:, :, None, None] * features).sum(axis=1), 0.0)
    return SaliencyMap(_finish(raw[0], graph.input_side), class_id, "gradcampp", layer)


def attention_maps(graph: model.NetworkGraph, image: Array) -> list[cbam.AttentionRecord]:
    """One AttentionRecord per attention stage, shallowest first."""
    batch = _single_batch(graph, image)
    if not any(n.kind == "cbam" for n in graph.nodes):
        raise ConfigError("graph has no attention blocks")
    _, trace = model.forward(graph, batch, capture=True)
    return trace.records


def upsampled_spatial_gates(records: list[cbam.AttentionRecord],
                            side: int) -> list[Array]:
    """Spatial gates of each record resampled to side x side for display."""
    return [bilinear_resize(r.spatial_gate[0, 0].astype(np.float64), side, side)
            for r in records]
