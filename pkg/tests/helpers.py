"""Hand-built graphs and gradient plumbing shared across test modules."""

from __future__ import annotations

import numpy as np

from cbamvgg import datapipe, model, trainer

WEIGHT_NAMES = {"kernel", "weight", "w0", "w1"}


def cast_params(graph: model.NetworkGraph, dtype=np.float64) -> model.NetworkGraph:
    """In-place cast of every parameter tensor (finite differences want 64-bit)."""
    for node in graph.nodes:
        for key in list(node.params):
            node.params[key] = node.params[key].astype(dtype)
    return graph


def loss_on(graph: model.NetworkGraph, x, y, lam: float = 0.0) -> float:
    """Scalar objective: mean cross-entropy plus optional L2 term."""
    probs, _ = model.forward(graph, x)
    onehot = datapipe.one_hot(y, graph.classes)
    total = trainer.cross_entropy(probs, onehot)
    if lam:
        total += trainer.l2_penalty(graph, lam, len(x))
    return float(total)


def analytic_grads(graph: model.NetworkGraph, x, y, lam: float = 0.0):
    """Parameter and input gradients of loss_on via the library backward."""
    onehot = datapipe.one_hot(y, graph.classes)
    probs, trace = model.forward(graph, x, capture=True)
    g = trainer.cross_entropy_logit_gradient(probs, onehot)
    grads: dict[str, dict] = {}
    for node, io in zip(reversed(graph.nodes[:-1]), reversed(trace.ios[:-1])):
        g, pg = model.node_backward(graph, node, io, g)
        if pg:
            grads[node.name] = pg
    if lam:
        scale = lam / len(x)
        for node in graph.nodes:
            if node.name in grads:
                for pname, arr in node.params.items():
                    if pname in WEIGHT_NAMES:
                        grads[node.name][pname] = (grads[node.name][pname]
                                                   + scale * arr.astype(np.float64))
    return grads, g


def tiny_cbam_net(seed: int = 0, side: int = 8, width: int = 4,
                  classes: int = 3, reduction: int = 2) -> model.NetworkGraph:
    """One full stage (conv-relu-pool-cbam) plus classifier, small enough to
    finite-difference every parameter."""
    rng = np.random.default_rng(seed)

    def u(*shape):
        bound = np.sqrt(6.0 / np.prod(shape[1:])) if len(shape) > 1 else 0.5
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    hidden = width // reduction
    half = side // 2
    nodes = [
        model.LayerNode("conv", "conv1", {"stride": 1, "padding": 1},
                        {"kernel": u(width, 3, 3, 3),
                         "bias": rng.normal(0, 0.05, width).astype(np.float32)}),
        model.LayerNode("relu", "relu1"),
        model.LayerNode("maxpool", "maxpool1", {"size": 2, "stride": 2}),
        model.LayerNode("cbam", "cbam1",
                        {"reduction_ratio": reduction, "stage_index": 1},
                        {"w0": u(width, hidden), "w1": u(hidden, width),
                         "kernel": u(1, 2, 7, 7),
                         "bias": rng.normal(0, 0.05, 1).astype(np.float32)}),
        model.LayerNode("flatten", "flatten"),
        model.LayerNode("dense", "dense1", {},
                        {"weight": u(width * half * half, classes),
                         "bias": rng.normal(0, 0.05, classes).astype(np.float32)}),
        model.LayerNode("softmax", "softmax"),
    ]
    return model.NetworkGraph(nodes, side, classes)


def dense_stack_net(seed: int = 0, features: int = 3, hidden: int = 4,
                    classes: int = 3, zero_bias: bool = True) -> model.NetworkGraph:
    """flatten -> dense -> relu -> dense -> softmax over a (3,1,1) input,
    i.e. a plain two-layer perceptron in graph clothing."""
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0, 0.8, (features, hidden)).astype(np.float32)
    w2 = rng.normal(0, 0.8, (hidden, classes)).astype(np.float32)
    b1 = np.zeros(hidden, np.float32) if zero_bias else rng.normal(0, 0.1, hidden).astype(np.float32)
    b2 = np.zeros(classes, np.float32) if zero_bias else rng.normal(0, 0.1, classes).astype(np.float32)
    nodes = [
        model.LayerNode("flatten", "flatten"),
        model.LayerNode("dense", "dense1", {}, {"weight": w1, "bias": b1}),
        model.LayerNode("relu", "relu1"),
        model.LayerNode("dense", "dense2", {}, {"weight": w2, "bias": b2}),
        model.LayerNode("softmax", "softmax"),
    ]
    return model.NetworkGraph(nodes, 1, classes, input_channels=features)
