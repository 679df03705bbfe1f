"""Network graph: build, run, differentiate, persist.

A graph is an ordered list of typed nodes (conv / relu / maxpool / cbam /
flatten / dense / softmax) ending in exactly one softmax. The stock
builder produces the attention-augmented VGG layout: five conv stages,
each closed by a 2x2 max-pool immediately followed by an attention block,
then a single dense classifier.

Checkpoints are a single file: a version line, a JSON manifest (topology,
shapes, build config, byte offsets), then the raw little-endian float32
parameter payload concatenated in topological order. Round trips are
bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import cbam
from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    NonFiniteError,
    ShapeError,
)
from .tensor import (
    Array,
    LayerIO,
    activation,
    conv2d,
    conv2d_vjp,
    dense,
    dense_vjp,
    maxpool2d,
    maxpool2d_vjp,
    relu_vjp,
    require_finite,
    softmax,
    softmax_vjp,
)

FORMAT_VERSION = "cbamvgg-v1"

# (stage width, conv layers per stage); both profiles keep the
# 5-stage / 5-pool / 5-attention skeleton
PROFILES = {
    "vgg16": ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)),
    "mini": ((8, 1), (16, 1), (24, 1), (32, 1), (32, 1)),
}


@dataclass
class BuildConfig:
    profile: str = "mini"
    input_side: int = 32
    classes: int = 4
    width_multiplier: float = 1.0
    reduction_ratio: int = 8
    seed: int = 0
    attention: bool = True  # False forces both gates to 1 (ablation runs)


@dataclass
class LayerNode:
    kind: str
    name: str
    config: dict = field(default_factory=dict)
    params: dict[str, Array] = field(default_factory=dict)


@dataclass
class ForwardTrace:
    """Per-node activations plus the attention records of a forward pass."""

    ios: list[LayerIO]
    records: list[cbam.AttentionRecord]


@dataclass
class NetworkGraph:
    nodes: list[LayerNode]
    input_side: int
    classes: int
    input_channels: int = 3
    config: dict = field(default_factory=dict)

    def node_index(self, name: str) -> int:
        for i, node in enumerate(self.nodes):
            if node.name == name:
                return i
        raise ConfigError(f"no layer named {name!r}; known layers: "
                          + ", ".join(n.name for n in self.nodes))

    def named_parameters(self) -> Iterator[tuple[str, str, Array]]:
        for node in self.nodes:
            for pname, arr in node.params.items():
                yield node.name, pname, arr

    def parameter_count(self) -> int:
        return sum(arr.size for _, _, arr in self.named_parameters())

    def astype(self, dtype) -> "NetworkGraph":
        """Deep copy with all parameters cast (float64 copies drive the
        finite-difference checks)."""
        nodes = [LayerNode(n.kind, n.name, dict(n.config),
                           {k: v.astype(dtype) for k, v in n.params.items()})
                 for n in self.nodes]
        return NetworkGraph(nodes, self.input_side, self.classes,
                            self.input_channels, dict(self.config))

    @property
    def attention_enabled(self) -> bool:
        return bool(self.config.get("attention", True))


def _cbam_params(node: LayerNode) -> tuple[cbam.ChannelAttentionParams, cbam.SpatialAttentionParams]:
    ch = cbam.ChannelAttentionParams(node.params["w0"], node.params["w1"],
                                     node.config["reduction_ratio"])
    sp = cbam.SpatialAttentionParams(node.params["kernel"], float(node.params["bias"][0]))
    return ch, sp


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_cbam_vgg(config: BuildConfig) -> NetworkGraph:
    """Build the five-stage attention-augmented VGG graph.

    The vgg16 profile uses the 13-conv stage plan (64,64 | 128,128 | 256x3 |
    512x3 | 512x3); the mini profile one conv per stage at widths
    (8,16,24,32,32). ``width_multiplier`` scales every stage width; the
    result must stay divisible by the attention reduction ratio.
    """
    if config.profile not in PROFILES:
        raise ConfigError(f"unknown profile {config.profile!r}; choose from {sorted(PROFILES)}")
    if config.input_side < 32 or config.input_side % 32 != 0:
        raise ConfigError(f"input_side must be a positive multiple of 32, got {config.input_side}")
    if config.classes < 2:
        raise ConfigError(f"classes must be >= 2, got {config.classes}")
    if config.width_multiplier <= 0:
        raise ConfigError(f"width_multiplier must be > 0, got {config.width_multiplier}")

    rng = np.random.default_rng(config.seed)
    nodes: list[LayerNode] = []
    in_ch = 3
    conv_i = relu_i = 0
    for stage, (base_width, n_convs) in enumerate(PROFILES[config.profile], start=1):
        width = int(round(base_width * config.width_multiplier))
        if width < 1:
            raise ConfigError(f"width_multiplier {config.width_multiplier} collapses stage "
                              f"{stage} to zero channels")
        if width % config.reduction_ratio != 0:
            raise ConfigError(
                f"stage {stage} width {width} not divisible by reduction ratio "
                f"{config.reduction_ratio}; adjust width_multiplier or reduction_ratio"
            )
        for _ in range(n_convs):
            conv_i += 1
            bound = np.sqrt(6.0 / (in_ch * 9))
            kernel = rng.uniform(-bound, bound, size=(width, in_ch, 3, 3)).astype(np.float32)
            nodes.append(LayerNode("conv", f"conv{conv_i}",
                                   {"stride": 1, "padding": 1},
                                   {"kernel": kernel,
                                    "bias": np.zeros(width, dtype=np.float32)}))
            relu_i += 1
            nodes.append(LayerNode("relu", f"relu{relu_i}"))
            in_ch = width
        nodes.append(LayerNode("maxpool", f"maxpool{stage}", {"size": 2, "stride": 2}))
        ch = cbam.init_channel_params(width, config.reduction_ratio, rng)
        sp = cbam.init_spatial_params(rng)
        nodes.append(LayerNode("cbam", f"cbam{stage}",
                               {"reduction_ratio": config.reduction_ratio, "stage_index": stage},
                               {"w0": ch.w0, "w1": ch.w1, "kernel": sp.kernel,
                                "bias": np.zeros(1, dtype=np.float32)}))

    side = config.input_side // 32
    flat = in_ch * side * side
    nodes.append(LayerNode("flatten", "flatten"))
    bound = np.sqrt(6.0 / flat)
    nodes.append(LayerNode("dense", "dense1", {},
                           {"weight": rng.uniform(-bound, bound,
                                                  size=(flat, config.classes)).astype(np.float32),
                            "bias": np.zeros(config.classes, dtype=np.float32)}))
    nodes.append(LayerNode("softmax", "softmax"))

    graph = NetworkGraph(nodes, config.input_side, config.classes, 3, asdict(config))
    validate_graph(graph)
    return graph


def shape_plan(graph: NetworkGraph) -> list[tuple]:
    """Symbolic per-node output shapes (batch axis omitted); raises ShapeError
    on any inconsistency, so it doubles as the structural validator."""
    shape: tuple = (graph.input_channels, graph.input_side, graph.input_side)
    plan = []
    for node in graph.nodes:
        if node.kind == "conv":
            c, h, w = shape
            co, ci, kh, kw = node.params["kernel"].shape
            if ci != c:
                raise ShapeError(f"{node.name}: kernel expects {ci} channels, gets {c}")
            s, p = node.config["stride"], node.config["padding"]
            shape = (co, (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1)
        elif node.kind == "maxpool":
            c, h, w = shape
            size, s = node.config["size"], node.config["stride"]
            if size > h or size > w:
                raise ShapeError(f"{node.name}: window {size} larger than input {h}x{w}")
            shape = (c, (h - size) // s + 1, (w - size) // s + 1)
        elif node.kind == "cbam":
            c = shape[0]
            if node.params["w0"].shape[0] != c:
                raise ShapeError(f"{node.name}: attention built for "
                                 f"{node.params['w0'].shape[0]} channels, gets {c}")
        elif node.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif node.kind == "dense":
            d, k = node.params["weight"].shape
            if shape != (d,):
                raise ShapeError(f"{node.name}: weight expects {d} inputs, gets {shape}")
            shape = (k,)
        elif node.kind in ("relu", "softmax"):
            pass
        else:
            raise ShapeError(f"unknown node kind {node.kind!r}")
        plan.append(shape)
    return plan


def validate_graph(graph: NetworkGraph) -> None:
    if not graph.nodes or graph.nodes[-1].kind != "softmax":
        raise ShapeError("graph must end in a softmax node")
    if sum(1 for n in graph.nodes if n.kind == "softmax") != 1:
        raise ShapeError("graph must contain exactly one softmax node")
    plan = shape_plan(graph)
    if plan[-1] != (graph.classes,):
        raise ShapeError(f"classifier emits {plan[-1]}, expected ({graph.classes},)")


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _node_forward(graph: NetworkGraph, node: LayerNode, x: Array) -> LayerIO:
    if node.kind == "conv":
        y = conv2d(x, node.params["kernel"], node.params["bias"],
                   node.config["stride"], node.config["padding"])
        return LayerIO(x, y)
    if node.kind == "relu":
        return LayerIO(x, activation(x, "relu"))
    if node.kind == "maxpool":
        y, winners = maxpool2d(x, node.config["size"], node.config["stride"])
        return LayerIO(x, y, {"winners": winners})
    if node.kind == "cbam":
        if not graph.attention_enabled:
            ones_c = np.ones((x.shape[0], x.shape[1], 1, 1), dtype=x.dtype)
            ones_s = np.ones((x.shape[0], 1, x.shape[2], x.shape[3]), dtype=x.dtype)
            record = cbam.AttentionRecord(ones_c, ones_s, node.config["stage_index"])
            return LayerIO(x, x, {"record": record, "ablated": True})
        ch, sp = _cbam_params(node)
        y, cache = cbam.cbam_forward(x, ch, sp)
        record = cbam.AttentionRecord(cache["channel_gate"], cache["spatial_gate"],
                                      node.config["stage_index"])
        return LayerIO(x, y, {"cache": cache, "record": record})
    if node.kind == "flatten":
        return LayerIO(x, x.reshape(x.shape[0], -1))
    if node.kind == "dense":
        return LayerIO(x, dense(x, node.params["weight"], node.params["bias"]))
    if node.kind == "softmax":
        return LayerIO(x, softmax(x))
    raise ShapeError(f"unknown node kind {node.kind!r}")


def forward(graph: NetworkGraph, batch: Array, capture: bool = False):
    """Run the graph on a (N,3,S,S) batch with values in [0,1].

    Returns the probability rows, plus a ForwardTrace when ``capture`` is
    set (one LayerIO per node and one AttentionRecord per attention stage,
    enough for any backward or relevance pass).
    """
    require_finite("forward batch", batch)
    expected = (graph.input_channels, graph.input_side, graph.input_side)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"batch must have shape (N,{expected[0]},{expected[1]},{expected[2]}), "
                         f"got {batch.shape}")
    if batch.min() < -1e-9 or batch.max() > 1 + 1e-9:
        raise ShapeError("batch values must lie in [0,1]; run preprocessing first")
    ios: list[LayerIO] = []
    records: list[cbam.AttentionRecord] = []
    x = batch
    for node in graph.nodes:
        io = _node_forward(graph, node, x)
        if not np.isfinite(io.output).all():
            raise NonFiniteError(f"non-finite output at layer {node.name}")
        ios.append(io)
        if node.kind == "cbam":
            records.append(io.aux["record"])
        x = io.output
    if capture:
        return x, ForwardTrace(ios, records)
    return x, None


def node_backward(graph: NetworkGraph, node: LayerNode, io: LayerIO,
                  grad_out: Array) -> tuple[Array, dict[str, Array]]:
    """Exact VJP of one node: upstream grad at its output -> grad at its
    input plus parameter grads."""
    if node.kind == "conv":
        gx, gk, gb = conv2d_vjp(io.input, node.params["kernel"], grad_out,
                                node.config["stride"], node.config["padding"])
        return gx, {"kernel": gk, "bias": gb}
    if node.kind == "relu":
        return relu_vjp(io.input, grad_out), {}
    if node.kind == "maxpool":
        return maxpool2d_vjp(io.input.shape, io.aux["winners"], grad_out), {}
    if node.kind == "cbam":
        if io.aux.get("ablated"):
            zeros = {k: np.zeros_like(v) for k, v in node.params.items()}
            return grad_out, zeros
        ch, sp = _cbam_params(node)
        return cbam.cbam_backward(io.aux["cache"], ch, sp, grad_out)
    if node.kind == "flatten":
        return grad_out.reshape(io.input.shape), {}
    if node.kind == "dense":
        gx, gw, gb = dense_vjp(io.input, node.params["weight"], grad_out)
        return gx, {"weight": gw, "bias": gb}
    if node.kind == "softmax":
        return softmax_vjp(io.output, grad_out), {}
    raise ShapeError(f"unknown node kind {node.kind!r}")


def backward(graph: NetworkGraph, trace: ForwardTrace,
             grad_probs: Array) -> tuple[dict[str, dict[str, Array]], Array]:
    """Full reverse pass from the probabilities down to the input.

    Returns ``(param_grads[node_name][param_name], grad_input)``.
    """
    grads: dict[str, dict[str, Array]] = {}
    g = grad_probs
    for node, io in zip(reversed(graph.nodes), reversed(trace.ios)):
        g, pg = node_backward(graph, node, io, g)
        if pg:
            grads[node.name] = pg
    return grads, g


def logit_gradient(graph: NetworkGraph, trace: ForwardTrace, class_id: int,
                   target: str) -> Array:
    """Gradient of the chosen class's pre-softmax logit w.r.t. the output of
    the ``target`` node."""
    if not 0 <= class_id < graph.classes:
        raise ConfigError(f"class_id {class_id} out of range for {graph.classes} classes")
    target_idx = graph.node_index(target)
    softmax_idx = len(graph.nodes) - 1
    if target_idx >= softmax_idx:
        raise ConfigError(f"target layer {target!r} is not below the softmax")
    logits = trace.ios[softmax_idx].input
    seed = np.zeros_like(logits)
    seed[:, class_id] = 1
    g = seed
    for i in range(softmax_idx - 1, target_idx, -1):
        g, _ = node_backward(graph, graph.nodes[i], trace.ios[i], g)
    return g


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(graph: NetworkGraph, path) -> None:
    """Write version line, manifest JSON, and the float32 payload."""
    entries = []
    chunks = []
    offset = 0
    for node in graph.nodes:
        plist = []
        for pname, arr in node.params.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            plist.append({"name": pname, "shape": list(arr.shape),
                          "offset": offset, "count": int(arr.size)})
            chunks.append(raw)
            offset += len(raw)
        entries.append({"kind": node.kind, "name": node.name,
                        "config": node.config, "params": plist})
    manifest = {
        "format": FORMAT_VERSION,
        "input_side": graph.input_side,
        "input_channels": graph.input_channels,
        "classes": graph.classes,
        "config": graph.config,
        "nodes": entries,
        "payload_bytes": offset,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FORMAT_VERSION.encode() + b"\n")
        fh.write(str(len(blob)).encode() + b"\n")
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> NetworkGraph:
    """Rebuild a graph bit-exactly; version, truncation, and shape problems
    raise distinct errors."""
    with open(path, "rb") as fh:
        data = fh.read()
    head, sep, rest = data.partition(b"\n")
    if not sep or head.decode("utf-8", "replace") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {head[:32]!r} does not match {FORMAT_VERSION!r}")
    size_line, sep, rest = rest.partition(b"\n")
    try:
        msize = int(size_line)
    except ValueError:
        raise CheckpointTruncatedError("checkpoint manifest header is damaged") from None
    if not sep or len(rest) < msize:
        raise CheckpointTruncatedError("checkpoint manifest is shorter than declared")
    try:
        manifest = json.loads(rest[:msize].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointShapeError(f"checkpoint manifest is not valid JSON: {exc}") from None
    payload = rest[msize:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointTruncatedError(
            f"payload has {len(payload)} bytes, manifest declares {manifest['payload_bytes']}")
    nodes = []
    for entry in manifest["nodes"]:
        params = {}
        for p in entry["params"]:
            shape = tuple(p["shape"])
            count = int(np.prod(shape)) if shape else 1
            if count != p["count"]:
                raise CheckpointShapeError(
                    f"{entry['name']}.{p['name']}: shape {shape} disagrees with "
                    f"count {p['count']}")
            start, end = p["offset"], p["offset"] + 4 * count
            if end > len(payload):
                raise CheckpointTruncatedError(
                    f"{entry['name']}.{p['name']} extends past the payload")
            params[p["name"]] = np.frombuffer(payload[start:end],
                                              dtype="<f4").reshape(shape).copy()
        nodes.append(LayerNode(entry["kind"], entry["name"], dict(entry["config"]), params))
    graph = NetworkGraph(nodes, manifest["input_side"], manifest["classes"],
                         manifest["input_channels"], dict(manifest.get("config", {})))
    try:
        validate_graph(graph)
    except ShapeError as exc:
        raise CheckpointShapeError(f"manifest disagrees with topology: {exc}") from None
    return graph
