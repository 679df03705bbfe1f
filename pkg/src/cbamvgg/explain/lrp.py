"""Layer-wise relevance propagation with per-layer rule composites.

The engine decomposes one pre-softmax class logit backwards through the
graph. Linear layers (conv, dense) distribute relevance proportionally to
their input contributions z_ij under the assigned rule; max-pool routes
relevance to the cached winners; ReLU, flatten, and attention blocks pass
relevance through unchanged (an attention gate is a forward constant that
rescales a position's contribution without claiming relevance itself).

Bias terms absorb a proportional share wherever a rule includes them in
the denominator; the absorbed share per layer is reported so conservation
accounting stays explicit. All propagation runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import model
from ..errors import ConfigError, NumericError
from ..tensor import Array, conv2d, conv2d_vjp, maxpool2d_vjp

#: structural rule kinds handled outside the linear-rule machinery
_PASS_KINDS = {"relu", "cbam", "flatten", "softmax"}


@dataclass(frozen=True)
class Rule:
    """One relevance rule. ``kind`` selects the formula; the numeric fields
    only apply to the kinds that use them."""

    kind: str  # epsilon | zplus | alphabeta | flat | gamma | box | pass | winner
    epsilon: float = 1e-6
    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 0.25
    low: float = 0.0
    high: float = 1.0

    def label(self) -> str:
        if self.kind == "epsilon":
            return f"epsilon({self.epsilon:g})"
        if self.kind == "alphabeta":
            return f"alphabeta({self.alpha:g},{self.beta:g})"
        if self.kind == "gamma":
            return f"gamma({self.gamma:g})"
        if self.kind == "box":
            return f"box({self.low:g},{self.high:g})"
        return self.kind


@dataclass
class RuleComposite:
    """Total assignment of a rule to every layer of a graph, by node name."""

    name: str
    assignments: dict[str, Rule] = field(default_factory=dict)

    def rule_for(self, node_name: str) -> Rule:
        try:
            return self.assignments[node_name]
        except KeyError:
            raise ConfigError(f"composite {self.name!r} assigns no rule to "
                              f"layer {node_name!r}") from None


@dataclass
class RelevanceMap:
    """Result of one LRP pass over a batch."""

    pixels: Array                      # (N,3,S,S) input relevance
    layers: dict[str, Array]           # relevance at each node's output
    absorbed: dict[str, float]         # relevance absorbed inside each node
    class_id: int
    composite_name: str
    logits: Array                      # (N,) initial relevance per sample

    def total_pixel_relevance(self) -> Array:
        return self.pixels.reshape(len(self.pixels), -1).sum(axis=1)


def composite_presets(graph: model.NetworkGraph, epsilon: float = 1e-6,
                      gamma: float = 0.25, alpha: float = 2.0, beta: float = 1.0,
                      low: float = 0.0, high: float = 1.0) -> dict[str, RuleComposite]:
    """The four stock composites, each covering every layer of ``graph``.

    - epsilon_plus: epsilon on dense, z+ on every conv
    - epsilon_plus_flat: as epsilon_plus with flat on the first conv block
    - epsilon_gamma_box: epsilon on dense, gamma on conv, box on the input conv
    - epsilon_alpha2beta1_flat: epsilon on dense, alphabeta(2,1) on conv,
      flat on the first conv block
    """
    conv_names = [n.name for n in graph.nodes if n.kind == "conv"]
    if not conv_names:
        raise ConfigError("composites are defined for graphs with conv layers")
    first_pool = next((i for i, n in enumerate(graph.nodes) if n.kind == "maxpool"),
                      len(graph.nodes))
    first_block = {n.name for n in graph.nodes[:first_pool] if n.kind == "conv"}

    def base(name: str) -> RuleComposite:
        comp = RuleComposite(name)
        for node in graph.nodes:
            if node.kind == "dense":
                comp.assignments[node.name] = Rule("epsilon", epsilon=epsilon)
            elif node.kind == "maxpool":
                comp.assignments[node.name] = Rule("winner")
            elif node.kind in _PASS_KINDS:
                comp.assignments[node.name] = Rule("pass")
        return comp

    presets = {}

    comp = base("epsilon_plus")
    for c in conv_names:
        comp.assignments[c] = Rule("zplus")
    presets[comp.name] = comp

    comp = base("epsilon_plus_flat")
    for c in conv_names:
        comp.assignments[c] = Rule("flat") if c in first_block else Rule("zplus")
    presets[comp.name] = comp

    comp = base("epsilon_gamma_box")
    for i, c in enumerate(conv_names):
        comp.assignments[c] = (Rule("box", low=low, high=high) if i == 0
                               else Rule("gamma", gamma=gamma))
    presets[comp.name] = comp

    comp = base("epsilon_alpha2beta1_flat")
    for c in conv_names:
        comp.assignments[c] = (Rule("flat") if c in first_block
                               else Rule("alphabeta", alpha=alpha, beta=beta))
    presets[comp.name] = comp

    return presets


def _safe_quotient(numer: Array, denom: Array) -> Array:
    """numer/denom with 0/0 -> 0 (a zero denominator means nothing
    contributed, so there is nothing to distribute)."""
    safe = np.where(denom == 0.0, 1.0, denom)
    return np.where(denom == 0.0, 0.0, numer / safe)


def _sign_keep_zero_positive(x: Array) -> Array:
    return np.where(x >= 0.0, 1.0, -1.0)


def _dense_backshare(a: Array, w: Array, s: Array) -> Array:
    """Sum of w_ij * s_j per input, scaled by the input: a_i * (s w^T)_i."""
    return a * (s @ w.T)


def _conv_backshare(a: Array, kernel: Array, s: Array, stride: int,
                    padding: int) -> Array:
    gx, _, _ = conv2d_vjp(a, kernel, s, stride, padding)
    return a * gx


def _linear_relevance(node: model.LayerNode, a32: Array, rule: Rule,
                      r_out: Array) -> Array:
    """Distribute r_out over the inputs of a conv or dense node."""
    a = a32.astype(np.float64)
    if node.kind == "dense":
        w = node.params["weight"].astype(np.float64)
        b = node.params["bias"].astype(np.float64)
        fwd = lambda am, wm, bm: am @ wm + bm
        back = _dense_backshare
    else:
        w = node.params["kernel"].astype(np.float64)
        b = node.params["bias"].astype(np.float64)
        stride, padding = node.config["stride"], node.config["padding"]
        fwd = lambda am, wm, bm: conv2d(am, wm, bm, stride, padding)
        back = lambda am, wm, s: _conv_backshare(am, wm, s, stride, padding)
    zeros_b = np.zeros_like(b)

    if rule.kind == "epsilon":
        z = fwd(a, w, b)
        denom = z + rule.epsilon * _sign_keep_zero_positive(z)
        return back(a, w, _safe_quotient(r_out, denom))

    if rule.kind == "zplus":
        wp = np.maximum(w, 0.0)
        denom = fwd(a, wp, np.maximum(b, 0.0))
        return back(a, wp, _safe_quotient(r_out, denom))

    if rule.kind == "gamma":
        wm = w + rule.gamma * np.maximum(w, 0.0)
        bm = b + rule.gamma * np.maximum(b, 0.0)
        z = fwd(a, wm, bm)
        denom = z + 1e-12 * _sign_keep_zero_positive(z)
        return back(a, wm, _safe_quotient(r_out, denom))

    if rule.kind == "alphabeta":
        wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
        pos = back(a, wp, _safe_quotient(r_out, fwd(a, wp, np.maximum(b, 0.0))))
        neg = back(a, wn, _safe_quotient(r_out, fwd(a, wn, np.minimum(b, 0.0))))
        return rule.alpha * pos - rule.beta * neg

    if rule.kind == "flat":
        ones_a = np.ones_like(a)
        ones_w = np.ones_like(w)
        denom = fwd(ones_a, ones_w, zeros_b)
        return back(ones_a, ones_w, _safe_quotient(r_out, denom))

    if rule.kind == "box":
        wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
        lo = np.full_like(a, rule.low)
        hi = np.full_like(a, rule.high)
        z = fwd(a, w, b) - fwd(lo, wp, zeros_b) - fwd(hi, wn, zeros_b)
        denom = z + 1e-12 * _sign_keep_zero_positive(z)
        s = _safe_quotient(r_out, denom)
        return back(a, w, s) - back(lo, wp, s) - back(hi, wn, s)

    raise ConfigError(f"rule {rule.kind!r} cannot apply to a {node.kind} layer")


def lrp(graph: model.NetworkGraph, batch: Array, class_id: int,
        composite: RuleComposite) -> RelevanceMap:
    """Decompose the chosen class's pre-softmax logit into input relevances.

    Accepts a single (3,S,S) image or an (N,3,S,S) batch. Relevance starts
    at the class logit (other logits zero) and is propagated node by node
    under ``composite``; the map records relevance at every node output and
    the share each node absorbed (bias terms, stabilizers).
    """
    if batch.ndim == 3:
        batch = batch[None]
    if not 0 <= class_id < graph.classes:
        raise ConfigError(f"class_id {class_id} out of range for {graph.classes} classes")
    _, trace = model.forward(graph, batch, capture=True)

    logits = trace.ios[-1].input.astype(np.float64)
    r = np.zeros_like(logits)
    r[:, class_id] = logits[:, class_id]
    layers: dict[str, Array] = {}
    absorbed: dict[str, float] = {}

    for i in range(len(graph.nodes) - 2, -1, -1):
        node, io = graph.nodes[i], trace.ios[i]
        rule = composite.rule_for(node.name)
        layers[node.name] = r
        if node.kind in ("relu", "cbam"):
            r_in = r
        elif node.kind == "flatten":
            r_in = r.reshape(io.input.shape)
        elif node.kind == "maxpool":
            if rule.kind != "winner":
                raise ConfigError(f"max-pool layer {node.name} needs the winner "
                                  f"rule, got {rule.kind}")
            r_in = maxpool2d_vjp(io.input.shape, io.aux["winners"], r)
        elif node.kind in ("conv", "dense"):
            if rule.kind in ("pass", "winner"):
                raise ConfigError(f"linear layer {node.name} cannot use the "
                                  f"{rule.kind} rule")
            r_in = _linear_relevance(node, io.input, rule, r)
        else:
            raise ConfigError(f"no relevance propagation for node kind {node.kind!r}")
        if not np.isfinite(r_in).all():
            raise NumericError(f"non-finite relevance below layer {node.name}")
        absorbed[node.name] = float(r.sum() - r_in.sum())
        r = r_in

    return RelevanceMap(r, layers, absorbed, class_id, composite.name,
                        logits[:, class_id])
