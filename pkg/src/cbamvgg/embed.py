"""Feature extraction and exact t-SNE projection to 2-D.

t-SNE here is the exact O(n^2) algorithm: per-point Gaussian bandwidths
calibrated by bisection to the target perplexity, symmetrized affinities,
Student-t low-dimensional kernel, gradient descent with early exaggeration
x12 for the first 250 iterations and momentum 0.5 -> 0.8. After the
exaggeration phase each step is accepted only if the exact KL divergence
does not increase (falling back to shrinking plain gradient steps), so the
logged KL trace is non-increasing from that point on. Everything is
deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import datapipe, model
from .errors import ConfigError, DataError
from .imaging import write_png
from .tensor import Array

_PALETTE = ((204, 37, 41), (57, 106, 177), (62, 150, 81), (218, 124, 48),
            (83, 81, 84), (107, 76, 154), (146, 36, 40), (148, 139, 61))


@dataclass
class FeatureMatrix:
    rows: Array            # (n, d) float64
    labels: Array          # (n,) int64
    layer: str
    paths: list[str] = field(default_factory=list)


@dataclass
class Embedding2D:
    coords: Array          # (n, 2) float64
    perplexity: float
    iterations: int
    seed: int
    kl: float
    kl_trace: list[float] = field(default_factory=list)
    exaggeration_end: int = 0
    init_sigma: float = 1e-4


def extract_features(graph: model.NetworkGraph, part: list[datapipe.LabeledImage],
                     layer: str | None = None, batch_size: int = 32,
                     enhance: bool = True) -> FeatureMatrix:
    """Flattened activations of one layer, one row per sample in part order.

    Default layer is the flatten node: the representation feeding the
    final dense classifier.
    """
    if layer is None:
        layer = next((n.name for n in graph.nodes if n.kind == "flatten"), None)
        if layer is None:
            raise ConfigError("graph has no flatten node; pass a layer name")
    idx = graph.node_index(layer)
    x, y = datapipe.prepare_part(part, graph.input_side, enhance)
    rows = []
    for bx, _ in datapipe.batches(x, y, batch_size):
        _, trace = model.forward(graph, bx, capture=True)
        rows.append(trace.ios[idx].output.reshape(len(bx), -1).astype(np.float64))
    return FeatureMatrix(np.concatenate(rows), y, layer, [im.path for im in part])


def _pairwise_sq_dists(x: Array) -> Array:
    norms = (x * x).sum(axis=1)
    d = norms[:, None] + norms[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_affinities(dists_row: Array, beta: float) -> tuple[Array, float]:
    """Conditional affinities p_{j|i} for one point and their entropy (nats)."""
    logits = -beta * dists_row
    logits -= logits.max()
    p = np.exp(logits)
    total = p.sum()
    p /= total
    # entropy in nats, guarding p log p at p = 0
    h = float(-(p * np.log(np.where(p > 0.0, p, 1.0))).sum())
    return p, h


def _calibrate_affinities(dists: Array, perplexity: float,
                          tol: float = 1e-5, max_iter: int = 100) -> Array:
    """Bisect each point's precision so 2^H matches the perplexity within
    ``tol`` of log-perplexity; returns the symmetrized matrix P."""
    n = len(dists)
    target = np.log(perplexity)
    p_cond = np.zeros((n, n), dtype=np.float64)
    others = ~np.eye(n, dtype=bool)
    for i in range(n):
        row = dists[i][others[i]]
        if row.max() <= 0.0:
            raise DataError(f"sample {i} duplicates every other sample; "
                            f"affinities are undefined (zero variance)")
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            p, h = _row_affinities(row, beta)
            if abs(h - target) <= tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if np.isinf(hi) else (lo + hi) / 2.0
            else:
                hi = beta
                beta = (lo + hi) / 2.0
        p_cond[i][others[i]] = p
    sym = (p_cond + p_cond.T) / (2.0 * n)
    return sym


def _kl_and_grad(p: Array, coords: Array) -> tuple[float, Array]:
    """Exact KL(P||Q) and its gradient for the Student-t kernel."""
    d = _pairwise_sq_dists(coords)
    w = 1.0 / (1.0 + d)
    np.fill_diagonal(w, 0.0)
    q = w / w.sum()
    q = np.maximum(q, 1e-12)
    mask = p > 0.0
    kl = float((p[mask] * np.log(p[mask] / q[mask])).sum())
    m = (p - q) * w
    grad = 4.0 * (coords * m.sum(axis=1)[:, None] - m @ coords)
    return kl, grad


def tsne(features: FeatureMatrix, perplexity: float = 20.0,
         iterations: int = 1000, seed: int = 0, learning_rate: float = 200.0,
         exaggeration: float = 12.0, exaggeration_iters: int = 250) -> Embedding2D:
    """Exact t-SNE of the feature rows into 2-D."""
    x = np.asarray(features.rows, dtype=np.float64)
    n = len(x)
    if n < 4:
        raise DataError(f"embedding needs at least 4 samples, got {n}")
    limit = (n - 1) / 3.0
    if not 1.0 <= perplexity < limit:
        raise ConfigError(f"perplexity must lie in [1, {limit:.2f}) for n={n}, "
                          f"got {perplexity}")
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    dists = _pairwise_sq_dists(x)
    if dists.max() <= 0.0:
        raise DataError("all samples identical (zero variance); nothing to embed")
    p = _calibrate_affinities(dists, perplexity)

    rng = np.random.default_rng(seed)
    init_sigma = 1e-4
    coords = rng.normal(0.0, init_sigma, size=(n, 2))
    velocity = np.zeros_like(coords)
    exag_end = min(exaggeration_iters, iterations)
    trace: list[float] = []
    kl_now, _ = _kl_and_grad(p, coords)

    for t in range(1, iterations + 1):
        momentum = 0.5 if t <= exag_end else 0.8
        if t <= exag_end:
            _, grad = _kl_and_grad(p * exaggeration, coords)
            velocity = momentum * velocity - learning_rate * grad
            coords = coords + velocity
            coords = coords - coords.mean(axis=0)
            kl_now, _ = _kl_and_grad(p, coords)
        else:
            _, grad = _kl_and_grad(p, coords)
            candidate = coords + momentum * velocity - learning_rate * grad
            candidate -= candidate.mean(axis=0)
            kl_cand, _ = _kl_and_grad(p, candidate)
            if kl_cand <= kl_now:
                velocity = candidate - coords
                coords = candidate
                kl_now = kl_cand
            else:
                # monotonicity guard: drop momentum, shrink a plain step
                velocity = np.zeros_like(coords)
                step = learning_rate
                for _ in range(60):
                    candidate = coords - step * grad
                    candidate -= candidate.mean(axis=0)
                    kl_cand, _ = _kl_and_grad(p, candidate)
                    if kl_cand <= kl_now:
                        coords = candidate
                        kl_now = kl_cand
                        break
                    step /= 2.0
        trace.append(kl_now)

    return Embedding2D(coords, perplexity, iterations, seed, kl_now, trace,
                       exag_end, init_sigma)


def knn_purity(coords: Array, labels: Array, k: int = 5) -> float:
    """Mean fraction of each point's k nearest neighbours sharing its label."""
    d = _pairwise_sq_dists(np.asarray(coords, dtype=np.float64))
    np.fill_diagonal(d, np.inf)
    labels = np.asarray(labels)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float((labels[idx] == labels[:, None]).mean())


def write_embedding_tsv(path, embedding: Embedding2D, features: FeatureMatrix) -> None:
    """Delimited text: one `path<TAB>label<TAB>x<TAB>y` row per sample."""
    lines = [
        f"# layer={features.layer} perplexity={embedding.perplexity:g} "
        f"iterations={embedding.iterations} seed={embedding.seed} "
        f"init_sigma={embedding.init_sigma:g} kl={embedding.kl:.10f}",
        "path\tlabel\tx\ty",
    ]
    paths = features.paths or [""] * len(features.labels)
    for sp, label, (cx, cy) in zip(paths, features.labels, embedding.coords):
        lines.append(f"{sp}\t{int(label)}\t{cx:.17g}\t{cy:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def scatter_png(path, embedding: Embedding2D, labels: Array,
                size: int = 480, margin: int = 30, radius: int = 3) -> None:
    """Deterministic scatter plot: white canvas, one palette color per class."""
    coords = embedding.coords
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    scale = (size - 2 * margin) / span
    canvas = np.full((size, size, 3), 255, dtype=np.uint8)
    ys, xs = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = ys * ys + xs * xs <= radius * radius
    for (cx, cy), label in zip(coords, np.asarray(labels)):
        px = margin + int(np.floor((cx - lo[0]) * scale[0] + 0.5))
        py = size - margin - int(np.floor((cy - lo[1]) * scale[1] + 0.5))
        color = _PALETTE[int(label) % len(_PALETTE)]
        for dy, dx in zip(*np.nonzero(disk)):
            yy = py + dy - radius
            xx = px + dx - radius
            if 0 <= yy < size and 0 <= xx < size:
                canvas[yy, xx] = color
    write_png(path, canvas)
