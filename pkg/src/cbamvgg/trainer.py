"""Training objective and loop: cross-entropy with an L2 penalty, SGD with
momentum, plateau learning-rate decay, and per-epoch evaluation.

The objective is mean cross-entropy over the batch plus (lambda/2N) times
the squared norm of all weight tensors (biases excluded), with N the
current batch size. Histories are deterministic for a fixed seed apart
from the recorded wall time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import datapipe, model
from .errors import DataError, NumericError
from .metrics import EvalReport, evaluate_predictions
from .tensor import Array

#: parameter names that count as weights for the L2 penalty
_WEIGHT_NAMES = {"kernel", "weight", "w0", "w1"}


@dataclass
class LossConfig:
    lam: float = 1e-4  # regularization hyperparameter lambda
    classes: int = 2

    def __post_init__(self):
        if self.lam < 0:
            raise DataError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_test_acc: float = -1.0

    def to_text(self) -> str:
        lines = ["epoch train_loss train_acc test_acc lr seconds"]
        for r in self.records:
            lines.append(f"{r.epoch} {r.train_loss:.6f} {r.train_acc:.6f} "
                         f"{r.test_acc:.6f} {r.lr:.6f} {r.seconds:.2f}")
        lines.append(f"best_epoch {self.best_epoch} best_test_acc {self.best_test_acc:.6f}")
        return "\n".join(lines) + "\n"


def cross_entropy(probs: Array, onehot: Array) -> float:
    """Mean over the batch of -sum(y log p), with log clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if probs.shape != onehot.shape:
        raise DataError(f"probs {probs.shape} and targets {onehot.shape} disagree")
    rows = onehot.sum(axis=1)
    if (not np.allclose(rows, 1.0)) or ((onehot != 0) & (onehot != 1)).any():
        raise DataError("targets must be one-hot rows")
    clamped = np.maximum(probs, 1e-12)
    return float(-(onehot * np.log(clamped)).sum() / len(probs))


def cross_entropy_logit_gradient(probs: Array, onehot: Array) -> Array:
    """d(mean CE)/d(logits) = (p - y)/N for softmax probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    return (probs - np.asarray(onehot, dtype=np.float64)) / len(probs)


def l2_penalty(graph: model.NetworkGraph, lam: float, n: int) -> float:
    """(lambda / 2N) x sum of squared weight entries; biases excluded."""
    if n < 1:
        raise DataError(f"sample count must be >= 1, got {n}")
    total = 0.0
    for _, pname, arr in graph.named_parameters():
        if pname in _WEIGHT_NAMES:
            total += float(np.square(arr.astype(np.float64)).sum())
    return lam * total / (2.0 * n)


class SgdMomentum:
    """Classic momentum SGD: v <- m v - lr g; w <- w + v."""

    def __init__(self, momentum: float = 0.9):
        if not 0.0 <= momentum < 1.0:
            raise DataError(f"momentum must be in [0,1), got {momentum}")
        self.momentum = momentum
        self.velocity: dict[tuple[str, str], Array] = {}

    def step(self, graph: model.NetworkGraph, grads: dict[str, dict[str, Array]],
             lr: float) -> None:
        for node in graph.nodes:
            for pname, arr in node.params.items():
                g = grads.get(node.name, {}).get(pname)
                if g is None:
                    continue
                key = (node.name, pname)
                v = self.velocity.get(key)
                if v is None:
                    v = np.zeros_like(arr)
                v = self.momentum * v - lr * g.astype(arr.dtype)
                self.velocity[key] = v
                arr += v


def train_step(graph: model.NetworkGraph, batch_x: Array, batch_y: Array,
               optimizer: SgdMomentum, lr: float,
               cfg: LossConfig) -> tuple[float, Array]:
    """One SGD step on a batch; returns the pre-update total loss and the
    pre-update batch probabilities (for running accuracy)."""
    onehot = datapipe.one_hot(batch_y, cfg.classes)
    # forward raises NonFiniteError naming the first bad layer
    probs, trace = model.forward(graph, batch_x, capture=True)
    data_loss = cross_entropy(probs, onehot)
    reg_loss = l2_penalty(graph, cfg.lam, len(batch_x))
    total = data_loss + reg_loss
    if not np.isfinite(total):
        raise NumericError("non-finite training loss (regularization overflow)")

    # seed the backward pass at the logits: d(mean CE)/dz = (p - y)/N
    grad_logits = cross_entropy_logit_gradient(probs, onehot)
    grads: dict[str, dict[str, Array]] = {}
    g = grad_logits
    for node, io in zip(reversed(graph.nodes[:-1]), reversed(trace.ios[:-1])):
        g, pg = model.node_backward(graph, node, io, g)
        if pg:
            grads[node.name] = pg
    if cfg.lam > 0:
        scale = cfg.lam / len(batch_x)
        for node in graph.nodes:
            for pname, arr in node.params.items():
                if pname in _WEIGHT_NAMES and node.name in grads:
                    grads[node.name][pname] = grads[node.name][pname] + scale * arr.astype(np.float64)
    optimizer.step(graph, grads, lr)
    return total, probs


def evaluate(graph: model.NetworkGraph, x: Array, y: Array, batch_size: int = 32,
             class_names: list[str] | None = None) -> EvalReport:
    """Forward the whole part in batches and assemble an EvalReport."""
    probs_parts = []
    loss_sum = 0.0
    for bx, by in datapipe.batches(x, y, batch_size):
        p, _ = model.forward(graph, bx)
        probs_parts.append(p)
        loss_sum += cross_entropy(p, datapipe.one_hot(by, graph.classes)) * len(bx)
    probs = np.concatenate(probs_parts)
    return evaluate_predictions(probs, y, loss_sum / len(x), class_names)


def resolve_lr(lr, epoch: int):
    """Per-epoch learning rate for a schedule argument, or None for a bare
    float (those are managed by plateau decay inside fit). Accepts a
    sequence indexed by epoch (clamped to its last entry) or a callable
    of the 1-based epoch number."""
    if callable(lr):
        return float(lr(epoch))
    if isinstance(lr, (list, tuple, np.ndarray)):
        if len(lr) == 0:
            raise DataError("empty learning-rate schedule")
        return float(lr[min(epoch, len(lr)) - 1])
    return None


def fit(graph: model.NetworkGraph, split: datapipe.DatasetSplit, epochs: int,
        batch_size: int, lr, cfg: LossConfig, seed: int = 0,
        checkpoint_path=None, momentum: float = 0.9, plateau_patience: int = 3,
        plateau_factor: float = 0.1, enhance: bool = True,
        balanced: bool = False, log=None) -> TrainHistory:
    """Train for ``epochs`` epochs of minibatch SGD with momentum.

    ``lr`` is either a float, in which case it is multiplied by
    ``plateau_factor`` whenever the epoch train loss has not improved for
    ``plateau_patience`` consecutive epochs, or an explicit schedule (a
    per-epoch sequence or a callable of the 1-based epoch number), which
    disables the plateau rule. Momentum velocity is reset whenever the
    rate drops: steps accumulated at the old scale overshoot at the new one.

    ``balanced`` composes every batch by class round-robin instead of a
    plain shuffle. The test part is scored after every epoch; the
    checkpoint with the best test accuracy is kept when
    ``checkpoint_path`` is given.
    """
    if epochs < 1:
        raise DataError(f"epochs must be >= 1, got {epochs}")
    train_x, train_y = datapipe.prepare_part(split.train, graph.input_side, enhance)
    test_x, test_y = datapipe.prepare_part(split.test, graph.input_side, enhance)
    optimizer = SgdMomentum(momentum)
    rng = np.random.default_rng(seed)
    history = TrainHistory()
    current_lr = resolve_lr(lr, 1)
    scheduled = current_lr is not None
    if not scheduled:
        current_lr = float(lr)
    best_loss = np.inf
    stale = 0
    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        if scheduled:
            next_lr = resolve_lr(lr, epoch)
            if next_lr < current_lr:
                optimizer.velocity.clear()
            current_lr = next_lr
        loss_sum = 0.0
        hits = 0
        for bx, by in datapipe.batches(train_x, train_y, batch_size,
                                       seed=int(rng.integers(2**63)),
                                       balanced=balanced):
            loss, probs = train_step(graph, bx, by, optimizer, current_lr, cfg)
            loss_sum += loss * len(bx)
            hits += int((probs.argmax(axis=1) == by).sum())
        test_report = evaluate(graph, test_x, test_y, batch_size)
        record = EpochRecord(epoch, loss_sum / len(train_x), hits / len(train_x),
                             test_report.acc, current_lr,
                             time.perf_counter() - started)
        history.records.append(record)
        if log:
            log(f"epoch {epoch}: loss {record.train_loss:.4f} "
                f"train_acc {record.train_acc:.3f} test_acc {record.test_acc:.3f} "
                f"lr {current_lr:g}")
        if record.test_acc > history.best_test_acc:
            history.best_test_acc = record.test_acc
            history.best_epoch = epoch
            if checkpoint_path is not None:
                model.save_checkpoint(graph, checkpoint_path)
        if record.train_loss < best_loss:
            best_loss = record.train_loss
            stale = 0
        else:
            stale += 1
            if stale >= plateau_patience and not scheduled:
                current_lr *= plateau_factor
                optimizer.velocity.clear()
                best_loss = record.train_loss
                stale = 0
    return history
