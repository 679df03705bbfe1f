"""Objective terms, the SGD step, and the epoch loop."""

from __future__ import annotations

import numpy as np
import pytest

import helpers
import oracles
from cbamvgg import datapipe, model, synth, trainer
from cbamvgg.errors import DataError, NumericError
from cbamvgg.tensor import softmax


def _tiny_split(per_class=6, seed=11, ratio=0.75):
    samples = synth.make_lesion_dataset(per_class=per_class, side=32, seed=seed)
    images = [s.image for s in samples]
    return datapipe.split_dataset(images, list(synth.CLASS_NAMES), ratio=ratio, seed=0)


def _stalled_split():
    """Every image identical, labels round-robin: loss floors at ln 4."""
    base = synth.make_lesion_dataset(per_class=1, side=32, seed=3)[0].image.pixels
    names = ["a", "b", "c", "d"]
    images = [datapipe.LabeledImage(base.copy(), k % 4, names[k % 4], f"i{k}.png")
              for k in range(16)]
    return datapipe.split_dataset(images, names, ratio=0.75, seed=0)


def _mini_graph(seed=0):
    return model.build_cbam_vgg(model.BuildConfig(profile="mini", input_side=32,
                                                  classes=4, seed=seed))


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------

def test_cross_entropy_perfect_prediction_is_zero():
    onehot = np.eye(3, dtype=np.float32)
    assert trainer.cross_entropy(onehot, onehot) == 0.0


def test_cross_entropy_uniform_prediction_is_log_k():
    for k in (2, 4, 10):
        probs = np.full((5, k), 1.0 / k)
        onehot = datapipe.one_hot(np.zeros(5, np.int64), k)
        assert abs(trainer.cross_entropy(probs, onehot) - np.log(k)) < 1e-12


def test_cross_entropy_clamps_log_at_1e12_floor():
    probs = np.array([[0.0, 1.0]])
    onehot = np.array([[1.0, 0.0]])
    assert trainer.cross_entropy(probs, onehot) == pytest.approx(-np.log(1e-12), rel=1e-12)


def test_cross_entropy_matches_direct_oracle(rng):
    probs = softmax(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 4, size=6)
    onehot = datapipe.one_hot(labels, 4)
    assert trainer.cross_entropy(probs, onehot) == pytest.approx(
        oracles.cross_entropy_direct(probs, onehot), abs=1e-12)


def test_cross_entropy_rejects_bad_targets():
    probs = np.full((2, 2), 0.5)
    with pytest.raises(DataError):
        trainer.cross_entropy(probs, np.full((2, 2), 0.5))
    with pytest.raises(DataError):
        trainer.cross_entropy(probs, np.eye(3))


def test_cross_entropy_logit_gradient_matches_fd(rng):
    z = rng.normal(size=(3, 4))
    labels = rng.integers(0, 4, size=3)
    onehot = datapipe.one_hot(labels, 4)
    got = trainer.cross_entropy_logit_gradient(softmax(z), onehot)

    def f(zv):
        return trainer.cross_entropy(softmax(zv), onehot)

    fd = oracles.central_difference(f, z, step=1e-6)
    assert np.abs(got - fd).max() < 1e-6 * max(1.0, np.abs(fd).max())


# ---------------------------------------------------------------------------
# l2 penalty
# ---------------------------------------------------------------------------

def test_l2_penalty_zero_weights_give_zero():
    graph = helpers.dense_stack_net()
    for node in graph.nodes:
        for p in node.params.values():
            p[...] = 0.0
    assert trainer.l2_penalty(graph, 1.0, 4) == 0.0


def test_l2_penalty_single_weight_formula():
    graph = helpers.dense_stack_net()
    for node in graph.nodes:
        for p in node.params.values():
            p[...] = 0.0
    graph.nodes[1].params["weight"][0, 0] = 3.0
    graph.nodes[1].params["bias"][:] = 100.0  # biases never count
    lam, n = 0.7, 5
    assert trainer.l2_penalty(graph, lam, n) == pytest.approx(lam * 9.0 / (2 * n), rel=1e-12)
    assert trainer.l2_penalty(graph, 2 * lam, n) == pytest.approx(
        2 * trainer.l2_penalty(graph, lam, n), rel=1e-12)


def test_l2_penalty_counts_attention_weights_not_biases():
    graph = helpers.tiny_cbam_net(seed=1)
    want = 0.0
    for _, pname, arr in graph.named_parameters():
        if pname in {"kernel", "weight", "w0", "w1"}:
            want += float(np.square(arr.astype(np.float64)).sum())
    assert trainer.l2_penalty(graph, 0.3, 2) == pytest.approx(0.3 * want / 4.0, rel=1e-12)
    with pytest.raises(DataError):
        trainer.l2_penalty(graph, 0.3, 0)


def test_loss_config_rejects_negative_lambda():
    with pytest.raises(DataError):
        trainer.LossConfig(lam=-0.1)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_sgd_momentum_recurrence_by_hand():
    w = np.array([[1.0]], np.float64)
    graph = model.NetworkGraph([model.LayerNode("dense", "d", {}, {"weight": w})],
                               1, 1, input_channels=1)
    opt = trainer.SgdMomentum(momentum=0.5)
    opt.step(graph, {"d": {"weight": np.array([[2.0]])}}, lr=0.1)
    # v1 = -0.1*2 = -0.2 ; w = 0.8
    assert w[0, 0] == pytest.approx(0.8, abs=1e-15)
    opt.step(graph, {"d": {"weight": np.array([[1.0]])}}, lr=0.1)
    # v2 = 0.5*(-0.2) - 0.1*1 = -0.2 ; w = 0.6
    assert w[0, 0] == pytest.approx(0.6, abs=1e-15)
    assert opt.velocity[("d", "weight")][0, 0] == pytest.approx(-0.2, abs=1e-15)


def test_sgd_momentum_validates_momentum():
    with pytest.raises(DataError):
        trainer.SgdMomentum(momentum=1.0)
    with pytest.raises(DataError):
        trainer.SgdMomentum(momentum=-0.1)


# ---------------------------------------------------------------------------
# train_step
# ---------------------------------------------------------------------------

def test_train_step_with_zero_lr_changes_nothing(rng):
    graph = helpers.tiny_cbam_net(seed=2)
    before = {(n, p): a.copy() for n, p, a in graph.named_parameters()}
    x = rng.uniform(0, 1, size=(4, 3, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, size=4)
    loss, probs = trainer.train_step(graph, x, y, trainer.SgdMomentum(), 0.0,
                                     trainer.LossConfig(lam=1e-4, classes=3))
    assert np.isfinite(loss) and probs.shape == (4, 3)
    for n, p, a in graph.named_parameters():
        assert np.array_equal(a, before[(n, p)])


def test_train_step_reports_pre_update_loss(rng):
    graph = helpers.tiny_cbam_net(seed=3)
    x = rng.uniform(0, 1, size=(4, 3, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, size=4)
    cfg = trainer.LossConfig(lam=1e-3, classes=3)
    want = helpers.loss_on(graph, x, y, lam=cfg.lam)
    loss, _ = trainer.train_step(graph, x, y, trainer.SgdMomentum(), 0.05, cfg)
    assert loss == pytest.approx(want, rel=1e-12)


def test_train_step_huge_lambda_is_monotone_weight_decay(rng):
    graph = helpers.tiny_cbam_net(seed=4)
    x = rng.uniform(0, 1, size=(2, 3, 8, 8)).astype(np.float32)
    y = np.array([0, 1])
    cfg = trainer.LossConfig(lam=1e4, classes=3)  # decay term dwarfs the data term
    opt = trainer.SgdMomentum(momentum=0.0)
    norms = []
    for _ in range(5):
        trainer.train_step(graph, x, y, opt, 1e-5, cfg)
        norms.append(sum(float(np.square(a).sum())
                         for _, p, a in graph.named_parameters()
                         if p in helpers.WEIGHT_NAMES))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_objective_gradient_with_l2_matches_fd():
    graph = helpers.cast_params(helpers.dense_stack_net(seed=5, zero_bias=False))
    rng = np.random.default_rng(55)
    x = rng.uniform(0, 1, size=(3, 3, 1, 1))
    y = np.array([0, 2, 1])
    lam = 0.05
    grads, _ = helpers.analytic_grads(graph, x, y, lam=lam)
    for node in graph.nodes:
        for pname, arr in node.params.items():
            fd = oracles.central_difference(
                lambda _: helpers.loss_on(graph, x, y, lam=lam), arr, step=1e-6)
            got = grads[node.name][pname]
            denom = max(1.0, np.abs(fd).max())
            assert np.abs(got - fd).max() / denom < 1e-6, (node.name, pname)


def test_train_step_flags_non_finite_regularization(rng):
    graph = helpers.tiny_cbam_net(seed=6)
    x = rng.uniform(0, 1, size=(2, 3, 8, 8)).astype(np.float32)
    y = np.array([0, 1])
    with pytest.raises(NumericError):
        trainer.train_step(graph, x, y, trainer.SgdMomentum(), 0.01,
                           trainer.LossConfig(lam=1e308, classes=3))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_matches_direct_forward(rng):
    graph = helpers.tiny_cbam_net(seed=7)
    x = rng.uniform(0, 1, size=(7, 3, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, size=7)
    report = trainer.evaluate(graph, x, y, batch_size=3)
    probs, _ = model.forward(graph, x)
    assert report.sample_count == 7
    assert report.acc == pytest.approx(float((probs.argmax(1) == y).mean()), abs=1e-12)
    want_loss = trainer.cross_entropy(probs, datapipe.one_hot(y, 3))
    assert report.loss == pytest.approx(want_loss, rel=1e-12)
    # batch size must not matter
    again = trainer.evaluate(graph, x, y, batch_size=32)
    assert again.loss == pytest.approx(report.loss, rel=1e-12)
    assert again.acc == report.acc


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------

def test_resolve_lr_variants():
    assert trainer.resolve_lr(0.01, 3) is None
    assert trainer.resolve_lr([0.1, 0.01], 1) == 0.1
    assert trainer.resolve_lr([0.1, 0.01], 2) == 0.01
    assert trainer.resolve_lr([0.1, 0.01], 9) == 0.01  # clamps to last entry
    assert trainer.resolve_lr(np.array([0.3]), 2) == pytest.approx(0.3)
    assert trainer.resolve_lr(lambda e: 1.0 / e, 4) == 0.25
    with pytest.raises(DataError):
        trainer.resolve_lr([], 1)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_fit_produces_one_record_per_epoch(tmp_path):
    split = _tiny_split()
    history = trainer.fit(_mini_graph(), split, epochs=3, batch_size=8, lr=0.05,
                          cfg=trainer.LossConfig(lam=1e-4, classes=4), seed=1,
                          checkpoint_path=tmp_path / "best.ckpt", enhance=False)
    assert [r.epoch for r in history.records] == [1, 2, 3]
    assert history.best_epoch in (1, 2, 3)
    assert (tmp_path / "best.ckpt").exists()
    # the saved checkpoint reproduces the best test accuracy
    best = model.load_checkpoint(tmp_path / "best.ckpt")
    tx, ty = datapipe.prepare_part(split.test, 32, enhance=False)
    report = trainer.evaluate(best, tx, ty)
    assert report.acc == pytest.approx(history.best_test_acc, abs=1e-12)


def test_fit_same_seed_gives_identical_history_apart_from_wall_time():
    split = _tiny_split()
    cfg = trainer.LossConfig(lam=1e-4, classes=4)
    runs = [trainer.fit(_mini_graph(seed=0), split, epochs=3, batch_size=8,
                        lr=0.05, cfg=cfg, seed=5, enhance=False)
            for _ in range(2)]
    for a, b in zip(runs[0].records, runs[1].records):
        assert (a.epoch, a.train_loss, a.train_acc, a.test_acc, a.lr) == \
               (b.epoch, b.train_loss, b.train_acc, b.test_acc, b.lr)
    assert runs[0].best_epoch == runs[1].best_epoch
    assert runs[0].best_test_acc == runs[1].best_test_acc
    other = trainer.fit(_mini_graph(seed=0), split, epochs=3, batch_size=8,
                        lr=0.05, cfg=cfg, seed=6, enhance=False)
    assert any(a.train_loss != b.train_loss
               for a, b in zip(runs[0].records, other.records))


def test_fit_plateau_decay_fires_on_stalled_loss():
    history = trainer.fit(_mini_graph(), _stalled_split(), epochs=6, batch_size=4,
                          lr=0.5, cfg=trainer.LossConfig(lam=0.0, classes=4),
                          seed=1, enhance=False, balanced=True, plateau_patience=2)
    assert [r.lr for r in history.records] == [0.5] * 4 + [0.05] * 2
    assert history.records[-1].train_loss == pytest.approx(np.log(4), abs=1e-6)


def test_fit_explicit_schedule_disables_plateau_decay():
    history = trainer.fit(_mini_graph(), _stalled_split(), epochs=4, batch_size=4,
                          lr=[0.2, 0.02], cfg=trainer.LossConfig(lam=0.0, classes=4),
                          seed=1, enhance=False, balanced=True, plateau_patience=1)
    # stalls everywhere, yet the lr follows the schedule exactly
    assert [r.lr for r in history.records] == [0.2, 0.02, 0.02, 0.02]


def test_fit_rejects_zero_epochs():
    with pytest.raises(DataError):
        trainer.fit(_mini_graph(), _tiny_split(), epochs=0, batch_size=4, lr=0.01,
                    cfg=trainer.LossConfig(lam=0.0, classes=4))


def test_history_to_text_layout():
    history = trainer.TrainHistory([
        trainer.EpochRecord(1, 1.5, 0.25, 0.3, 0.05, 2.0),
        trainer.EpochRecord(2, 1.2, 0.5, 0.6, 0.05, 2.1),
    ], best_epoch=2, best_test_acc=0.6)
    lines = history.to_text().splitlines()
    assert lines[0].split() == ["epoch", "train_loss", "train_acc", "test_acc",
                                "lr", "seconds"]
    assert lines[1].startswith("1 1.500000 0.250000 0.300000 0.050000")
    assert lines[-1] == "best_epoch 2 best_test_acc 0.600000"
