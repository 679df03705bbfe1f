"""Relevance propagation: rule formulas against pairwise contribution
enumeration, conservation accounting, winner routing, and the stock
composites."""

from __future__ import annotations

import numpy as np
import pytest

import helpers
import oracles
from cbamvgg import model
from cbamvgg.errors import ConfigError, NumericError
from cbamvgg.explain import Rule, RuleComposite, composite_presets, lrp


def _dense_composite(rule: Rule, second: Rule | None = None) -> RuleComposite:
    """Composite for the two-dense-layer helper net."""
    return RuleComposite("unit", {
        "flatten": Rule("pass"),
        "dense1": rule,
        "relu1": Rule("pass"),
        "dense2": second if second is not None else rule,
        "softmax": Rule("pass"),
    })


def _stack_input(rng, n, features):
    return rng.uniform(0.05, 1.0, size=(n, features, 1, 1)).astype(np.float32)


@pytest.fixture(scope="module")
def vgg_graph():
    cfg = model.BuildConfig(profile="vgg16", input_side=224, classes=5, seed=1)
    return model.build_cbam_vgg(cfg)


# ---------------------------------------------------------------------------
# initialization and simple conservation identities
# ---------------------------------------------------------------------------

def test_relevance_initializes_at_the_chosen_logit(rng):
    graph = helpers.dense_stack_net(seed=2)
    x = _stack_input(rng, 2, 3)
    rmap = lrp(graph, x, 1, _dense_composite(Rule("epsilon")))
    _, trace = model.forward(graph, x, capture=True)
    logits = trace.ios[-1].input
    np.testing.assert_array_equal(rmap.logits, logits[:, 1].astype(np.float64))
    start = rmap.layers["dense2"]
    np.testing.assert_array_equal(start[:, 1], rmap.logits)
    assert not start[:, [0, 2]].any()


def test_single_positive_dense_layer_conserves(rng):
    w = rng.uniform(0.1, 1.0, size=(6, 3)).astype(np.float32)
    nodes = [
        model.LayerNode("flatten", "flatten"),
        model.LayerNode("dense", "dense1", {},
                        {"weight": w, "bias": np.zeros(3, np.float32)}),
        model.LayerNode("softmax", "softmax"),
    ]
    graph = model.NetworkGraph(nodes, 1, 3, input_channels=6)
    x = rng.uniform(0.1, 1.0, size=(4, 6, 1, 1)).astype(np.float32)
    comp = RuleComposite("zp", {"flatten": Rule("pass"), "dense1": Rule("zplus"),
                                "softmax": Rule("pass")})
    rmap = lrp(graph, x, 2, comp)
    np.testing.assert_allclose(rmap.total_pixel_relevance(), rmap.logits,
                               rtol=1e-12)


def test_flat_rule_splits_relevance_evenly(rng):
    graph = helpers.dense_stack_net(seed=3, features=6, hidden=4, classes=3)
    x = _stack_input(rng, 2, 6)
    rmap = lrp(graph, x, 0, _dense_composite(Rule("flat"), Rule("epsilon")))
    arriving = rmap.layers["dense1"].sum(axis=1)
    expected = np.repeat(arriving[:, None] / 6.0, 6, axis=1)
    np.testing.assert_allclose(rmap.pixels.reshape(2, 6), expected, rtol=1e-9)


# ---------------------------------------------------------------------------
# rule formulas against the pairwise enumeration oracle
# ---------------------------------------------------------------------------

RULES = [
    Rule("epsilon", epsilon=1e-4),
    Rule("zplus"),
    Rule("gamma", gamma=0.25),
    Rule("flat"),
    Rule("box", low=0.0, high=1.0),
]


@pytest.mark.parametrize("rule", RULES, ids=lambda r: r.kind)
def test_rules_match_the_pairwise_enumeration(rule, rng):
    graph = helpers.dense_stack_net(seed=5, features=5, hidden=6, classes=4)
    x = _stack_input(rng, 3, 5)
    rmap = lrp(graph, x, 1, _dense_composite(rule))
    _, trace = model.forward(graph, x, capture=True)
    a2 = trace.ios[graph.node_index("relu1")].output
    w1 = graph.nodes[graph.node_index("dense1")].params["weight"]
    w2 = graph.nodes[graph.node_index("dense2")].params["weight"]
    kw = dict(epsilon=rule.epsilon, gamma=rule.gamma, low=rule.low,
              high=rule.high)
    for n in range(len(x)):
        r0 = np.zeros(4)
        r0[1] = rmap.logits[n]
        at_hidden = oracles.linear_relevance_contributions(
            a2[n], w2, r0, rule.kind, **kw).sum(axis=1)
        np.testing.assert_allclose(rmap.layers["relu1"][n], at_hidden,
                                   rtol=1e-9, atol=1e-10)
        at_input = oracles.linear_relevance_contributions(
            x[n].ravel(), w1, at_hidden, rule.kind, **kw).sum(axis=1)
        np.testing.assert_allclose(rmap.pixels[n].ravel(), at_input,
                                   rtol=1e-9, atol=1e-10)


def test_alphabeta_matches_the_enumeration_and_conserves():
    graph = helpers.dense_stack_net(seed=0, features=3, hidden=3, classes=2)
    # every column mixes signs so both the + and - pools are populated
    w1 = np.array([[0.8, 0.7, 0.6], [0.5, 0.4, 0.9], [-0.2, -0.1, -0.3]],
                  np.float32)
    w2 = np.array([[1.0, -0.5], [-0.4, 0.8], [0.3, 0.6]], np.float32)
    graph.nodes[graph.node_index("dense1")].params["weight"] = w1
    graph.nodes[graph.node_index("dense2")].params["weight"] = w2
    x = np.full((1, 3, 1, 1), 0.5, np.float32)
    rule = Rule("alphabeta", alpha=2.0, beta=1.0)
    rmap = lrp(graph, x, 0, _dense_composite(rule))

    _, trace = model.forward(graph, x, capture=True)
    a2 = trace.ios[graph.node_index("relu1")].output[0]
    r0 = np.array([rmap.logits[0], 0.0])
    at_hidden = oracles.alphabeta_relevance(a2, w2, r0, alpha=2.0, beta=1.0)
    np.testing.assert_allclose(rmap.layers["relu1"][0], at_hidden, rtol=1e-9)
    at_input = oracles.alphabeta_relevance(x[0].ravel(), w1, at_hidden,
                                           alpha=2.0, beta=1.0)
    np.testing.assert_allclose(rmap.pixels.ravel(), at_input, rtol=1e-9)
    # alpha - beta = 1, so with both pools nonempty the pass conserves
    np.testing.assert_allclose(rmap.pixels.sum(), rmap.logits[0], rtol=1e-9)


def test_epsilon_rule_matches_a_hand_two_layer_computation():
    graph = helpers.dense_stack_net(features=2, hidden=2, classes=2)
    d1, d2 = graph.node_index("dense1"), graph.node_index("dense2")
    graph.nodes[d1].params["weight"] = np.array([[1.0, 0.5], [0.25, 1.5]],
                                                np.float32)
    graph.nodes[d2].params["weight"] = np.array([[2.0, 0.5], [1.0, 1.0]],
                                                np.float32)
    x = np.array([0.625, 0.25], np.float32).reshape(1, 2, 1, 1)
    rmap = lrp(graph, x, 0, _dense_composite(Rule("epsilon", epsilon=0.01)))

    # hidden = [.625 + .0625, .3125 + .375] = [.6875, .6875]
    # logits = [2(.6875) + .6875, .5(.6875) + .6875] = [2.0625, 1.03125]
    assert rmap.logits[0] == 2.0625
    r_h0 = 1.375 / (2.0625 + 0.01) * 2.0625
    r_h1 = 0.6875 / (2.0625 + 0.01) * 2.0625
    np.testing.assert_allclose(rmap.layers["relu1"][0], [r_h0, r_h1],
                               rtol=1e-12)
    r_x0 = 0.625 / (0.6875 + 0.01) * r_h0 + 0.3125 / (0.6875 + 0.01) * r_h1
    r_x1 = 0.0625 / (0.6875 + 0.01) * r_h0 + 0.375 / (0.6875 + 0.01) * r_h1
    np.testing.assert_allclose(rmap.pixels.ravel(), [r_x0, r_x1], rtol=1e-12)


def test_additivity_matches_brute_force_enumeration_exactly():
    """Power-of-two weights keep every quotient exact, so the engine must
    reproduce the summed pairwise contributions bit for bit."""
    w1 = np.array([[0.25, 0.5]] * 4, np.float32)
    w2 = np.array([[0.5, 1.0], [0.25, 0.5]], np.float32)
    nodes = [
        model.LayerNode("flatten", "flatten"),
        model.LayerNode("dense", "dense1", {},
                        {"weight": w1, "bias": np.zeros(2, np.float32)}),
        model.LayerNode("relu", "relu1"),
        model.LayerNode("dense", "dense2", {},
                        {"weight": w2, "bias": np.zeros(2, np.float32)}),
        model.LayerNode("relu", "relu2"),
        model.LayerNode("dense", "dense3", {},
                        {"weight": w2.copy(), "bias": np.zeros(2, np.float32)}),
        model.LayerNode("softmax", "softmax"),
    ]
    graph = model.NetworkGraph(nodes, 1, 2, input_channels=4)
    comp = RuleComposite("zp", {
        "flatten": Rule("pass"), "relu1": Rule("pass"), "relu2": Rule("pass"),
        "softmax": Rule("pass"), "dense1": Rule("zplus"),
        "dense2": Rule("zplus"), "dense3": Rule("zplus"),
    })
    x = np.ones((1, 4, 1, 1), np.float32)
    rmap = lrp(graph, x, 1, comp)
    assert rmap.logits[0] == 2.0

    h1 = np.array([1.0, 2.0])   # ones @ w1
    h2 = np.array([1.0, 2.0])   # h1 @ w2
    r3 = np.array([0.0, 2.0])
    c3 = oracles.linear_relevance_contributions(h2, w2, r3, "zplus")
    assert np.array_equal(c3.sum(axis=1), rmap.layers["relu2"][0])
    assert np.array_equal(c3.sum(axis=0), r3)

    r2 = c3.sum(axis=1)
    c2 = oracles.linear_relevance_contributions(h1, w2, r2, "zplus")
    assert np.array_equal(c2.sum(axis=1), rmap.layers["relu1"][0])
    assert np.array_equal(c2.sum(axis=0), r2)

    r1 = c2.sum(axis=1)
    c1 = oracles.linear_relevance_contributions(np.ones(4), w1, r1, "zplus")
    assert np.array_equal(c1.sum(axis=1), rmap.pixels.ravel())
    assert np.array_equal(c1.sum(axis=0), r1)
    assert np.array_equal(rmap.pixels.ravel(), np.full(4, 0.5))


# ---------------------------------------------------------------------------
# structural routing through pool, gates, and relu
# ---------------------------------------------------------------------------

def test_maxpool_routes_relevance_to_the_forward_winners(rng):
    graph = helpers.tiny_cbam_net(seed=2)
    x = rng.uniform(size=(2, 3, 8, 8)).astype(np.float32)
    rmap = lrp(graph, x, 1, composite_presets(graph)["epsilon_plus"])
    _, trace = model.forward(graph, x, capture=True)
    relu_out = trace.ios[graph.node_index("relu1")].output
    r_pool = rmap.layers["maxpool1"]
    routed = np.zeros(relu_out.shape, np.float64)
    n_img, chans, out_h, out_w = r_pool.shape
    for n in range(n_img):
        for c in range(chans):
            for oy in range(out_h):
                for ox in range(out_w):
                    win = relu_out[n, c, 2 * oy:2 * oy + 2, 2 * ox:2 * ox + 2]
                    k = int(np.argmax(win))
                    routed[n, c, 2 * oy + k // 2, 2 * ox + k % 2] += \
                        r_pool[n, c, oy, ox]
    np.testing.assert_array_equal(rmap.layers["relu1"], routed)


def test_gates_and_relu_pass_relevance_through_unchanged(rng):
    graph = helpers.tiny_cbam_net(seed=4)
    x = rng.uniform(size=(2, 3, 8, 8)).astype(np.float32)
    rmap = lrp(graph, x, 0, composite_presets(graph)["epsilon_plus"])
    np.testing.assert_array_equal(rmap.layers["cbam1"], rmap.layers["maxpool1"])
    np.testing.assert_array_equal(rmap.layers["relu1"], rmap.layers["conv1"])
    assert rmap.absorbed["cbam1"] == 0.0
    assert rmap.absorbed["relu1"] == 0.0


def test_epsilon_plus_composites_conserve_on_a_bias_free_network(rng):
    graph = helpers.tiny_cbam_net(seed=6)
    for node in graph.nodes:
        if "bias" in node.params:
            node.params["bias"] = np.zeros_like(node.params["bias"])
    x = rng.uniform(size=(5, 3, 8, 8)).astype(np.float32)
    _, trace = model.forward(graph, x, capture=True)
    logits = trace.ios[-1].input
    cls = int(np.argmax(np.abs(logits).min(axis=0)))
    presets = composite_presets(graph)
    for name in ("epsilon_plus", "epsilon_plus_flat"):
        rmap = lrp(graph, x, cls, presets[name])
        np.testing.assert_allclose(rmap.total_pixel_relevance(), rmap.logits,
                                   rtol=1e-3)


def test_biases_absorb_a_reported_share(rng):
    graph = helpers.dense_stack_net(seed=9, features=4, hidden=5, classes=3,
                                    zero_bias=False)
    x = _stack_input(rng, 1, 4)
    eps = 1e-3
    rmap = lrp(graph, x, 2, _dense_composite(Rule("epsilon", epsilon=eps)))
    _, trace = model.forward(graph, x, capture=True)
    a = trace.ios[graph.node_index("relu1")].output[0].astype(np.float64)
    node = graph.nodes[graph.node_index("dense2")]
    w = node.params["weight"].astype(np.float64)
    b = node.params["bias"].astype(np.float64)
    r_out = np.zeros(3)
    r_out[2] = rmap.logits[0]
    landed = np.zeros(5)
    for j in range(3):
        z = a * w[:, j]
        denom = z.sum() + b[j]
        denom += eps if denom >= 0 else -eps
        landed += z / denom * r_out[j]
    np.testing.assert_allclose(rmap.layers["relu1"][0], landed, rtol=1e-9)
    assert rmap.absorbed["dense2"] == pytest.approx(r_out.sum() - landed.sum(),
                                                    rel=1e-9)
    recovered = rmap.total_pixel_relevance().sum() + sum(rmap.absorbed.values())
    assert recovered == pytest.approx(rmap.logits.sum(), abs=1e-9)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def test_presets_cover_every_vgg_layer(vgg_graph):
    presets = composite_presets(vgg_graph)
    assert sorted(presets) == ["epsilon_alpha2beta1_flat", "epsilon_gamma_box",
                               "epsilon_plus", "epsilon_plus_flat"]
    convs = [n.name for n in vgg_graph.nodes if n.kind == "conv"]
    for name, comp in presets.items():
        assert comp.name == name
        for node in vgg_graph.nodes:
            rule = comp.rule_for(node.name)
            if node.kind == "dense":
                assert rule.kind == "epsilon"
            elif node.kind == "maxpool":
                assert rule.kind == "winner"
            elif node.kind != "conv":
                assert rule.kind == "pass"
    plus = presets["epsilon_plus"]
    assert {plus.rule_for(c).kind for c in convs} == {"zplus"}
    # the first block of the vgg16 plan is conv1-conv2
    flat = presets["epsilon_plus_flat"]
    assert [flat.rule_for(c).kind for c in convs[:2]] == ["flat", "flat"]
    assert {flat.rule_for(c).kind for c in convs[2:]} == {"zplus"}
    box = presets["epsilon_gamma_box"]
    kinds = [box.rule_for(c).kind for c in convs]
    assert kinds[0] == "box"
    assert set(kinds[1:]) == {"gamma"}
    ab = presets["epsilon_alpha2beta1_flat"]
    assert [ab.rule_for(c).kind for c in convs[:2]] == ["flat", "flat"]
    for c in convs[2:]:
        rule = ab.rule_for(c)
        assert rule.kind == "alphabeta"
        assert rule.alpha == 2.0 and rule.beta == 1.0


def test_rule_labels_spell_their_parameters():
    assert Rule("epsilon", epsilon=0.01).label() == "epsilon(0.01)"
    assert Rule("alphabeta").label() == "alphabeta(2,1)"
    assert Rule("gamma").label() == "gamma(0.25)"
    assert Rule("box").label() == "box(0,1)"
    assert Rule("flat").label() == "flat"


def test_presets_require_a_conv_layer():
    with pytest.raises(ConfigError, match="conv"):
        composite_presets(helpers.dense_stack_net())


# ---------------------------------------------------------------------------
# validation and failure paths
# ---------------------------------------------------------------------------

def test_unassigned_layer_is_an_error():
    graph = helpers.dense_stack_net()
    comp = RuleComposite("partial", {"dense1": Rule("epsilon"),
                                     "dense2": Rule("epsilon")})
    x = np.full((1, 3, 1, 1), 0.5, np.float32)
    with pytest.raises(ConfigError, match="assigns no rule"):
        lrp(graph, x, 0, comp)


def test_rule_placement_is_validated(rng):
    graph = helpers.tiny_cbam_net()
    x = rng.uniform(size=(1, 3, 8, 8)).astype(np.float32)
    comp = composite_presets(graph)["epsilon_plus"]
    bad_pool = RuleComposite("bad", dict(comp.assignments,
                                         maxpool1=Rule("epsilon")))
    with pytest.raises(ConfigError, match="winner"):
        lrp(graph, x, 0, bad_pool)
    bad_dense = RuleComposite("bad", dict(comp.assignments,
                                          dense1=Rule("pass")))
    with pytest.raises(ConfigError, match="pass"):
        lrp(graph, x, 0, bad_dense)
    bogus = RuleComposite("bad", dict(comp.assignments,
                                      dense1=Rule("bogus")))
    with pytest.raises(ConfigError, match="bogus"):
        lrp(graph, x, 0, bogus)


def test_class_id_is_validated():
    graph = helpers.dense_stack_net()
    x = np.full((1, 3, 1, 1), 0.5, np.float32)
    comp = _dense_composite(Rule("epsilon"))
    for bad in (-1, 3):
        with pytest.raises(ConfigError, match="class_id"):
            lrp(graph, x, bad, comp)


def test_non_finite_relevance_names_the_offending_layer():
    graph = helpers.dense_stack_net(features=2, hidden=2, classes=2)
    graph.nodes[graph.node_index("dense1")].params["weight"] = np.array(
        [[1.0, 0.5], [0.5, 1.0]], np.float32)
    # a subnormal positive pool makes the alpha quotient overflow
    graph.nodes[graph.node_index("dense2")].params["weight"] = np.array(
        [[1e-320, 0.5], [-5.0, 0.5]], np.float64)
    x = np.full((1, 2, 1, 1), 0.5, np.float32)
    comp = _dense_composite(Rule("alphabeta"))
    with np.errstate(over="ignore", invalid="ignore"), \
            pytest.raises(NumericError, match="dense2"):
        lrp(graph, x, 0, comp)


# ---------------------------------------------------------------------------
# result structure
# ---------------------------------------------------------------------------

def test_relevance_map_structure_and_determinism(rng):
    graph = helpers.tiny_cbam_net(seed=1)
    x = rng.uniform(size=(3, 3, 8, 8)).astype(np.float32)
    comp = composite_presets(graph)["epsilon_gamma_box"]
    rmap = lrp(graph, x, 2, comp)
    _, trace = model.forward(graph, x, capture=True)
    names = [n.name for n in graph.nodes]
    assert set(rmap.layers) == set(names) - {"softmax"}
    assert set(rmap.absorbed) == set(rmap.layers)
    for i, node in enumerate(graph.nodes[:-1]):
        assert rmap.layers[node.name].shape == trace.ios[i].output.shape
    assert rmap.pixels.shape == x.shape
    assert np.isfinite(rmap.pixels).all()
    assert rmap.class_id == 2
    assert rmap.composite_name == "epsilon_gamma_box"
    np.testing.assert_array_equal(rmap.total_pixel_relevance(),
                                  rmap.pixels.reshape(3, -1).sum(axis=1))
    again = lrp(graph, x, 2, comp)
    np.testing.assert_array_equal(rmap.pixels, again.pixels)


def test_single_image_matches_its_batch_row(rng):
    graph = helpers.tiny_cbam_net(seed=5)
    x = rng.uniform(size=(3, 8, 8)).astype(np.float32)
    comp = composite_presets(graph)["epsilon_plus"]
    single = lrp(graph, x, 1, comp)
    batched = lrp(graph, x[None], 1, comp)
    assert single.pixels.shape == (1, 3, 8, 8)
    np.testing.assert_array_equal(single.pixels, batched.pixels)
