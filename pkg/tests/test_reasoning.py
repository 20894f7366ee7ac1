import math

import numpy as np
import pytest

from grnet.autodiff import Tensor
from grnet.errors import ConfigError, DimensionError, InputError
from grnet.pyramid import PyramidConfig, extract_pyramid
from grnet.reasoning import ModelParams, ReasoningConfig, forward, gcn_layer, loss, propagate
from grnet.simgraph import EdgeMask, build_nodes, node_layout
from grnet.training import init_params

from conftest import loop_pool

TOY = PyramidConfig.parse("1x1,2x2")


def toy_model(seed=0, edge_mode="recompute", mask=EdgeMask(), channels=8, dim=6, hidden=4,
              iterations=2, pyramid=TOY):
    rng = np.random.default_rng(seed)
    model = init_params(channels, pyramid, ReasoningConfig(iterations, hidden, dim, edge_mode, mask), rng)
    model.head_bias.data[...] = rng.normal(size=2)
    return model


def straight_line_logits(q, g, model):
    """Loop-by-loop evaluation of pooling, similarity nodes, reasoning and head."""
    scales = model.pyramid.scales
    qv, gv = loop_pool(q, scales), loop_pool(g, scales)
    nodes, scale_of = [], []
    offset = 0
    for l, (r, c) in enumerate(scales):
        n = r * c
        for i in range(n):
            for j in range(n):
                d = model.proj.data @ (qv[offset + i] - gv[offset + j]) ** 2
                norm = math.sqrt(float(d @ d))
                nodes.append(d / norm if norm >= 1e-12 else d / 1e-12)
                scale_of.append(l)
        offset += n
    h = np.array(nodes)
    n = len(h)
    mode = model.reasoning.mask.mode
    allowed = [[mode == "full" or (mode == "intra" and scale_of[a] == scale_of[b])
                or (mode == "inter" and scale_of[a] != scale_of[b]) or a == b and mode != "intra"
                or (mode == "intra" and a == b) for b in range(n)] for a in range(n)]
    w = None
    for layer in model.layers:
        if layer.edges is not None:
            t_in, t_out = layer.edges.t_in.data, layer.edges.t_out.data
            w = np.zeros((n, n))
            for a in range(n):
                logits = [float((t_out @ h[a]) @ (t_in @ h[b])) for b in range(n)]
                top = max(x for x, ok in zip(logits, allowed[a]) if ok)
                e = [math.exp(x - top) if ok else 0.0 for x, ok in zip(logits, allowed[a])]
                w[a] = np.array(e) / sum(e)
        mixed = np.array([sum(w[a, b] * h[b] for b in range(n)) for a in range(n)])
        h = np.array([np.maximum(layer.weight.data @ m, 0.0) for m in mixed])
    return model.head_weight.data @ h[0] + model.head_bias.data


@pytest.mark.parametrize("edge_mode", ["recompute", "frozen"])
@pytest.mark.parametrize("mode", ["full", "intra", "inter"])
def test_forward_matches_straight_line_oracle(edge_mode, mode):
    rng = np.random.default_rng(11)
    model = toy_model(3, edge_mode, EdgeMask(mode))
    for _ in range(3):
        q, g = rng.uniform(size=(2, 8, 5, 5))
        got = forward(q, g, model).logits.data
        np.testing.assert_allclose(got, straight_line_logits(q, g, model), rtol=0, atol=1e-12)


def test_self_pair_matched_windows_are_zero_nodes(rng):
    q = rng.uniform(size=(8, 6, 6))
    model = toy_model(5, pyramid=PyramidConfig())
    qp = extract_pyramid(q, model.pyramid)
    nodes = build_nodes(qp, qp, model.proj)
    lay = nodes.layout
    diag = lay.query_window == lay.gallery_window
    assert np.all(nodes.vectors.data[diag] == 0.0)
    assert np.all(np.linalg.norm(nodes.vectors.data[~diag], axis=1) > 0.5)


@pytest.mark.parametrize("pyramid,mask", [(PyramidConfig(((1, 1),)), EdgeMask()),
                                          (PyramidConfig(), EdgeMask("none"))])
def test_self_pair_gives_head_bias_when_global_node_is_isolated(rng, pyramid, mask):
    model = toy_model(5, mask=mask, pyramid=pyramid)
    q = rng.uniform(size=(8, 6, 6))
    assert np.array_equal(forward(q, q, model).logits.data, model.head_bias.data)


def test_self_pair_of_uniform_map_gives_head_bias(rng):
    model = toy_model(5, pyramid=PyramidConfig())
    q = np.broadcast_to(rng.uniform(size=(8, 1, 1)), (8, 6, 6))
    assert np.array_equal(forward(q, q, model).logits.data, model.head_bias.data)


def test_uniform_transforms_average_nodes(rng):
    lay = node_layout(TOY)
    v = Tensor(rng.normal(size=(len(lay), 6)))
    model = toy_model()
    layer = model.layers[0]
    for p in (layer.edges.t_in, layer.edges.t_out):
        p.data[...] = 0.0
    _, w = gcn_layer(v, layer, EdgeMask().matrix(lay))
    mixed = propagate(v, w).data
    np.testing.assert_allclose(mixed, np.tile(v.data.mean(axis=0), (len(lay), 1)), rtol=0, atol=1e-12)


def test_batched_forward_matches_single(rng):
    model = toy_model(2)
    q, g = rng.uniform(size=(2, 3, 8, 4, 4))
    batched = forward(q, g, model).logits.data
    for b in range(3):
        np.testing.assert_allclose(batched[b], forward(q[b], g[b], model).logits.data,
                                   rtol=0, atol=1e-13)


def test_score_is_class_one_probability(rng):
    model = toy_model(4)
    q, g = rng.uniform(size=(2, 8, 4, 4))
    res = forward(q, g, model)
    l0, l1 = res.logits.data
    assert res.score == pytest.approx(math.exp(l1) / (math.exp(l0) + math.exp(l1)), rel=1e-14)


def test_swapping_query_and_gallery(rng):
    """Swapping permutes nodes within each scale; scores agree up to summation order."""
    model = toy_model(6)
    q, g = rng.uniform(size=(2, 8, 4, 4))
    a = forward(q, g, model).logits.data
    b = forward(g, q, model).logits.data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_parameter_inventory():
    m = toy_model(iterations=3)
    assert [p.name for p in m.parameters()] == [
        "proj", "layer1.t_in", "layer1.t_out", "layer1.weight", "layer2.t_in", "layer2.t_out",
        "layer2.weight", "layer3.t_in", "layer3.t_out", "layer3.weight", "head.weight", "head.bias"]
    shapes = {p.name: p.shape for p in m.parameters()}
    assert shapes["proj"] == (6, 8) and shapes["layer1.t_in"] == (6, 6)
    assert shapes["layer2.t_in"] == (4, 4) and shapes["layer1.weight"] == (4, 6)
    assert shapes["head.weight"] == (2, 4) and not m.named()["head.bias"].decay
    frozen = toy_model(edge_mode="frozen", iterations=3)
    assert [p.name for p in frozen.parameters()] == [
        "proj", "layer1.t_in", "layer1.t_out", "layer1.weight", "layer2.weight", "layer3.weight",
        "head.weight", "head.bias"]


def test_he_init_statistics():
    model = init_params(512, PyramidConfig(), ReasoningConfig(), np.random.default_rng(0))
    for p in model.parameters():
        if p.ndim == 2:
            want = math.sqrt(2.0 / p.shape[1])
            # relative sampling error of a std estimate is about 1/sqrt(2n)
            slack = max(0.05, 4.0 / math.sqrt(2 * p.size))
            assert abs(p.data.std() / want - 1.0) < slack, p.name
            assert abs(p.data.mean()) < 4.0 * want / math.sqrt(p.size)
        else:
            assert np.all(p.data == 0.0)


def test_balanced_loss_at_zero_head_is_ln2(rng):
    model = toy_model()
    model.head_weight.data[...] = 0.0
    model.head_bias.data[...] = 0.0
    q, g = rng.uniform(size=(2, 4, 8, 4, 4))
    assert loss(forward(q, g, model), np.array([1, 0, 1, 0])).item() == pytest.approx(math.log(2), abs=1e-15)


def test_loss_label_validation(rng):
    model = toy_model()
    res = forward(*rng.uniform(size=(2, 8, 4, 4)), model)
    for bad in (2, -1, True, 0.5):
        with pytest.raises(InputError):
            loss(res, bad)
    assert loss(res, 1).item() > 0


def test_config_and_shape_errors(rng):
    with pytest.raises(ConfigError):
        ModelParams.zeros(4, PyramidConfig.parse("2x2,1x1"), ReasoningConfig())
    with pytest.raises(ConfigError):
        ReasoningConfig(iterations=0)
    with pytest.raises(ConfigError):
        ReasoningConfig(edge_mode="sometimes")
    model = toy_model()
    with pytest.raises(DimensionError):
        forward(rng.uniform(size=(5, 4, 4)), rng.uniform(size=(5, 4, 4)), model)
    lay = node_layout(TOY)
    with pytest.raises(DimensionError):
        gcn_layer(Tensor(np.ones((len(lay), 3))), model.layers[0], EdgeMask().matrix(lay))


def test_reasoning_config_round_trip():
    cfg = ReasoningConfig(2, 8, 16, "frozen", EdgeMask("intra", True, (2,)))
    assert ReasoningConfig.from_dict(cfg.to_dict()) == cfg


def test_single_layer_uniform_transforms_reduce_to_mean(rng):
    model = toy_model(iterations=1)
    model.layers[0].edges.t_in.data[...] = 0.0
    model.layers[0].edges.t_out.data[...] = 0.0
    q, g = rng.uniform(size=(2, 8, 4, 4))
    nodes = build_nodes(extract_pyramid(q, TOY), extract_pyramid(g, TOY), model.proj).vectors.data
    h = np.maximum(model.layers[0].weight.data @ nodes.mean(axis=0), 0.0)
    want = model.head_weight.data @ h + model.head_bias.data
    np.testing.assert_allclose(forward(q, g, model).logits.data, want, rtol=0, atol=1e-13)


def test_masks_coincide_on_a_single_scale(rng):
    one = PyramidConfig(((1, 1),))
    full = toy_model(2, pyramid=one)
    intra = toy_model(2, mask=EdgeMask("intra"), pyramid=one)
    q, g = rng.uniform(size=(2, 8, 4, 4))
    assert np.array_equal(forward(q, g, full).logits.data, forward(q, g, intra).logits.data)


def test_loss_increases_as_true_logit_drops():
    values = [loss(Tensor(np.array([[0.3, z]])), np.array([1])).item() for z in np.linspace(2, -2, 9)]
    assert all(a < b for a, b in zip(values, values[1:]))
