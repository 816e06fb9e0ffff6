import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eseg import graph as G
from eseg import tensor as T
from eseg.builder import GraphBuilder
from eseg.deploy import head_flops
from eseg.errors import ConfigError
from eseg.fusion import (FpnConfig, build_bifpn, build_fpn, fold_head, fold_head_softmax, prediction_head,
                         weighted_sum_head)
from eseg.model import build_model, desk_config, get_config


def _tapped(cfg, builder_fn, base=64, ch=8, dtype="float64"):
    b = GraphBuilder(dtype)
    taps = {i: b.input(f"t{i}", ch) for i in cfg.levels}
    outs = builder_fn(b, cfg, taps)
    for i, node in outs.items():
        b.output(f"P{i}", node)
    shapes = {f"t{i}": (1, ch, base >> i, base >> i) for i in cfg.levels}
    return b.build(), shapes


def _set_fuse_eps(g, eps):
    nodes = tuple(dataclasses.replace(n, attrs={**n.attrs, "eps": eps}) if n.op == "fuse" else n for n in g.nodes)
    return g.replace(nodes=nodes)


def _fuse_graph(mode, n=2):
    b = GraphBuilder("float64")
    xs = [b.input(f"x{i}", 2) for i in range(n)]
    b.output("y", b.fuse("f", xs, mode))
    return b.build()


def test_fast_fusion_weights_one_three():
    g = _set_fuse_eps(_fuse_graph("fast"), 0.0)
    g = G.bind(g).with_params({"f/weight": np.array([1.0, 3.0])})
    rng = np.random.default_rng(0)
    a, c = rng.standard_normal((2, 1, 2, 3, 3))
    y = G.forward(g, {"x0": a, "x1": c})["y"]
    np.testing.assert_allclose(y, 0.25 * a + 0.75 * c, rtol=1e-15)


def test_fast_fusion_equal_weights_is_near_average():
    g = G.bind(_fuse_graph("fast", 3))
    xs = {f"x{i}": np.random.default_rng(i).standard_normal((1, 2, 4, 4)) for i in range(3)}
    y = G.forward(g, xs)["y"]
    np.testing.assert_allclose(y, sum(xs.values()) / (3 + 1e-4), rtol=1e-12)


def test_bifpn_levels_and_sizes():
    cfg = FpnConfig(2, 5, 16, 2)
    g, shapes = _tapped(cfg, build_bifpn)
    inf = G.infer_shapes(g, shapes)
    assert set(g.outputs) == {f"P{i}" for i in cfg.levels}
    for i in cfg.levels:
        assert inf[g.outputs[f"P{i}"]] == (1, 16, 64 >> i, 64 >> i)


def test_eseg_s_decoder_shape_check_at_512x1024():
    cfg = get_config("eseg-s")
    assert (cfg.channels, cfg.repeats) == (96, 4)
    g = build_model(cfg, bind=None)
    shapes = G.infer_shapes(g, (1, 3, 512, 1024))
    assert shapes["logits"] == (1, 19, 512, 1024)
    for i in range(2, 10):
        node = f"decoder/r3/{'td' if i == 2 else 'bu'}/P{i}/act"
        assert shapes[node] == (1, 96, 512 >> i, 1024 >> i)


def test_single_level_fpn_is_projection_only():
    cfg = FpnConfig(3, 3, 8, 1, "fpn")
    g, _ = _tapped(cfg, build_fpn)
    assert {n.op for n in g.nodes} == {"input", "conv2d", "batch_norm"}


def test_fpn_is_top_down_only():
    cfg = FpnConfig(2, 5, 8, 1, "fpn")
    g, shapes = _tapped(cfg, build_fpn)
    g = G.bind(g, "random", 1)
    rng = np.random.default_rng(0)
    xs = {k: rng.standard_normal(s) for k, s in shapes.items()}
    base = G.forward(g, xs)
    bumped = G.forward(g, {**xs, "t5": xs["t5"] + 1.0})
    assert not np.allclose(bumped["P2"], base["P2"])
    bumped = G.forward(g, {**xs, "t2": xs["t2"] + 1.0})
    assert np.array_equal(bumped["P5"], base["P5"])


def _head_graph(n_levels=3, ch=4, mode="softmax"):
    b = GraphBuilder("float64")
    levels = {i: b.input(f"l{i}", ch) for i in range(2, 2 + n_levels)}
    b.output("o", weighted_sum_head(b, levels, 2, mode))
    shapes = {f"l{i}": (1, ch, 32 >> i, 32 >> i) for i in levels}
    return b.build(), shapes


def _upsampled(xs, shapes):
    h, w = shapes["l2"][2:]
    return [T.bilinear_resize(xs[k], h, w) for k in sorted(xs)]


def test_head_initial_weights_give_mean():
    g, shapes = _head_graph()
    g = G.bind(g)
    assert np.all(g.params["head/fuse/weight"] == 1.0)
    rng = np.random.default_rng(2)
    xs = {k: rng.standard_normal(s) for k, s in shapes.items()}
    np.testing.assert_allclose(G.forward(g, xs)["o"], sum(_upsampled(xs, shapes)) / 3, rtol=1e-12)


def test_head_identical_features_and_hand_weights():
    g, _ = _head_graph(2)
    x = np.random.default_rng(0).standard_normal((1, 4, 8, 8))
    gb = G.bind(g).with_params({"head/fuse/weight": np.array([-3.0, 7.5])})
    b = GraphBuilder("float64")
    a = b.input("a", 4)
    b.output("o", weighted_sum_head(b, {2: a, 3: b.identity("same", a)}, 2))
    same = G.bind(b.build()).with_params({"head/fuse/weight": np.array([-3.0, 7.5])})
    np.testing.assert_allclose(G.forward(same, x)["o"], x, rtol=1e-14)
    p, q = x, np.random.default_rng(1).standard_normal((1, 4, 4, 4))
    gw = gb.with_params({"head/fuse/weight": np.array([0.0, math.log(3)])})
    want = 0.25 * p + 0.75 * T.bilinear_resize(q, 8, 8)
    np.testing.assert_allclose(G.forward(gw, {"l2": p, "l3": q})["o"], want, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_head_output_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    g, shapes = _head_graph()
    g = G.bind(g).with_params({"head/fuse/weight": rng.standard_normal(3) * 3})
    xs = {k: rng.standard_normal(s) for k, s in shapes.items()}
    o = G.forward(g, xs)["o"]
    ups = np.stack(_upsampled(xs, shapes))
    assert np.all(o >= ups.min(0) - 1e-12) and np.all(o <= ups.max(0) + 1e-12)


def test_head_weight_gradients_all_nonzero():
    g, shapes = _head_graph(4)
    g = G.bind(g).with_params({"head/fuse/weight": np.array([0.3, -0.2, 1.0, 0.5])})
    rng = np.random.default_rng(5)
    xs = {k: rng.standard_normal(s) for k, s in shapes.items()}
    tr = G.run(g, xs)
    grads = G.backward(g, tr, seeds={"o": rng.standard_normal(tr.values["head/fuse"].shape)})
    assert np.all(np.abs(grads["head/fuse/weight"]) > 1e-8)


def test_fold_coefficients():
    np.testing.assert_allclose(fold_head_softmax([0.7] * 5), 0.2, rtol=1e-15)
    c = fold_head_softmax(np.random.default_rng(0).standard_normal(8) * 4)
    assert abs(c.sum() - 1) < 1e-12


@pytest.mark.parametrize("dtype,tol", [("float32", 1e-6), ("float64", 1e-12)])
def test_fold_head_equivalence(dtype, tol):
    g = build_model(desk_config(dtype=dtype), "random", 3)
    rng = np.random.default_rng(0)
    g = g.with_params({**g.params, "head/fuse/weight": rng.standard_normal(4).astype(dtype)})
    folded = fold_head(g)
    assert "head/fuse/weight" not in folded.params
    x = rng.standard_normal((2, 3, 64, 64)).astype(dtype)
    diff = np.abs(G.forward(g, x)["logits"] - G.forward(folded, x)["logits"]).max()
    assert diff < tol


def test_zero_classifier_gives_uniform_softmax():
    g = build_model(desk_config(dtype="float64"), "random", 0)
    params = dict(g.params)
    params["head/classifier/weight"] = np.zeros_like(params["head/classifier/weight"])
    params["head/classifier/bias"] = np.zeros_like(params["head/classifier/bias"])
    logits = G.forward(g.with_params(params), np.random.default_rng(0).standard_normal((1, 3, 64, 64)))["logits"]
    assert np.all(logits == 0)


def test_head_at_p3_costs_a_quarter_of_p2():
    cfg = get_config("eseg-lite-s")
    p3 = head_flops(build_model(cfg, bind=None))
    p2 = head_flops(build_model(dataclasses.replace(cfg, min_level=2), bind=None))
    assert p3 / p2 == pytest.approx(0.25, rel=0.05)


def test_config_validation():
    with pytest.raises(ConfigError):
        FpnConfig(channels=20)
    with pytest.raises(ConfigError):
        FpnConfig(topology="panet")
    with pytest.raises(ConfigError):
        FpnConfig(4, 3)
    b = GraphBuilder()
    with pytest.raises(ConfigError):
        prediction_head(b, b.input("x", 4), 4, 1, "x")
