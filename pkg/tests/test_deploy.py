import dataclasses
import math

import numpy as np
import pytest

from eseg import graph as G
from eseg.backbone import BlockSpec, build_block
from eseg.builder import GraphBuilder
from eseg.deploy import (PIPELINE, apply_pass, deploy_pipeline, head_flops, rewrite_fuse_mbconv,
                         rewrite_regular_conv, rewrite_remove_se, rewrite_shift_base_level,
                         rewrite_swap_activation)
from eseg.errors import ConfigError, GraphError
from eseg.model import build_model, desk_config, get_config

HW = (512, 1024)


def _block_graph(spec, activation="silu", bind="random"):
    b = GraphBuilder("float64")
    x = b.input("x", spec.in_ch)
    b.output("y", build_block(b, "blk", x, spec, activation))
    return G.bind(b.build(), bind, 0)


@pytest.fixture(scope="module")
def eseg_s():
    return build_model(get_config("eseg-s"), bind="abstract")


def _conv_weights(g):
    return sum(int(np.prod(s.shape)) for k, s in g.param_specs.items() if k.endswith("/weight") and "bn" not in k)


def test_fuse_mbconv_param_delta():
    g = _block_graph(BlockSpec("mbconv", 4, 3, 1, 32, 32, 1, None))
    out, rep = rewrite_fuse_mbconv(g, (8, 8))
    assert _conv_weights(out) - _conv_weights(g) == 9 * 32 * 128 - (9 * 128 + 32 * 128) == 31_616
    # the depthwise conv's own batch norm (gamma and beta over 128 channels) disappears too
    assert rep.param_delta == 31_616 - 256
    assert G.count_params(out) - G.count_params(g) == rep.param_delta
    assert rep.matched == 1 and rep.shapes_preserved
    assert not any(n.op == "dwconv2d" for n in out.nodes)


def test_fuse_mbconv_without_blocks_is_an_error_and_lite_is_unchanged():
    b = GraphBuilder()
    b.output("y", b.conv("c", b.input("x", 3), 4, 3))
    with pytest.raises(GraphError):
        rewrite_fuse_mbconv(G.bind(b.build(), "abstract"))
    lite = build_model(get_config("eseg-lite-s"), bind="abstract")
    out, rep = rewrite_fuse_mbconv(lite, HW)
    assert rep.matched == 0 and G.topology_signature(out) == G.topology_signature(lite)


def test_remove_se_param_formula():
    c, r = 40, 0.25
    g = _block_graph(BlockSpec("mbconv", 1, 3, 1, c, c, 1, r))
    out, rep = rewrite_remove_se(g, (8, 8))
    s = math.ceil(c * r)
    assert rep.param_delta == -(c * s * 2 + s + c)
    assert not any(n.op == "mul" for n in out.nodes)
    same, rep0 = rewrite_remove_se(out, (8, 8))
    assert rep0.matched == 0 and G.topology_signature(same) == G.topology_signature(out)


def test_swap_activation_behaviour():
    g = _block_graph(BlockSpec("fused_mbconv", 1, 3, 1, 4, 4, 1, None))
    out, rep = rewrite_swap_activation(g, input_hw=(8, 8))
    assert rep.param_delta == 0 and rep.matched > 0
    assert all(n.attrs["kind"] == "relu" for n in out.nodes if n.op == "act")
    x = -np.abs(np.random.default_rng(0).standard_normal((1, 4, 8, 8)))
    tr = G.run(out, x)
    assert np.all(tr.values["blk/fused/act"] >= 0)
    _, rep2 = rewrite_swap_activation(out, input_hw=(8, 8))
    assert rep2.matched == 0


def test_pipeline_on_eseg_s(eseg_s):
    g = eseg_s
    reports = []
    for name in PIPELINE:
        g, rep = apply_pass(g, name, HW)
        reports.append(rep)
        assert rep.shapes_preserved
    assert not any(n.op == "dwconv2d" for n in g.nodes)
    assert not any(n.op == "act" and n.attrs["kind"] == "silu" for n in g.nodes)
    assert not any(n.op in ("mul", "global_pool") for n in g.nodes)
    assert G.infer_shapes(g, (1, 3) + HW)["logits"] == (1, 19) + HW


@pytest.mark.parametrize("name", PIPELINE)
def test_passes_are_idempotent(eseg_s, name):
    once, _ = apply_pass(eseg_s, name, HW)
    twice, rep = apply_pass(once, name, HW)
    assert rep.matched == 0
    assert twice.to_json() == once.to_json()


def test_swap_and_remove_se_commute():
    g = build_model(desk_config(block_kind="mbconv", se_ratio=0.25, activation="silu"), "random", 4)
    a = rewrite_remove_se(rewrite_swap_activation(g)[0])[0]
    b = rewrite_swap_activation(rewrite_remove_se(g)[0])[0]
    assert a.to_json() == b.to_json()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_rewrites_reuse_surviving_weights():
    g = build_model(desk_config(block_kind="mbconv", se_ratio=0.25), "random", 2)
    out, _ = rewrite_remove_se(g)
    kept = [k for k in out.params if k in g.params]
    assert kept and all(np.array_equal(out.params[k], g.params[k]) for k in kept)
    x = np.random.default_rng(0).standard_normal((1, 3, 64, 64)).astype(np.float32)
    assert G.forward(out, x)["logits"].shape == (1, 4, 64, 64)


def test_regular_conv_replaces_separable_decoder():
    g = build_model(get_config("eseg-s"), bind="abstract")
    out, rep = rewrite_regular_conv(g, HW)
    assert rep.matched == sum(1 for n in g.nodes if n.op == "dwconv2d" and n.block is None)
    assert not any(n.op == "dwconv2d" and n.block is None for n in out.nodes)


def test_shift_base_level():
    cfg = get_config("eseg-s")
    shifted = rewrite_shift_base_level(cfg)
    assert shifted.min_level == 3
    before = head_flops(build_model(cfg, bind=None), HW)
    after = head_flops(build_model(shifted, bind=None), HW)
    assert after / before == pytest.approx(0.25, rel=1e-9)
    assert G.infer_shapes(build_model(shifted, bind=None), (1, 3) + HW)["logits"] == (1, 19) + HW
    with pytest.raises(ConfigError):
        rewrite_shift_base_level(shifted)


def test_lite_built_at_p3_equals_shifted_from_p2():
    native = get_config("eseg-lite-s")
    from_p2 = rewrite_shift_base_level(dataclasses.replace(native, min_level=2))
    assert (G.topology_signature(build_model(from_p2, bind=None))
            == G.topology_signature(build_model(native, bind=None)))


def test_deploy_pipeline_reports():
    g, reports = deploy_pipeline(get_config("eseg-s"), input_hw=HW)
    assert [r.pass_name for r in reports] == list(PIPELINE)
    assert g.meta["model"]["min_level"] == 3
    assert all(r.shapes_preserved for r in reports)


def test_unknown_pass():
    with pytest.raises(ConfigError):
        apply_pass(G.Graph(), "strip_everything")
