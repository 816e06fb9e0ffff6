import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eseg import graph as G
from eseg.backbone import (BackboneConfig, BlockSpec, build_backbone, build_block, efficientnet_stages,
                           extend_pyramid, round_filters, round_repeats)
from eseg.builder import GraphBuilder
from eseg.errors import ConfigError
from eseg.model import load_zoo


def _rule(base, mult, divisor=8):
    # direct evaluation of the rounding rule, written independently
    scaled = base * mult
    cand = max(divisor, (int(scaled + divisor / 2) // divisor) * divisor)
    return cand + divisor if cand < 0.9 * scaled else cand


def test_round_filters_examples():
    assert round_filters(32, 1.0) == 32
    assert round_filters(32, 0.4) == 16
    assert round_filters(8, 0.1) == 8


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 2000), st.floats(0.05, 4.0))
def test_round_filters_rule(base, mult):
    r = round_filters(base, mult)
    assert r == _rule(base, mult)
    assert r % 8 == 0 and r >= 8
    assert r >= 0.9 * base * mult


def test_round_repeats_examples():
    assert round_repeats(3, 1.0) == 3
    assert round_repeats(3, 1.1) == 4
    assert round_repeats(4, 0.6) == 3


def _backbone_graph(cfg, channels=3):
    b = GraphBuilder()
    x = b.input("x", channels)
    taps = build_backbone(b, x, cfg)
    for lvl, node in taps.items():
        b.output(f"P{lvl}", node)
    return b.build(), taps


def test_p5_tap_at_512():
    g, taps = _backbone_graph(BackboneConfig())
    shapes = G.infer_shapes(g, (1, 3, 512, 512))
    assert shapes[taps[5]][2:] == (16, 16)
    for lvl in range(1, 6):
        assert shapes[taps[lvl]][2:] == (512 >> lvl, 512 >> lvl)


def test_se_squeeze_dims_and_params():
    b = GraphBuilder()
    x = b.input("x", 64)
    spec = BlockSpec("mbconv", 1, 3, 1, 64, 64, 1, 0.25)
    build_block(b, "blk", x, spec, "silu")
    g = b.build()
    assert g.param_specs["blk/se/reduce/weight"].shape == (16, 64, 1, 1)
    assert g.param_specs["blk/se/expand/weight"].shape == (64, 16, 1, 1)
    se = sum(int(np.prod(s.shape)) for k, s in g.param_specs.items() if k.startswith("blk/se/"))
    assert se == 64 * 16 * 2 + 16 + 64


def test_lite_backbone_has_no_mbconv_or_se():
    g, _ = _backbone_graph(BackboneConfig.lite(0.4, 0.6))
    assert not any(n.op in ("dwconv2d", "mul", "global_pool") for n in g.nodes)
    assert all(meta["kind"] == "fused_mbconv" and meta["se_ratio"] is None for meta in g.blocks.values())
    assert not any(n.op == "act" and n.attrs["kind"] == "silu" for n in g.nodes)


@pytest.mark.parametrize("name", sorted(load_zoo()))
def test_stage_channels_follow_rounding(name):
    cfg = load_zoo()[name].backbone()
    g, _ = _backbone_graph(cfg)
    for si, base in enumerate(efficientnet_stages(), start=1):
        reps = round_repeats(base.repeats, cfg.depth_mult)
        for r in range(reps):
            meta = g.blocks[f"backbone/stage{si}/block{r}"]
            assert meta["out_ch"] == round_filters(base.out_ch, cfg.width_mult)
        assert f"backbone/stage{si}/block{reps}" not in g.blocks


def test_backbone_forward_shapes():
    cfg = BackboneConfig.lite(0.25, 0.6)
    g = G.bind(_backbone_graph(cfg)[0], "random", 0)
    out = G.forward(g, np.random.default_rng(0).standard_normal((2, 3, 64, 96)).astype(np.float32))
    for lvl in range(1, 6):
        assert out[f"P{lvl}"].shape[2:] == (64 >> lvl, 96 >> lvl)


def test_extend_pyramid_shapes_constant_and_free():
    b = GraphBuilder("float64")
    p5 = b.input("p5", 8)
    taps = extend_pyramid(b, p5, 9)
    for lvl, node in taps.items():
        b.output(f"P{lvl}", node)
    g = G.bind(b.build())
    assert G.count_params(g) == 0
    shapes = G.infer_shapes(g, (1, 8, 32, 64))
    assert [shapes[taps[i]][2:] for i in range(6, 10)] == [(16, 32), (8, 16), (4, 8), (2, 4)]
    out = G.forward(g, np.full((1, 8, 32, 64), 0.375))
    assert all(np.all(v == 0.375) for v in out.values())
    with pytest.raises(ConfigError):
        extend_pyramid(GraphBuilder(), "p5", 10)


def test_invalid_block_specs():
    with pytest.raises(ConfigError):
        BlockSpec("ghost", 1, 3, 1, 8, 8)
    with pytest.raises(ConfigError):
        BlockSpec("mbconv", 1, 3, 3, 8, 8)
