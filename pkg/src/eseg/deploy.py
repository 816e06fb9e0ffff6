"""Inference-oriented rewrite passes over the graph IR.

The backbone passes work on block annotations: every encoder block records
its spec, and a pass edits that spec and re-emits the block in place. The
block's output node keeps its name, so nothing downstream changes. Newly
created weights are freshly initialised (keyed by the graph's seed), while
tensors whose name and shape survive are carried over. These passes change
the architecture; the result is meant for retraining, not as a
weight-preserving optimisation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import graph as G
from .backbone import BlockSpec, build_block
from .builder import GraphBuilder
from .errors import ConfigError, GraphError
from .fusion import is_head_node
from .model import build_model

DEFAULT_INPUT_HW = (1024, 2048)


@dataclass
class RewriteReport:
    pass_name: str
    matched: int
    replaced: int
    param_delta: int
    flop_delta: int
    shapes_preserved: bool
    input_shape: tuple
    details: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def _spec_params(g):
    return sum(int(np.prod(s.shape)) for s in g.param_specs.values())


def _reference_shape(g, input_hw):
    c = g.node(g.inputs[0]).attrs.get("channels", 3)
    return (1, c) + tuple(input_hw or DEFAULT_INPUT_HW)


def compare_graphs(name, before, after, matched, replaced, input_hw, details=()):
    shape = _reference_shape(before, input_hw)
    s0 = G.infer_shapes(before, shape)
    s1 = G.infer_shapes(after, shape)
    preserved = (set(before.outputs) == set(after.outputs)
                 and all(s0[before.outputs[o]] == s1[after.outputs[o]] for o in before.outputs))
    return RewriteReport(name, matched, replaced, _spec_params(after) - _spec_params(before),
                         G.count_flops(after, shape) - G.count_flops(before, shape), preserved, shape, list(details))


def _bind_new(g, specs, old_values):
    """Values for ``specs``: reuse same-name same-shape tensors, initialise the rest."""
    if old_values is None:
        return None
    dtype = np.dtype(g.dtype)
    abstract = g.meta.get("bind") == "abstract"
    seed = g.meta.get("seed", 0)
    out = {}
    for name, spec in specs.items():
        old = old_values.get(name)
        if old is not None and tuple(old.shape) == tuple(spec.shape):
            out[name] = old
        elif abstract:
            out[name] = np.broadcast_to(np.zeros((), dtype), spec.shape)
        else:
            out[name] = G.init_param(spec, name, seed, dtype)
    return out


def _splice(g, new_blocks, node_edits=None, meta_edits=None):
    """Rebuild ``g`` with whole blocks re-emitted and/or single nodes edited.

    ``new_blocks`` maps block name -> (nodes, param_specs, buffer_specs, meta).
    ``node_edits`` maps a node name -> replacement list of nodes (possibly
    empty) with any extra param specs given in ``node_edits['__params__']``.
    """
    node_edits = dict(node_edits or {})
    extra_specs = node_edits.pop("__params__", {})
    nodes = []
    emitted = set()
    for n in g.nodes:
        if n.block in new_blocks:
            if n.block not in emitted:
                nodes.extend(new_blocks[n.block][0])
                emitted.add(n.block)
            continue
        if n.name in node_edits:
            nodes.extend(node_edits[n.name])
            continue
        nodes.append(n)
    pspecs = {**g.param_specs, **extra_specs}
    bspecs = dict(g.buffer_specs)
    for _, ps, bs, _ in new_blocks.values():
        pspecs.update(ps)
        bspecs.update(bs)
    used_p = {p for n in nodes for p in n.params}
    used_b = {b for n in nodes for b in n.buffers}
    # keep declaration order stable: old names first, new names after
    pspecs = {k: v for k, v in pspecs.items() if k in used_p}
    bspecs = {k: v for k, v in bspecs.items() if k in used_b}
    blocks = {k: (new_blocks[k][3] if k in new_blocks else v) for k, v in g.blocks.items()}
    meta = dict(g.meta)
    if meta_edits and "model" in meta:
        meta["model"] = {**meta["model"], **meta_edits}
    out = G.Graph(nodes=tuple(nodes), inputs=g.inputs, outputs=dict(g.outputs), param_specs=pspecs,
                  buffer_specs=bspecs, blocks=blocks, meta=meta, dtype=g.dtype)
    return out.replace(params=_bind_new(g, pspecs, g.params), buffers=_bind_new(g, bspecs, g.buffers))


def _reemit(g, block_name, meta):
    """Emit the block described by ``meta`` as a detached fragment."""
    b = GraphBuilder(g.dtype)
    x = b.external(meta["input"], meta["in_ch"])
    spec = BlockSpec.from_dict({k: meta[k] for k in
                                ("kind", "expansion", "kernel", "stride", "in_ch", "out_ch", "repeats", "se_ratio")})
    build_block(b, block_name, x, spec, meta["activation"])
    return b.nodes, b.param_specs, b.buffer_specs, b.blocks[block_name]


def _require_blocks(g, pass_name):
    if not g.blocks:
        raise GraphError(f"{pass_name} needs block annotations; this graph has none "
                         "(build it with the backbone builders)", pass_name=pass_name)


def rewrite_fuse_mbconv(g, input_hw=None):
    """Turn every MBConv block into a Fused-MBConv block.

    The 1x1 expand plus depthwise kxk pair becomes one regular kxk expand
    conv with the depthwise stride; an expansion-1 block becomes a single
    kxk conv to the output width.
    """
    _require_blocks(g, "fuse_mbconv")
    new = {}
    for name, meta in g.blocks.items():
        if meta.get("kind") == "mbconv":
            new[name] = _reemit(g, name, {**meta, "kind": "fused_mbconv"})
    out = _splice(g, new, meta_edits={"block_kind": "fused_mbconv"} if new else None)
    return out, compare_graphs("fuse_mbconv", g, out, len(new), len(new), input_hw, sorted(new))


def _is_se_gate(g, node):
    if node.op != "mul":
        return False
    gate = g.node(node.inputs[1])
    return gate.op == "act" and gate.attrs.get("kind") == "sigmoid"


def rewrite_remove_se(g, input_hw=None):
    """Delete squeeze-and-excitation sub-blocks (the gated multiply becomes a pass-through)."""
    if not g.blocks:
        if any(_is_se_gate(g, n) for n in g.nodes):
            raise GraphError("graph has sigmoid-gated multiplies but no block annotations to rewrite")
        return g, compare_graphs("remove_se", g, g, 0, 0, input_hw)
    new = {}
    for name, meta in g.blocks.items():
        if meta.get("se_ratio") is not None:
            new[name] = _reemit(g, name, {**meta, "se_ratio": None})
    out = _splice(g, new, meta_edits={"se_ratio": None} if new else None)
    return out, compare_graphs("remove_se", g, out, len(new), len(new), input_hw, sorted(new))


def rewrite_swap_activation(g, from_kind="silu", to_kind="relu", input_hw=None):
    """Substitute one pointwise activation for another everywhere (block metadata included)."""
    edits = {}
    for n in g.nodes:
        if n.op == "act" and n.attrs.get("kind") == from_kind:
            edits[n.name] = [replace(n, attrs={**n.attrs, "kind": to_kind})]
    blocks = {k: ({**v, "activation": to_kind} if v.get("activation") == from_kind else v)
              for k, v in g.blocks.items()}
    out = _splice(g.replace(blocks=blocks), {}, edits,
                  meta_edits={"activation": to_kind} if edits else None)
    out = out.replace(params=g.params, buffers=g.buffers)
    return out, compare_graphs("swap_activation", g, out, len(edits), len(edits), input_hw, sorted(edits))


def rewrite_regular_conv(g, input_hw=None):
    """Replace every separable 3x3 (``X/dw`` depthwise feeding ``X/pw`` 1x1) with one regular ``X/conv``.

    This covers decoder and head convolutions; encoder depthwise convs
    live inside MBConv blocks and are handled by :func:`rewrite_fuse_mbconv`.
    """
    users = g.consumers()
    edits = {}
    specs = {}
    for n in g.nodes:
        if n.op != "dwconv2d" or n.block is not None or not n.name.endswith("/dw"):
            continue
        base = n.name[:-3]
        pw = g.node_map.get(f"{base}/pw")
        if pw is None or users[n.name] != [pw.name] or pw.op != "conv2d" or pw.attrs["k"] != 1:
            continue
        k, in_ch, out_ch = n.attrs["k"], n.attrs["channels"], pw.attrs["out_ch"]
        wname = f"{base}/conv/weight"
        specs[wname] = G.ParamSpec((out_ch, in_ch, k, k), "he")
        conv = G.Node(f"{base}/conv", "conv2d", n.inputs,
                      {"in_ch": in_ch, "out_ch": out_ch, "k": k, "stride": n.attrs["stride"], "pad": k // 2,
                       "bias": False}, (wname,), (), None)
        edits[n.name] = [conv]
        edits[pw.name] = []
        bn = f"{base}/bn"
        bnode = g.node(bn)
        edits[bn] = [replace(bnode, inputs=(conv.name,))]
    if not edits:
        return g, compare_graphs("regular_conv", g, g, 0, 0, input_hw)
    edits["__params__"] = specs
    matched = len(specs)
    out = _splice(g, {}, edits, meta_edits={"conv_style": "regular"})
    return out, compare_graphs("regular_conv", g, out, matched, matched, input_hw, sorted(k[:-12] for k in specs))


def rewrite_shift_base_level(cfg, from_level=2, to_level=3):
    """Move the decoder's finest level (and with it the head) from P2 to P3."""
    if cfg.min_level == to_level:
        raise ConfigError(f"model already uses P{to_level} as its base level")
    if cfg.min_level != from_level:
        raise ConfigError(f"expected base level P{from_level}, model uses P{cfg.min_level}")
    return replace(cfg, min_level=to_level)


GRAPH_PASSES = {
    "fuse_mbconv": rewrite_fuse_mbconv,
    "remove_se": rewrite_remove_se,
    "swap_activation": rewrite_swap_activation,
    "regular_conv": rewrite_regular_conv,
}

PIPELINE = ("fuse_mbconv", "remove_se", "swap_activation", "regular_conv")


def apply_pass(g, name, input_hw=None):
    try:
        fn = GRAPH_PASSES[name]
    except KeyError:
        raise ConfigError(f"unknown rewrite pass {name!r}; valid: {sorted(GRAPH_PASSES)}") from None
    return fn(g, input_hw=input_hw)


def deploy_pipeline(cfg, bind="abstract", seed=0, input_hw=None, shift_base=True):
    """Build ``cfg`` in its inference-friendly form.

    The base level is shifted to P3 (when it is P2), then every graph pass in
    :data:`PIPELINE` is applied in order. Returns ``(graph, reports)``.
    """
    if shift_base and cfg.min_level == 2:
        cfg = rewrite_shift_base_level(cfg)
    g = build_model(cfg, bind=bind, seed=seed)
    reports = []
    for name in PIPELINE:
        g, rep = apply_pass(g, name, input_hw)
        reports.append(rep)
    return g, reports


def head_flops(g, input_hw=None):
    """FLOPs of the head's conv block and classifier (the final upsample to image size excluded)."""
    shapes = G.infer_shapes(g, _reference_shape(g, input_hw))
    return sum(G.OPS[n.op].cost(n, [shapes[s] for s in n.inputs], shapes[n.name], g)
               for n in g.nodes if is_head_node(n.name))
