"""Decoders (BiFPN and plain top-down FPN) and the multi-scale prediction head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, GraphError, ShapeError


@dataclass(frozen=True)
class FpnConfig:
    min_level: int = 2
    max_level: int = 9
    channels: int = 96
    repeats: int = 4
    topology: str = "bifpn"
    conv_style: str = "separable"

    def __post_init__(self):
        if self.min_level >= self.max_level and self.topology == "bifpn":
            raise ConfigError(f"min_level {self.min_level} must be below max_level {self.max_level}")
        if self.min_level > self.max_level:
            raise ConfigError(f"min_level {self.min_level} exceeds max_level {self.max_level}")
        if self.channels % 8:
            raise ConfigError(f"decoder channels must be a multiple of 8, got {self.channels}")
        if self.topology not in ("bifpn", "fpn"):
            raise ConfigError(f"unknown decoder topology {self.topology!r}")
        if self.conv_style not in ("separable", "regular"):
            raise ConfigError(f"unknown conv_style {self.conv_style!r}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")

    @property
    def levels(self):
        return list(range(self.min_level, self.max_level + 1))


def _conv3(b, name, x, channels, style, act):
    if style == "separable":
        return b.separable_bn(name, x, channels, 3, act)
    return b.conv_bn(name, x, channels, 3, 1, act)


def _check_taps(cfg, taps):
    missing = [i for i in cfg.levels if i not in taps]
    if missing:
        raise GraphError(f"decoder needs taps for levels {cfg.levels}; missing {missing}", missing=missing)


def project_taps(b, cfg, taps):
    """1x1 conv + BN from every tap to the decoder width (once per level)."""
    _check_taps(cfg, taps)
    return {i: b.conv_bn(f"decoder/proj/P{i}", taps[i], cfg.channels, 1) for i in cfg.levels}


def build_bifpn(b, cfg, taps, activation="silu"):
    """Stack ``cfg.repeats`` bidirectional fusion layers over the projected taps.

    Each layer runs a top-down pass (P_max-1 .. P_min) and then a bottom-up
    pass (P_min+1 .. P_max). A fusion node is a fast-normalised weighted sum
    of its (resized) inputs followed by a 3x3 conv, BN and activation.
    Returns ``{level: node}`` with spatial sizes equal to the inputs'.
    """
    feats = project_taps(b, cfg, taps)
    lo, hi = cfg.min_level, cfg.max_level
    for r in range(cfg.repeats):
        td = {hi: feats[hi]}
        for i in range(hi - 1, lo - 1, -1):
            up = b.resize(f"decoder/r{r}/td/P{i}/up", td[i + 1], feats[i])
            s = b.fuse(f"decoder/r{r}/td/P{i}/fuse", [feats[i], up])
            td[i] = _conv3(b, f"decoder/r{r}/td/P{i}", s, cfg.channels, cfg.conv_style, activation)
        out = {lo: td[lo]}
        for i in range(lo + 1, hi + 1):
            down = b.pool(f"decoder/r{r}/bu/P{i}/down", out[i - 1], "avg", 3, 2, 1)
            srcs = [feats[i], td[i], down] if i < hi else [feats[i], down]
            s = b.fuse(f"decoder/r{r}/bu/P{i}/fuse", srcs)
            out[i] = _conv3(b, f"decoder/r{r}/bu/P{i}", s, cfg.channels, cfg.conv_style, activation)
        feats = out
    return feats


def build_fpn(b, cfg, taps, activation="silu"):
    """Single top-down pathway: lateral 1x1 projections, upsample-and-add, 3x3 smoothing."""
    lat = project_taps(b, cfg, taps)
    lo, hi = cfg.min_level, cfg.max_level
    if lo == hi:
        return {lo: lat[lo]}
    merged = {hi: lat[hi]}
    for i in range(hi - 1, lo - 1, -1):
        up = b.resize(f"decoder/td/P{i}/up", merged[i + 1], lat[i])
        merged[i] = b.add(f"decoder/td/P{i}/add", lat[i], up)
    return {i: _conv3(b, f"decoder/smooth/P{i}", merged[i], cfg.channels, cfg.conv_style, activation)
            for i in cfg.levels}


def build_decoder(b, cfg, taps, activation="silu"):
    if cfg.topology == "bifpn":
        return build_bifpn(b, cfg, taps, activation)
    return build_fpn(b, cfg, taps, activation)


def weighted_sum_head(b, levels, target_level, mode="softmax", coeffs=None):
    """Upsample every decoder level to ``target_level`` and combine them.

    With ``mode='softmax'`` the combination weights are ``softmax(w)`` over
    one learnable scalar per level, initialised to 1.0.
    """
    if target_level > min(levels):
        raise ConfigError(f"target level {target_level} must not exceed the finest input level {min(levels)}")
    chans = {b.channels[n] for n in levels.values()}
    if len(chans) > 1:
        raise ShapeError(f"head inputs have mismatched channel counts {sorted(chans)}")
    ref = levels[min(levels)]
    ups = []
    for i in sorted(levels):
        node = levels[i]
        ups.append(node if i == target_level else b.resize(f"head/up/P{i}", node, ref))
    return b.fuse("head/fuse", ups, mode=mode, coeffs=coeffs)


def fold_head_softmax(weights):
    """Fixed convex coefficients equal to ``softmax(weights)``."""
    return T.softmax_vec(np.asarray(weights, dtype=np.float64))


def fold_head(g):
    """Replace every softmax-weighted fuse node by a fixed weighted sum.

    The learned scalars are baked into the node as constants and removed
    from the parameter set; outputs are unchanged.
    """
    if g.params is None:
        raise GraphError("fold_head needs bound parameters")
    nodes = []
    dropped = set()
    for n in g.nodes:
        if n.op == "fuse" and n.attrs.get("mode") == "softmax":
            coeffs = fold_head_softmax(g.params[n.params[0]])
            dropped.update(n.params)
            n = type(n)(n.name, n.op, n.inputs, {"mode": "fixed", "coeffs": tuple(float(c) for c in coeffs)},
                        (), n.buffers, n.block)
        nodes.append(n)
    return g.replace(
        nodes=tuple(nodes),
        param_specs={k: v for k, v in g.param_specs.items() if k not in dropped},
        params={k: v for k, v in g.params.items() if k not in dropped},
    )


HEAD_PREFIXES = ("head/block", "head/classifier")


def prediction_head(b, fused, channels, num_classes, image, conv_style="separable", activation="silu"):
    """One 3x3 conv block, a 1x1 classifier, then bilinear upsampling to the image size."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    h = _conv3(b, "head/block", fused, channels, conv_style, activation)
    h = b.conv("head/classifier", h, num_classes, 1, bias=True, init="classifier")
    return b.resize("logits", h, image)


def is_head_node(name):
    return name.startswith(HEAD_PREFIXES)

