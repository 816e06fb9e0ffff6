"""EfficientNet-style encoder producing P1..P5, plus the pooled P6..P9 extension."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import ConfigError

STAGE_KINDS = ("mbconv", "fused_mbconv")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    expansion: float
    kernel: int
    stride: int
    in_ch: int
    out_ch: int
    repeats: int = 1
    se_ratio: float | None = None

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ConfigError(f"block stride must be 1 or 2, got {self.stride}")
        if self.repeats < 1:
            raise ConfigError(f"block repeats must be >= 1, got {self.repeats}")
        if self.se_ratio is not None and not 0 < self.se_ratio <= 1:
            raise ConfigError(f"se_ratio must be in (0, 1], got {self.se_ratio}")

    @property
    def has_skip(self):
        return self.stride == 1 and self.in_ch == self.out_ch

    @property
    def expanded_ch(self):
        return int(round(self.in_ch * self.expansion))

    @property
    def squeeze_ch(self):
        # squeeze width is taken relative to the block input, not the expanded width
        if self.se_ratio is None:
            return 0
        return max(1, math.ceil(self.in_ch * self.se_ratio))

    def to_dict(self):
        return {"kind": self.kind, "expansion": self.expansion, "kernel": self.kernel, "stride": self.stride,
                "in_ch": self.in_ch, "out_ch": self.out_ch, "repeats": self.repeats, "se_ratio": self.se_ratio}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# EfficientNet-B0 stage layout: (expansion, kernel, stride, in, out, repeats)
_B0_STAGES = (
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
)


def efficientnet_stages(kind="mbconv", se_ratio=0.25):
    return tuple(BlockSpec(kind, e, k, s, i, o, r, se_ratio) for e, k, s, i, o, r in _B0_STAGES)


@dataclass(frozen=True)
class BackboneConfig:
    stage_table: tuple = field(default_factory=efficientnet_stages)
    width_mult: float = 1.0
    depth_mult: float = 1.0
    stem_ch: int = 32
    activation: str = "silu"

    @classmethod
    def lite(cls, width_mult=1.0, depth_mult=1.0):
        return cls(efficientnet_stages("fused_mbconv", None), width_mult, depth_mult, 32, "relu")

    def scaled_stages(self):
        """Stage table after compound scaling (widths and repeat counts)."""
        return tuple(
            replace(s, in_ch=round_filters(s.in_ch, self.width_mult), out_ch=round_filters(s.out_ch, self.width_mult),
                    repeats=round_repeats(s.repeats, self.depth_mult))
            for s in self.stage_table)

    def to_dict(self):
        return {"stage_table": [s.to_dict() for s in self.stage_table], "width_mult": self.width_mult,
                "depth_mult": self.depth_mult, "stem_ch": self.stem_ch, "activation": self.activation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(BlockSpec.from_dict(s) for s in d["stage_table"]), d["width_mult"], d["depth_mult"],
                   d.get("stem_ch", 32), d.get("activation", "silu"))


def round_filters(base, width_mult, divisor=8):
    """Scale a channel count and round to the nearest multiple of ``divisor``.

    Never returns less than ``divisor``; if rounding loses more than 10% the
    result is bumped up by one ``divisor``.
    """
    scaled = base * width_mult
    new = max(divisor, int(scaled + divisor / 2) // divisor * divisor)
    if new < 0.9 * scaled:
        new += divisor
    return int(new)


def round_repeats(base, depth_mult):
    return int(math.ceil(base * depth_mult))


def build_block(b, prefix, x, spec, activation):
    """Emit one MBConv / Fused-MBConv block; returns its output node ``{prefix}/out``.

    The block's nodes are tagged with ``prefix`` and its metadata (the
    ``BlockSpec`` plus activation) is recorded, which is what the rewrite
    passes operate on.
    """
    meta = {**spec.to_dict(), "repeats": 1, "activation": activation, "input": x}
    with b.block(prefix, meta):
        h = x
        exp = spec.expanded_ch
        if spec.kind == "mbconv":
            if spec.expansion != 1:
                h = b.conv_bn(f"{prefix}/expand", h, exp, 1, 1, activation)
            h = b.dwconv(f"{prefix}/dw/conv", h, spec.kernel, spec.stride)
            h = b.act(f"{prefix}/dw/act", b.bn(f"{prefix}/dw/bn", h), activation)
        elif spec.expansion != 1:
            h = b.conv_bn(f"{prefix}/expand", h, exp, spec.kernel, spec.stride, activation)
        else:
            h = b.conv_bn(f"{prefix}/fused", h, spec.out_ch, spec.kernel, spec.stride, activation)
        if spec.se_ratio is not None:
            h = squeeze_excite(b, f"{prefix}/se", h, spec.squeeze_ch, activation)
        if spec.kind == "mbconv" or spec.expansion != 1:
            h = b.conv_bn(f"{prefix}/project", h, spec.out_ch, 1)
        if spec.has_skip:
            return b.add(f"{prefix}/out", h, x)
        return b.identity(f"{prefix}/out", h)


def squeeze_excite(b, prefix, x, squeeze_ch, activation):
    c = b.channels[x]
    s = b.global_pool(f"{prefix}/pool", x)
    s = b.act(f"{prefix}/reduce/act", b.conv(f"{prefix}/reduce", s, squeeze_ch, 1, bias=True), activation)
    s = b.act(f"{prefix}/gate", b.conv(f"{prefix}/expand", s, c, 1, bias=True), "sigmoid")
    return b.mul(f"{prefix}/scale", x, s)


def stage_levels(stages, stem_stride=2):
    """Pyramid level reached after each stage, validating that P1..P5 are all produced."""
    stride = stem_stride
    levels = []
    for s in stages:
        stride *= s.stride
        levels.append(int(math.log2(stride)))
    if stride != 32 or set(levels) != {1, 2, 3, 4, 5}:
        raise ConfigError(f"stage strides must reach exactly 32 through every level P1..P5, "
                          f"got cumulative levels {levels}")
    return levels


def build_backbone(b, x, cfg):
    """Append the encoder to builder ``b``; returns ``{level: node}`` for P1..P5.

    Each tap is the output of the last block of its stride regime.
    """
    stages = cfg.scaled_stages()
    levels = stage_levels(stages)
    h = b.conv_bn("backbone/stem", x, round_filters(cfg.stem_ch, cfg.width_mult), 3, 2, cfg.activation)
    taps = {}
    for si, (spec, level) in enumerate(zip(stages, levels), start=1):
        for r in range(spec.repeats):
            blk = spec if r == 0 else replace(spec, in_ch=spec.out_ch, stride=1)
            blk = replace(blk, in_ch=b.channels[h], repeats=1)
            h = build_block(b, f"backbone/stage{si}/block{r}", h, blk, cfg.activation)
        taps[level] = h
    return taps


def extend_pyramid(b, p5, max_level, kind="avg"):
    """Add P6..P_max by repeated 3x3 stride-2 pooling; channel count unchanged."""
    if not 6 <= max_level <= 9:
        raise ConfigError(f"max_level must be in [6, 9], got {max_level}")
    taps = {}
    prev = p5
    for level in range(6, max_level + 1):
        prev = b.pool(f"pyramid/P{level}", prev, kind, 3, 2, 1)
        taps[level] = prev
    return taps
