"""Whole-model configs, the shipped model zoo and the full graph builder."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

from . import graph as G
from .backbone import BackboneConfig, build_backbone, efficientnet_stages, extend_pyramid
from .builder import GraphBuilder
from .errors import ConfigError
from .fusion import FpnConfig, build_decoder, prediction_head, weighted_sum_head


@dataclass(frozen=True)
class ModelConfig:
    name: str = "custom"
    width: float = 1.0
    depth: float = 1.0
    channels: int = 96
    repeats: int = 4
    min_level: int = 2
    max_level: int = 9
    conv_style: str = "separable"
    activation: str = "silu"
    block_kind: str = "mbconv"
    se_ratio: float | None = 0.25
    topology: str = "bifpn"
    num_classes: int = 19
    in_channels: int = 3
    extra_pool: str = "avg"
    dtype: str = "float32"

    def __post_init__(self):
        if not 1 <= self.min_level <= 5:
            raise ConfigError(f"min_level must be a backbone level in [1, 5], got {self.min_level}")
        if not self.min_level <= self.max_level <= 9:
            raise ConfigError(f"max_level must be in [min_level, 9], got {self.max_level}")
        if self.extra_pool not in ("avg", "max"):
            raise ConfigError(f"extra_pool must be 'avg' or 'max', got {self.extra_pool!r}")

    def backbone(self):
        stages = efficientnet_stages(self.block_kind, self.se_ratio)
        return BackboneConfig(stages, self.width, self.depth, 32, self.activation)

    def decoder(self):
        return FpnConfig(self.min_level, self.max_level, self.channels, self.repeats, self.topology,
                         self.conv_style)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def _zoo_text():
    return resources.files("eseg").joinpath("data/zoo.json").read_text()


def load_zoo(path=None):
    """Model-zoo entries keyed by name (defaults to the shipped table)."""
    text = Path(path).read_text() if path else _zoo_text()
    doc = json.loads(text)
    return {m["name"]: ModelConfig.from_dict(m) for m in doc["models"]}


def get_config(name, **overrides):
    zoo = load_zoo()
    key = name.lower()
    if key not in zoo:
        raise ConfigError(f"unknown model {name!r}; valid zoo entries: {sorted(zoo)}", valid=sorted(zoo))
    return replace(zoo[key], **overrides)


def desk_config(**overrides):
    """Width-0.25 ESeg-Lite variant sized for 64x64 inputs (levels P3..P6)."""
    base = dict(name="eseg-lite-desk", width=0.25, depth=0.6, channels=32, repeats=1, min_level=3, max_level=6,
                conv_style="regular", activation="relu", block_kind="fused_mbconv", se_ratio=None,
                num_classes=4, dtype="float32")
    base.update(overrides)
    return ModelConfig(**base)


def build_model(cfg, bind="random", seed=0):
    """Full segmentation graph: encoder, pyramid extension, decoder, head.

    Input ``image`` (n, in_channels, H, W); output ``logits``
    (n, num_classes, H, W). ``bind`` is passed to :func:`eseg.graph.bind`
    (``None`` leaves the graph unbound).
    """
    b = GraphBuilder(cfg.dtype)
    image = b.input("image", cfg.in_channels)
    taps = build_backbone(b, image, cfg.backbone())
    if cfg.max_level > 5:
        taps.update(extend_pyramid(b, taps[5], cfg.max_level, cfg.extra_pool))
    dec = cfg.decoder()
    outs = build_decoder(b, dec, {i: taps[i] for i in dec.levels}, cfg.activation)
    fused = weighted_sum_head(b, outs, cfg.min_level)
    logits = prediction_head(b, fused, cfg.channels, cfg.num_classes, image, cfg.conv_style, cfg.activation)
    b.output("logits", logits)
    g = b.build(meta={"model": cfg.to_dict(), "min_level": cfg.min_level, "max_level": cfg.max_level})
    return g if bind is None else G.bind(g, bind, seed)


def required_multiple(cfg):
    return 2 ** cfg.max_level
