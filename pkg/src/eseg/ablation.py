"""Cost-only ablations: pyramid depth and decoder topology."""

from __future__ import annotations

from dataclasses import replace

from . import graph as G
from .model import build_model

REFERENCE_HW = (1024, 2048)


def model_cost(cfg, input_hw=REFERENCE_HW):
    g = build_model(cfg, bind="abstract")
    rep = G.cost_report(g, (1, cfg.in_channels) + tuple(input_hw))
    return rep.total_params, rep.total_flops


def levels_ablation(cfg, max_levels, input_hw=REFERENCE_HW):
    """One row per ``max_level``; deltas are relative to the first entry."""
    rows = []
    for m in max_levels:
        params, flops = model_cost(replace(cfg, max_level=m), input_hw)
        rows.append({"levels": f"P{cfg.min_level}-P{m}", "max_level": m, "params": params, "flops": flops})
    base = rows[0]
    for r in rows:
        r["param_delta"] = r["params"] - base["params"]
        r["flop_delta_pct"] = 100.0 * (r["flops"] - base["flops"]) / base["flops"]
    return rows


def match_channels(cfg, target_flops, input_hw=REFERENCE_HW, step=8, max_channels=1024):
    """Decoder width (a multiple of ``step``) whose model FLOPs are closest to ``target_flops``.

    Total FLOPs grow monotonically with the decoder width, so a bisection
    over multiples of ``step`` followed by a neighbour comparison suffices.
    """
    def flops(c):
        return model_cost(replace(cfg, channels=c), input_hw)[1]

    lo, hi = 1, max_channels // step
    while lo < hi:
        mid = (lo + hi) // 2
        if flops(mid * step) < target_flops:
            lo = mid + 1
        else:
            hi = mid
    candidates = [c * step for c in (lo - 1, lo) if c >= 1]
    return min(candidates, key=lambda c: (abs(flops(c) - target_flops), c))


def fusion_ablation(cfg, topologies=("fpn", "bifpn"), input_hw=REFERENCE_HW, match=True):
    """Compare decoder topologies at the same levels.

    The BiFPN keeps ``cfg.channels``; with ``match`` every other topology's
    width is chosen so its total FLOPs land closest to the BiFPN model's.
    """
    ref_params, ref_flops = model_cost(replace(cfg, topology="bifpn"), input_hw)
    rows = []
    for topo in topologies:
        c = cfg.channels
        if topo != "bifpn" and match:
            c = match_channels(replace(cfg, topology=topo), ref_flops, input_hw)
        params, flops = model_cost(replace(cfg, topology=topo, channels=c), input_hw)
        rows.append({"topology": topo, "levels": f"P{cfg.min_level}-P{cfg.max_level}", "channels": c,
                     "params": params, "flops": flops, "flops_ratio_to_bifpn": flops / ref_flops})
    return rows
