"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import time

import numpy as np
import pytest

from eseg import graph as G
from eseg import gradcheck
from eseg.ablation import REFERENCE_HW, fusion_ablation, levels_ablation, model_cost
from eseg.deploy import PIPELINE, apply_pass, head_flops, rewrite_shift_base_level
from eseg.fusion import fold_head
from eseg.io import SyntheticDatasetSpec, synthetic_arrays
from eseg.metrics import ConfusionMatrix, miou, pixel_accuracy
from eseg.model import build_model, desk_config, get_config
from eseg.selftrain import MixedBatchSampler, PseudoLabelConfig, mix_batches, multiscale_infer, pseudolabel
from eseg.train import OhemConfig, TrainConfig, cross_entropy_ohem, evaluate, train_loop

import oracles


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
        assert ok, detail
    return emit


ZOO_TARGETS = {"eseg-s": (6.9e6, 34.5e9), "eseg-m": (20.0e6, 112e9), "eseg-l": (70.5e6, 343e9)}


def test_1_zoo_costs(report):
    lines, ok = [], True
    for name, (p_ref, f_ref) in ZOO_TARGETS.items():
        params, flops = model_cost(get_config(name), REFERENCE_HW)
        dp, df = params / p_ref - 1, flops / f_ref - 1
        ok &= abs(dp) <= 0.10 and abs(df) <= 0.15
        lines.append(f"{name} {params / 1e6:.2f}M {dp:+.1%} / {flops / 1e9:.1f}B {df:+.1%}")
    report(1, "zoo params within 10%, FLOPs within 15%", ok, "; ".join(lines))


def test_2_extra_levels_are_cheap(report):
    rows = levels_ablation(get_config("eseg-s"), [5, 9], REFERENCE_HW)
    dp, df = rows[1]["param_delta"], rows[1]["flop_delta_pct"]
    ok = 0.2e6 <= dp <= 0.8e6 and 0 <= df <= 1.5
    report(2, "P2-P5 to P2-P9 cost delta", ok, f"params {dp / 1e6:+.3f}M, FLOPs {df:+.3f}%")


def test_3_fpn_vs_bifpn(report):
    rows = {r["topology"]: r for r in fusion_ablation(get_config("eseg-s"), ("fpn", "bifpn"), REFERENCE_HW)}
    ratio = rows["fpn"]["flops"] / rows["bifpn"]["flops"]
    ok = 0.8 <= ratio <= 1.2 and rows["fpn"]["levels"] == rows["bifpn"]["levels"]
    report(3, "FPN and BiFPN FLOPs within 20%", ok,
           f"fpn {rows['fpn']['channels']}ch {rows['fpn']['flops'] / 1e9:.2f}B, "
           f"bifpn {rows['bifpn']['channels']}ch {rows['bifpn']['flops'] / 1e9:.2f}B, ratio {ratio:.3f}")


def test_4_gradient_suite(report):
    t0 = time.perf_counter()
    results = gradcheck.run_all(seed=0, trials=25)
    elapsed = time.perf_counter() - t0
    graphs = [r for r in results if r.name.startswith("random graph")]
    worst = max(results, key=lambda r: r.max_rel_err)
    ok = all(r.passed for r in results) and len(graphs) == 25 and elapsed < 120
    report(4, "finite-difference gradient suite", ok,
           f"{len(results)} checks, {len(graphs)} random graphs, worst {worst.max_rel_err:.2e} ({worst.name}), "
           f"{elapsed:.1f}s")


def test_5_softmax_fold(report):
    x = np.random.default_rng(0).uniform(size=(1, 3, 64, 64)).astype(np.float32)
    worst = 0.0
    for seed in range(50):
        g = build_model(desk_config(), "random", seed)
        w = np.random.default_rng(seed).standard_normal(g.params["head/fuse/weight"].shape).astype(np.float32)
        g = g.with_params({**g.params, "head/fuse/weight": w})
        diff = np.abs(G.forward(g, x)["logits"] - G.forward(fold_head(g), x)["logits"]).max()
        worst = max(worst, float(diff))
    report(5, "folded head matches softmax-weighted head", worst <= 1e-6, f"50 models, max |diff| {worst:.2e}")


@pytest.mark.slow
def test_6_desk_training(report):
    t0 = time.perf_counter()
    images, labels = synthetic_arrays(SyntheticDatasetSpec(count=256, seed=0))
    held_out = synthetic_arrays(SyntheticDatasetSpec(count=64, seed=1))
    cfg = TrainConfig(total_steps=200, seed=0, eval_every=1000)
    g0 = build_model(desk_config(), "random", 0)
    base = miou(evaluate(g0, *held_out, 4))
    a = train_loop(g0, images, labels, cfg)
    score = miou(evaluate(a.graph, *held_out, 4))
    ema_score = miou(evaluate(a.ema_graph(), *held_out, 4))
    b = train_loop(g0, images, labels, cfg)
    elapsed = time.perf_counter() - t0
    same = [r["loss"] for r in a.trace] == [r["loss"] for r in b.trace]
    ok = score >= 0.6 and same and elapsed < 600
    report(6, "desk-scale training", ok,
           f"held-out mIoU {base:.3f} -> {score:.3f} (ema {ema_score:.3f}), "
           f"final loss {a.trace[-1]['loss']:.4f}, trace deterministic {same}, {elapsed:.0f}s for two runs")


def test_7_metric_oracles(report):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        shape = tuple(rng.integers(1, 9, 2))
        truth = rng.integers(0, k, shape)
        truth[rng.uniform(size=shape) < 0.15] = 255
        pred = rng.integers(0, k, shape)
        cm = ConfusionMatrix(k).accumulate(pred, truth)
        if not np.array_equal(cm.counts, oracles.confusion_loop(pred, truth, k)):
            mismatches += 1
            continue
        if (truth != 255).any():
            mismatches += miou(cm) != oracles.miou_loop(pred, truth, k)
            mismatches += pixel_accuracy(cm) != oracles.pixacc_loop(pred, truth)
    hand = ConfusionMatrix(2).accumulate(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]))
    exact = miou(hand) == 7 / 12
    report(7, "metrics equal per-pixel loops", mismatches == 0 and exact,
           f"1000 maps, {mismatches} mismatches, hand example {miou(hand)!r}")


def test_8_rewrite_pipeline(report):
    g = build_model(get_config("eseg-s"), bind="abstract")
    shapes0 = G.infer_shapes(g, (1, 3) + REFERENCE_HW)
    idempotent, preserved = True, True
    for name in PIPELINE:
        g, rep = apply_pass(g, name, REFERENCE_HW)
        preserved &= rep.shapes_preserved
        again, rep2 = apply_pass(g, name, REFERENCE_HW)
        idempotent &= rep2.matched == 0 and again.to_json() == g.to_json()
    se = sum(n.op in ("mul", "global_pool") for n in g.nodes)
    silu = sum(n.op == "act" and n.attrs["kind"] == "silu" for n in g.nodes)
    dw = sum(n.op == "dwconv2d" for n in g.nodes)
    out_same = G.infer_shapes(g, (1, 3) + REFERENCE_HW)["logits"] == shapes0["logits"]
    cfg = get_config("eseg-s")
    ratio = head_flops(build_model(rewrite_shift_base_level(cfg), bind=None)) / head_flops(build_model(cfg, bind=None))
    ok = se == silu == dw == 0 and preserved and out_same and idempotent and abs(ratio - 0.25) <= 0.25 * 0.05
    report(8, "inference rewrite pipeline", ok,
           f"SE {se}, SiLU {silu}, depthwise {dw}, shapes preserved {preserved and out_same}, "
           f"idempotent {idempotent}, head FLOPs ratio {ratio:.4f}")


def test_9_selftraining_mechanics(report):
    rng = np.random.default_rng(9)
    monotone = True
    for _ in range(100):
        k = int(rng.integers(2, 8))
        probs = rng.dirichlet(np.full(k, 0.8), (8, 8)).transpose(2, 0, 1)
        ignored = [(pseudolabel(probs, PseudoLabelConfig(threshold=t)) == 255).sum()
                   for t in np.linspace(0, 0.95, 12)]
        monotone &= all(a <= b for a, b in zip(ignored, ignored[1:]))
    dist = np.array([0.1, 0.2, 0.3, 0.4])

    def stub(x):
        n, _, h, w = x.shape
        return np.broadcast_to(dist[None, :, None, None], (n, 4, h, w)).copy()
    out = multiscale_infer(stub, rng.uniform(size=(3, 24, 40)), PseudoLabelConfig(), multiple=8)
    exact = np.array_equal(out, np.broadcast_to(dist[:, None, None], out.shape))
    sampler = MixedBatchSampler(tuple(f"l{i}" for i in range(20)), tuple(f"p{i}" for i in range(20)), 0.5, 0)
    halves = all(sum(i["source"] == "pseudo" for i in b) == 4 for b in mix_batches(sampler, 8, 50))
    report(9, "self-training mechanics", monotone and exact and halves,
           f"threshold monotone {monotone}, stub exact {exact}, half/half batches {halves}")


def test_10_ohem_degenerates_to_cross_entropy(report):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        logits = rng.standard_normal((2, 5, 6, 7)) * 4
        labels = rng.integers(0, 5, (2, 6, 7))
        labels[rng.uniform(size=labels.shape) < 0.1] = 255
        res = cross_entropy_ohem(logits, labels, OhemConfig(1.0, 1.0))
        worst = max(worst, abs(res.loss - oracles.cross_entropy_loop(logits, labels)))
    report(10, "OHEM at full keep equals cross-entropy", worst <= 1e-10, f"20 batches, max |diff| {worst:.2e}")
