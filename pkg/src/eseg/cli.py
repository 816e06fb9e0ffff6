"""Command-line entry point (``eseg``)."""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import deploy, gradcheck
from . import graph as G
from . import io as eio
from .ablation import fusion_ablation, levels_ablation
from .errors import ConfigError, EsegError
from .fusion import is_head_node
from .metrics import miou, pixel_accuracy
from .model import ModelConfig, build_model, desk_config, get_config, load_zoo
from .selftrain import PseudoLabelConfig, multiscale_infer, pseudolabel
from .train import TrainConfig, evaluate, train_loop

log = logging.getLogger("eseg")


class CliError(Exception):
    def __init__(self, payload, code=2):
        super().__init__(payload.get("message", ""))
        self.payload = payload
        self.code = code


class _Parser(argparse.ArgumentParser):
    # usage errors must also be machine-readable
    def error(self, message):
        raise CliError({"error": "usage_error", "message": message, "prog": self.prog})


def _dump(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write_json(path, obj):
    Path(path).write_text(_dump(obj))


def _csv_text(rows, columns):
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r[k]) for k in columns})
    return buf.getvalue()


def _hw(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _int_list(text):
    return [int(v) for v in text.split(",") if v]


def _float_list(text):
    return [float(v) for v in text.split(",") if v]


def _model_from_args(args):
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        return _model_config(doc.get("model", doc))
    return get_config(args.model)


def _model_config(spec):
    """A model config from a JSON object: ``{"preset": name-or-"desk", ...overrides}`` or full fields."""
    spec = dict(spec)
    preset = spec.pop("preset", None)
    if preset is None:
        return ModelConfig.from_dict(spec)
    if preset == "desk":
        return desk_config(**spec)
    return get_config(preset, **spec)


# ---------------------------------------------------------------------------
# commands

def cmd_summarize(args):
    cfg = _model_from_args(args)
    g = build_model(cfg, bind="abstract")
    rep = G.cost_report(g, (1, cfg.in_channels) + tuple(args.input_hw))
    doc = {
        "model": cfg.name,
        "input_shape": [1, cfg.in_channels, *args.input_hw],
        "total_params": rep.total_params,
        "total_flops": rep.total_flops,
        "peak_activation_elems": rep.peak_activation_elems,
        "head_flops": rep.flops_where(is_head_node),
        "groups": _group_costs(rep),
    }
    if args.per_node:
        doc["per_node"] = rep.to_dict()["per_node"]
    if args.out:
        _write_json(args.out, doc)
    if args.format in ("table", "both"):
        sys.stdout.write(_cost_table(doc))
    if args.format in ("json", "both"):
        sys.stdout.write(_dump(doc))
    return 0


def _group_costs(rep):
    groups = {}
    for name, p, f in rep.per_node:
        key = name.split("/")[0]
        gp = groups.setdefault(key, {"params": 0, "flops": 0})
        gp["params"] += p
        gp["flops"] += f
    return groups


def _cost_table(doc):
    lines = [f"model {doc['model']}  input {'x'.join(map(str, doc['input_shape']))}",
             f"{'group':<12}{'params':>14}{'GFLOPs':>12}"]
    for k, v in doc["groups"].items():
        lines.append(f"{k:<12}{v['params']:>14,}{v['flops'] / 1e9:>12.3f}")
    lines.append(f"{'total':<12}{doc['total_params']:>14,}{doc['total_flops'] / 1e9:>12.3f}")
    return "\n".join(lines) + "\n"


def cmd_ablate_levels(args):
    cfg = _model_from_args(args)
    rows = levels_ablation(cfg, args.max_levels, args.input_hw)
    text = _csv_text(rows, ["levels", "max_level", "params", "flops", "param_delta", "flop_delta_pct"])
    _emit_text(text, args.out)
    return 0


def cmd_ablate_fusion(args):
    cfg = _model_from_args(args)
    if args.min_level is not None or args.max_level is not None:
        cfg = replace(cfg, min_level=args.min_level or cfg.min_level, max_level=args.max_level or cfg.max_level)
    rows = fusion_ablation(cfg, args.topology, args.input_hw, match=not args.no_match)
    text = _csv_text(rows, ["topology", "levels", "channels", "params", "flops", "flops_ratio_to_bifpn"])
    _emit_text(text, args.out)
    return 0


def _emit_text(text, out):
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


def cmd_gradcheck(args):
    results = gradcheck.run_all(args.seed, args.backend, args.trials)
    for r in results:
        sys.stdout.write(f"{'PASS' if r.passed else 'FAIL'}  {r.max_rel_err:.3e}  {r.name}\n")
    doc = {"seed": args.seed, "tolerance": gradcheck.TOLERANCE, "passed": all(r.passed for r in results),
           "results": [r.to_dict() for r in results]}
    if args.out:
        _write_json(args.out, doc)
    return 0 if doc["passed"] else 1


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def _load_data(spec, base):
    if "dir" in spec:
        _, images, labels = eio.load_dataset(_resolve(base, spec["dir"]))
        return images, labels
    if "synthetic" in spec:
        return eio.synthetic_arrays(eio.SyntheticDatasetSpec(**spec["synthetic"]))
    raise ConfigError("data section needs 'dir' or 'synthetic'")


def cmd_train(args):
    path = Path(args.config)
    doc = json.loads(path.read_text())
    base = path.parent
    cfg = _model_config(doc.get("model", {"preset": "desk"}))
    tcfg = TrainConfig.from_dict(doc.get("train", {}))
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.steps is not None:
        tcfg = replace(tcfg, total_steps=args.steps)
    images, labels = _load_data(doc.get("data", {"synthetic": {}}), base)
    images = images.astype(cfg.dtype, copy=False)
    eval_set = None
    if "eval" in doc:
        ei, el = _load_data(doc["eval"], base)
        eval_set = (ei.astype(cfg.dtype, copy=False), el)
    out = Path(args.out or _resolve(base, doc.get("out", "run")))
    out.mkdir(parents=True, exist_ok=True)
    g = build_model(cfg, bind="random", seed=doc.get("init_seed", tcfg.seed))
    res = train_loop(g, images, labels, tcfg, eval_set, cfg.num_classes)
    eio.save_model_checkpoint(out / "checkpoint.eseg", res.graph, res.ema.shadow,
                              {"step": res.step, "lr": res.trace[-1]["lr"] if res.trace else tcfg.lr0,
                               "ema_decay": tcfg.ema_decay})
    (out / "trace.csv").write_text(_csv_text(res.trace, ["step", "lr", "loss", "miou"]))
    summary = {"model": cfg.to_dict(), "train": _jsonable_cfg(tcfg), "steps": res.step,
               "final_loss": res.trace[-1]["loss"] if res.trace else None}
    if eval_set is not None:
        summary["eval_raw"] = _metrics(evaluate(res.graph, *eval_set, cfg.num_classes))
        summary["eval_ema"] = _metrics(evaluate(res.ema_graph(), *eval_set, cfg.num_classes))
    _write_json(out / "summary.json", summary)
    sys.stdout.write(_dump(summary))
    return 0


def _jsonable_cfg(tcfg):
    # round-trip through JSON so tuples become lists
    return json.loads(json.dumps(asdict(tcfg)))


def _metrics(cm):
    return {"miou": miou(cm), "pixel_accuracy": pixel_accuracy(cm),
            "iou": [None if np.isnan(v) else float(v) for v in cm.iou()], "num_classes": cm.num_classes}


def cmd_eval(args):
    g, _ = eio.load_model_checkpoint(args.ckpt, args.weights)
    ids, images, labels = eio.load_dataset(args.data)
    if not ids:
        raise ConfigError(f"no images found in {args.data}")
    k = g.param_specs["head/classifier/weight"].shape[0]
    doc = _metrics(evaluate(g, images.astype(g.dtype, copy=False), labels, k))
    doc["images"] = len(ids)
    doc["weights"] = args.weights
    if args.out:
        _write_json(args.out, doc)
    if args.csv:
        Path(args.csv).write_text(_csv_text([{"class": i, "iou": v} for i, v in enumerate(doc["iou"])],
                                             ["class", "iou"]))
    sys.stdout.write(_dump(doc))
    return 0


def cmd_pseudolabel(args):
    g, _ = eio.load_model_checkpoint(args.model, args.weights)
    ids, images, _ = eio.load_dataset(args.images, with_labels=False)
    pcfg = PseudoLabelConfig(tuple(args.scales), not args.no_flip, args.threshold)
    out = Path(args.out)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    items = []
    ignored = 0
    for name, img in zip(ids, images):
        lab = pseudolabel(multiscale_infer(g, img, pcfg), pcfg)
        eio.write_pgm(out / "labels" / f"{name}.pgm", lab)
        ignored += int((lab == pcfg.ignore_index).sum())
        items.append({"id": name, "label": f"labels/{name}.pgm"})
    doc = {"schema": "eseg.pseudolabels/1", "scales": list(pcfg.scales), "use_flip": pcfg.use_flip,
           "threshold": pcfg.threshold, "ignore_index": pcfg.ignore_index, "items": items,
           "ignored_pixels": ignored}
    _write_json(out / "manifest.json", doc)
    sys.stdout.write(_dump({k: v for k, v in doc.items() if k != "items"} | {"images": len(items)}))
    return 0


def cmd_rewrite(args):
    doc = json.loads(Path(args.input).read_text())
    if args.pass_name == "shift_base_level":
        return _rewrite_shift(args, doc)
    g = G.Graph.from_dict(doc)
    names = deploy.PIPELINE if args.pass_name == "pipeline" else [args.pass_name]
    reports = []
    for name in names:
        if name == "swap_activation":
            g, rep = deploy.rewrite_swap_activation(g, args.from_act, args.to_act, input_hw=args.input_hw)
        else:
            g, rep = deploy.apply_pass(g, name, args.input_hw)
        reports.append(rep.to_dict())
    Path(args.output).write_text(g.to_json())
    report = reports[0] if len(reports) == 1 else {"pass_name": "pipeline", "passes": reports}
    if args.report:
        _write_json(args.report, report)
    sys.stdout.write(_dump(report))
    return 0


def _rewrite_shift(args, doc):
    is_graph = doc.get("schema") == G.SCHEMA_VERSION
    if is_graph:
        if "model" not in doc.get("meta", {}):
            raise ConfigError("shift_base_level needs a graph built from a model config (meta.model missing)")
        cfg = ModelConfig.from_dict(doc["meta"]["model"])
    else:
        cfg = _model_config(doc)
    new = deploy.rewrite_shift_base_level(cfg)
    before, after = build_model(cfg, bind=None), build_model(new, bind=None)
    hw = args.input_hw
    h0, h1 = deploy.head_flops(before, hw), deploy.head_flops(after, hw)
    rep = deploy.compare_graphs("shift_base_level", before, after, 1, 1, hw)
    report = rep.to_dict() | {"head_flops_before": h0, "head_flops_after": h1, "head_flops_ratio": h1 / h0}
    Path(args.output).write_text(after.to_json() if is_graph else _dump(new.to_dict()))
    if args.report:
        _write_json(args.report, report)
    sys.stdout.write(_dump(report))
    return 0


def cmd_gen_data(args):
    h, w = args.size
    spec = eio.SyntheticDatasetSpec(height=h, width=w, num_classes=args.classes, shapes_per_image=args.shapes,
                                    count=args.count, seed=args.seed, noise=args.noise)
    manifest = eio.gen_synthetic(spec, args.out)
    sys.stdout.write(_dump({"out": str(args.out), "count": len(manifest["items"]), "spec": manifest["spec"]}))
    return 0


def cmd_zoo(args):
    sys.stdout.write(_dump({k: v.to_dict() for k, v in load_zoo().items()}))
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="eseg", description="Segmentation-architecture laboratory.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_args(sp, default="eseg-s"):
        sp.add_argument("--model", default=default, help="model-zoo entry (default %(default)s)")
        sp.add_argument("--config", help="JSON model config (overrides --model)")
        sp.add_argument("--input-hw", type=_hw, default=(1024, 2048), help="HxW (default 1024x2048)")
        sp.add_argument("--out", help="also write the result to this file")

    sp = sub.add_parser("summarize", help="parameter / FLOP / activation report")
    model_args(sp)
    sp.add_argument("--format", choices=("json", "table", "both"), default="both")
    sp.add_argument("--per-node", action="store_true", help="include every node's cost")
    sp.set_defaults(fn=cmd_summarize)

    sp = sub.add_parser("ablate-levels", help="cost of extending the feature pyramid (CSV)")
    model_args(sp)
    sp.add_argument("--max-levels", type=_int_list, default=[5, 7, 9])
    sp.set_defaults(fn=cmd_ablate_levels)

    sp = sub.add_parser("ablate-fusion", help="cost of FPN vs BiFPN decoders (CSV)")
    model_args(sp)
    sp.add_argument("--topology", type=lambda s: [t for t in s.split(",") if t], default=["fpn", "bifpn"])
    sp.add_argument("--min-level", type=int)
    sp.add_argument("--max-level", type=int)
    sp.add_argument("--no-match", action="store_true", help="keep equal channels instead of matching FLOPs")
    sp.set_defaults(fn=cmd_ablate_fusion)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trials", type=int, default=25)
    sp.add_argument("--backend", choices=("numpy", "numba"))
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("train", help="train a model from a JSON run config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="output directory (default: config 'out' or ./run)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--weights", choices=("ema", "raw"), default="ema")
    sp.add_argument("--out")
    sp.add_argument("--csv")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("pseudolabel", help="multi-scale pseudo-labels for an image directory")
    sp.add_argument("--model", required=True, help="checkpoint file")
    sp.add_argument("--images", required=True, help="dataset directory with images/*.ppm")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scales", type=_float_list, default=[0.5, 1.0, 2.0])
    sp.add_argument("--no-flip", action="store_true")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--weights", choices=("ema", "raw"), default="ema")
    sp.add_argument("--seed", type=int, default=0, help="accepted for uniformity; inference is deterministic")
    sp.set_defaults(fn=cmd_pseudolabel)

    sp = sub.add_parser("rewrite", help="apply an inference-oriented rewrite to a graph JSON")
    sp.add_argument("--pass", dest="pass_name", required=True,
                    choices=sorted(deploy.GRAPH_PASSES) + ["shift_base_level", "pipeline"])
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", dest="output", required=True)
    sp.add_argument("--report")
    sp.add_argument("--input-hw", type=_hw, default=(1024, 2048))
    sp.add_argument("--from-act", default="silu")
    sp.add_argument("--to-act", default="relu")
    sp.set_defaults(fn=cmd_rewrite)

    sp = sub.add_parser("gen-data", help="write the synthetic shapes dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=256)
    sp.add_argument("--size", type=_hw, default=(64, 64))
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--shapes", type=int, default=4)
    sp.add_argument("--noise", type=float, default=0.08)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("zoo", help="print the shipped model-zoo entries")
    sp.set_defaults(fn=cmd_zoo)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except CliError as exc:
        sys.stderr.write(json.dumps(exc.payload, sort_keys=True) + "\n")
        return exc.code
    except EsegError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), sort_keys=True, default=str) + "\n")
        return 2
    except (OSError, ValueError, KeyError, TypeError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
