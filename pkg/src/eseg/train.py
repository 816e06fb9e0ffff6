"""Training machinery: OHEM cross-entropy, SGD with momentum, cosine LR, EMA, augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from . import tensor as T
from .errors import ShapeError, TrainingError
from .metrics import IGNORE_INDEX, ConfusionMatrix, miou

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OhemConfig:
    prob_threshold: float = 0.7
    min_kept_fraction: float = 1 / 16
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if not 0 < self.prob_threshold <= 1:
            raise ValueError(f"prob_threshold must be in (0, 1], got {self.prob_threshold}")
        if not 0 < self.min_kept_fraction <= 1:
            raise ValueError(f"min_kept_fraction must be in (0, 1], got {self.min_kept_fraction}")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.08
    total_steps: int = 200
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch: int = 8
    ohem: OhemConfig = field(default_factory=OhemConfig)
    ema_decay: float = 0.999
    ema_warmup: bool = True
    seed: int = 0
    scale_range: tuple = (0.5, 2.0)
    crop_hw: tuple | None = None
    hflip_p: float = 0.5
    eval_every: int = 50

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "ohem" in d:
            d["ohem"] = OhemConfig(**d["ohem"])
        for key in ("scale_range", "crop_hw"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class OhemResult:
    loss: float
    grad: np.ndarray
    kept: int
    valid: int

    @property
    def empty(self):
        return self.kept == 0


def _log_softmax(logits):
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_ohem(logits, labels, cfg=OhemConfig()):
    """Softmax cross-entropy over the hard pixels.

    Pixels whose true-class probability is below ``prob_threshold`` are
    kept; if that leaves fewer than ``ceil(min_kept_fraction * valid)``
    pixels, that many lowest-probability pixels are kept instead
    (ties broken by pixel order). The loss is the mean over the kept set,
    and the returned gradient treats the kept set as fixed.
    """
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}",
                         labels_shape=list(labels.shape), logits_shape=list(logits.shape))
    labels = labels.astype(np.int64)
    valid = labels != cfg.ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"label values {sorted(set(labels[bad].tolist()))[:10]} outside [0, {k})")
    n_valid = int(valid.sum())
    grad = np.zeros(logits.shape, dtype=logits.dtype)
    if n_valid == 0:
        return OhemResult(0.0, grad, 0, 0)
    logp = _log_softmax(logits)
    safe = np.where(valid, labels, 0)
    logp_true = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    p_true = np.exp(logp_true)
    keep = valid & (p_true < cfg.prob_threshold)
    min_kept = math.ceil(cfg.min_kept_fraction * n_valid)
    if keep.sum() < min_kept:
        flat_valid = np.flatnonzero(valid)
        order = np.argsort(p_true.reshape(-1)[flat_valid], kind="stable")
        keep = np.zeros(valid.size, dtype=bool)
        keep[flat_valid[order[:min_kept]]] = True
        keep = keep.reshape(valid.shape)
    n_kept = int(keep.sum())
    loss = float(-logp_true[keep].sum() / n_kept)
    prob = np.exp(logp)
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    g = (prob - onehot) * keep[:, None] / n_kept
    return OhemResult(loss, g.astype(logits.dtype), n_kept, n_valid)


def cosine_lr(step, total_steps, lr0):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1 + math.cos(math.pi * step / total_steps))


def _decays(name):
    # head fusion logits are scale-free and exempt from weight decay
    return not name.startswith("head/fuse")


def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=0.0, decay_filter=_decays):
    """One SGD-with-momentum update.

    ``v <- momentum * v + grad + wd * param``; ``param <- param - lr * v``.
    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    new_params, new_state = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}", param=name)
        d = g + weight_decay * p if weight_decay and decay_filter(name) else g
        v = state.get(name)
        v = d if v is None else momentum * v + d
        new_state[name] = v.astype(p.dtype, copy=False)
        new_params[name] = (p - lr * v).astype(p.dtype, copy=False)
    return new_params, new_state


@dataclass
class EmaState:
    shadow: dict
    decay: float
    updates: int = 0

    @classmethod
    def create(cls, params, decay):
        return cls({k: np.array(v, copy=True) for k, v in params.items()}, decay)


def ema_update(ema, params, decay=None):
    """``shadow <- decay * shadow + (1 - decay) * param``."""
    d = ema.decay if decay is None else decay
    shadow = {}
    for name, s in ema.shadow.items():
        p = params[name]
        if p.shape != s.shape:
            raise ShapeError(f"EMA shadow {name!r} has shape {s.shape}, parameter {p.shape}", param=name)
        shadow[name] = (d * s + (1 - d) * p).astype(s.dtype, copy=False)
    return EmaState(shadow, ema.decay, ema.updates + 1)


def ema_warmup_decay(decay, updates):
    return min(decay, (1 + updates) / (10 + updates))


def resize_nearest(label, out_h, out_w):
    h, w = label.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return label[ys[:, None], xs[None, :]]


def augment(image, label, rng, scale_range=(0.5, 2.0), crop_hw=None, hflip_p=0.5, ignore_index=IGNORE_INDEX):
    """Random scale jitter, crop (padding with the mean pixel / ignore) and horizontal flip.

    ``image`` is (C, H, W) float, ``label`` is (H, W) integer. The random
    stream is consumed identically whatever the outcome: one scale draw,
    two crop offsets, one flip draw.
    """
    c, h, w = image.shape
    ch, cw = crop_hw if crop_hw is not None else (h, w)
    u = rng.uniform(*scale_range)
    sh, sw = max(1, int(round(h * u))), max(1, int(round(w * u)))
    img = T.bilinear_resize(image[None], sh, sw)[0]
    lab = resize_nearest(label, sh, sw)
    if sh < ch or sw < cw:
        ph, pw = max(ch, sh), max(cw, sw)
        mean = image.mean(axis=(1, 2), dtype=np.float64).astype(image.dtype)
        padded = np.broadcast_to(mean[:, None, None], (c, ph, pw)).copy()
        padded[:, :sh, :sw] = img
        plab = np.full((ph, pw), ignore_index, dtype=label.dtype)
        plab[:sh, :sw] = lab
        img, lab, sh, sw = padded, plab, ph, pw
    oy = int(rng.integers(0, sh - ch + 1))
    ox = int(rng.integers(0, sw - cw + 1))
    img = img[:, oy:oy + ch, ox:ox + cw]
    lab = lab[oy:oy + ch, ox:ox + cw]
    if rng.uniform() < hflip_p:
        img = img[:, :, ::-1]
        lab = lab[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def predict(g, images, batch=16):
    """Arg-max class map for every image (inference mode)."""
    out = []
    for i in range(0, len(images), batch):
        logits = G.forward(g, images[i:i + batch])["logits"]
        out.append(logits.argmax(axis=1))
    return np.concatenate(out)


def evaluate(g, images, labels, num_classes, ignore_index=IGNORE_INDEX):
    cm = ConfusionMatrix(num_classes, ignore_index)
    for i in range(0, len(images), 16):
        cm = cm.accumulate(predict(g, images[i:i + 16]), labels[i:i + 16])
    return cm


@dataclass
class TrainResult:
    graph: G.Graph
    ema: EmaState
    trace: list  # dicts: step, lr, loss, miou
    step: int

    def ema_graph(self):
        return self.graph.with_params(self.ema.shadow)


def train_loop(g, images, labels, cfg, eval_set=None, num_classes=None):
    """Desk-scale training loop; fully determined by ``cfg.seed``.

    Each step draws a batch without replacement from a seeded shuffle,
    augments it, runs forward and backward in train mode, applies SGD with
    a cosine schedule, updates BN running statistics and the parameter EMA.
    ``eval_set`` (images, labels) is scored every ``cfg.eval_every`` steps
    and at the end.
    """
    if len(images) == 0:
        raise ValueError("training set is empty")
    num_classes = num_classes or g.param_specs["head/classifier/weight"].shape[0]
    rng = np.random.default_rng(cfg.seed)
    ema = EmaState.create(g.params, cfg.ema_decay)
    state = {}
    trace = []
    order = rng.permutation(len(images))
    cursor = 0
    for step in range(cfg.total_steps):
        idx = []
        while len(idx) < cfg.batch:
            if cursor == len(order):
                order = rng.permutation(len(images))
                cursor = 0
            idx.append(order[cursor])
            cursor += 1
        pairs = [augment(images[i], labels[i], rng, cfg.scale_range, cfg.crop_hw, cfg.hflip_p,
                         cfg.ohem.ignore_index) for i in idx]
        x = np.stack([p[0] for p in pairs])
        y = np.stack([p[1] for p in pairs])
        lr = cosine_lr(step, cfg.total_steps, cfg.lr0)
        tr = G.run(g, x, mode="train")
        res = cross_entropy_ohem(tr.values[g.outputs["logits"]], y, cfg.ohem)
        if not np.isfinite(res.loss):
            raise TrainingError(f"non-finite loss {res.loss} at step {step} (lr {lr:.4g})", step=step, lr=lr)
        grads = G.backward(g, tr, seeds={"logits": res.grad})
        params, state = sgd_step(g.params, grads, state, lr, cfg.momentum, cfg.weight_decay)
        g = g.with_params(params, tr.buffers)
        decay = ema_warmup_decay(cfg.ema_decay, ema.updates) if cfg.ema_warmup else cfg.ema_decay
        ema = ema_update(ema, params, decay)
        row = {"step": step, "lr": lr, "loss": res.loss, "miou": None}
        done = step + 1
        if eval_set is not None and (done % cfg.eval_every == 0 or done == cfg.total_steps):
            row["miou"] = miou(evaluate(g, *eval_set, num_classes, cfg.ohem.ignore_index))
            log.info("step %d loss %.4f miou %.4f", done, res.loss, row["miou"])
        trace.append(row)
    return TrainResult(g, ema, trace, cfg.total_steps)
