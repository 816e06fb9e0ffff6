"""Pseudo-label generation from multi-scale, flip-averaged inference, and labeled/pseudo batch mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph as G
from . import tensor as T
from .errors import ConfigError
from .io import pad_to_multiple
from .metrics import IGNORE_INDEX


@dataclass(frozen=True)
class PseudoLabelConfig:
    scales: tuple = (0.5, 1.0, 2.0)
    use_flip: bool = True
    threshold: float = 0.5
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be a nonempty list of positive values, got {self.scales}")
        if not 0 <= self.threshold < 1:
            raise ConfigError(f"threshold must be in [0, 1), got {self.threshold}")


def softmax_channels(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def graph_predictor(g):
    """Wrap a model graph as ``x (n, C, H, W) -> probabilities (n, K, H, W)``."""
    def predict(x):
        return softmax_channels(G.forward(g, x.astype(g.dtype, copy=False))["logits"].astype(np.float64))
    predict.multiple = 2 ** g.meta.get("max_level", 0)
    return predict


def _one_pass(predict, image, scale, flip, multiple):
    _, h, w = image.shape
    x = image[None].astype(np.float64)
    sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    x = T.bilinear_resize(x, sh, sw)
    if flip:
        x = x[..., ::-1]
    x, (ch, cw) = pad_to_multiple(np.ascontiguousarray(x), multiple)
    p = np.asarray(predict(x), dtype=np.float64)[:, :, :ch, :cw]
    if flip:
        p = p[..., ::-1]
    return T.bilinear_resize(np.ascontiguousarray(p), h, w)[0]


def multiscale_infer(model, image, cfg=PseudoLabelConfig(), multiple=None):
    """Per-pixel class probabilities (K, H, W) averaged over scales and flips.

    ``model`` is a graph or a callable mapping (n, C, H, W) images to
    (n, K, H, W) probabilities. For every scale the image is resized, padded
    at the bottom/right to the model's size multiple, predicted, cropped and
    resized back. With ``use_flip`` each scale also runs on the mirrored
    image (its output mirrored back). All passes are averaged with equal
    weight, in scale-list order, as a running mean so identical passes
    reproduce their common value exactly.
    """
    predict = graph_predictor(model) if isinstance(model, G.Graph) else model
    if multiple is None:
        multiple = getattr(predict, "multiple", 1)
    flips = (False, True) if cfg.use_flip else (False,)
    mean = None
    n = 0
    for s in cfg.scales:
        for f in flips:
            p = _one_pass(predict, image, s, f, multiple)
            n += 1
            mean = p if mean is None else mean + (p - mean) / n
    return mean


def pseudolabel(probs, cfg=PseudoLabelConfig()):
    """Arg-max label where the top probability is strictly above ``threshold``, else ``ignore_index``."""
    probs = np.asarray(probs)
    sums = probs.sum(axis=0)
    if np.abs(sums - 1).max(initial=0) > 1e-4:
        raise ValueError(f"probabilities must sum to 1 per pixel (worst deviation {np.abs(sums - 1).max():.3g})")
    top = probs.max(axis=0)
    label = probs.argmax(axis=0).astype(np.uint8)
    label[~(top > cfg.threshold)] = cfg.ignore_index
    return label


@dataclass(frozen=True)
class MixedBatchSampler:
    labeled: tuple
    pseudo: tuple
    ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.labeled:
            raise ValueError("labeled source is empty")
        if not self.pseudo and self.ratio < 1:
            raise ValueError("pseudo-label source is empty")
        if not 0 <= self.ratio <= 1:
            raise ValueError(f"ratio must be in [0, 1], got {self.ratio}")

    def split(self, batch_size):
        n_lab = self.ratio * batch_size
        if n_lab != int(n_lab):
            raise ValueError(f"ratio {self.ratio} does not split a batch of {batch_size} into whole items")
        return int(n_lab), batch_size - int(n_lab)


class _Cycler:
    # draws ids without replacement, reshuffling after each full pass
    def __init__(self, ids, rng):
        self.ids = list(ids)
        self.rng = rng
        self.order = []

    def take(self, k):
        out = []
        while len(out) < k:
            if not self.order:
                self.order = [self.ids[i] for i in self.rng.permutation(len(self.ids))]
            out.append(self.order.pop())
        return out


def mix_batches(sampler, batch_size, num_batches=1):
    """Deterministic batch manifests: lists of ``{"id", "source"}`` with source ``labeled`` or ``pseudo``."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    n_lab, n_ps = sampler.split(batch_size)
    rng = np.random.default_rng(sampler.seed)
    lab = _Cycler(sampler.labeled, rng)
    ps = _Cycler(sampler.pseudo, rng) if n_ps else None
    batches = []
    for _ in range(num_batches):
        items = [{"id": i, "source": "labeled"} for i in lab.take(n_lab)]
        if ps is not None:
            items += [{"id": i, "source": "pseudo"} for i in ps.take(n_ps)]
        batches.append([items[j] for j in rng.permutation(len(items))])
    return batches
