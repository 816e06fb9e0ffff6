"""File formats and the synthetic desk-scale dataset.

Tensor file (little-endian)::

    magic   5 bytes  b"ESEG1"
    dtype   u8       1 = float32, 2 = float64
    rank    u8       always 4
    dims    4 x u32
    payload prod(dims) values, row-major

Checkpoint: ``b"ESEGCKPT"``, a u32 manifest length, the JSON manifest
(tensor names, original shapes, byte offsets, training-state scalars and
the graph structure), then the tensor files back to back.

Images are 8-bit binary PPM (P6), label maps 8-bit binary PGM (P5).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ESEG1"
CKPT_MAGIC = b"ESEGCKPT"
_HEADER = struct.Struct("<5sBB4I")
HEADER_SIZE = _HEADER.size
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_MAX_DIM = 2 ** 32 - 1


def encode_tensor(t):
    t = np.asarray(t)
    if t.ndim != 4:
        raise FormatError(f"tensor files hold rank-4 arrays, got shape {t.shape}")
    dt = t.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise FormatError(f"unsupported element type {t.dtype}")
    if any(d > _MAX_DIM for d in t.shape):
        raise FormatError(f"dimension overflow in shape {t.shape}")
    header = _HEADER.pack(MAGIC, _DTYPE_CODES[dt], 4, *t.shape)
    return header + np.ascontiguousarray(t, dtype=dt).tobytes()


def decode_tensor(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns ``(array, end_offset)``."""
    if len(buf) - offset < HEADER_SIZE:
        raise FormatError("truncated tensor header", offset=offset)
    magic, code, rank, *dims = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=offset)
    if rank != 4:
        raise FormatError(f"unsupported rank {rank}", offset=offset)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown element type code {code}", offset=offset)
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.uint64))
    nbytes = count * dtype.itemsize
    start = offset + HEADER_SIZE
    if len(buf) - start < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - start}", offset=offset)
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), start + nbytes


def save_tensor(path, t):
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path):
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor payload")
    return arr


def _as4d(a):
    a = np.asarray(a)
    return a.reshape((1,) * (4 - a.ndim) + a.shape) if a.ndim < 4 else a


def save_checkpoint(path, tensors, state=None, extra=None):
    """Write named tensors (any rank <= 4), scalar training state and JSON ``extra`` to one file."""
    blobs = []
    entries = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        blob = encode_tensor(_as4d(arr))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    doc = {"tensors": entries, "state": state or {}, "extra": extra or {}}
    manifest = json.dumps(doc, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(manifest)) + manifest)
        for blob in blobs:
            fh.write(blob)


@dataclass
class Checkpoint:
    tensors: dict
    state: dict
    extra: dict


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(CKPT_MAGIC)
    if len(buf) < pos + 4:
        raise FormatError(f"{path}: truncated checkpoint header")
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + mlen:
        raise FormatError(f"{path}: truncated checkpoint manifest")
    try:
        manifest = json.loads(buf[pos:pos + mlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt checkpoint manifest: {exc}") from None
    base = pos + mlen
    tensors = {}
    for e in manifest["tensors"]:
        if e["name"] in tensors:
            raise FormatError(f"duplicate tensor name {e['name']!r} in checkpoint")
        arr, _ = decode_tensor(buf, base + e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"])
    return Checkpoint(tensors, manifest.get("state", {}), manifest.get("extra", {}))


def save_model_checkpoint(path, g, ema_shadow=None, state=None):
    """Checkpoint a bound graph: parameters, BN buffers, optional EMA shadow, and the graph structure."""
    tensors = {f"param/{k}": v for k, v in g.params.items()}
    tensors.update({f"buffer/{k}": v for k, v in g.buffers.items()})
    if ema_shadow is not None:
        tensors.update({f"ema/{k}": v for k, v in ema_shadow.items()})
    save_checkpoint(path, tensors, state, {"graph": g.to_dict()})


def load_model_checkpoint(path, weights="ema"):
    """Rebuild the graph stored in a checkpoint, bound to its ``ema`` (if present) or ``raw`` weights."""
    from .graph import Graph

    ck = load_checkpoint(path)
    if "graph" not in ck.extra:
        raise FormatError(f"{path}: checkpoint carries no graph structure")
    groups = {"param": {}, "buffer": {}, "ema": {}}
    for k, v in ck.tensors.items():
        kind, _, name = k.partition("/")
        if kind not in groups:
            raise FormatError(f"{path}: unexpected tensor group in {k!r}")
        groups[kind][name] = v
    params = groups["ema"] if weights == "ema" and groups["ema"] else groups["param"]
    g = Graph.from_dict(ck.extra["graph"]).replace(params=params, buffers=groups["buffer"])
    return g, ck.state


# ---------------------------------------------------------------------------
# PGM / PPM

def _read_netpbm(path, magic):
    buf = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated netpbm header")
        fields.append(buf[start:pos])
    if fields[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit rasters are supported (maxval {maxval})")
    pos += 1
    chans = 3 if magic == b"P6" else 1
    if len(buf) - pos < w * h * chans:
        raise FormatError(f"{path}: truncated raster payload")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * chans, offset=pos)
    return data.reshape(h, w, chans) if chans == 3 else data.reshape(h, w)


def write_pgm(path, label):
    label = np.asarray(label, dtype=np.uint8)
    h, w = label.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + label.tobytes())


def read_pgm(path):
    return _read_netpbm(path, b"P5").copy()


def write_ppm(path, image_u8):
    """``image_u8`` is (H, W, 3) uint8."""
    h, w, _ = image_u8.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image_u8, dtype=np.uint8).tobytes())


def read_ppm(path):
    return _read_netpbm(path, b"P6").copy()


def image_to_tensor(image_u8):
    return (image_u8.astype(np.float32) / 255.0).transpose(2, 0, 1)


def tensor_to_image(x):
    return np.clip(np.rint(np.asarray(x).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def pad_to_multiple(image, multiple, fill=0.0):
    """Pad a (..., H, W) array at the bottom/right up to multiples of ``multiple``.

    Returns ``(padded, (H, W))`` so predictions can be cropped back.
    """
    h, w = image.shape[-2:]
    ph = -h % multiple
    pw = -w % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, pad, constant_values=fill), (h, w)


# ---------------------------------------------------------------------------
# synthetic dataset

PALETTE = np.array([
    [40, 40, 40], [220, 60, 50], [60, 180, 75], [70, 100, 230], [240, 200, 40],
    [160, 60, 200], [60, 210, 210], [240, 130, 40], [250, 190, 210], [130, 130, 0],
], dtype=np.float64) / 255.0


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_image: int = 4
    count: int = 256
    seed: int = 0
    noise: float = 0.08
    min_size: int = 12
    max_size: int = 32

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > len(PALETTE):
            raise ValueError(f"at most {len(PALETTE)} classes are supported")


def render_scene(spec, index):
    """One (image_u8 (H, W, 3), label (H, W)) pair, determined by ``(spec.seed, index)``.

    Shapes are axis-aligned rectangles and disks painted in order; the label
    map is the geometry itself. With at least K-1 shapes per image, the
    scene is redrawn until every class is visible.
    """
    rng = np.random.default_rng([spec.seed, index])
    h, w, k = spec.height, spec.width, spec.num_classes
    yy, xx = np.mgrid[0:h, 0:w]
    want_all = spec.shapes_per_image >= k - 1
    for _ in range(100):
        label = np.zeros((h, w), dtype=np.uint8)
        classes = [1 + j % (k - 1) for j in range(spec.shapes_per_image)]
        rng.shuffle(classes)
        for cls in classes:
            size = rng.integers(spec.min_size, spec.max_size + 1)
            cy, cx = rng.integers(0, h), rng.integers(0, w)
            if rng.uniform() < 0.5:
                half = size // 2
                mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= rng.integers(half // 2 + 1, half + 1) * 2 - 1)
            else:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 2) ** 2
            label[mask] = cls
        if not want_all or len(np.unique(label)) == k:
            break
    img = PALETTE[label] + rng.normal(0.0, spec.noise, size=(h, w, 3))
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8), label


def synthetic_arrays(spec):
    """The whole dataset in memory: float32 images (N, 3, H, W) in [0, 1] and uint8 labels (N, H, W)."""
    images = np.zeros((spec.count, 3, spec.height, spec.width), dtype=np.float32)
    labels = np.zeros((spec.count, spec.height, spec.width), dtype=np.uint8)
    for i in range(spec.count):
        img, lab = render_scene(spec, i)
        images[i] = image_to_tensor(img)
        labels[i] = lab
    return images, labels


def gen_synthetic(spec, out_dir):
    """Write the dataset as PPM/PGM pairs plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(spec.count):
        img, lab = render_scene(spec, i)
        name = f"{i:05d}"
        write_ppm(out / "images" / f"{name}.ppm", img)
        write_pgm(out / "labels" / f"{name}.pgm", lab)
        items.append({"id": name, "image": f"images/{name}.ppm", "label": f"labels/{name}.pgm"})
    manifest = {"schema": "eseg.dataset/1", "spec": asdict(spec), "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(data_dir, with_labels=True):
    """Read a dataset directory. Without a manifest, every ``images/*.ppm`` is used."""
    root = Path(data_dir)
    mf = root / "manifest.json"
    if mf.exists():
        items = json.loads(mf.read_text())["items"]
    else:
        items = [{"id": p.stem, "image": f"images/{p.name}", "label": f"labels/{p.stem}.pgm"}
                 for p in sorted((root / "images").glob("*.ppm"))]
    if not items:
        return [], np.zeros((0, 3, 1, 1), np.float32), None
    images = np.stack([image_to_tensor(read_ppm(root / it["image"])) for it in items])
    labels = None
    if with_labels:
        labels = np.stack([read_pgm(root / it["label"]) for it in items])
    return [it["id"] for it in items], images, labels
