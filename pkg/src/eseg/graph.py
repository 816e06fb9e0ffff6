"""Computation-graph IR.

A :class:`Graph` is an immutable, topologically ordered list of :class:`Node`
objects plus a parameter manifest. The same object is used for shape
inference, cost accounting, receptive-field analysis, execution and
reverse-mode differentiation, and it round-trips through a versioned JSON
document (``to_json`` / ``from_json``).

Cost convention: one multiply-accumulate is one FLOP. Pooling, resizing,
activations, gates and additions cost one op per output element (an n-ary
add costs n-1), batch norm costs two.
"""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import DTypeError, GraphError, ShapeError

SCHEMA_VERSION = "eseg.graph/1"

FUSE_EPS = 1e-4


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    params: tuple = ()
    buffers: tuple = ()
    block: str | None = None

    def to_dict(self):
        d = {"name": self.name, "op": self.op, "inputs": list(self.inputs), "attrs": _jsonable(self.attrs)}
        if self.params:
            d["params"] = list(self.params)
        if self.buffers:
            d["buffers"] = list(self.buffers)
        if self.block is not None:
            d["block"] = self.block
        return d

    @classmethod
    def from_dict(cls, d):
        attrs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("attrs", {}).items()}
        return cls(d["name"], d["op"], tuple(d.get("inputs", ())), attrs,
                   tuple(d.get("params", ())), tuple(d.get("buffers", ())), d.get("block"))


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple
    init: str = "he"  # he | ones | zeros | classifier


@dataclass(frozen=True)
class Graph:
    nodes: tuple = ()
    inputs: tuple = ()
    outputs: dict = field(default_factory=dict)
    param_specs: dict = field(default_factory=dict)
    buffer_specs: dict = field(default_factory=dict)
    params: dict | None = None
    buffers: dict | None = None
    blocks: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    dtype: str = "float32"

    def __post_init__(self):
        seen = set()
        for node in self.nodes:
            if node.name in seen:
                raise GraphError(f"duplicate node name {node.name!r}", node=node.name)
            if node.op not in OPS:
                raise GraphError(f"unknown op {node.op!r} at node {node.name!r}", node=node.name)
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(f"node {node.name!r} reads {src!r}, which is not an earlier node",
                                     node=node.name, missing=src)
            seen.add(node.name)
        for out, src in self.outputs.items():
            if src not in seen:
                raise GraphError(f"output {out!r} refers to unknown node {src!r}", output=out)

    # -- lookups ---------------------------------------------------------
    def node(self, name):
        try:
            return self.node_map[name]
        except KeyError:
            raise GraphError(f"no node named {name!r}", node=name) from None

    @property
    def node_map(self):
        cached = self.__dict__.get("_node_map")
        if cached is None:
            cached = {n.name: n for n in self.nodes}
            object.__setattr__(self, "_node_map", cached)
        return cached

    def consumers(self):
        users = {n.name: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                users[src].append(n.name)
        return users

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def is_bound(self):
        return self.params is not None

    def with_params(self, params, buffers=None):
        return self.replace(params=dict(params), buffers=dict(self.buffers if buffers is None else buffers))

    # -- serialisation ---------------------------------------------------
    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "dtype": self.dtype,
            "inputs": list(self.inputs),
            "outputs": dict(self.outputs),
            "nodes": [n.to_dict() for n in self.nodes],
            "params": [{"name": k, "shape": list(s.shape), "init": s.init} for k, s in self.param_specs.items()],
            "buffers": [{"name": k, "shape": list(s.shape), "init": s.init} for k, s in self.buffer_specs.items()],
            "blocks": _jsonable(self.blocks),
            "meta": _jsonable(self.meta),
        }

    def to_json(self, indent=1):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=False)

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA_VERSION:
            raise GraphError(f"unsupported graph schema {d.get('schema')!r}, expected {SCHEMA_VERSION!r}")
        return cls(
            nodes=tuple(Node.from_dict(n) for n in d["nodes"]),
            inputs=tuple(d["inputs"]),
            outputs=dict(d["outputs"]),
            param_specs={p["name"]: ParamSpec(tuple(p["shape"]), p.get("init", "he")) for p in d["params"]},
            buffer_specs={p["name"]: ParamSpec(tuple(p["shape"]), p.get("init", "zeros")) for p in d["buffers"]},
            blocks=d.get("blocks", {}),
            meta=d.get("meta", {}),
            dtype=d.get("dtype", "float32"),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# parameter binding

def _param_rng(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_param(spec, name, seed, dtype):
    if spec.init == "ones":
        return np.ones(spec.shape, dtype=dtype)
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=dtype)
    rng = _param_rng(seed, name)
    fan_in = int(np.prod(spec.shape[1:])) if len(spec.shape) > 1 else 1
    std = math.sqrt(2.0 / fan_in) if spec.init == "he" else 0.01
    return (rng.standard_normal(spec.shape) * std).astype(dtype)


def bind(g, mode="random", seed=0):
    """Attach parameter and buffer tensors.

    ``random`` draws every tensor from a stream keyed by ``(seed, name)``, so
    a parameter's initial value never depends on graph construction order.
    ``abstract`` binds zero-stride zero views that cost no memory; enough
    for cost analysis of the large models.
    """
    dtype = np.dtype(g.dtype)
    if mode == "abstract":
        zero = np.zeros((), dtype=dtype)
        params = {k: np.broadcast_to(zero, s.shape) for k, s in g.param_specs.items()}
        buffers = {k: np.broadcast_to(zero, s.shape) for k, s in g.buffer_specs.items()}
    elif mode == "random":
        params = {k: init_param(s, k, seed, dtype) for k, s in g.param_specs.items()}
        buffers = {k: init_param(s, k, seed, dtype) for k, s in g.buffer_specs.items()}
    else:
        raise ValueError(f"unknown bind mode {mode!r}")
    return g.replace(params=params, buffers=buffers, meta={**g.meta, "bind": mode, "seed": seed})


def _require_bound(g):
    if g.params is None:
        raise GraphError("graph has no bound parameters; call bind() first")
    for name, spec in g.param_specs.items():
        if name not in g.params:
            raise GraphError(f"parameter {name!r} is not bound", param=name)
        if tuple(g.params[name].shape) != tuple(spec.shape):
            raise ShapeError(f"parameter {name!r} bound with shape {g.params[name].shape}, declared {spec.shape}",
                             param=name)


# ---------------------------------------------------------------------------
# op registry

def _numel(shape):
    return int(np.prod(shape))


class Op:
    differentiable = True

    def shape(self, node, ins, g):
        return ins[0]

    def cost(self, node, ins, out, g):
        return 0

    def forward(self, node, xs, p, b, mode):
        raise NotImplementedError

    def backward(self, node, dy, xs, out, cache, p):
        raise NotImplementedError


class InputOp(Op):
    differentiable = False

    def shape(self, node, ins, g):
        raise AssertionError("inputs are shaped by the caller")


class IdentityOp(Op):
    def forward(self, node, xs, p, b, mode):
        return xs[0], None, None

    def backward(self, node, dy, xs, out, cache, p):
        return [dy], []


class ConvOp(Op):
    def shape(self, node, ins, g):
        a = node.attrs
        n, c, h, w = ins[0]
        if c != a["in_ch"]:
            raise ShapeError(f"{node.name}: expects {a['in_ch']} input channels, got shape {ins[0]}",
                             node=node.name, x_shape=list(ins[0]))
        oh = T.conv_out_size(h, a["k"], a["stride"], a["pad"])
        ow = T.conv_out_size(w, a["k"], a["stride"], a["pad"])
        if oh < 1 or ow < 1:
            raise ShapeError(f"{node.name}: kernel does not fit input {ins[0]}", node=node.name)
        return (n, a["out_ch"], oh, ow)

    def cost(self, node, ins, out, g):
        a = node.attrs
        flops = _numel(out) * a["in_ch"] * a["k"] * a["k"]
        return flops + (_numel(out) if a.get("bias") else 0)

    def forward(self, node, xs, p, b, mode):
        a = node.attrs
        y = T.conv2d(xs[0], p[0], a["stride"], a["pad"])
        if a.get("bias"):
            y = y + p[1][None, :, None, None]
        return y, None, None

    def backward(self, node, dy, xs, out, cache, p):
        a = node.attrs
        dx, dw = T.conv2d_backward(dy, xs[0], p[0], a["stride"], a["pad"])
        grads = [dw]
        if a.get("bias"):
            grads.append(dy.sum(axis=(0, 2, 3)))
        return [dx], grads


class DepthwiseOp(Op):
    def shape(self, node, ins, g):
        a = node.attrs
        n, c, h, w = ins[0]
        if c != a["channels"]:
            raise ShapeError(f"{node.name}: depthwise weight has {a['channels']} channels, input is {ins[0]}",
                             node=node.name)
        return (n, c, T.conv_out_size(h, a["k"], a["stride"], a["pad"]),
                T.conv_out_size(w, a["k"], a["stride"], a["pad"]))

    def cost(self, node, ins, out, g):
        return _numel(out) * node.attrs["k"] ** 2

    def forward(self, node, xs, p, b, mode):
        a = node.attrs
        return T.depthwise_conv2d(xs[0], p[0], a["stride"], a["pad"]), None, None

    def backward(self, node, dy, xs, out, cache, p):
        a = node.attrs
        dx, dw = T.depthwise_conv2d_backward(dy, xs[0], p[0], a["stride"], a["pad"])
        return [dx], [dw]


class BatchNormOp(Op):
    def cost(self, node, ins, out, g):
        return 2 * _numel(out)

    def forward(self, node, xs, p, b, mode):
        a = node.attrs
        y, m, v, cache = T.batch_norm(xs[0], p[0], p[1], b[0], b[1], mode, a.get("eps", T.BN_EPS),
                                      a.get("momentum", T.BN_MOMENTUM))
        return y, cache, (m, v) if mode == "train" else None

    def backward(self, node, dy, xs, out, cache, p):
        dx, dg, db = T.batch_norm_backward(dy, cache)
        return [dx], [dg, db]


class ActOp(Op):
    def cost(self, node, ins, out, g):
        return _numel(out)

    def forward(self, node, xs, p, b, mode):
        return T.activate(xs[0], node.attrs["kind"]), None, None

    def backward(self, node, dy, xs, out, cache, p):
        return [T.activate_backward(dy, xs[0], node.attrs["kind"])], []


class PoolOp(Op):
    def shape(self, node, ins, g):
        a = node.attrs
        n, c, h, w = ins[0]
        oh = T.conv_out_size(h, a["k"], a["stride"], a["pad"])
        ow = T.conv_out_size(w, a["k"], a["stride"], a["pad"])
        if oh < 1 or ow < 1:
            raise ShapeError(f"{node.name}: pool window does not fit input {ins[0]}", node=node.name)
        return (n, c, oh, ow)

    def cost(self, node, ins, out, g):
        return _numel(out)

    def forward(self, node, xs, p, b, mode):
        a = node.attrs
        y, idx = T.pool2d(xs[0], a["kind"], a["k"], a["stride"], a["pad"], return_index=True)
        return y, idx, None

    def backward(self, node, dy, xs, out, cache, p):
        a = node.attrs
        return [T.pool2d_backward(dy, xs[0].shape, a["kind"], a["k"], a["stride"], a["pad"], cache)], []


class GlobalPoolOp(Op):
    def shape(self, node, ins, g):
        n, c, _, _ = ins[0]
        return (n, c, 1, 1)

    def cost(self, node, ins, out, g):
        return _numel(out)

    def forward(self, node, xs, p, b, mode):
        return xs[0].mean(axis=(2, 3), keepdims=True), None, None

    def backward(self, node, dy, xs, out, cache, p):
        h, w = xs[0].shape[2:]
        return [np.broadcast_to(dy / (h * w), xs[0].shape).copy()], []


class ResizeOp(Op):
    """Bilinear resize of input 0 to the spatial size of input 1 (or ``attrs['size']``)."""

    def shape(self, node, ins, g):
        n, c, _, _ = ins[0]
        if len(ins) > 1:
            return (n, c, ins[1][2], ins[1][3])
        return (n, c, *node.attrs["size"])

    def cost(self, node, ins, out, g):
        return _numel(out)

    def forward(self, node, xs, p, b, mode):
        if len(xs) > 1:
            oh, ow = xs[1].shape[2:]
        else:
            oh, ow = node.attrs["size"]
        return T.bilinear_resize(xs[0], oh, ow), None, None

    def backward(self, node, dy, xs, out, cache, p):
        h, w = xs[0].shape[2:]
        grads = [T.bilinear_resize_backward(dy, h, w)]
        if len(xs) > 1:
            grads.append(None)
        return grads, []


def _check_same_shapes(node, ins):
    if any(s != ins[0] for s in ins[1:]):
        raise ShapeError(f"{node.name}: operand shapes differ: {[list(s) for s in ins]}", node=node.name,
                         shapes=[list(s) for s in ins])


class AddOp(Op):
    def shape(self, node, ins, g):
        _check_same_shapes(node, ins)
        return ins[0]

    def cost(self, node, ins, out, g):
        return (len(ins) - 1) * _numel(out)

    def forward(self, node, xs, p, b, mode):
        y = xs[0]
        for x in xs[1:]:
            y = y + x
        return y, None, None

    def backward(self, node, dy, xs, out, cache, p):
        return [dy] * len(xs), []


class MulOp(Op):
    """Elementwise ``x * gate``; the gate may be (n, c, 1, 1)."""

    def shape(self, node, ins, g):
        x, gate = ins
        if gate != x and gate != (x[0], x[1], 1, 1):
            raise ShapeError(f"{node.name}: gate shape {gate} does not broadcast to {x}", node=node.name)
        return x

    def cost(self, node, ins, out, g):
        return _numel(out)

    def forward(self, node, xs, p, b, mode):
        return xs[0] * xs[1], None, None

    def backward(self, node, dy, xs, out, cache, p):
        x, gate = xs
        dgate = dy * x
        if gate.shape != x.shape:
            dgate = dgate.sum(axis=(2, 3), keepdims=True)
        return [dy * gate, dgate], []


class FuseOp(Op):
    """Weighted sum of same-shape inputs.

    ``mode='fast'``: weights relu(w)/(sum relu(w) + eps);
    ``mode='softmax'``: weights softmax(w);
    ``mode='fixed'``: constant ``attrs['coeffs']``, no parameters.
    """

    def shape(self, node, ins, g):
        _check_same_shapes(node, ins)
        return ins[0]

    def cost(self, node, ins, out, g):
        return len(ins) * _numel(out)

    @staticmethod
    def coefficients(node, p):
        mode = node.attrs["mode"]
        if mode == "fixed":
            return np.asarray(node.attrs["coeffs"], dtype=np.float64), None
        w = np.asarray(p[0], dtype=np.float64)
        if mode == "softmax":
            return T.softmax_vec(w), None
        if mode == "fast":
            r = np.maximum(w, 0.0)
            denom = r.sum() + node.attrs.get("eps", FUSE_EPS)
            return r / denom, (r, denom)
        raise GraphError(f"{node.name}: unknown fuse mode {mode!r}", node=node.name)

    def forward(self, node, xs, p, b, mode):
        c, extra = self.coefficients(node, p)
        dtype = xs[0].dtype
        y = dtype.type(c[0]) * xs[0]
        for ci, x in zip(c[1:], xs[1:]):
            y = y + dtype.type(ci) * x
        return y, (c, extra), None

    def backward(self, node, dy, xs, out, cache, p):
        c, extra = cache
        dtype = dy.dtype
        dxs = [dtype.type(ci) * dy for ci in c]
        if node.attrs["mode"] == "fixed":
            return dxs, []
        dc = np.array([float(np.sum(dy * x, dtype=np.float64)) for x in xs])
        if node.attrs["mode"] == "softmax":
            dw = T.softmax_vec_backward(dc, c)
        else:
            r, denom = extra
            w = np.asarray(p[0], dtype=np.float64)
            dr = dc / denom - np.dot(dc, r) / denom ** 2
            dw = dr * (w > 0)
        return dxs, [dw.astype(p[0].dtype)]


class SumOp(Op):
    """Reduce everything to a (1, 1, 1, 1) scalar."""

    def shape(self, node, ins, g):
        return (1, 1, 1, 1)

    def cost(self, node, ins, out, g):
        return _numel(ins[0])

    def forward(self, node, xs, p, b, mode):
        return np.full((1, 1, 1, 1), xs[0].sum(), dtype=xs[0].dtype), None, None

    def backward(self, node, dy, xs, out, cache, p):
        return [np.full(xs[0].shape, dy.reshape(()), dtype=dy.dtype)], []


OPS = {
    "input": InputOp(),
    "identity": IdentityOp(),
    "conv2d": ConvOp(),
    "dwconv2d": DepthwiseOp(),
    "batch_norm": BatchNormOp(),
    "act": ActOp(),
    "pool": PoolOp(),
    "global_pool": GlobalPoolOp(),
    "resize": ResizeOp(),
    "add": AddOp(),
    "mul": MulOp(),
    "fuse": FuseOp(),
    "sum": SumOp(),
}

# second operand of these ops does not carry spatial context into the result
_NON_SPATIAL_OPERAND = {"resize": 1, "mul": 1}


# ---------------------------------------------------------------------------
# analysis

def _normalize_input_shapes(g, input_shape):
    if input_shape is None:
        input_shape = {}
    if not isinstance(input_shape, Mapping):
        if len(g.inputs) != 1:
            raise GraphError(f"graph has inputs {list(g.inputs)}; pass a mapping of shapes")
        input_shape = {g.inputs[0]: input_shape}
    shapes = {}
    for name in g.inputs:
        if name not in input_shape:
            raise GraphError(f"missing shape for input {name!r}", input=name)
        s = tuple(int(v) for v in input_shape[name])
        if len(s) == 2:
            s = (1, g.node(name).attrs.get("channels", 1), *s)
        if len(s) != 4 or min(s) < 1:
            raise ShapeError(f"input {name!r} shape must be 4 positive ints, got {s}", input=name)
        shapes[name] = s
    return shapes


def check_divisible(g, hw):
    max_level = g.meta.get("max_level")
    if max_level is None:
        return
    multiple = 2 ** int(max_level)
    h, w = hw
    if h % multiple or w % multiple:
        raise ShapeError(
            f"input {h}x{w} is not divisible by 2^{max_level} = {multiple}; "
            f"height and width must be multiples of {multiple}",
            required_multiple=multiple, input_hw=[h, w])


def infer_shapes(g, input_shape):
    """Map every node name to its (n, c, h, w) output shape.

    ``input_shape`` is a 4-tuple (single-input graphs), an ``(h, w)`` pair,
    or a mapping from input name to either.
    """
    shapes = _normalize_input_shapes(g, input_shape)
    for name in g.inputs:
        node = g.node(name)
        ch = node.attrs.get("channels")
        if ch is not None and shapes[name][1] != ch:
            raise ShapeError(f"input {name!r} expects {ch} channels, got {shapes[name]}", input=name)
        check_divisible(g, shapes[name][2:])
    for node in g.nodes:
        if node.op == "input":
            continue
        ins = [shapes[s] for s in node.inputs]
        shapes[node.name] = tuple(int(v) for v in OPS[node.op].shape(node, ins, g))
    return shapes


@dataclass
class CostReport:
    total_params: int
    total_flops: int
    peak_activation_elems: int
    per_node: list  # (node name, params, flops)

    def to_dict(self):
        return {
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "peak_activation_elems": self.peak_activation_elems,
            "per_node": [{"node": n, "params": p, "flops": f} for n, p, f in self.per_node],
        }

    def flops_where(self, predicate):
        return sum(f for n, _, f in self.per_node if predicate(n))

    def params_where(self, predicate):
        return sum(p for n, p, _ in self.per_node if predicate(n))


def _node_params(g, node):
    return sum(_numel(g.param_specs[p].shape) for p in node.params)


def count_params(g):
    _require_bound(g)
    return sum(_numel(s.shape) for s in g.param_specs.values())


def count_flops(g, input_shape):
    shapes = infer_shapes(g, input_shape)
    return sum(OPS[n.op].cost(n, [shapes[s] for s in n.inputs], shapes[n.name], g)
               for n in g.nodes if n.op != "input")


def peak_activation(g, shapes):
    """Largest number of simultaneously live activation elements.

    A tensor is live from the step that produces it until its last consumer
    (graph outputs stay live to the end). Batch dimension is set to one.
    """
    last_use = {}
    for i, node in enumerate(g.nodes):
        for src in node.inputs:
            last_use[src] = i
    for src in g.outputs.values():
        last_use[src] = len(g.nodes)
    live = 0
    peak = 0
    dying = {}
    for name, i in last_use.items():
        dying.setdefault(i, []).append(name)
    for i, node in enumerate(g.nodes):
        live += _numel(shapes[node.name][1:])
        peak = max(peak, live)
        for name in dying.get(i, ()):
            live -= _numel(shapes[name][1:])
        if node.name not in last_use:
            live -= _numel(shapes[node.name][1:])
    return peak


def cost_report(g, input_shape):
    _require_bound(g)
    shapes = infer_shapes(g, input_shape)
    per_node = []
    for n in g.nodes:
        flops = 0 if n.op == "input" else OPS[n.op].cost(n, [shapes[s] for s in n.inputs], shapes[n.name], g)
        per_node.append((n.name, _node_params(g, n), int(flops)))
    return CostReport(
        total_params=sum(p for _, p, _ in per_node),
        total_flops=sum(f for _, _, f in per_node),
        peak_activation_elems=peak_activation(g, shapes),
        per_node=per_node,
    )


@dataclass(frozen=True)
class ReceptiveField:
    rf: int
    jump: int


def receptive_field(g, output_node, input_shape=None):
    """Receptive field size and jump (both in input pixels) of ``output_node``.

    Composed along the maximal path with ``rf' = rf + (k - 1) * jump`` and
    ``jump' = jump * stride``. A bilinear resize widens the field by one
    source step and keeps the jump. Channel gates (the second operand of
    ``mul``) are global statistics and are not followed. ``global_pool``
    needs ``input_shape`` to bound its window.
    """
    target = g.node(output_node)
    needed = _ancestors(g, [target.name])
    shapes = infer_shapes(g, input_shape) if input_shape is not None else None
    fields = {}
    for node in g.nodes:
        if node.name not in needed:
            continue
        if node.op == "input":
            fields[node.name] = ReceptiveField(1, 1)
            continue
        srcs = node.inputs
        if node.op in _NON_SPATIAL_OPERAND:
            srcs = srcs[:_NON_SPATIAL_OPERAND[node.op]]
        ins = [fields[s] for s in srcs if s in fields]
        if not ins:
            continue
        rf = max(f.rf for f in ins)
        jump = max(f.jump for f in ins)
        if node.op in ("conv2d", "dwconv2d", "pool"):
            k, s = node.attrs["k"], node.attrs["stride"]
            rf, jump = rf + (k - 1) * jump, jump * s
        elif node.op == "resize":
            rf = rf + jump
        elif node.op == "global_pool":
            if shapes is None:
                raise GraphError("receptive field through global_pool needs input_shape")
            _, _, h, w = shapes[node.inputs[0]]
            rf = rf + (max(h, w) - 1) * jump
        fields[node.name] = ReceptiveField(rf, jump)
    if target.name not in fields:
        raise GraphError(f"node {output_node!r} is not connected to any graph input", node=output_node)
    return fields[target.name]


def _ancestors(g, names):
    keep = set()
    stack = list(names)
    while stack:
        n = stack.pop()
        if n in keep:
            continue
        keep.add(n)
        stack.extend(g.node(n).inputs)
    return keep


def prune(g, outputs):
    """Sub-graph computing only ``outputs`` (a list of output names)."""
    sel = {o: g.outputs[o] for o in outputs}
    keep = _ancestors(g, sel.values())
    nodes = tuple(n for n in g.nodes if n.name in keep)
    pnames = {p for n in nodes for p in n.params}
    bnames = {b for n in nodes for b in n.buffers}
    return g.replace(
        nodes=nodes,
        inputs=tuple(i for i in g.inputs if i in keep),
        outputs=sel,
        param_specs={k: v for k, v in g.param_specs.items() if k in pnames},
        buffer_specs={k: v for k, v in g.buffer_specs.items() if k in bnames},
        params=None if g.params is None else {k: v for k, v in g.params.items() if k in pnames},
        buffers=None if g.buffers is None else {k: v for k, v in g.buffers.items() if k in bnames},
        blocks={k: v for k, v in g.blocks.items() if any(n.block == k for n in nodes)},
    )


def compose(first, second, connect, prefix="b/"):
    """Feed ``first``'s outputs into ``second``'s inputs.

    ``connect`` maps each input of ``second`` to an output name of ``first``.
    Names from ``second`` are prefixed. The result exposes ``second``'s
    outputs.
    """
    rename = {}
    nodes = list(first.nodes)
    for node in second.nodes:
        if node.op == "input":
            if node.name not in connect:
                raise GraphError(f"input {node.name!r} of the second graph is not connected")
            rename[node.name] = first.outputs[connect[node.name]]
            continue
        rename[node.name] = prefix + node.name
        nodes.append(dataclasses.replace(
            node, name=prefix + node.name, inputs=tuple(rename[s] for s in node.inputs),
            params=tuple(prefix + p for p in node.params), buffers=tuple(prefix + b for b in node.buffers),
            block=None if node.block is None else prefix + node.block))

    def merged(a, b):
        if a is None or b is None:
            return None
        return {**a, **{prefix + k: v for k, v in b.items()}}

    return Graph(
        nodes=tuple(nodes),
        inputs=first.inputs,
        outputs={k: rename[v] for k, v in second.outputs.items()},
        param_specs={**first.param_specs, **{prefix + k: v for k, v in second.param_specs.items()}},
        buffer_specs={**first.buffer_specs, **{prefix + k: v for k, v in second.buffer_specs.items()}},
        params=merged(first.params, second.params),
        buffers=merged(first.buffers, second.buffers),
        blocks={**first.blocks, **{prefix + k: v for k, v in second.blocks.items()}},
        meta=dict(first.meta),
        dtype=first.dtype,
    )


def topology_signature(g):
    """Hashable structural fingerprint: ops, wiring, attributes, parameter shapes."""
    return (
        tuple((n.name, n.op, n.inputs, tuple(sorted((k, _freeze(v)) for k, v in n.attrs.items())),
               tuple((p, tuple(g.param_specs[p].shape)) for p in n.params)) for n in g.nodes),
        tuple(g.inputs),
        tuple(sorted(g.outputs.items())),
    )


def _freeze(v):
    if isinstance(v, (list, tuple)):
        return tuple(_freeze(x) for x in v)
    if isinstance(v, dict):
        return tuple(sorted((k, _freeze(x)) for k, x in v.items()))
    return v


# ---------------------------------------------------------------------------
# execution

@dataclass
class Trace:
    values: dict
    caches: dict
    buffers: dict
    mode: str

    def outputs(self, g):
        return {k: self.values[v] for k, v in g.outputs.items()}


def run(g, inputs, mode="infer"):
    """Evaluate every node in order and keep what backward needs."""
    _require_bound(g)
    if not isinstance(inputs, Mapping):
        if len(g.inputs) != 1:
            raise GraphError(f"graph has inputs {list(g.inputs)}; pass a mapping")
        inputs = {g.inputs[0]: inputs}
    dtype = np.dtype(g.dtype)
    values = {}
    for name in g.inputs:
        if name not in inputs:
            raise GraphError(f"missing input {name!r}", input=name)
        x = inputs[name]
        T.check_tensor(x, name)
        if x.dtype != dtype:
            raise DTypeError(f"input {name!r} is {x.dtype}, graph is {dtype}", input=name)
        ch = g.node(name).attrs.get("channels")
        if ch is not None and x.shape[1] != ch:
            raise ShapeError(f"input {name!r} expects {ch} channels, got shape {x.shape}", input=name)
        check_divisible(g, x.shape[2:])
        values[name] = x
    caches = {}
    new_buffers = dict(g.buffers or {})
    for node in g.nodes:
        if node.op == "input":
            continue
        op = OPS[node.op]
        p = [g.params[k] for k in node.params]
        b = [g.buffers[k] for k in node.buffers]
        y, cache, upd = op.forward(node, [values[s] for s in node.inputs], p, b, mode)
        values[node.name] = y
        caches[node.name] = cache
        if upd is not None:
            for k, v in zip(node.buffers, upd):
                new_buffers[k] = v
    return Trace(values, caches, new_buffers, mode)


def forward(g, inputs, mode="infer"):
    """Named outputs of ``g`` for the given named inputs."""
    return run(g, inputs, mode).outputs(g)


def backward(g, trace, loss_node=None, seeds=None):
    """Reverse-mode gradients.

    Either ``loss_node`` names a node (or output) holding a scalar, or
    ``seeds`` maps node/output names to upstream gradients. Returns a dict
    with a gradient for every parameter (zeros when unused) and every input.
    """
    if seeds is None:
        if loss_node is None:
            raise GraphError("backward needs loss_node or seeds")
        name = g.outputs.get(loss_node, loss_node)
        val = trace.values[g.node(name).name]
        if val.size != 1:
            raise ShapeError(f"loss node {loss_node!r} is not scalar: shape {val.shape}", node=loss_node)
        seeds = {name: np.ones_like(val)}
    grads = {}
    for k, v in seeds.items():
        name = g.outputs.get(k, k)
        g.node(name)
        if trace.values[name].shape != v.shape:
            raise ShapeError(f"seed for {k!r} has shape {v.shape}, value is {trace.values[name].shape}")
        grads[name] = grads.get(name, 0) + v
    pgrads = {k: np.zeros(s.shape, dtype=np.dtype(g.dtype)) for k, s in g.param_specs.items()}
    for node in reversed(g.nodes):
        dy = grads.pop(node.name, None) if node.op != "input" else None
        if dy is None or node.op == "input":
            continue
        op = OPS[node.op]
        xs = [trace.values[s] for s in node.inputs]
        p = [g.params[k] for k in node.params]
        dxs, dps = op.backward(node, dy, xs, trace.values[node.name], trace.caches[node.name], p)
        for src, dx in zip(node.inputs, dxs):
            if dx is None:
                continue
            grads[src] = grads[src] + dx if src in grads else dx
        for k, dp in zip(node.params, dps):
            pgrads[k] = pgrads[k] + dp
    for name in g.inputs:
        pgrads[name] = grads.get(name, np.zeros_like(trace.values[name]))
    return pgrads
