"""Incremental graph construction used by the model builders and rewrites."""

from __future__ import annotations

import contextlib

from .graph import Graph, Node, ParamSpec


class GraphBuilder:
    def __init__(self, dtype="float32"):
        self.dtype = dtype
        self.nodes = []
        self.inputs = []
        self.outputs = {}
        self.param_specs = {}
        self.buffer_specs = {}
        self.blocks = {}
        self.channels = {}
        self._block = None

    def _add(self, name, op, inputs=(), attrs=None, params=(), buffers=(), channels=None):
        if name in self.channels:
            raise ValueError(f"duplicate node name {name!r}")
        self.nodes.append(Node(name, op, tuple(inputs), dict(attrs or {}), tuple(params), tuple(buffers),
                               self._block))
        self.channels[name] = channels if channels is not None else self.channels[inputs[0]]
        return name

    def _param(self, name, shape, init="he"):
        self.param_specs[name] = ParamSpec(tuple(int(s) for s in shape), init)
        return name

    @contextlib.contextmanager
    def block(self, name, meta):
        prev = self._block
        self._block = name
        self.blocks[name] = dict(meta)
        try:
            yield
        finally:
            self._block = prev

    # -- primitives ------------------------------------------------------
    def input(self, name, channels):
        self.inputs.append(name)
        return self._add(name, "input", attrs={"channels": channels}, channels=channels)

    def external(self, name, channels):
        """Declare a node that already exists in a graph this fragment is spliced into."""
        self.channels[name] = channels
        return name

    def conv(self, name, x, out_ch, k=1, stride=1, bias=False, init="he"):
        in_ch = self.channels[x]
        params = [self._param(f"{name}/weight", (out_ch, in_ch, k, k), init)]
        if bias:
            params.append(self._param(f"{name}/bias", (out_ch,), "zeros"))
        attrs = {"in_ch": in_ch, "out_ch": out_ch, "k": k, "stride": stride, "pad": k // 2, "bias": bias}
        return self._add(name, "conv2d", [x], attrs, params, channels=out_ch)

    def dwconv(self, name, x, k=3, stride=1):
        c = self.channels[x]
        w = self._param(f"{name}/weight", (c, 1, k, k))
        return self._add(name, "dwconv2d", [x], {"channels": c, "k": k, "stride": stride, "pad": k // 2}, [w])

    def bn(self, name, x):
        c = self.channels[x]
        params = [self._param(f"{name}/gamma", (c,), "ones"), self._param(f"{name}/beta", (c,), "zeros")]
        self.buffer_specs[f"{name}/mean"] = ParamSpec((c,), "zeros")
        self.buffer_specs[f"{name}/var"] = ParamSpec((c,), "ones")
        return self._add(name, "batch_norm", [x], {}, params, (f"{name}/mean", f"{name}/var"))

    def act(self, name, x, kind):
        return self._add(name, "act", [x], {"kind": kind})

    def pool(self, name, x, kind="avg", k=3, stride=2, pad=1):
        return self._add(name, "pool", [x], {"kind": kind, "k": k, "stride": stride, "pad": pad})

    def global_pool(self, name, x):
        return self._add(name, "global_pool", [x])

    def resize(self, name, x, like):
        return self._add(name, "resize", [x, like])

    def add(self, name, *xs):
        return self._add(name, "add", xs)

    def mul(self, name, x, gate):
        return self._add(name, "mul", [x, gate])

    def identity(self, name, x):
        return self._add(name, "identity", [x])

    def fuse(self, name, xs, mode="fast", coeffs=None):
        attrs = {"mode": mode}
        params = ()
        if mode == "fixed":
            attrs["coeffs"] = tuple(float(c) for c in coeffs)
        else:
            params = (self._param(f"{name}/weight", (len(xs),), "ones"),)
        return self._add(name, "fuse", xs, attrs, params)

    def sum(self, name, x):
        return self._add(name, "sum", [x], channels=1)

    # -- composites ------------------------------------------------------
    def conv_bn(self, name, x, out_ch, k=1, stride=1, act=None):
        y = self.bn(f"{name}/bn", self.conv(f"{name}/conv", x, out_ch, k, stride))
        return self.act(f"{name}/act", y, act) if act else y

    def separable_bn(self, name, x, out_ch, k=3, act=None):
        y = self.dwconv(f"{name}/dw", x, k)
        y = self.bn(f"{name}/bn", self.conv(f"{name}/pw", y, out_ch, 1))
        return self.act(f"{name}/act", y, act) if act else y

    def output(self, name, node):
        self.outputs[name] = node

    def build(self, meta=None):
        return Graph(
            nodes=tuple(self.nodes),
            inputs=tuple(self.inputs),
            outputs=dict(self.outputs),
            param_specs=dict(self.param_specs),
            buffer_specs=dict(self.buffer_specs),
            blocks=dict(self.blocks),
            meta=dict(meta or {}),
            dtype=self.dtype,
        )
