"""Central finite-difference checks for kernels and random composite graphs (float64)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph as G
from . import tensor as T
from .builder import GraphBuilder

FD_EPS = 1e-6
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool

    def to_dict(self):
        return {"name": self.name, "max_rel_err": self.max_rel_err, "passed": self.passed}


def rel_error(analytic, numeric, floor=1e-7):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(n).max(initial=0), floor)
    return float(np.abs(a - n).max(initial=0) / scale)


def numeric_grad(loss, arr, rng=None, max_entries=None, eps=FD_EPS):
    """Central differences of scalar ``loss()`` w.r.t. ``arr`` (perturbed in place).

    With ``max_entries`` only that many random entries are probed; the rest
    are NaN. Returns ``(grad, probed_flat_indices)``.
    """
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    grad = np.full(flat.size, np.nan)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = loss()
        flat[i] = old - eps
        down = loss()
        flat[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(arr.shape), idx


def check_function(name, fn, grad_fn, args, seed=0, tol=TOLERANCE):
    """Compare ``grad_fn(R, *args)`` (one gradient per arg) against finite differences of ``sum(R * fn(*args))``."""
    rng = np.random.default_rng(seed)
    args = [np.array(a, dtype=np.float64) for a in args]
    r = rng.standard_normal(np.shape(fn(*args)))
    grads = grad_fn(r, *args)
    ana, nums = [], []
    for a, ga in zip(args, grads):
        if ga is None:
            continue
        num, _ = numeric_grad(lambda: float((r * fn(*args)).sum()), a)
        ana.append(np.asarray(ga).reshape(-1))
        nums.append(num.reshape(-1))
    err = rel_error(np.concatenate(ana), np.concatenate(nums))
    return CheckResult(name, err, err < tol)


def kernel_checks(seed=0, backend=None):
    """Gradient checks for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 7, 6))
    results = []

    for k, s in ((1, 1), (3, 1), (3, 2), (5, 2)):
        w = rng.standard_normal((4, 3, k, k)) * 0.3
        results.append(check_function(
            f"conv2d k{k} s{s}",
            lambda x, w: T.conv2d(x, w, s, k // 2, backend=backend),
            lambda r, x, w: T.conv2d_backward(r, x, w, s, k // 2, backend=backend),
            [x, w], seed))
    for k, s in ((3, 1), (5, 2)):
        w = rng.standard_normal((3, 1, k, k)) * 0.3
        results.append(check_function(
            f"depthwise_conv2d k{k} s{s}",
            lambda x, w: T.depthwise_conv2d(x, w, s, k // 2, backend=backend),
            lambda r, x, w: T.depthwise_conv2d_backward(r, x, w, s, k // 2, backend=backend),
            [x, w], seed))
    for kind in ("avg", "max"):
        def bwd(r, x, kind=kind):
            _, idx = T.pool2d(x, kind, 3, 2, 1, backend=backend, return_index=True)
            return [T.pool2d_backward(r, x.shape, kind, 3, 2, 1, idx, backend=backend)]
        results.append(check_function(f"pool2d {kind}", lambda x, kind=kind: T.pool2d(x, kind, 3, 2, 1, backend=backend),
                                      bwd, [x], seed))
    for oh, ow in ((14, 12), (3, 4), (7, 6)):
        results.append(check_function(
            f"bilinear_resize {oh}x{ow}",
            lambda x: T.bilinear_resize(x, oh, ow, backend=backend),
            lambda r, x: [T.bilinear_resize_backward(r, 7, 6, backend=backend)],
            [x], seed))
    c = x.shape[1]
    gamma, beta = rng.uniform(0.5, 1.5, c), rng.standard_normal(c)
    mean, var = np.zeros(c), np.ones(c)

    def bn_fwd(x, gamma, beta):
        return T.batch_norm(x, gamma, beta, mean, var, "train")[0]

    def bn_bwd(r, x, gamma, beta):
        cache = T.batch_norm(x, gamma, beta, mean, var, "train")[3]
        return T.batch_norm_backward(r, cache)
    results.append(check_function("batch_norm train", bn_fwd, bn_bwd, [x, gamma, beta], seed))
    results.append(check_function(
        "batch_norm infer", lambda x, g_, b_: T.batch_norm(x, g_, b_, mean + 0.1, var * 2, "infer")[0],
        lambda r, x, g_, b_: T.batch_norm_backward(r, T.batch_norm(x, g_, b_, mean + 0.1, var * 2, "infer")[3]),
        [x, gamma, beta], seed))
    for kind in ("relu", "silu", "sigmoid"):
        results.append(check_function(f"activation {kind}", lambda x, kind=kind: T.activate(x, kind),
                                      lambda r, x, kind=kind: [T.activate_backward(r, x, kind)], [x], seed))
    wv = rng.standard_normal(5)
    results.append(check_function("softmax", T.softmax_vec,
                                  lambda r, w: [T.softmax_vec_backward(r, T.softmax_vec(w))], [wv], seed))
    for op in ("add", "mul", "fuse fast", "fuse softmax", "global_pool", "resize", "sum"):
        results.append(check_graph(f"graph op {op}", _single_op_graph(op), seed))
    return results


def _single_op_graph(op):
    b = GraphBuilder("float64")
    x = b.input("x", 3)
    y = b.input("y", 3)
    if op == "add":
        out = b.add("out", x, y)
    elif op == "mul":
        out = b.mul("out", x, b.global_pool("g", y))
    elif op.startswith("fuse"):
        out = b.fuse("out", [x, y], mode=op.split()[1])
    elif op == "global_pool":
        out = b.global_pool("out", b.add("xy", x, y))
    elif op == "resize":
        out = b.add("out", b.resize("up", b.pool("down", x, "avg", 3, 2, 1), y), y)
    else:
        out = b.sum("out", b.mul("xy", x, y))
    b.output("out", out)
    return G.bind(b.build(), "random", 0)


def _perturb_params(g, rng):
    # move ones/zeros inits off their symmetric starting points
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in g.params.items()}
    return g.with_params(params)


def check_graph(name, g, seed=0, input_shapes=None, max_entries=24, tol=TOLERANCE, mode="train"):
    """Finite-difference check of every parameter and input gradient of ``g`` (float64)."""
    rng = np.random.default_rng(seed)
    g = _perturb_params(g, rng)
    if input_shapes is None:
        input_shapes = {i: (2, g.node(i).attrs.get("channels", 1), 6, 6) for i in g.inputs}
    inputs = {k: rng.standard_normal(s) for k, s in input_shapes.items()}
    tr = G.run(g, inputs, mode)
    seeds = {k: rng.standard_normal(tr.values[v].shape) for k, v in g.outputs.items()}
    grads = G.backward(g, tr, seeds=seeds)

    def loss():
        vals = G.run(g, inputs, mode).values
        return float(sum((seeds[k] * vals[v]).sum() for k, v in g.outputs.items()))

    # errors are measured against the largest gradient of the whole graph, so
    # structurally-zero gradients (a bias feeding BN) do not amplify FD noise
    ana, num_all = [], []
    targets = [(k, g.params[k]) for k in g.params] + [(k, inputs[k]) for k in inputs]
    for key, arr in targets:
        num, idx = numeric_grad(loss, arr, rng, max_entries)
        ana.append(grads[key].reshape(-1)[idx])
        num_all.append(num.reshape(-1)[idx])
    err = rel_error(np.concatenate(ana), np.concatenate(num_all))
    return CheckResult(name, err, err < tol)


def random_graph(rng, max_nodes=20):
    """A random float64 graph of at most ``max_nodes`` nodes mixing every differentiable op.

    Returns ``(graph, input_shape)``.
    """
    b = GraphBuilder("float64")
    ch0 = int(rng.integers(1, 4))
    size = int(rng.choice([4, 8]))
    x = b.input("x", ch0)
    hw = {x: size}
    nodes = [x]
    count = 1
    while count < max_nodes:
        # favour extending the newest node so graphs grow deep rather than wide
        src = nodes[-1] if rng.uniform() < 0.6 else nodes[int(rng.integers(len(nodes)))]
        c = b.channels[src]
        name = f"n{count}"
        choice = rng.choice(["conv", "dw", "bn", "act", "pool", "resize", "add", "mul", "fuse"])
        if choice == "conv":
            k = int(rng.choice([1, 3]))
            s = int(rng.choice([1, 2])) if hw[src] > 1 else 1
            y = b.conv(name, src, int(rng.integers(1, 4)), k, s, bias=bool(rng.integers(2)))
            hw[y] = -(-hw[src] // s)
        elif choice == "dw":
            y = b.dwconv(name, src, 3, 1)
            hw[y] = hw[src]
        elif choice == "bn":
            y = b.bn(name, src)
            hw[y] = hw[src]
        elif choice == "act":
            y = b.act(name, src, str(rng.choice(["relu", "silu", "sigmoid"])))
            hw[y] = hw[src]
        elif choice == "pool":
            if hw[src] < 2:
                continue
            y = b.pool(name, src, str(rng.choice(["avg", "max"])), 3, 2, 1)
            hw[y] = -(-hw[src] // 2)
        elif choice == "resize":
            like = [n for n in nodes if hw[n] != hw[src]]
            if not like:
                continue
            y = b.resize(name, src, like[int(rng.integers(len(like)))])
            hw[y] = hw[b.nodes[-1].inputs[1]]
        else:
            peers = [n for n in nodes if n != src and hw[n] == hw[src] and b.channels[n] == c]
            if choice == "mul":
                if count + 3 > max_nodes:
                    continue
                gate = b.act(f"{name}/gate", b.global_pool(f"{name}/gp", src), "sigmoid")
                hw[gate] = 1
                count += 2
                y = b.mul(name, src, gate)
                hw[y] = hw[src]
            elif not peers:
                continue
            elif choice == "add":
                y = b.add(name, src, peers[int(rng.integers(len(peers)))])
                hw[y] = hw[src]
            else:
                y = b.fuse(name, [src, peers[int(rng.integers(len(peers)))]], str(rng.choice(["fast", "softmax"])))
                hw[y] = hw[src]
        nodes.append(y)
        count += 1
    b.output("out", nodes[-1])
    g = G.prune(b.build(), ["out"])
    return G.bind(g, "random", int(rng.integers(1 << 31))), (2, ch0, size, size)


def random_graph_checks(seed=0, trials=25, max_nodes=20):
    rng = np.random.default_rng(seed)
    out = []
    for t in range(trials):
        g, shape = random_graph(rng, max_nodes)
        out.append(check_graph(f"random graph {t} ({len(g.nodes)} nodes)", g, seed + t, {"x": shape}))
    return out


def run_all(seed=0, backend=None, trials=25):
    return kernel_checks(seed, backend) + random_graph_checks(seed, trials)
