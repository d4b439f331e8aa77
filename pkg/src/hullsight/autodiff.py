"""Static computation graph with reverse-mode differentiation.

A :class:`Graph` is built once for fixed input shapes, then evaluated with
:meth:`Graph.forward` and differentiated with :meth:`Graph.backward`::

    g = Graph()
    x = g.input("x", (1, 1, 1, 3))
    w = g.param("w", np.ones((1, 1, 1, 3)))
    g.output("loss", g.sum(g.square(g.mul(x, w))))
    g.forward({"x": np.array([1.0, 2.0, 3.0])})
    grads = g.backward()

Values are numpy arrays in (N, C, H, W) layout; lower-rank data is embedded
with leading singleton extents by :func:`as_tensor`. Parameter values live in
``graph.params`` (a plain dict shared between graphs built over the same
model), so an optimizer simply replaces entries of that dict.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .ops import ConvSpec, ShapeError

Shape = Tuple[int, int, int, int]
SCALAR: Shape = (1, 1, 1, 1)


class GraphShapeError(ShapeError):
    """Shape mismatch at a named node."""

    def __init__(self, node: str, expected, got):
        self.node = node
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(f"node '{node}': expected shape {self.expected}, got {self.got}")


class GraphStateError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter '{name}'")


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Return a read-only 4-D array, padding lower-rank input with leading 1s."""
    a = np.array(data, dtype=dtype)
    if a.ndim > 4:
        raise ShapeError(f"tensor rank {a.ndim} exceeds 4")
    a = a.reshape((1,) * (4 - a.ndim) + a.shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Ref:
    index: int
    shape: Shape


@dataclass
class _Node:
    op: str
    name: str
    inputs: Tuple[int, ...]
    shape: Shape
    attrs: dict = field(default_factory=dict)
    needs_grad: bool = False


# ---------------------------------------------------------------------------
# per-op forward / backward rules.  forward(vals, attrs) -> (out, cache);
# backward(grad, vals, out, cache, attrs) -> tuple of input grads.


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return g.sum(axis=tuple(i for i, s in enumerate(shape) if s == 1), keepdims=True)


def _f_conv(vals, a):
    return ops.conv2d(vals[0], vals[1], vals[2] if len(vals) > 2 else None, a["spec"]), None


def _b_conv(g, vals, out, cache, a):
    gx, gw, gb = ops.conv2d_backward(g, vals[0], vals[1], a["spec"], len(vals) > 2)
    return (gx, gw, gb)[:len(vals)]


def _f_dw(vals, a):
    return ops.depthwise_conv2d(vals[0], vals[1], vals[2] if len(vals) > 2 else None, a["spec"]), None


def _b_dw(g, vals, out, cache, a):
    gx, gw, gb = ops.depthwise_conv2d_backward(g, vals[0], vals[1], a["spec"], len(vals) > 2)
    return (gx, gw, gb)[:len(vals)]


def _f_deform(vals, a):
    return ops.deform_conv2d(vals[0], vals[1], vals[2], vals[3] if len(vals) > 3 else None,
                             a["spec"], return_cache=True)


def _b_deform(g, vals, out, cache, a):
    gx, gw, goff, gb = ops.deform_conv2d_backward(g, vals[0], vals[1], vals[2], a["spec"],
                                                  len(vals) > 3, cache)
    return (gx, gw, goff, gb)[:len(vals)]


def _f_clip(vals, a):
    x = vals[0]
    return np.clip(x, a["lo"], a["hi"]), None


def _b_clip(g, vals, out, cache, a):
    x = vals[0]
    return (g * ((x >= a["lo"]) & (x <= a["hi"])),)


def _reduce_axes(a):
    return (1, 2, 3) if a["per_sample"] else (0, 1, 2, 3)


def _f_sum(vals, a):
    return vals[0].sum(axis=_reduce_axes(a), keepdims=True), None


def _b_sum(g, vals, out, cache, a):
    return (np.broadcast_to(g, vals[0].shape).copy(),)


def _f_mean(vals, a):
    return vals[0].mean(axis=_reduce_axes(a), keepdims=True), None


def _b_mean(g, vals, out, cache, a):
    count = vals[0].size // out.size
    return (np.broadcast_to(g / count, vals[0].shape).copy(),)


def _b_concat(g, vals, out, cache, a):
    bounds = np.cumsum([v.shape[1] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=1))


_RULES = {
    "conv2d": (_f_conv, _b_conv),
    "depthwise_conv2d": (_f_dw, _b_dw),
    "deform_conv2d": (_f_deform, _b_deform),
    "pixel_shuffle": (lambda v, a: (ops.pixel_shuffle(v[0], a["r"]), None),
                      lambda g, v, o, c, a: (ops.pixel_unshuffle(g, a["r"]),)),
    "pixel_unshuffle": (lambda v, a: (ops.pixel_unshuffle(v[0], a["r"]), None),
                        lambda g, v, o, c, a: (ops.pixel_shuffle(g, a["r"]),)),
    "relu": (lambda v, a: (ops.relu(v[0]), None),
             lambda g, v, o, c, a: (g * (v[0] > 0),)),
    "concat": (lambda v, a: (ops.concat(v), None), _b_concat),
    "identity": (lambda v, a: (v[0], None), lambda g, v, o, c, a: (g,)),
    "add": (lambda v, a: (v[0] + v[1], None),
            lambda g, v, o, c, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape))),
    "sub": (lambda v, a: (v[0] - v[1], None),
            lambda g, v, o, c, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape))),
    "mul": (lambda v, a: (v[0] * v[1], None),
            lambda g, v, o, c, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape))),
    "div": (lambda v, a: (v[0] / v[1], None),
            lambda g, v, o, c, a: (_unbroadcast(g / v[1], v[0].shape),
                                   _unbroadcast(-g * o / v[1], v[1].shape))),
    "scale": (lambda v, a: (v[0] * a["k"], None), lambda g, v, o, c, a: (g * a["k"],)),
    "shift": (lambda v, a: (v[0] + a["k"], None), lambda g, v, o, c, a: (g,)),
    "square": (lambda v, a: (v[0] * v[0], None), lambda g, v, o, c, a: (2 * g * v[0],)),
    "abs": (lambda v, a: (np.abs(v[0]), None), lambda g, v, o, c, a: (g * np.sign(v[0]),)),
    "log": (lambda v, a: (np.log(v[0]), None), lambda g, v, o, c, a: (g / v[0],)),
    "clip": (_f_clip, _b_clip),
    "sum": (_f_sum, _b_sum),
    "mean": (_f_mean, _b_mean),
}


class Graph:
    """Ordered list of primitive nodes over fixed shapes.

    Nodes are appended in construction order, which is always a valid
    topological order. ``params`` maps parameter names to their current
    values; pass an existing dict to share parameters between graphs.
    """

    def __init__(self, dtype=np.float64, params: Optional[Dict[str, np.ndarray]] = None):
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, np.ndarray] = {} if params is None else params
        self.nodes: list[_Node] = []
        self.outputs: Dict[str, int] = {}
        self._inputs: Dict[str, int] = {}
        self._param_nodes: Dict[str, int] = {}
        self._values: Optional[list] = None
        self._caches: Optional[list] = None

    # -- leaves ------------------------------------------------------------

    def _append(self, op, name, inputs, shape, attrs=None, needs_grad=None) -> Ref:
        shape = tuple(int(s) for s in shape)
        if len(shape) != 4 or min(shape) < 0:
            raise GraphShapeError(name, ("N", "C", "H", "W"), shape)
        if needs_grad is None:
            needs_grad = any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(_Node(op, name, tuple(inputs), shape, attrs or {}, needs_grad))
        return Ref(len(self.nodes) - 1, shape)

    def input(self, name: str, shape: Sequence[int]) -> Ref:
        if name in self._inputs:
            raise ValueError(f"duplicate input '{name}'")
        ref = self._append("input", name, (), shape, needs_grad=False)
        self._inputs[name] = ref.index
        return ref

    def param(self, name: str, value=None, trainable: bool = True) -> Ref:
        """Declare a parameter leaf; ``value`` seeds ``params[name]`` if given."""
        if name in self._param_nodes:
            raise ValueError(f"duplicate parameter '{name}'")
        if value is not None:
            self.params[name] = np.asarray(value, dtype=self.dtype)
        if name not in self.params:
            raise KeyError(f"parameter '{name}' has no value")
        shape = self.params[name].shape
        if len(shape) != 4:
            shape = (1,) * (4 - len(shape)) + tuple(shape)
            self.params[name] = self.params[name].reshape(shape)
        ref = self._append("param", name, (), shape, {"trainable": trainable}, needs_grad=trainable)
        self._param_nodes[name] = ref.index
        return ref

    def const(self, value, name: str = "const") -> Ref:
        v = as_tensor(value, self.dtype)
        return self._append("const", name, (), v.shape, {"value": v}, needs_grad=False)

    def output(self, name: str, ref: Ref) -> Ref:
        self.outputs[name] = ref.index
        return ref

    @property
    def trainable(self) -> list[str]:
        return [n for n, i in self._param_nodes.items() if self.nodes[i].attrs["trainable"]]

    # -- shape helpers -----------------------------------------------------

    def _name(self, op, name):
        return name or f"{op}#{len(self.nodes)}"

    @staticmethod
    def _same(name, a: Ref, b: Ref):
        if a.shape != b.shape and SCALAR not in (a.shape, b.shape):
            raise GraphShapeError(name, a.shape, b.shape)
        return a.shape if a.shape != SCALAR else b.shape

    # -- primitive builders ------------------------------------------------

    def _conv_like(self, op, x, w, b, spec, extra, name):
        name = self._name(op, name)
        if x.shape[1] != spec.in_channels:
            raise GraphShapeError(name, (x.shape[0], spec.in_channels) + x.shape[2:], x.shape)
        if op == "depthwise_conv2d":
            want_w = (spec.in_channels, 1) + tuple(spec.kernel)
        else:
            want_w = (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
        if w.shape != want_w:
            raise GraphShapeError(name, want_w, w.shape)
        try:
            ho, wo = spec.output_hw(x.shape[2], x.shape[3])
        except ShapeError as e:
            raise GraphShapeError(name, spec.kernel, x.shape[2:]) from e
        inputs = [x.index, w.index]
        if extra is not None:
            kk = 2 * spec.kernel[0] * spec.kernel[1]
            want = (x.shape[0], kk, ho, wo)
            if extra.shape != want:
                raise GraphShapeError(name, want, extra.shape)
            inputs.append(extra.index)
        if b is not None:
            want_b = (1, 1, 1, spec.out_channels)
            if b.shape != want_b:
                raise GraphShapeError(name, want_b, b.shape)
            inputs.append(b.index)
        return self._append(op, name, inputs, (x.shape[0], spec.out_channels, ho, wo), {"spec": spec})

    def conv2d(self, x: Ref, w: Ref, b: Optional[Ref], spec: ConvSpec, name=None) -> Ref:
        return self._conv_like("conv2d", x, w, b, spec, None, name)

    def depthwise_conv2d(self, x: Ref, w: Ref, b: Optional[Ref], spec: ConvSpec, name=None) -> Ref:
        return self._conv_like("depthwise_conv2d", x, w, b, spec, None, name)

    def deform_conv2d(self, x: Ref, w: Ref, offsets: Ref, b: Optional[Ref], spec: ConvSpec,
                      name=None) -> Ref:
        return self._conv_like("deform_conv2d", x, w, b, spec, offsets, name)

    def pixel_shuffle(self, x: Ref, r: int, name=None) -> Ref:
        name = self._name("pixel_shuffle", name)
        n, c, h, w = x.shape
        if c % (r * r):
            raise GraphShapeError(name, (n, (c // (r * r) + 1) * r * r, h, w), x.shape)
        return self._append("pixel_shuffle", name, [x.index], (n, c // (r * r), h * r, w * r), {"r": r})

    def pixel_unshuffle(self, x: Ref, r: int, name=None) -> Ref:
        name = self._name("pixel_unshuffle", name)
        n, c, h, w = x.shape
        if h % r or w % r:
            raise GraphShapeError(name, (n, c, h - h % r, w - w % r), x.shape)
        return self._append("pixel_unshuffle", name, [x.index], (n, c * r * r, h // r, w // r), {"r": r})

    def concat(self, xs: Sequence[Ref], name=None) -> Ref:
        name = self._name("concat", name)
        ref = xs[0].shape
        for x in xs[1:]:
            if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise GraphShapeError(name, (ref[0], x.shape[1]) + ref[2:], x.shape)
        c = sum(x.shape[1] for x in xs)
        return self._append("concat", name, [x.index for x in xs], (ref[0], c) + ref[2:])

    def _binary(self, op, a, b, name):
        name = self._name(op, name)
        return self._append(op, name, [a.index, b.index], self._same(name, a, b))

    def add(self, a: Ref, b: Ref, name=None) -> Ref:
        return self._binary("add", a, b, name)

    def sub(self, a: Ref, b: Ref, name=None) -> Ref:
        return self._binary("sub", a, b, name)

    def mul(self, a: Ref, b: Ref, name=None) -> Ref:
        return self._binary("mul", a, b, name)

    def div(self, a: Ref, b: Ref, name=None) -> Ref:
        return self._binary("div", a, b, name)

    def _unary(self, op, x, name, **attrs):
        return self._append(op, self._name(op, name), [x.index], x.shape, attrs)

    def relu(self, x: Ref, name=None) -> Ref:
        return self._unary("relu", x, name)

    def identity(self, x: Ref, name=None) -> Ref:
        return self._unary("identity", x, name)

    def square(self, x: Ref, name=None) -> Ref:
        return self._unary("square", x, name)

    def abs(self, x: Ref, name=None) -> Ref:
        return self._unary("abs", x, name)

    def log(self, x: Ref, name=None) -> Ref:
        return self._unary("log", x, name)

    def scale(self, x: Ref, k: float, name=None) -> Ref:
        return self._unary("scale", x, name, k=float(k))

    def shift(self, x: Ref, k: float, name=None) -> Ref:
        return self._unary("shift", x, name, k=float(k))

    def clip(self, x: Ref, lo: float, hi: float, name=None) -> Ref:
        """Clamp to [lo, hi]; gradient passes only where the input is inside."""
        return self._unary("clip", x, name, lo=float(lo), hi=float(hi))

    def _reduce(self, op, x, per_sample, name):
        shape = (x.shape[0], 1, 1, 1) if per_sample else SCALAR
        return self._append(op, self._name(op, name), [x.index], shape, {"per_sample": per_sample})

    def sum(self, x: Ref, per_sample: bool = False, name=None) -> Ref:
        return self._reduce("sum", x, per_sample, name)

    def mean(self, x: Ref, per_sample: bool = False, name=None) -> Ref:
        return self._reduce("mean", x, per_sample, name)

    # -- evaluation ----------------------------------------------------------

    def forward(self, inputs: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Evaluate every node; returns the declared outputs by name."""
        vals: list = [None] * len(self.nodes)
        caches: list = [None] * len(self.nodes)
        for name in self._inputs:
            if name not in inputs:
                raise KeyError(f"missing input '{name}'")
        for i, node in enumerate(self.nodes):
            if node.op == "input":
                v = as_tensor(inputs[node.name], self.dtype)
                if v.size == int(np.prod(node.shape)) and v.shape != node.shape and v.ndim == 4 \
                        and sum(s != 1 for s in v.shape) <= 1:
                    v = v.reshape(node.shape)
                if v.shape != node.shape:
                    raise GraphShapeError(node.name, node.shape, v.shape)
            elif node.op == "param":
                v = self.params[node.name]
                if v.shape != node.shape:
                    raise GraphShapeError(node.name, node.shape, v.shape)
                if v.dtype != self.dtype:
                    v = v.astype(self.dtype)
            elif node.op == "const":
                v = node.attrs["value"]
            else:
                fwd = _RULES[node.op][0]
                args = [vals[j] for j in node.inputs]
                if node.op in ("conv2d", "depthwise_conv2d", "deform_conv2d") and len(args) > 2:
                    # biases are stored (1, 1, 1, C); kernels want a flat vector
                    k = 3 if node.op == "deform_conv2d" else 2
                    if len(args) > k:
                        args[k] = args[k].reshape(-1)
                v, caches[i] = fwd(args, node.attrs)
            vals[i] = v
        self._values = vals
        self._caches = caches
        return {name: vals[i] for name, i in self.outputs.items()}

    def value(self, ref: Ref) -> np.ndarray:
        if self._values is None:
            raise GraphStateError("forward has not run")
        return self._values[ref.index]

    def backward(self, grad=None, output: Optional[str] = None) -> Dict[str, np.ndarray]:
        """Gradient of ``output`` w.r.t. every trainable parameter.

        ``grad`` defaults to ones of the output's shape (a (1,1,1,1) loss
        gets seed 1). Gradients are recomputed from scratch on every call.
        """
        if self._values is None:
            raise GraphStateError("backward called before forward")
        if output is None:
            if "loss" in self.outputs:
                output = "loss"
            elif len(self.outputs) == 1:
                output = next(iter(self.outputs))
            else:
                raise ValueError("graph has several outputs; name the one to differentiate")
        root = self.outputs[output]
        root_shape = self.nodes[root].shape
        g0 = np.ones(root_shape, self.dtype) if grad is None else as_tensor(grad, self.dtype)
        if g0.shape != root_shape:
            raise GraphShapeError(output, root_shape, g0.shape)

        grads: list = [None] * len(self.nodes)
        grads[root] = np.array(g0)
        for i in range(root, -1, -1):
            node = self.nodes[i]
            g = grads[i]
            if g is None or not node.needs_grad or not node.inputs:
                continue
            args = [self._values[j] for j in node.inputs]
            bwd = _RULES[node.op][1]
            if node.op in ("conv2d", "depthwise_conv2d", "deform_conv2d"):
                k = 3 if node.op == "deform_conv2d" else 2
                if len(args) > k:
                    args[k] = args[k].reshape(-1)
            in_grads = bwd(g, args, self._values[i], self._caches[i], node.attrs)
            for j, gj in zip(node.inputs, in_grads):
                if gj is None or not self.nodes[j].needs_grad:
                    continue
                gj = gj.reshape(self.nodes[j].shape)
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for name in self.trainable:
            idx = self._param_nodes[name]
            g = grads[idx]
            out[name] = np.zeros(self.nodes[idx].shape, self.dtype) if g is None else g
        return out


# ---------------------------------------------------------------------------
# convenience wrappers matching the functional surface


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return graph.forward(inputs)


def backward(graph: Graph, output_gradient=None, output: Optional[str] = None) -> Dict[str, np.ndarray]:
    return graph.backward(output_gradient, output)


def sgd_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             state: Dict[str, np.ndarray], lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0):
    """Classic momentum SGD; updates ``params`` and ``state`` in place and returns both.

    g' = g + weight_decay * theta; v = momentum * v + g'; theta -= lr * v.
    Only parameters present in ``grads`` are touched.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    if weight_decay < 0:
        raise ValueError("weight decay must be non-negative")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise GraphShapeError(name, theta.shape, g.shape)
        g = np.asarray(g, theta.dtype)
        if weight_decay:
            g = g + theta.dtype.type(weight_decay) * theta
        v = state.get(name)
        v = g if v is None else theta.dtype.type(momentum) * v + g
        state[name] = v
        params[name] = theta - theta.dtype.type(lr) * v
    return params, state


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns ``(grads, norm)`` where ``norm`` is the norm before clipping.
    The input mapping is not modified.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(norm) or norm <= max_norm:
        return dict(grads), norm
    k = max_norm / norm
    return {n: (g * k).astype(g.dtype, copy=False) for n, g in grads.items()}, norm


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(x)
        flat[k] = orig - eps
        fm = f(x)
        flat[k] = orig
        gf[k] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Infinity-norm relative error: max |a - n| / max(max |n|, 1e-8).

    Normalizing by the largest numeric entry rather than entry by entry keeps
    near-zero gradient components, where central differences carry only
    round-off, from dominating the score.
    """
    a = np.asarray(analytic, np.float64).ravel()
    n = np.asarray(numeric, np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n)) / max(float(np.max(np.abs(n))), 1e-8))


LOG10 = math.log(10.0)
