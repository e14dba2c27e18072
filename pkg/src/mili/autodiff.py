"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Graph` is an append-only tape: each op validates shapes, computes its value
eagerly with numpy, and records what its backward pass needs. `backward` on a
scalar node returns exact analytic gradients for every parameter leaf. The op
set is deliberately small (what the networks here need) and there is no
broadcasting beyond bias-add, so shape mistakes fail loudly at the call site.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes invalid for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf, or was handed non-finite data."""


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, order="C")
    return arr


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def conv1d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """1-D convolution of a (T, Cin) sequence with a (K, Cin, Cout) kernel."""
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d: need (T, Cin) input and (K, Cin, Cout) kernel, got {x.shape} and {w.shape}")
    t_in, cin = x.shape
    k, cin_w, cout = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d: channel mismatch between input {x.shape} and kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv1d: invalid stride {stride} or padding {pad}")
    xp = np.pad(x, ((pad, pad), (0, 0))) if pad else x
    t_pad = t_in + 2 * pad
    if t_pad < k:
        raise ShapeError(f"conv1d: padded length {t_pad} shorter than kernel width {k}")
    t_out = (t_pad - k) // stride + 1
    out = np.zeros((t_out, cout))
    for tap in range(k):
        rows = xp[tap : tap + stride * (t_out - 1) + 1 : stride]
        out += rows @ w[tap]
    return out


def _conv1d_backward(grad, x, w, stride, pad):
    t_in = x.shape[0]
    k = w.shape[0]
    t_out = grad.shape[0]
    xp = np.pad(x, ((pad, pad), (0, 0))) if pad else x
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp)
    for tap in range(k):
        sl = slice(tap, tap + stride * (t_out - 1) + 1, stride)
        gw[tap] = xp[sl].T @ grad
        gxp[sl] += grad @ w[tap].T
    gx = gxp[pad : pad + t_in] if pad else gxp
    return gx, gw


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    param: bool = False


class Graph:
    """Append-only computation tape; nodes refer only to earlier nodes."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _append(self, op: str, inputs: tuple[int, ...], value: np.ndarray, attrs=None, param=False) -> int:
        if not np.isfinite(value).all():
            raise NonFiniteError(f"{op}: produced non-finite values")
        self.nodes.append(Node(op, inputs, value, attrs or {}, param))
        return len(self.nodes) - 1

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def parameter(self, data) -> int:
        return self._append("leaf", (), _as_array(data), param=True)

    def constant(self, data) -> int:
        return self._append("leaf", (), _as_array(data))

    def _val(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    # -- op builders ---------------------------------------------------------

    def apply(self, kind: str, *inputs: int, **attrs) -> int:
        fwd = _FORWARD.get(kind)
        if fwd is None:
            raise ValueError(f"unknown op kind: {kind}")
        vals = [self._val(i) for i in inputs]
        out = fwd(vals, attrs)
        return self._append(kind, tuple(inputs), out, attrs)

    def add(self, a: int, b: int) -> int:
        return self.apply("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self.apply("sub", a, b)

    def mul(self, a: int, b: int) -> int:
        return self.apply("mul", a, b)

    def smul(self, a: int, c: float) -> int:
        return self.apply("smul", a, c=float(c))

    def matmul(self, a: int, b: int) -> int:
        return self.apply("matmul", a, b)

    def conv1d(self, x: int, w: int, stride: int = 1, pad: int = 0) -> int:
        return self.apply("conv1d", x, w, stride=int(stride), pad=int(pad))

    def relu(self, a: int) -> int:
        return self.apply("relu", a)

    def tanh(self, a: int) -> int:
        return self.apply("tanh", a)

    def softplus(self, a: int) -> int:
        return self.apply("softplus", a)

    def exp(self, a: int) -> int:
        return self.apply("exp", a)

    def sum(self, a: int, axis: int | None = None) -> int:
        return self.apply("sum", a, axis=axis)

    def mean(self, a: int, axis: int | None = None) -> int:
        return self.apply("mean", a, axis=axis)

    def sqnorm(self, a: int) -> int:
        return self.apply("sqnorm", a)

    def concat(self, ids: list[int], axis: int = 0) -> int:
        return self.apply("concat", *ids, axis=int(axis))

    def slice(self, a: int, key) -> int:
        return self.apply("slice", a, key=key)

    def bias_add(self, x: int, b: int) -> int:
        return self.apply("bias_add", x, b)

    # -- reverse pass --------------------------------------------------------

    def backward(self, nid: int) -> dict[int, np.ndarray]:
        """Gradients of a scalar node with respect to every parameter leaf."""
        out = self.nodes[nid]
        if out.value.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {out.value.shape}")
        grads: dict[int, np.ndarray] = {nid: np.ones_like(out.value)}
        for i in range(nid, -1, -1):
            g = grads.pop(i, None)
            node = self.nodes[i]
            if g is None or node.op == "leaf":
                if g is not None and node.op == "leaf":
                    grads[i] = g  # keep leaf grads
                continue
            bwd = _BACKWARD[node.op]
            vals = [self._val(j) for j in node.inputs]
            input_grads = bwd(g, vals, node.value, node.attrs)
            for j, gj in zip(node.inputs, input_grads):
                if gj is None:
                    continue
                acc = grads.get(j)
                grads[j] = gj if acc is None else acc + gj
        result = {}
        for i, node in enumerate(self.nodes):
            if node.param:
                result[i] = grads.get(i, np.zeros_like(node.value))
        return result


# -- forward/backward implementations ----------------------------------------


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _fwd_add(vals, attrs):
    a, b = vals
    _same_shape("add", a, b)
    return a + b


def _fwd_sub(vals, attrs):
    a, b = vals
    _same_shape("sub", a, b)
    return a - b


def _fwd_mul(vals, attrs):
    a, b = vals
    _same_shape("mul", a, b)
    return a * b


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _fwd_sum(vals, attrs):
    (a,) = vals
    axis = attrs["axis"]
    if axis is None:
        return np.array(a.sum())
    if a.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"sum: axis {axis} invalid for shape {a.shape}")
    return a.sum(axis=axis, keepdims=True)


def _fwd_mean(vals, attrs):
    (a,) = vals
    axis = attrs["axis"]
    if axis is None:
        return np.array(a.mean())
    if a.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"mean: axis {axis} invalid for shape {a.shape}")
    return a.mean(axis=axis, keepdims=True)


def _fwd_concat(vals, attrs):
    axis = attrs["axis"]
    ndims = {v.ndim for v in vals}
    if len(ndims) != 1 or axis >= ndims.pop():
        raise ShapeError(f"concat: inconsistent ranks {[v.shape for v in vals]} for axis {axis}")
    try:
        return np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None


def _fwd_bias_add(vals, attrs):
    x, b = vals
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: need (m, n) + (n,), got {x.shape} and {b.shape}")
    return x + b


def _fwd_exp(vals, attrs):
    with np.errstate(over="ignore"):
        return np.exp(vals[0])


_FORWARD: dict[str, Callable] = {
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "smul": lambda vals, attrs: vals[0] * attrs["c"],
    "matmul": _fwd_matmul,
    "conv1d": lambda vals, attrs: conv1d_forward(vals[0], vals[1], attrs["stride"], attrs["pad"]),
    "relu": lambda vals, attrs: np.maximum(vals[0], 0.0),
    "tanh": lambda vals, attrs: np.tanh(vals[0]),
    "softplus": lambda vals, attrs: np.logaddexp(0.0, vals[0]),
    "exp": _fwd_exp,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "sqnorm": lambda vals, attrs: np.array((vals[0] ** 2).sum()),
    "concat": _fwd_concat,
    "slice": lambda vals, attrs: vals[0][attrs["key"]].copy(),
    "bias_add": _fwd_bias_add,
}


def _bwd_sum(g, vals, out, attrs):
    (a,) = vals
    axis = attrs["axis"]
    if axis is None:
        return [np.full_like(a, float(g))]
    return [np.broadcast_to(g, a.shape).copy()]


def _bwd_mean(g, vals, out, attrs):
    (a,) = vals
    axis = attrs["axis"]
    if axis is None:
        return [np.full_like(a, float(g) / a.size)]
    n = a.shape[axis]
    return [np.broadcast_to(g / n, a.shape).copy()]


def _bwd_concat(g, vals, out, attrs):
    axis = attrs["axis"]
    grads = []
    start = 0
    for v in vals:
        width = v.shape[axis]
        idx = [slice(None)] * v.ndim
        idx[axis] = slice(start, start + width)
        grads.append(g[tuple(idx)].copy())
        start += width
    return grads


def _bwd_slice(g, vals, out, attrs):
    (a,) = vals
    ga = np.zeros_like(a)
    ga[attrs["key"]] += g
    return [ga]


_BACKWARD: dict[str, Callable] = {
    "add": lambda g, vals, out, attrs: [g, g],
    "sub": lambda g, vals, out, attrs: [g, -g],
    "mul": lambda g, vals, out, attrs: [g * vals[1], g * vals[0]],
    "smul": lambda g, vals, out, attrs: [g * attrs["c"]],
    "matmul": lambda g, vals, out, attrs: [g @ vals[1].T, vals[0].T @ g],
    "conv1d": lambda g, vals, out, attrs: list(_conv1d_backward(g, vals[0], vals[1], attrs["stride"], attrs["pad"])),
    "relu": lambda g, vals, out, attrs: [g * (vals[0] > 0)],
    "tanh": lambda g, vals, out, attrs: [g * (1.0 - out**2)],
    "softplus": lambda g, vals, out, attrs: [g * _sigmoid(vals[0])],
    "exp": lambda g, vals, out, attrs: [g * out],
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "sqnorm": lambda g, vals, out, attrs: [2.0 * float(g) * vals[0]],
    "concat": _bwd_concat,
    "slice": _bwd_slice,
    "bias_add": lambda g, vals, out, attrs: [g, g.sum(axis=0)],
}

OP_KINDS = tuple(_FORWARD.keys())


def value_and_grad(params: dict[str, np.ndarray], build: Callable[[Graph, dict[str, int]], int]):
    """Evaluate a scalar graph built over named parameters; return (value, grads by name)."""
    g = Graph()
    pids = {name: g.parameter(v) for name, v in params.items()}
    out = build(g, pids)
    node_grads = g.backward(out)
    return float(g.value(out)), {name: node_grads[pid] for name, pid in pids.items()}


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moment estimates; one slot per named parameter."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def init(cls, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        zeros = lambda: {k: np.zeros_like(p) for k, p in params.items()}
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0, m=zeros(), v=zeros())


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update. Pure: returns fresh params and state, inputs untouched."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("adam_step: params, grads and state must cover the same names")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {params[name].shape} for {name}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for {name}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps, t=t, m=new_m, v=new_v)
    return new_params, new_state


def finite_difference_grads(
    params: dict[str, np.ndarray], loss_fn: Callable[[dict[str, np.ndarray]], float], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar loss; the independent gradient oracle."""
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            trial = {k: (v.copy() if k == name else v) for k, v in params.items()}
            tflat = trial[name].reshape(-1)
            tflat[i] = orig + h
            up = loss_fn(trial)
            tflat[i] = orig - h
            down = loss_fn(trial)
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def grads_close(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray], tol: float = 1e-4) -> bool:
    """Relative-error comparison used by the gradient oracle checks."""
    for name in analytic:
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
        if err.max() > tol:
            return False
    return True
