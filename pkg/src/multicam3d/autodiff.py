"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

Tensors wrap numpy arrays. While a Graph is recording (``with Graph() as g:``),
every operation whose inputs carry gradient state appends a node to the tape;
``backward(loss)`` replays the tape in reverse and accumulates gradients into
``Tensor.grad``. Outside a recording context all operations are plain numpy,
which keeps inference free of tape overhead.

Also provides the AdamW optimizer step and the JSON checkpoint format used by
the rest of the pipeline.
"""

from __future__ import annotations

import base64
import json
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_STATE = threading.local()


def _active_graph():
    return getattr(_STATE, "graph", None)


class Node:
    """One recorded operation: op name, input tensors, backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "graph")

    def __init__(self, op, inputs, output, backward_fn, graph):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.graph = graph


class Graph:
    """Append-only operation tape. Single-owner; not thread-safe to share."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = _active_graph()
        _STATE.graph = self
        return self

    def __exit__(self, *exc):
        _STATE.graph = self._prev
        self._prev = None
        return False

    def backward(self, loss: "Tensor") -> None:
        backward(loss)


class Tensor:
    """Dense float64 array with optional gradient and tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and arrays coerce to constant tensors
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: np.random.Generator | None = None, scale_: float | None = None) -> Tensor:
    """Create a trainable leaf tensor. If ``rng`` is given, ``data`` is a shape."""
    if rng is not None:
        arr = rng.standard_normal(data) * (scale_ if scale_ is not None else 0.02)
    else:
        arr = data
    return Tensor(arr, requires_grad=True)


def _record(op: str, inputs: Sequence[Tensor], out: Tensor,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    g = _active_graph()
    if g is not None and any(t._tracked() for t in inputs):
        node = Node(op, tuple(inputs), out, backward_fn, g)
        g.nodes.append(node)
        out.node = node
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable tensor.

    ``loss`` must be scalar and attached to a graph. Gradients sum over all
    paths; calling twice without clearing grads accumulates. A tensor feeding
    several consumers receives the summed contribution of all of them before
    its own producing node fires, because nodes replay in strict reverse
    append order.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss is not attached to a recording graph")
    g = loss.node.graph
    buffers: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(g.nodes):
        og = buffers.get(id(node.output))
        if og is None:
            continue
        grads = node.backward_fn(og)
        for t, gr in zip(node.inputs, grads):
            if gr is None or not t._tracked():
                continue
            buf = buffers.get(id(t))
            if buf is None:
                buffers[id(t)] = np.array(gr, dtype=np.float64, copy=True).reshape(t.shape)
                holders[id(t)] = t
            else:
                buf += gr
    for key, t in holders.items():
        if t.requires_grad:
            if t.grad is None:
                t.grad = buffers[key]
            else:
                t.grad += buffers[key]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "hadamard")
    out = Tensor(a.data * b.data)
    return _record("hadamard", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    return _record("scale", (a,), out, lambda g: (g * s,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)
    return _record("sigmoid", (a,), out, lambda g: (g * out_data * (1.0 - out_data),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return _record("relu", (a,), out, lambda g: (g * mask,))


def softlog(a: Tensor, kappa: float = 0.01) -> Tensor:
    """Rectified log compression: log(1 + relu(x) / kappa).

    Turns ratios of positive pre-activations into differences, which makes
    multiplicative structure linearly accessible to the following layer.
    """
    pos = np.maximum(a.data, 0.0)
    out = Tensor(np.log1p(pos / kappa))
    grad_local = np.where(a.data > 0, 1.0 / (kappa + pos), 0.0)
    return _record("softlog", (a,), out, lambda g: (g * grad_local,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    out = Tensor(out_data)
    return _record("exp", (a,), out, lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    out = Tensor(np.log(a.data))
    return _record("log", (a,), out, lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)
    return _record("abs", (a,), out, lambda g: (g * sign,))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2 outside."""
    x = a.data
    inner = np.abs(x) < beta
    out = Tensor(np.where(inner, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta))
    grad_local = np.where(inner, x / beta, np.sign(x))
    return _record("smooth_l1", (a,), out, lambda g: (g * grad_local,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record("transpose", (a,), out, lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _record("concat", tuple(parts), out, back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} of shape {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record("narrow", (a,), out, back)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    out = Tensor(np.take(a.data, indices, axis=axis))

    def back(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = indices
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _record("index_select", (a,), out, back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record("matmul", (a, b), out,
                   lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))

    def back(g):
        if axis is None:
            return (np.full_like(a.data, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("reduce_sum", (a,), out, back)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def back(g):
        if axis is None:
            return (np.full_like(a.data, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy() / n,)

    return _record("reduce_mean", (a,), out, back)


def reduce_max(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; gradient routes to the first argmax on ties."""
    if a.shape[axis] == 0:
        raise ShapeError(f"reduce_max over empty axis {axis} of shape {a.shape}")
    out = Tensor(a.data.max(axis=axis))
    arg = a.data.argmax(axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record("reduce_max", (a,), out, back)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (subtracts the per-slice max)."""
    if a.data.ndim == 0 or axis >= a.data.ndim or a.shape[axis] == 0:
        raise ShapeError(f"softmax: invalid axis {axis} for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(out_data)

    def back(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _record("softmax", (a,), out, back)


# ---------------------------------------------------------------------------
# spatial ops


def avg_pool2d(a: Tensor, k: int) -> Tensor:
    """k x k average pooling of a (C, H, W) tensor; H and W must divide by k."""
    c, h, w = a.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out_data = a.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))
    out = Tensor(out_data)

    def back(g):
        up = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        return (up,)

    return _record("avg_pool2d", (a,), out, back)


def _bilinear_weights(u: float, v: float, h: int, w: int):
    """Cell corners and weights for sampling a (H, W) grid at continuous (u, v).

    Uses the right-continuous cell at interior integer coordinates; the top-left
    corner clamps so the last row/column stays sampleable.
    """
    if u < 0 or u > w - 1 or v < 0 or v > h - 1:
        raise DomainError(f"bilinear sample ({u}, {v}) outside [0, {w - 1}] x [0, {h - 1}]")
    x0 = min(int(np.floor(u)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(v)), h - 2) if h > 1 else 0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fu = u - x0
    fv = v - y0
    return x0, x1, y0, y1, fu, fv


def bilinear_sample(feature_map: Tensor, u, v) -> Tensor:
    """4-neighbor bilinear sample of a (C, H, W) map at pixel coordinates (u, v).

    ``u`` runs along W and ``v`` along H. Either coordinate may be a scalar
    Tensor, in which case the sample is differentiable with respect to it.
    """
    c, h, w = feature_map.shape
    u_t = u if isinstance(u, Tensor) else None
    v_t = v if isinstance(v, Tensor) else None
    uf = float(u.data.reshape(())) if u_t is not None else float(u)
    vf = float(v.data.reshape(())) if v_t is not None else float(v)
    x0, x1, y0, y1, fu, fv = _bilinear_weights(uf, vf, h, w)
    m = feature_map.data
    v00, v01 = m[:, y0, x0], m[:, y0, x1]
    v10, v11 = m[:, y1, x0], m[:, y1, x1]
    out_data = ((1 - fv) * ((1 - fu) * v00 + fu * v01)
                + fv * ((1 - fu) * v10 + fu * v11))
    out = Tensor(out_data)
    inputs = [feature_map]
    if u_t is not None:
        inputs.append(u_t)
    if v_t is not None:
        inputs.append(v_t)

    def back(g):
        grads = []
        gm = np.zeros_like(m)
        gm[:, y0, x0] += g * (1 - fv) * (1 - fu)
        gm[:, y0, x1] += g * (1 - fv) * fu
        gm[:, y1, x0] += g * fv * (1 - fu)
        gm[:, y1, x1] += g * fv * fu
        grads.append(gm)
        if u_t is not None:
            du = (1 - fv) * (v01 - v00) + fv * (v11 - v10)
            grads.append(np.array(float(np.dot(g, du))).reshape(u_t.shape))
        if v_t is not None:
            dv = (1 - fu) * (v10 - v00) + fu * (v11 - v01)
            grads.append(np.array(float(np.dot(g, dv))).reshape(v_t.shape))
        return tuple(grads)

    return _record("bilinear_sample", tuple(inputs), out, back)


def bilinear_sample_batch(feature_map: Tensor, us: np.ndarray, vs: np.ndarray) -> Tensor:
    """Sample a (C, H, W) map at P fixed pixel locations; returns (C, P).

    Coordinates are plain arrays (no coordinate gradients); the gradient with
    respect to the map scatters the bilinear weights back.
    """
    c, h, w = feature_map.shape
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    if us.size and (us.min() < 0 or us.max() > w - 1 or vs.min() < 0 or vs.max() > h - 1):
        raise DomainError("bilinear_sample_batch: coordinates out of bounds")
    x0 = np.minimum(np.floor(us).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(vs).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fu = us - x0
    fv = vs - y0
    m = feature_map.data
    w00 = (1 - fv) * (1 - fu)
    w01 = (1 - fv) * fu
    w10 = fv * (1 - fu)
    w11 = fv * fu
    out_data = (m[:, y0, x0] * w00 + m[:, y0, x1] * w01
                + m[:, y1, x0] * w10 + m[:, y1, x1] * w11)
    out = Tensor(out_data)

    def back(g):
        gm = np.zeros_like(m)
        np.add.at(gm, (slice(None), y0, x0), g * w00)
        np.add.at(gm, (slice(None), y0, x1), g * w01)
        np.add.at(gm, (slice(None), y1, x0), g * w10)
        np.add.at(gm, (slice(None), y1, x1), g * w11)
        return (gm,)

    return _record("bilinear_sample_batch", (feature_map,), out, back)


def col_scatter_add(base: Tensor, src: Tensor, cols) -> Tensor:
    """Add columns of ``src`` (C, P) into columns ``cols`` of ``base`` (C, N)."""
    cols = np.asarray(cols, dtype=np.intp)
    if base.data.ndim != 2 or src.data.ndim != 2 or base.shape[0] != src.shape[0]:
        raise ShapeError(f"col_scatter_add: shapes {base.shape} and {src.shape}")
    out_data = base.data.copy()
    np.add.at(out_data, (slice(None), cols), src.data)
    out = Tensor(out_data)
    return _record("col_scatter_add", (base, src), out,
                   lambda g: (g, g[:, cols]))


# ---------------------------------------------------------------------------
# composed helpers


def log_softmax(a: Tensor, axis: int) -> Tensor:
    """x - logsumexp(x) along ``axis``, composed from primitive ops."""
    m = reduce_max(a, axis=axis)
    m_keep = reshape(m, _keepdims_shape(a.shape, axis))
    shifted = sub(a, m_keep)
    lse = log(reduce_sum(exp(shifted), axis=axis))
    return sub(shifted, reshape(lse, _keepdims_shape(a.shape, axis)))


def _keepdims_shape(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    s = list(shape)
    s[axis] = 1
    return tuple(s)


def linear(w: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """w @ x with an optional per-row bias broadcast along columns."""
    out = matmul(w, x)
    if b is not None:
        out = add(out, reshape(b, (b.shape[0], 1)))
    return out


# ---------------------------------------------------------------------------
# finite differences


def numeric_gradient(f: Callable[[], Tensor], tensors: Sequence[Tensor],
                     h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of the scalar ``f()`` w.r.t. each tensor's data."""
    grads = []
    for t in tensors:
        flat = t.data.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            fp = float(f().data.reshape(()))
            flat[i] = saved - h
            fm = float(f().data.reshape(()))
            flat[i] = saved
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.shape))
    return grads


def gradient_check(f: Callable[[], Tensor], tensors: Sequence[Tensor],
                   h: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f()`` and finite differences.

    Relative error uses a floor of 1e-2 in the denominator so near-zero
    gradient entries are compared absolutely at the same tolerance scale.
    """
    for t in tensors:
        t.zero_grad()
    with Graph():
        loss = f()
        backward(loss)
    numeric = numeric_gradient(f, tensors, h=h)
    worst = 0.0
    for t, num in zip(tensors, numeric):
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-2)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"adamw step with missing grads: {missing[:5]}")
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                 + self.weight_decay * p.data)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
            "weight_decay": self.weight_decay, "step_count": self.step_count,
            "m": {k: _encode_array(v) for k, v in self.m.items()},
            "v": {k: _encode_array(v) for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.betas = tuple(state["betas"])
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        self.step_count = int(state["step_count"])
        self.m = {k: _decode_array(v).reshape(self.params[k].shape) for k, v in state["m"].items()}
        self.v = {k: _decode_array(v).reshape(self.params[k].shape) for k, v in state["v"].items()}


# ---------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").copy()


def save_checkpoint(path, params: dict[str, Tensor], optimizer: AdamW | None = None) -> None:
    """Write parameters (and optionally optimizer state) as a single JSON document."""
    doc = {name: {"shape": list(p.shape), "values": _encode_array(p.data)}
           for name, p in params.items()}
    if optimizer is not None:
        doc["optim"] = optimizer.state_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Read a checkpoint; returns (name -> array, optimizer state or None)."""
    with open(path) as fh:
        doc = json.load(fh)
    optim = doc.pop("optim", None)
    arrays = {}
    for name, entry in doc.items():
        arr = _decode_array(entry["values"]).reshape(entry["shape"])
        arrays[name] = arr
    return arrays, optim


def assign_parameters(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Load checkpoint arrays into an existing parameter dict, validating shapes."""
    missing = sorted(set(params) - set(arrays))
    unexpected = sorted(set(arrays) - set(params))
    if missing or unexpected:
        raise ContractError(
            f"checkpoint mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    bad = [k for k in params if tuple(params[k].shape) != tuple(arrays[k].shape)]
    if bad:
        detail = {k: (params[k].shape, arrays[k].shape) for k in bad[:5]}
        raise ContractError(f"checkpoint shape mismatch: {detail}")
    for k, p in params.items():
        p.data = arrays[k].astype(np.float64)
