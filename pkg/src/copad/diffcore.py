"""Small dense-tensor engine with reverse-mode differentiation.

Everything runs in float64. Each op builds its output eagerly and records a
closure mapping the output gradient to one gradient per parent; ``backward``
walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * sig,))


def clip_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data >= lo
    return _make(np.maximum(x.data, lo), (x,), lambda g: (g * mask,))


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    a = np.abs(x.data)
    inside = a <= delta
    out = np.where(inside, 0.5 * x.data**2, delta * (a - 0.5 * delta))
    return _make(out, (x,), lambda g: (g * np.where(inside, x.data, delta * np.sign(x.data)),))


# ------------------------------------------------------------------ reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * e / s,))


# -------------------------------------------------------------- shape handling


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([expand_dims(as_tensor(x), axis) for x in xs], axis=axis)


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


def repeat(x: Tensor, reps: int, axis: int) -> Tensor:
    """Tile ``x`` ``reps`` times along an existing axis."""
    tiling = [1] * x.ndim
    tiling[axis] = reps
    out = np.tile(x.data, tiling)

    def back(g):
        shp = list(g.shape)
        shp[axis : axis + 1] = [reps, x.shape[axis]]
        return (g.reshape(shp).sum(axis=axis),)

    return _make(out, (x,), back)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (x,), back)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (rows may repeat)."""
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=axis)

    def back(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (x,), back)


def segment_sum(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets along axis 0."""
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    if segment_ids.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_sum: {segment_ids.shape[0]} ids for {x.shape[0]} rows")
    out = np.zeros((num_segments,) + x.shape[1:], dtype=DTYPE)
    np.add.at(out, segment_ids, x.data)
    return _make(out, (x,), lambda g: (g[segment_ids],))


def segment_softmax(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Softmax over rows sharing a segment id, independently per trailing column."""
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    seg_max = np.full((num_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(seg_max, segment_ids, x.data)
    e = np.exp(x.data - seg_max[segment_ids])
    denom = np.zeros_like(seg_max)
    np.add.at(denom, segment_ids, e)
    out = e / denom[segment_ids]

    def back(g):
        dot = np.zeros_like(seg_max)
        np.add.at(dot, segment_ids, g * out)
        return (out * (g - dot[segment_ids]),)

    return _make(out, (x,), back)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), back)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` applied over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {W.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, W)
    if b is not None:
        out = add(out, b)
    return reshape(out, lead + (W.shape[1],)) if x.ndim != 2 else out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def back(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (x,), back)
    if gamma is not None:
        if gamma.shape != (n,):
            raise ShapeError(f"layer_norm: gamma shape {gamma.shape} for width {n}")
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# -------------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ------------------------------------------------------------------ attention


def multi_head_attention(q_src: Tensor, kv_src: Tensor, heads: int, params: dict[str, Tensor], prefix: str = "") -> Tensor:
    """Scaled dot-product attention for batched inputs of shape (B, L, D)."""
    width = q_src.shape[-1]
    if width % heads:
        raise ConfigError(f"width {width} not divisible by {heads} heads")
    if kv_src.shape[-1] != width or q_src.ndim != 3 or kv_src.ndim != 3:
        raise ShapeError(f"multi_head_attention: shapes {q_src.shape} and {kv_src.shape}")
    B, Lq, _ = q_src.shape
    Lk = kv_src.shape[1]
    dh = width // heads

    def split(t: Tensor, L: int) -> Tensor:
        return transpose(reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(linear(q_src, params[prefix + "Wq"], params[prefix + "bq"]), Lq)
    k = split(linear(kv_src, params[prefix + "Wk"], params[prefix + "bk"]), Lk)
    v = split(linear(kv_src, params[prefix + "Wv"], params[prefix + "bv"]), Lk)
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
    ctx = reshape(ctx, (B, Lq, width))
    return linear(ctx, params[prefix + "Wo"], params[prefix + "bo"])


# ---------------------------------------------------------------- parameters


@dataclass
class ParamStore:
    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


def init_linear(store: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False) -> None:
    bound = 1.0 / math.sqrt(d_in)
    W = np.zeros((d_in, d_out)) if zero else rng.uniform(-bound, bound, (d_in, d_out))
    store.add(name + ".W", W)
    store.add(name + ".b", np.zeros(d_out))


def init_layer_norm(store: ParamStore, name: str, width: int) -> None:
    store.add(name + ".gamma", np.ones(width))
    store.add(name + ".beta", np.zeros(width))


def init_attention(store: ParamStore, name: str, width: int, rng: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(width)
    for p in ("q", "k", "v", "o"):
        store.add(f"{name}.W{p}", rng.uniform(-bound, bound, (width, width)))
        store.add(f"{name}.b{p}", np.zeros(width))


def apply_linear(x: Tensor, store, name: str) -> Tensor:
    return linear(x, store[name + ".W"], store[name + ".b"])


def apply_layer_norm(x: Tensor, store, name: str) -> Tensor:
    return layer_norm(x, store[name + ".gamma"], store[name + ".beta"])


def adamw_step(
    store: ParamStore,
    lr: float,
    weight_decay: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    allow_missing: bool = False,
) -> None:
    """Decoupled-weight-decay Adam update; clears gradients afterwards."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in store.names():
        p = store.params[name]
        g = p.grad
        if g is None:
            if not allow_missing:
                raise ValueError(f"parameter {name!r} has no gradient")
            g = np.zeros_like(p.data)
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        p.data = p.data * (1.0 - lr * weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
