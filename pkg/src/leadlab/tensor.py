"""Dense tensors with reverse-mode automatic differentiation.

numpy-backed, minimal: exactly the operations the model needs. Default
numeric width is float32; gradient-verification paths build float64
tensors and use finite_diff_check as the oracle.

Broadcasting is deliberately narrow: operands must have equal shapes, or
the smaller operand's shape must be a trailing suffix of the larger's
(bias vectors, the expert embedding repeated along the sequence axis).
Anything else raises DimensionError.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes incompatible with the operation."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class GraphError(RuntimeError):
    """Backward requested on a dead or absent graph."""


class GradientCheckError(RuntimeError):
    """Non-finite gradient encountered during verification."""


_grad_enabled = True

# Sentinel marking a node whose graph has already been consumed by backward.
_RELEASED = object()


@contextmanager
def no_grad():
    """Disable graph recording (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense n-dimensional value, optionally participating in the grad tape.

    `requires_grad` marks leaves (parameters); tensors produced by
    operations carry parent links instead. After `backward`, the graph
    that produced the loss is released and cannot be traversed again.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap ndarray or nested lists, not another Tensor")
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.floating)):
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = None
        self._vjp = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flags})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _tracked(t: Tensor) -> bool:
    if t._vjp is _RELEASED:
        raise GraphError("tensor belongs to a graph already consumed by backward")
    return t.requires_grad or t._parents is not None


def is_live(t: Tensor) -> bool:
    """True when backward(t) can reach at least one trainable leaf."""
    return t.requires_grad or (t._parents is not None and t._vjp is not _RELEASED)


def _make(data: np.ndarray, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_broadcast(a_shape: tuple, b_shape: tuple, op: str):
    """Equal shapes, scalar, or trailing-suffix broadcast only."""
    if a_shape == b_shape:
        return
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if small == () or small == big[len(big) - len(small):]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a_shape} and {b_shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# -- arithmetic -----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise (Hadamard) product, with suffix broadcast."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        scale = float(b)
        out = a.data * scale
        return _make(out, (a,), lambda g: (g * scale,))
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape, "hadamard")
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


hadamard = mul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., n, k] @ b[k, m] or stacked a[..., n, k] @ b[..., k, m]."""
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: inner dims disagree {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2)
        ga = g @ bt
        if a.ndim == 1:
            gb = np.outer(a.data, g)
        elif b.ndim == 2 and a.ndim > 2:
            k = a.data.shape[-1]
            m = g.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), vjp)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with explicit shape validation."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: x {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} does not match weight {w.shape}")
    return add(matmul(x, w), b)


def add_constant(x: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable constant (e.g. an attention mask)."""
    out = x.data + const
    return _make(out, (x,), lambda g: (g,))


# -- nonlinearities -------------------------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), fused."""
    s = _stable_sigmoid(x.data)
    y = x.data * s
    return _make(y, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), saturation-safe at |x| ~ 1e3."""
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    s = _stable_sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * s,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), vjp)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    y = np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True)) + m
    y = y.squeeze(axis)

    def vjp(g):
        sm = np.exp(x.data - np.expand_dims(y, axis))
        return (np.expand_dims(g, axis) * sm,)

    return _make(y, (x,), vjp)


# -- reductions & shape ---------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=False),)

    return _make(y, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    y = x.data.reshape(shape)
    return _make(y, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    y = np.transpose(x.data, axes)
    inv = np.argsort(axes)
    return _make(y, (x,), lambda g: (np.transpose(g, inv),))


def transpose_last2(x: Tensor) -> Tensor:
    y = np.swapaxes(x.data, -1, -2)
    return _make(y, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Concatenate two tensors; see concat_all for the n-ary form."""
    return concat_all([a, b], axis=axis)


def concat_all(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    shapes = [p.shape for p in parts]
    ref = list(shapes[0])
    ax = axis % len(ref)
    for s in shapes[1:]:
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}")
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(y, tuple(parts), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    ax = axis % x.ndim
    if start < 0 or start + length > x.shape[ax]:
        raise DimensionError(f"narrow: [{start}:{start + length}] outside axis {ax} of {x.shape}")
    idx = tuple(slice(None) if i != ax else slice(start, start + length) for i in range(x.ndim))
    y = x.data[idx]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(y, (x,), vjp)


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat x[..., d] into x[..., n, d] (expert embedding over sequence)."""
    y = np.broadcast_to(np.expand_dims(x.data, -2), x.shape[:-1] + (n, x.shape[-1])).copy()
    return _make(y, (x,), lambda g: (g.sum(axis=-2),))


def tile_leading(x: Tensor, n: int) -> Tensor:
    """Repeat x into [n, *x.shape] (one copy per expert head)."""
    y = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _make(y, (x,), lambda g: (g.sum(axis=0),))


def row_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale each last-axis row of x[..., d] by the matching scalar in s[...]."""
    if s.shape != x.shape[:-1]:
        raise DimensionError(f"row_scale: scales {s.shape} do not index rows of {x.shape}")
    sd = s.data[..., None]
    y = x.data * sd

    def vjp(g):
        return g * sd, (g * x.data).sum(axis=-1)

    return _make(y, (x, s), vjp)


# -- indexed access -------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    y = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(y, (table,), vjp)


def take_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """x[..., V] indexed by ids[...] along the last axis."""
    ids = np.asarray(ids)
    picked = np.take_along_axis(x.data, ids[..., None], axis=-1)
    y = picked.squeeze(-1)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(y, (x,), vjp)


# -- normalization --------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def vjp(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx.astype(x.dtype, copy=False), dgain, dbias

    return _make(y, (x, gain, bias), vjp)


# -- autodiff driver ------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss.

    The graph is released afterwards; a second backward over it raises
    GraphError. Gradients accumulate additively into existing buffers.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._vjp is _RELEASED:
        raise GraphError("backward called twice on the same graph")
    if loss._parents is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise GraphError("loss was not produced on a live graph")

    # Iterative topological order (graphs can exceed the recursion limit).
    order: list[Tensor] = []
    seen = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._parents is not None:
            for p in node._parents:
                if p._vjp is _RELEASED:
                    raise GraphError("graph references a tensor already consumed by backward")
                if id(p) not in seen and p._parents is not None:
                    stack.append((p, False))
                elif id(p) not in seen:
                    seen.add(id(p))
                    order.append(p)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        contribs = node._vjp(g)
        for parent, c in zip(node._parents, contribs):
            if c is None:
                continue
            pid = id(parent)
            if pid not in grads:
                grads[pid] = c
            elif pid in owned:
                grads[pid] += c
            else:
                grads[pid] = grads[pid] + c
                owned.add(pid)
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        # release
        node._parents = None
        node._vjp = _RELEASED


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must rebuild its graph on every call and be a pure function of
    `params`, which must be float64.
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    items = list(params.items()) if isinstance(params, dict) else list(params)
    for name, p in items:
        if p.data.dtype != np.float64:
            raise ContractError(f"finite_diff_check requires float64 params; {name!r} is {p.data.dtype}")
        p.grad = None

    loss = f()
    backward(loss)
    analytic = {}
    for name, p in items:
        ga = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(ga)):
            raise GradientCheckError(f"non-finite analytic gradient for {name!r}")
        analytic[name] = ga.copy()

    worst = 0.0
    for name, p in items:
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = float(f().data)
            flat[i] = saved - eps
            lo = float(f().data)
            flat[i] = saved
            num = (hi - lo) / (2.0 * eps)
            if not np.isfinite(num):
                raise GradientCheckError(f"non-finite numeric gradient for {name!r}[{i}]")
            rel = abs(ga[i] - num) / max(1.0, abs(ga[i]))
            if rel > worst:
                worst = rel
    return worst
