"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a backward closure and their parents; :func:`grad` replays
that record in reverse topological order. Tensors created without
``requires_grad`` (model weights during an attack) are treated as constants
and never receive gradients, so no tape is built for pure-constant work.
"""

from __future__ import annotations

import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
CHECK_FINITE = True


class NumericError(FloatingPointError):
    """Raised when an elementwise primitive receives non-finite input."""


class ShapeError(ValueError):
    pass


class DisconnectedGradientWarning(UserWarning):
    """A requested gradient target does not influence the loss."""


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 unless speed matters)."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    DEFAULT_DTYPE = dtype.type


def _check_finite(x: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.isfinite(x).all():
        raise NumericError(f"non-finite input to {op}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------
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
        return scale(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    """Attach a node to the tape only when some parent needs gradients."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, dtype=data.dtype, _parents=parents, _backward=backward, op=op)
    return Tensor(data, dtype=data.dtype, op=op)


# -- binary ops ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, "add")
    _check_finite(b.data, "add")
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite(a.data, "mul")
    _check_finite(b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # batched activations times a weight matrix: one flat GEMM each way
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)

        def backward_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        out = (a2 @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
        return _make(out, (a, b), backward_flat, "matmul")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# -- unary / elementwise ops -------------------------------------------

def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "scale")
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),), "pow")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "tanh")
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def silu(x) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "silu")
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _make(xd * sig, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),), "silu")


def arctan(x) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "arctan")
    xd = x.data
    return _make(np.arctan(xd), (x,), lambda g: (g / (1.0 + xd * xd),), "arctan")


def softmax_row(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks entries forced to probability 0."""
    x = as_tensor(x)
    _check_finite(x.data, "softmax_row")
    xd = x.data
    if mask is not None:
        xd = np.where(mask, -np.inf, xd)
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax_row")


def rmsnorm_row(x, weight=None, eps: float = 1e-6) -> Tensor:
    """Scale each row to unit root-mean-square, then by ``weight`` if given."""
    x = as_tensor(x)
    _check_finite(x.data, "rmsnorm_row")
    xd = x.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv
    if weight is None:
        def backward(g):
            return (inv * (g - normed * (g * normed).sum(axis=-1, keepdims=True) / d),)
        return _make(normed, (x,), backward, "rmsnorm_row")

    weight = as_tensor(weight)
    wd = weight.data

    def backward_w(g):
        gn = g * wd
        gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d) if x.requires_grad else None
        gw = _unbroadcast(g * normed, wd.shape) if weight.requires_grad else None
        return gx, gw

    return _make(normed * wd, (x, weight), backward_w, "rmsnorm_row")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row logits.

    ``weights`` (same shape as targets) masks or reweights positions; the
    result is normalized by its sum.
    """
    logits = as_tensor(logits)
    ld = logits.data
    v = ld.shape[-1]
    flat = ld.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    w = np.ones(t.shape, dtype=flat.dtype) if weights is None else np.asarray(weights, dtype=flat.dtype).reshape(-1)
    denom = max(w.sum(), 1e-12)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(len(t))
    nll = lse - shifted[rows, t]
    loss = np.asarray((nll * w).sum() / denom)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        p *= (w / denom)[:, None] * g
        return (p.reshape(ld.shape),)

    return _make(loss, (logits,), backward, "cross_entropy")


def rope(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding on the last axis (rotate-half convention)."""
    x = as_tensor(x)
    xd = x.data
    half = xd.shape[-1] // 2

    def rot(a):
        return np.concatenate([-a[..., half:], a[..., :half]], axis=-1)

    def rot_t(a):
        return np.concatenate([a[..., half:], -a[..., :half]], axis=-1)

    out = xd * cos + rot(xd) * sin
    return _make(out, (x,), lambda g: (g * cos + rot_t(g * sin),), "rope")


# -- reductions & shape ops --------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.asarray(x.data[idx]), (x,), backward, "getitem")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


# -- tape & gradients --------------------------------------------------

class Tape:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, root: Tensor, seed: np.ndarray | None = None, keep: Iterable[int] = ()) -> dict[int, np.ndarray]:
        """Propagate adjoints; returns accumulated gradients for ids in ``keep``."""
        keep = set(keep)
        adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.data) if seed is None else seed}
        kept: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if id(node) in keep:
                kept[id(node)] = g
            if node._backward is None:
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                pid = id(p)
                if pid in adj:
                    adj[pid] = adj[pid] + gp
                else:
                    adj[pid] = gp
        return kept


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors that do not reach the loss get an all-zero gradient and a
    :class:`DisconnectedGradientWarning`.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        kept = {}
    else:
        tape = Tape.record(loss)
        kept = tape.backward(loss, keep=[id(w) for w in wrt])
    out = []
    for w in wrt:
        g = kept.get(id(w))
        if g is None:
            warnings.warn(f"tensor {w!r} is disconnected from the loss; gradient is zero",
                          DisconnectedGradientWarning, stacklevel=2)
            g = np.zeros_like(w.data)
        out.append(g)
    return out


def check_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, n_coords: int | None = 20,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between autodiff and central finite differences.

    Compares on ``n_coords`` sampled coordinates (all coordinates when None).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    (g,) = grad(f(xt), [xt])
    flat = x0.reshape(-1)
    if n_coords is None or n_coords >= flat.size:
        coords = np.arange(flat.size)
    else:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        num = (fp - fm) / (2 * h)
        ana = g.reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
        worst = max(worst, err)
    return worst
