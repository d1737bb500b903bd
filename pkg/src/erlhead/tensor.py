"""Dense tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the recorded graph in reverse topological order. The graph is rebuilt on
every forward pass.

Data is float32 unless a float64 array is passed in; ops never downcast, so a
float64 graph stays float64 end to end (the gradient checker relies on this).
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (context-local, thread safe)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return x
    arr = np.asarray(x)
    if arr.dtype == np.float64 and not isinstance(x, (np.ndarray, np.generic)):
        # python scalars / lists default to float32
        return arr.astype(np.float32)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int:
        return id(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # --------------------------------------------------------------- operators
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap_pair(a, b) -> tuple[Tensor, Tensor]:
    # a bare python number takes the dtype of the tensor it meets
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _wrap(a), _wrap(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    if isinstance(p, Tensor):
        raise TypeError("power: exponent must be a python scalar")
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a) -> Tensor:
    a = _wrap(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = _wrap(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a) -> Tensor:
    a = _wrap(a)
    out = np.logaddexp(a.data.dtype.type(0), a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def stop_gradient(a) -> Tensor:
    """Forward identity; contributes no gradient upstream."""
    a = _wrap(a)
    return Tensor(a.data)


# ------------------------------------------------------------------ reductions
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def cumsum(a, axis: int = -1, exclusive: bool = False) -> Tensor:
    """Running sum along ``axis``; ``exclusive`` shifts so element i sums j < i."""
    a = _wrap(a)
    out = np.cumsum(a.data, axis=axis)
    if exclusive:
        out = out - a.data

    def bw(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        if exclusive:
            rev = rev - g
        return (rev,)

    return _make(out.astype(a.dtype), (a,), bw)


# --------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.multiply.outer(ad, g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        if ad.ndim == 2 and bd.ndim == 2:
            gb = ad.T @ g
        elif bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


# ---------------------------------------------------------------------- shape
def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return _make(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    ax = axis % out.ndim
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in ts], axis=axis)


def getitem(a, idx) -> Tensor:
    """Basic (non-overlapping) indexing; use :func:`take` for gathers."""
    a = _wrap(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    a = _wrap(a)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _make(out, (a,), bw)


def pad2d(a, pad: int, mode: str = "constant") -> Tensor:
    """Pad the two leading (spatial) axes of an ``H x W x C`` tensor."""
    a = _wrap(a)
    if pad == 0:
        return a
    if mode == "constant":
        widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (a.ndim - 2)
        out = np.pad(a.data, widths)
        return _make(out, (a,), lambda g: (g[pad:-pad, pad:-pad],))
    if mode == "reflect":
        h, w = a.shape[:2]
        return take(take(a, _reflect_index(h, pad), 0), _reflect_index(w, pad), 1)
    raise ValueError(f"pad2d: unknown mode {mode!r}")


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


# ------------------------------------------------------------------- backward
def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires grad.

    Gradients accumulate into existing ``.grad`` buffers, like most frameworks;
    clear them between steps.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar of shape [1], got {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
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
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ------------------------------------------------------------ gradient checking
REL_ERR_FLOOR = 1e-5


def _rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    # the floor keeps exactly-zero gradients from turning difference
    # roundoff (~1e-10) into a large "relative" error
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERR_FLOOR)


def gradient_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3) -> float:
    """Worst relative error between the analytic gradient of ``f`` at ``x`` and
    central finite differences. The check runs in float64."""
    if eps <= 0:
        raise ValueError("gradient_check: eps must be positive")
    x0 = np.array(_wrap(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("gradient_check: non-finite function value at the base point")
    backward(y)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += eps
            xm = flat.copy()
            xm[i] -= eps
            fp = float(np.sum(f(Tensor(xp.reshape(x0.shape))).data, dtype=np.float64))
            fm = float(np.sum(f(Tensor(xm.reshape(x0.shape))).data, dtype=np.float64))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(
                    f"gradient_check: non-finite value at index {np.unravel_index(i, x0.shape)}")
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    if not np.all(np.isfinite(analytic)):
        bad = np.argwhere(~np.isfinite(analytic))[0]
        raise FloatingPointError(f"gradient_check: non-finite analytic gradient at index {tuple(bad)}")
    return float(_rel_err(analytic, numeric).max()) if x0.size else 0.0


def check_param_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], n_samples: int,
                      rng: np.random.Generator, eps: float = 1e-6) -> float:
    """Finite-difference check of ``n_samples`` randomly chosen parameter
    entries. ``params`` are perturbed in place and restored."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(int(offsets[-1]), size=min(n_samples, int(offsets[-1])), replace=False)
    worst = 0.0
    with no_grad():
        for flat_i in np.sort(picks):
            k = int(np.searchsorted(offsets, flat_i, side="right") - 1)
            p, i = params[k], int(flat_i - offsets[k])
            a = 0.0 if p.grad is None else float(p.grad.reshape(-1)[i])
            view = p.data.reshape(-1)
            orig = view[i]
            view[i] = orig + eps
            fp = float(loss_fn().data.sum())
            view[i] = orig - eps
            fm = float(loss_fn().data.sum())
            view[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"check_param_grads: non-finite loss perturbing {p.name}[{i}]")
            n = (fp - fm) / (2 * eps)
            worst = max(worst, float(_rel_err(np.array(a), np.array(n))))
    return worst


# ------------------------------------------------------------------ parameters
class ParamStore:
    """Named parameters plus Adam moment buffers for the trainable ones."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step: dict[str, int] = {}

    def add(self, name: str, value, trainable: bool = True, dtype=np.float32) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=dtype), requires_grad=trainable, name=name)
        self._params[name] = t
        self._trainable[name] = trainable
        if trainable:
            self.m[name] = np.zeros_like(t.data)
            self.v[name] = np.zeros_like(t.data)
            self.step[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if self._trainable[n] and n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def freeze(self) -> None:
        """Mark every parameter constant and drop its optimizer state."""
        for name, t in self._params.items():
            t.requires_grad = False
            self._trainable[name] = False
        self.m.clear()
        self.v.clear()
        self.step.clear()

    @property
    def frozen(self) -> bool:
        return not any(self._trainable.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def copy(self, dtype=None) -> ParamStore:
        out = ParamStore()
        for name, t in self._params.items():
            data = t.data.astype(dtype) if dtype is not None else t.data.copy()
            out._params[name] = Tensor(data, requires_grad=self._trainable[name], name=name)
            out._trainable[name] = self._trainable[name]
            if self._trainable[name]:
                out.m[name] = self.m[name].copy()
                out.v[name] = self.v[name].copy()
                out.step[name] = self.step[name]
        return out

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over names and raw parameter bytes (moments excluded)."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self._params[name].data).tobytes())
        return h.hexdigest()
