"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable operation appends itself to an implicit tape: each
output carries a monotonically increasing sequence number, and
:meth:`Tensor.backward` replays the reachable operations in strictly
decreasing sequence order. Leaf tensors (``requires_grad=True`` and no
parents) accumulate into ``.grad``; intermediate gradients live only for the
duration of a single backward call.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_seq = itertools.count()
_grad_enabled = True
_default_dtype = np.float32


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported float precision: {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    if dtype is None and not isinstance(value, (np.ndarray, np.generic)):
        dtype = _default_dtype
    arr = np.asarray(value)
    if dtype is None:
        dtype = arr.dtype.type if arr.dtype.kind == "f" else _default_dtype
    return arr.astype(dtype, copy=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("tensor created with non-finite values")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    # ---- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # ---- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes or not node.requires_grad:
                continue
            nodes[id(node)] = node
            stack.extend(node._parents)

        grads = {id(self): grad}
        for node in sorted(nodes.values(), key=lambda t: t._seq, reverse=True):
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

    # ---- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype.type if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype else x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out.op = op
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _lift2(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers/arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _lift(a), _lift(b)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ---- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _broadcast_shape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _broadcast_shape(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by a tensor with zero elements")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def abs(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = _lift(a)
    # sign(0) == 0 gives the zero subgradient at the kink
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a) -> Tensor:
    a = _lift(a)
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def clamp(a, lo=None, hi=None) -> Tensor:
    a = _lift(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    out = np.clip(a.data, lo_v, hi_v)
    inside = (a.data >= lo_v) & (a.data <= hi_v)
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def relu(a) -> Tensor:
    a = _lift(a)
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def elementwise(op: str, a, b=None, lo=None, hi=None) -> Tensor:
    """Dispatch one of the named elementwise operations."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"neg": neg, "abs": abs, "square": square, "relu": relu,
             "exp": exp, "log": log, "tanh": tanh}
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    if op == "clamp":
        return clamp(a, lo, hi)
    raise ValueError(f"unknown elementwise op {op!r}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero. The single rounding rule used everywhere."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def round_ste(a) -> Tensor:
    """Rounding whose backward pass is the identity (straight-through)."""
    a = _lift(a)
    return _make(round_half_away(a.data), (a,), lambda g: (g,), "round_ste")


def cast(a, dtype) -> Tensor:
    a = _lift(a)
    src = a.dtype
    if src == np.dtype(dtype):
        return a
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "cast")


# ---- shape ops --------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


# ---- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x, kernel, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of an NHWC input with a (kh, kw, C_in, C_out) kernel."""
    x, kernel = _lift(x), _lift(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    n, h, w, c = x.shape
    kh, kw, _, co = kernel.shape
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ValueError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    k2 = kernel.data.reshape(kh * kw * c, co)
    out = (cols @ k2).reshape(n, ho, wo, co)

    def backward(g):
        g2 = g.reshape(n * ho * wo, co)
        dk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ k2.T).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, pt:pt + h, pl:pl + w, :]
        return dx, dk

    return _make(out, (x, kernel), backward, "conv2d")


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over NHWC; trailing rows/cols that don't fill a window are dropped."""
    x = _lift(x)
    n, h, w, c = x.shape
    h2, w2 = h // size, w // size
    if h2 == 0 or w2 == 0:
        raise ValueError("input smaller than pooling window")
    cropped = x.data[:, :h2 * size, :w2 * size, :]
    win = cropped.reshape(n, h2, size, w2, size, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dcrop = dwin.reshape(n, h2, w2, c, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(cropped.shape)
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[:, :h2 * size, :w2 * size, :] = dcrop
        return (dx,)

    return _make(out, (x,), backward, "maxpool2d")


# ---- reductions -------------------------------------------------------------

def _norm_axes(a: Tensor, axes):
    if axes is None:
        return tuple(range(a.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ValueError(f"axis {ax} out of range for shape {a.shape}")
        out.append(ax % a.ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, a, axes=None) -> Tensor:
    """Reduce over ``axes`` (all by default) with sum, mean, max_abs, min or max."""
    a = _lift(a)
    ax = _norm_axes(a, axes)
    if a.data.size == 0 or any(a.shape[i] == 0 for i in ax):
        raise ValueError("empty reduction")
    keep_shape = tuple(1 if i in ax else n for i, n in enumerate(a.shape))
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1

    if op == "sum":
        return _make(a.data.sum(axis=ax), (a,),
                     lambda g: (np.broadcast_to(g.reshape(keep_shape), a.shape).copy(),), "sum")
    if op == "mean":
        return _make(a.data.mean(axis=ax), (a,),
                     lambda g: (np.broadcast_to(g.reshape(keep_shape) / count, a.shape).copy(),), "mean")
    if op in ("max", "min", "max_abs"):
        src = np.abs(a.data) if op == "max_abs" else a.data
        ext = src.min(axis=ax, keepdims=True) if op == "min" else src.max(axis=ax, keepdims=True)
        hit = src == ext
        share = hit / hit.sum(axis=ax, keepdims=True)
        if op == "max_abs":
            share = share * np.sign(a.data)

        def backward(g):
            return (g.reshape(keep_shape) * share,)

        return _make(ext.reshape(tuple(n for i, n in enumerate(a.shape) if i not in ax)),
                     (a,), backward, op)
    raise ValueError(f"unknown reduction {op!r}")


# ---- softmax family -----------------------------------------------------------

def log_softmax(logits) -> Tensor:
    """Row-wise log-softmax over the last axis, stabilised by max-subtraction."""
    z = _lift(logits)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (z,), backward, "log_softmax")


def softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---- gradient checking --------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], at, step: float = 1e-5, mask=None) -> float:
    """Largest relative discrepancy between backprop and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``mask`` optionally restricts the check to a boolean subset of coordinates.
    """
    x0 = np.array(_as_array(at), dtype=np.float64)
    with precision(np.float64):
        x = Tensor(x0.copy(), requires_grad=True)
        y = f(x)
        if not np.all(np.isfinite(y.data)):
            raise FloatingPointError("f is not finite at the check point")
        y.backward()
        analytic = np.zeros_like(x0) if x.grad is None else x.grad
        numeric = np.zeros_like(x0)
        flat = x0.reshape(-1)
        idx = range(flat.size) if mask is None else np.flatnonzero(np.asarray(mask).reshape(-1))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                up = f(Tensor(x0.copy())).item()
            flat[i] = orig - step
            with no_grad():
                down = f(Tensor(x0.copy())).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("f is not finite near the check point")
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        analytic, numeric = analytic[keep], numeric[keep]
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
