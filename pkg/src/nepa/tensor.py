"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the primitives the rest of the package needs: batched matmul,
softmax / layernorm / l2-normalize over the last dim, the activations, shape
ops, reductions, a gather, a rotary pair rotation, and a stop-gradient
barrier. Every primitive carries an analytic backward rule; all of them are
checked against central finite differences (see ``finite_diff_check``).

Gradients are recorded on an explicit ``GradTape``. Ops append an entry only
while a tape is active and some input requires grad, so inference code pays
nothing. ``tape.backward(loss)`` zeroes the grads of every tensor the tape
touched and replays the entries in reverse; replaying twice gives
bit-identical gradients.

Broadcasting is restricted to leading batch dims (a ``[dim]`` bias against a
``[B,T,dim]`` activation). Anything fancier must be materialized by the
caller, which keeps every gradient rule auditable.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional array, optionally participating in the active tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _ALLOWED_DTYPES:
            raise ConfigError(f"unsupported dtype {arr.dtype}; use f32 or f64")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are applied via the *_scalar primitives
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# tape


class _Entry:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_STACKS = threading.local()


def _stack() -> list:
    if not hasattr(_STACKS, "tapes"):
        _STACKS.tapes = []
    return _STACKS.tapes


def _active_tape() -> Optional["GradTape"]:
    tapes = _stack()
    return tapes[-1] if tapes else None


class GradTape:
    """Ordered record of primitive applications.

    Each entry stores the op name, the input tensors, the output tensor and a
    closure computing input gradients from the output gradient. Execution
    order is a topological order of the graph, so a reverse sweep propagates
    every gradient.
    """

    def __init__(self):
        self._entries: list[_Entry] = []

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, op, inputs, output, backward):
        self._entries.append(_Entry(op, inputs, output, backward))

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(t) into ``t.grad`` for every tensor on the tape.

        ``root`` must be a scalar recorded on this tape. Grads of all touched
        tensors are zeroed first, so calling backward twice yields identical
        results.
        """
        if root.data.size != 1:
            raise ShapeError(f"backward() expects a scalar root, got shape {root.shape}")
        if not np.isfinite(root.data).all():
            raise NumericError("backward() on a non-finite root")
        seen = set()
        for entry in self._entries:
            for t in entry.inputs + (entry.output,):
                if id(t) not in seen:
                    seen.add(id(t))
                    if t.requires_grad:
                        t.grad = np.zeros_like(t.data)
                    else:
                        t.grad = None
        root.grad = np.ones_like(root.data)
        for entry in reversed(self._entries):
            g = entry.output.grad
            if g is None or entry.backward is None:
                continue
            grads = entry.backward(g)
            for inp, gi in zip(entry.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi.astype(inp.data.dtype, copy=False)


def _make(data: np.ndarray, op: str, inputs: tuple, backward) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape._record(op, inputs, out, backward)
    return out


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out the leading dims numpy broadcast added."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_leading_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) and big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {sa} and {sb} only broadcast over leading dims")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    _check_leading_broadcast("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", a, b)
    _check_leading_broadcast("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _make(out, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    _check_leading_broadcast("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return _reduce_to(g * b_data, a.shape), _reduce_to(g * a_data, b.shape)

    return _make(out, "mul", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _make(-a.data, "neg", (a,), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def backward(g):
        return (g,)

    return _make(a.data + s, "add_scalar", (a,), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def backward(g):
        return (g * s,)

    return _make(a.data * s, "mul_scalar", (a,), backward)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched row-major product ``[..,m,k] @ [..,k,n]``.

    ``b`` may be rank 2 (shared across the batch) or carry the same leading
    dims as ``a``.
    """
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(b_data, -1, -2)
        if b_data.ndim == 2:
            k = a_data.shape[-1]
            n = g.shape[-1]
            gb = a_data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a_data, -1, -2) @ g
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


# ---------------------------------------------------------------------------
# normalizations and softmax


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last dim, max-subtracted for stability.

    ``-inf`` entries are legal (attention masking) and map to exact zeros.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: empty last dim")
    if np.isnan(x.data).any():
        raise NumericError("softmax_lastdim: NaN in input")
    m = np.max(x.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax_lastdim", (x,), backward)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("log_softmax_lastdim: empty last dim")
    if np.isnan(x.data).any():
        raise NumericError("log_softmax_lastdim: NaN in input")
    m = np.max(x.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax_lastdim", (x,), backward)


def layernorm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
              eps: float = 1e-6) -> Tensor:
    """Normalize the last dim to zero mean / unit variance, optional affine."""
    if eps <= 0:
        raise ConfigError(f"layernorm: eps must be positive, got {eps}")
    if (gamma is None) != (beta is None):
        raise ConfigError("layernorm: gamma and beta must be supplied together")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    if gamma is None:
        def backward(g):
            gm = g.mean(axis=-1, keepdims=True)
            gxm = (g * xhat).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - xhat * gxm),)

        return _make(xhat, "layernorm", (x,), backward)

    _check_dtypes("layernorm", x, gamma, beta)
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match dim {d}")
    out = xhat * gamma.data + beta.data
    gamma_data = gamma.data

    def backward_affine(g):
        gx = g * gamma_data
        gm = gx.mean(axis=-1, keepdims=True)
        gxm = (gx * xhat).mean(axis=-1, keepdims=True)
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        return inv * (gx - gm - xhat * gxm), dgamma, dbeta

    return _make(out, "layernorm", (x, gamma, beta), backward_affine)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last dim) to unit length; zero rows stay zero via eps."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = n + eps
    out = x.data / denom
    x_data = x.data

    def backward(g):
        gx = (g * x_data).sum(axis=-1, keepdims=True)
        # second term vanishes for zero rows; the guard only avoids 0/0
        n_safe = np.maximum(n, np.finfo(x_data.dtype).tiny)
        return (g / denom - x_data * (gx / (n_safe * denom * denom)),)

    return _make(out, "l2_normalize", (x,), backward)


# ---------------------------------------------------------------------------
# stop-gradient barrier


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; backward contributes exactly zero to ``x``.

    The tape records a barrier entry so ``x`` still gets a (zero) grad buffer
    after backward, making the barrier observable.
    """
    out = Tensor(x.data, requires_grad=False)
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        tape._record("stop_gradient", (x,), out, None)
    return out


# ---------------------------------------------------------------------------
# activations


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation."""
    c = math.sqrt(2.0 / math.pi)
    x_data = x.data
    inner = c * (x_data + 0.044715 * x_data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x_data * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x_data ** 2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x_data * dt),)

    return _make(out, "gelu", (x,), backward)


def silu(x: Tensor) -> Tensor:
    """SiLU: x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    x_data = x.data

    def backward(g):
        return (g * (sig * (1.0 + x_data * (1.0 - sig))),)

    return _make(out, "silu", (x,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _make(out, "reshape", (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} not a permutation for rank {x.ndim}")
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(out, "transpose", (x,), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    n = x.shape[axis]
    if start < 0 or length < 0 or start + length > n:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for extent {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])
    full_shape = x.shape

    def backward(g):
        gx = np.zeros(full_shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _make(out, "narrow", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    _check_dtypes("concat", *tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(grads)

    return _make(out, "concat", tensors, backward)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding-style lookup: rows of ``[N, D]`` selected by an int array."""
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be rank 2, got {table.shape}")
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise ShapeError("gather_rows: index must be integer")
    out = table.data[index]
    n = table.shape[0]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return _make(out, "gather_rows", (table,), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    if axis is not None and not isinstance(axis, int):
        raise ShapeError("sum: axis must be an int or None")
    out = x.data.sum(axis=axis)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, "sum", (x,), backward)


def tmean(x: Tensor, axis=None) -> Tensor:
    if axis is not None and not isinstance(axis, int):
        raise ShapeError("mean: axis must be an int or None")
    out = x.data.mean(axis=axis)
    shape = x.shape
    count = x.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).astype(g.dtype),)
        g = np.expand_dims(g / count, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, "mean", (x,), backward)


# ---------------------------------------------------------------------------
# rotary pair rotation


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive value pairs of the last dim by per-pair angles.

    ``cos``/``sin`` hold the angle tables, broadcastable against the pair
    view ``[..., last/2]``. A rotation is an isometry, so the backward rule is
    the inverse rotation applied to the incoming gradient.
    """
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rope_rotate: last extent must be even, got {d}")
    pairs = x.data.reshape(x.shape[:-1] + (d // 2, 2))
    x1, x2 = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = x1 * cos - x2 * sin
    out[..., 1] = x1 * sin + x2 * cos
    out = out.reshape(x.shape)

    def backward(g):
        gp = g.reshape(g.shape[:-1] + (d // 2, 2))
        g1, g2 = gp[..., 0], gp[..., 1]
        gx = np.empty_like(gp)
        gx[..., 0] = g1 * cos + g2 * sin
        gx[..., 1] = -g1 * sin + g2 * cos
        return (gx.reshape(g.shape),)

    return _make(out, "rope_rotate", (x,), backward)


# ---------------------------------------------------------------------------
# finite-difference harness


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` must be a deterministic scalar-valued function. The relative error
    denominator is ``max(|analytic|, |numeric|, 1e-8)`` elementwise.
    """
    if h <= 0:
        raise ConfigError(f"finite_diff_check: h must be positive, got {h}")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
    if y.data.size != 1:
        raise ShapeError(f"finite_diff_check: f must return a scalar, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise NumericError("finite_diff_check: f(x) is not finite")
    tape.backward(y)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        fp = f(Tensor((flat + bump).reshape(x.shape))).item()
        fm = f(Tensor((flat - bump).reshape(x.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("finite_diff_check: f non-finite at a perturbed point")
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
