"""Differentiable tensor operations.

Every op computes its output eagerly and, when a tape is active and an input
requires a gradient, records a backward rule. Shapes must match exactly; the
only implicit broadcast is a Python scalar combined with a tensor. Adding a
per-feature vector along the last axis is the explicit ``bias_add`` op.
"""

from __future__ import annotations

import math
from numbers import Real
from typing import Sequence

import numpy as np

from ..errors import BoundsError, ShapeError
from .tensor import DTYPE, Tensor, active_tape

__all__ = [
    "add", "sub", "mul", "bias_add", "matmul", "relu", "gelu", "sigmoid",
    "softmax_lastdim", "layernorm_lastdim", "embed_lookup", "slice", "concat",
    "reshape", "transpose", "sum", "mean", "tensor_op",
]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind, inputs, out_values, rule) -> Tensor:
    out = Tensor(out_values)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, rule)
    return out


def _same_dims(kind, a: Tensor, b: Tensor) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{kind}: dims {a.dims} and {b.dims} differ")


def add(a, b) -> Tensor:
    if isinstance(b, Real):
        a = _as_tensor(a)
        return _record("add", [a], a.values + DTYPE(b), lambda g: (g,))
    if isinstance(a, Real):
        return add(b, a)
    _same_dims("add", a, b)
    return _record("add", [a, b], a.values + b.values, lambda g: (g, g))


def sub(a, b) -> Tensor:
    if isinstance(b, Real):
        return add(a, -b)
    _same_dims("sub", a, b)
    return _record("sub", [a, b], a.values - b.values, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if isinstance(b, Real):
        s = DTYPE(b)
        return _record("mul", [a], a.values * s, lambda g: (g * s,))
    if isinstance(a, Real):
        return mul(b, a)
    _same_dims("mul", a, b)
    av, bv = a.values, b.values
    return _record("mul", [a, b], av * bv, lambda g: (g * bv, g * av))


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., n] + bias[n]."""
    if bias.values.ndim != 1 or x.dims[-1] != bias.dims[0]:
        raise ShapeError(f"bias_add: dims {x.dims} and {bias.dims} differ")

    def rule(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0, dtype=np.float64)
        return g, gb.astype(DTYPE)

    return _record("bias_add", [x, bias], x.values + bias.values, rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across the leading axes of ``a``) or has the
    same leading axes as ``a``.
    """
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: dims {a.dims} and {b.dims} need rank >= 2")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: dims {a.dims} and {b.dims} have unequal inner extents")
    if bv.ndim != 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: dims {a.dims} and {b.dims} have unequal batch extents")
    out = np.matmul(av, bv)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        if bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return ga, gb

    return _record("matmul", [a, b], out, rule)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    xv = x.values
    mask = xv > 0
    return _record("relu", [x], np.where(mask, xv, DTYPE(0)), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xv = x.values
    x2 = xv * xv
    th = np.tanh(DTYPE(_GELU_C) * xv * (DTYPE(1.0) + DTYPE(0.044715) * x2))
    out = DTYPE(0.5) * xv * (DTYPE(1.0) + th)

    def rule(g):
        d_inner = DTYPE(_GELU_C) * (DTYPE(1.0) + DTYPE(3 * 0.044715) * x2)
        d = DTYPE(0.5) * (DTYPE(1.0) + th) + DTYPE(0.5) * xv * (DTYPE(1.0) - th * th) * d_inner
        return (g * d,)

    return _record("gelu", [x], out, rule)


def sigmoid(x: Tensor) -> Tensor:
    out = (1.0 / (1.0 + np.exp(-x.values.astype(np.float64)))).astype(DTYPE)
    return _record("sigmoid", [x], out, lambda g: (g * out * (1 - out),))


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (same dims, True = keep) forces excluded entries to exactly 0;
    a row with nothing kept comes out all zero.
    """
    xv = x.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xv.shape:
            raise ShapeError(f"softmax_lastdim: dims {x.dims} and mask {mask.shape} differ")
        shifted = np.where(mask, xv, -np.inf)
        m = shifted.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0)
        e = np.where(mask, np.exp(shifted - m), 0).astype(DTYPE)
    else:
        e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    out = (e / np.where(denom > 0, denom, 1.0)).astype(DTYPE)

    def rule(g):
        dot = (g * out).sum(axis=-1, keepdims=True, dtype=np.float64).astype(DTYPE)
        return (out * (g - dot),)

    return _record("softmax_lastdim", [x], out, rule)


def layernorm_lastdim(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.dims[-1]
    if gamma.dims != (n,) or beta.dims != (n,):
        raise ShapeError(f"layernorm_lastdim: dims {x.dims} and {gamma.dims}/{beta.dims} differ")
    xv = x.values.astype(np.float64)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.values.astype(np.float64)
    out = (xhat * gv + beta.values).astype(DTYPE)

    def rule(g):
        g64 = g.astype(np.float64)
        flat_g = g64.reshape(-1, n)
        d_gamma = (flat_g * xhat.reshape(-1, n)).sum(axis=0)
        d_beta = flat_g.sum(axis=0)
        dxhat = g64 * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx.astype(DTYPE), d_gamma.astype(DTYPE), d_beta.astype(DTYPE)

    return _record("layernorm_lastdim", [x, gamma, beta], out, rule)


def embed_lookup(table: Tensor, indices) -> Tensor:
    """Rows of a 2-D table selected by an integer index array."""
    idx = np.asarray(indices)
    if table.values.ndim != 2:
        raise ShapeError(f"embed_lookup: table dims {table.dims} must be 2-D")
    if not np.issubdtype(idx.dtype, np.integer):
        raise BoundsError("embed_lookup: indices must be integers")
    rows = table.dims[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise BoundsError(f"embed_lookup: index out of range [0, {rows})")
    out = table.values[idx]

    def rule(g):
        gt = np.zeros(table.dims, dtype=np.float64)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.dims[1]))
        return (gt.astype(DTYPE),)

    return _record("embed_lookup", [table], out, rule)


def slice(x: Tensor, axis: int, start: int | None = None, stop: int | None = None,
          step: int | None = None) -> Tensor:
    """Basic slice ``start:stop:step`` along one axis."""
    axis = axis % x.values.ndim
    key = [np.s_[:]] * x.values.ndim
    key[axis] = np.s_[start:stop:step]
    key = tuple(key)
    out = x.values[key]

    def rule(g):
        gx = np.zeros(x.dims, dtype=DTYPE)
        gx[key] = g
        return (gx,)

    return _record("slice", [x], out.copy(), rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].dims
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.dims) != len(ref) or any(
            d0 != d1 for i, (d0, d1) in enumerate(zip(ref, t.dims)) if i != axis
        ):
            raise ShapeError(f"concat: dims {ref} and {t.dims} differ off axis {axis}")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.dims[axis] for t in tensors])

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record("concat", tensors, out, rule)


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(dims)
    if int(np.prod(dims)) != x.size:
        raise ShapeError(f"reshape: dims {x.dims} and {dims} hold different sizes")
    return _record("reshape", [x], x.values.reshape(dims), lambda g: (g.reshape(x.dims),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", [x], np.ascontiguousarray(x.values.transpose(axes)),
                   lambda g: (g.transpose(inverse),))


def sum(x: Tensor) -> Tensor:
    total = x.values.sum(dtype=np.float64)
    return _record("sum", [x], np.array([total], dtype=DTYPE),
                   lambda g: (np.full(x.dims, g.reshape(-1)[0], dtype=DTYPE),))


def mean(x: Tensor) -> Tensor:
    return mul(sum(x), 1.0 / x.size)


_KINDS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "gelu": gelu,
    "softmax_lastdim": softmax_lastdim,
    "layernorm_lastdim": layernorm_lastdim,
    "embed_lookup": embed_lookup,
    "slice": slice,
    "concat": lambda *ts, axis=-1: concat(ts, axis),
}


def tensor_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the named core operations."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown tensor op {kind!r}") from None
    return fn(*inputs, **kwargs)
