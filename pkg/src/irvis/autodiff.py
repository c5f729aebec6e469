"""Dense f64 tensors with reverse-mode gradient accumulation.

Tensors record the op graph as they are built (parents + a backward
closure per op); ``Tensor.backward`` replays the tape in reverse
topological order, accumulating into ``.grad`` with ``+=`` so shared
parameters sum contributions from every branch.  Every op validates
finiteness of its output: NaN/Inf raises instead of propagating.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import DegenerateInputError, NumericError, ShapeMismatchError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A dense float64 array plus optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse sweep from this (scalar) tensor through the recorded tape."""
        if self.data.size != 1:
            raise ShapeMismatchError(
                f"backward requires a scalar, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division not supported")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise and structural ops ------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * c

    def backward(g):
        a._accumulate(g * c)

    return _make(data, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul shape mismatch: {a.shape} x {b.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g.T)

    return _make(a.data.T.copy(), (a,), backward, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape).copy(), (a,), backward, "reshape")


def take(a: Tensor, key) -> Tensor:
    data = np.array(a.data[key])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accumulate(full)

    return _make(data, (a,), backward, "take")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, tuple(tensors), backward, "concat")


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return _make(np.array(a.data.sum()), (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        a._accumulate(np.full_like(a.data, float(g) / n))

    return _make(np.array(a.data.mean()), (a,), backward, "mean")


def gelu(a: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        a._accumulate(g * (cdf + a.data * pdf))

    return _make(data, (a,), backward, "gelu")


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the caller owns the RNG and the train/eval switch."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0,1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    data = a.data * mask

    def backward(g):
        a._accumulate(g * mask)

    return _make(data, (a,), backward, "dropout")


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * weight.data + bias.data
    d = x.data.shape[-1]

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if weight.requires_grad:
            weight._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * weight.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gx - m1 - xhat * m2) * inv)

    return _make(data, (x, weight, bias), backward, "layernorm")


# -- row-structured ops used by the contrastive machinery --------------


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows of the output sum to 1."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (x,), backward, "softmax_rows")


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity between rows of ``a`` and rows of ``b``."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(
            f"cosine_rows shape mismatch: {a.shape} vs {b.shape}"
        )
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    for name, norms in (("a", na), ("b", nb)):
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise DegenerateInputError(
                f"cosine_rows: zero-norm row {int(zero[0])} in argument {name}"
            )
    an = a.data / na[:, None]
    bn = b.data / nb[:, None]
    out = an @ bn.T

    def backward(g):
        if a.requires_grad:
            a._accumulate((g @ bn - (g * out).sum(axis=1, keepdims=True) * an)
                          / na[:, None])
        if b.requires_grad:
            b._accumulate((g.T @ an - (g * out).sum(axis=0)[:, None] * bn)
                          / nb[:, None])

    return _make(out, (a, b), backward, "cosine_rows")


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy in the fused, overflow-safe logits form."""
    z, t = logits.data, targets.data
    if z.shape != t.shape:
        raise ShapeMismatchError(
            f"bce_with_logits shape mismatch: {z.shape} vs {t.shape}"
        )
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_with_logits targets must be binary")
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    data = np.array(per.mean())
    n = z.size

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        logits._accumulate(float(g) * (sig - t) / n)

    return _make(data, (logits,), backward, "bce_with_logits")


def diag_cross_entropy(x: Tensor) -> Tensor:
    """Row-wise softmax cross-entropy with target class = row index, mean over rows."""
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeMismatchError(f"diag_cross_entropy needs a square matrix, got {x.shape}")
    n = x.shape[0]
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    data = np.array((lse - np.diag(z)).mean())

    def backward(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        x._accumulate(float(g) * (p - np.eye(n)) / n)

    return _make(data, (x,), backward, "diag_cross_entropy")


def masked_softmax_nll(x: Tensor, mask: np.ndarray) -> Tensor:
    """Per row: negative log of the softmax mass on masked-in positions, mean over rows."""
    if x.data.ndim != 2 or x.data.shape != mask.shape:
        raise ShapeMismatchError(
            f"masked_softmax_nll shape mismatch: {x.shape} vs {mask.shape}"
        )
    if not np.all(mask.sum(axis=1) >= 1):
        raise DegenerateInputError("masked_softmax_nll: a row has no selected position")
    m = mask.astype(np.float64)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    q = (p * m).sum(axis=1)
    data = np.array((-np.log(q)).mean())
    n = x.shape[0]

    def backward(g):
        x._accumulate(float(g) * p * (q[:, None] - m) / q[:, None] / n)

    return _make(data, (x,), backward, "masked_softmax_nll")


# -- verification oracle ----------------------------------------------


def grad_check(f, x: Tensor, h: float = 1e-5, sample: int | None = None,
               seed: int = 0) -> float:
    """Compare the tape gradient of scalar ``f(x)`` against central differences.

    Returns max over (optionally sampled) coordinates of
    |analytic - numeric| / max(1, |numeric|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    y = f(probe)
    if not np.isfinite(y.data):
        raise NumericError("grad_check: f(x) is not finite")
    y.backward()
    analytic = probe.grad.reshape(-1).copy()

    flat = x.data.reshape(-1).copy()
    idx = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        idx = np.random.default_rng(seed).choice(flat.size, size=sample, replace=False)

    def eval_at(values: np.ndarray) -> float:
        t = Tensor(values.reshape(x.shape))
        return float(f(t).data)

    worst = 0.0
    for i in idx:
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        numeric = (eval_at(plus) - eval_at(minus)) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
