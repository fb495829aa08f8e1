"""Dense float64 tensors with recorded reverse-mode differentiation.

Every operation that sees a gradient-requiring input appends one entry to
the active tape. Calling ``backward`` on a scalar loss replays the tape in
reverse and fills ``.grad`` on every reachable tensor that requires it.
Tensors are treated as immutable once created; the tape is confined to a
single training thread, while forward-only evaluation under ``no_grad`` is
safe to run in parallel over independent inputs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "ConfigError",
    "Tensor",
    "Tape",
    "tape",
    "no_grad",
    "backward",
    "matmul",
    "softmax",
    "bilinear_sample",
    "sigmoid",
    "inverse_sigmoid",
    "sigmoid_shift",
    "gelu",
    "relu",
    "absolute",
    "exp",
    "log",
    "concat",
    "take_rows",
    "masked_fill",
    "standardize",
    "extract_patches",
    "bce_with_logits",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """Inconsistent configuration (level shapes, strides, counts)."""


# Clamp for logit-space keypoint updates; exp(30) stays comfortably finite
# while sigmoid outputs remain strictly inside (0, 1).
SHIFT_CLAMP = 30.0


class Tape:
    """Append-only record of executed operations, cleared between steps."""

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def append(self, out: "Tensor", bwd: Callable[[np.ndarray], None]) -> None:
        self._entries.append((out, bwd))

    def clear(self) -> None:
        self._entries.clear()


_TAPE = Tape()
_GRAD_ENABLED = True
# Incremented per backward call so `.grad` only ever exposes gradients from
# the most recent call.
_BACKWARD_EPOCH = 0


def tape() -> Tape:
    """The active computation record."""
    return _TAPE


@contextmanager
def no_grad():
    """Disable recording; ops executed inside produce constant tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense n-dimensional float64 array, row-major, optionally differentiable."""

    __slots__ = ("data", "requires_grad", "_grad", "_grad_epoch")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._grad_epoch = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray | None:
        """Gradient from the most recent backward call, else None."""
        if self._grad_epoch == _BACKWARD_EPOCH:
            return self._grad
        return None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, bwd: Callable[[np.ndarray], None]) -> Tensor:
    _TAPE.append(out, bwd)
    return out


def _tracks(*ts: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._grad_epoch != _BACKWARD_EPOCH:
        t._grad = np.zeros_like(t.data)
        t._grad_epoch = _BACKWARD_EPOCH
    t._grad += g


def backward(loss: Tensor) -> None:
    """Replay the active tape in reverse from ``loss``, filling gradients.

    Gradients belong to this call only: each backward starts a fresh epoch,
    and ``.grad`` of tensors untouched this epoch reads as None.
    """
    global _BACKWARD_EPOCH
    _BACKWARD_EPOCH += 1
    loss._grad = np.ones_like(loss.data)
    loss._grad_epoch = _BACKWARD_EPOCH
    for out, bwd in reversed(_TAPE._entries):
        if out._grad_epoch != _BACKWARD_EPOCH:
            continue  # not an ancestor of the loss
        bwd(out._grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes introduced or stretched by broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, requires_grad=_tracks(a, b))
    if not out.requires_grad:
        return out

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record(out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, requires_grad=_tracks(a, b))
    if not out.requires_grad:
        return out

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _record(out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, requires_grad=_tracks(a, b))
    if not out.requires_grad:
        return out

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _record(out, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data, requires_grad=_tracks(a, b))
    if not out.requires_grad:
        return out

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=_tracks(a))
    if not out.requires_grad:
        return out
    return _record(out, lambda g: _accum(a, -g))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = Tensor(a.data ** p, requires_grad=_tracks(a))
    if not out.requires_grad:
        return out
    return _record(out, lambda g: _accum(a, g * p * a.data ** (p - 1.0)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, requires_grad=_tracks(a))
    if not out.requires_grad:
        return out
    return _record(out, lambda g: _accum(a, g * y))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), requires_grad=_tracks(a))
    if not out.requires_grad:
        return out
    return _record(out, lambda g: _accum(a, g / a.data))


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), requires_grad=_tracks(a))
    if not out.requires_grad:
        return out
    return _record(out, lambda g: _accum(a, g * np.sign(a.data)))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=_tracks(a))
    if not out.requires_grad:
        return out
    return _record(out, lambda g: _accum(a, g * (a.data > 0.0)))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian-error linear unit, exact erf form."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = Tensor(a.data * cdf, requires_grad=_tracks(a))
    if not out.requires_grad:
        return out

    def bwd(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        _accum(a, g * (cdf + a.data * pdf))

    return _record(out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    out = Tensor(y, requires_grad=_tracks(a))
    if not out.requires_grad:
        return out
    return _record(out, lambda g: _accum(a, g * y * (1.0 - y)))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    pos = x >= 0
    y = np.empty_like(x)
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y


def inverse_sigmoid(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Logit of ``a`` clamped into [eps, 1-eps], so outputs stay finite."""
    xc = np.clip(a.data, eps, 1.0 - eps)
    out = Tensor(np.log(xc) - np.log1p(-xc), requires_grad=_tracks(a))
    if not out.requires_grad:
        return out

    def bwd(g):
        inside = (a.data > eps) & (a.data < 1.0 - eps)
        _accum(a, g * inside / (xc * (1.0 - xc)))

    return _record(out, bwd)


def sigmoid_shift(q: Tensor, delta: Tensor) -> Tensor:
    """Additive logit-space update of a probability: sigmoid(logit(q) + delta).

    Evaluated in probability space as q / (q + (1-q)*exp(-delta)), which
    returns ``q`` bit-exactly when ``delta`` is zero. ``delta`` is clamped to
    +-SHIFT_CLAMP so the output stays strictly inside (0, 1) for any finite
    update.
    """
    dc = np.clip(delta.data, -SHIFT_CLAMP, SHIFT_CLAMP)
    u = np.exp(-dc)
    den = q.data + (1.0 - q.data) * u
    out = Tensor(q.data / den, requires_grad=_tracks(q, delta))
    if not out.requires_grad:
        return out

    def bwd(g):
        den2 = den * den
        _accum(q, _unbroadcast(g * u / den2, q.shape))
        inside = np.abs(delta.data) < SHIFT_CLAMP
        gd = g * q.data * (1.0 - q.data) * u / den2 * inside
        _accum(delta, _unbroadcast(gd, delta.shape))

    return _record(out, bwd)


# -- shape manipulation ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_tracks(a, b))
    if not out.requires_grad:
        return out

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=_tracks(a))
    if not out.requires_grad:
        return out
    return _record(out, lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    out = Tensor(a.data.transpose(axes), requires_grad=_tracks(a))
    if not out.requires_grad:
        return out
    inv = None if axes is None else np.argsort(axes)
    return _record(out, lambda g: _accum(a, g.transpose(inv)))


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx], requires_grad=_tracks(a))
    if not out.requires_grad:
        return out

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _record(out, bwd)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d (or higher) tensor along axis 0."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx], requires_grad=_tracks(a))
    if not out.requires_grad:
        return out

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _record(out, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis),
                 requires_grad=_tracks(*ts))
    if not out.requires_grad:
        return out
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _record(out, bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=_tracks(a))
    if not out.requires_grad:
        return out

    def bwd(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(ax % a.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _record(out, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else (
        np.prod([a.shape[ax % a.ndim] for ax in ((axis,) if isinstance(axis, int) else axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / float(n)))


# -- normalization and attention primitives -------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows of -inf are not allowed."""
    if axis >= a.ndim or axis < -a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=_tracks(a))
    if not out.requires_grad:
        return out

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _record(out, bwd)


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value`` (no grad there)."""
    keep = np.asarray(keep, dtype=bool)
    out = Tensor(np.where(keep, a.data, value), requires_grad=_tracks(a))
    if not out.requires_grad:
        return out
    return _record(out, lambda g: _accum(a, g * keep))


def standardize(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv
    out = Tensor(y, requires_grad=_tracks(a))
    if not out.requires_grad:
        return out

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - y * gy))

    return _record(out, bwd)


def bilinear_sample(feature_map: Tensor, points: Tensor) -> Tensor:
    """Sample ``feature_map`` [H, W, C] at continuous pixel coords [P, 2].

    Points are (x, y) with integer values landing exactly on grid cells;
    locations outside the map read as zero (zero-padded border). The result
    [P, C] is differentiable with respect to both map values and coordinates.
    """
    if feature_map.ndim != 3:
        raise ShapeError(f"bilinear_sample expects [H, W, C] map, got {feature_map.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample expects [P, 2] points, got {points.shape}")
    H, W, C = feature_map.shape
    x = points.data[:, 0]
    y = points.data[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)

    corner_vals = []
    corner_w = []
    corner_idx = []
    m = feature_map.data.reshape(H * W, C)
    for dx, dy, w in (
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ):
        cx = x0 + dx
        cy = y0 + dy
        valid = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        flat = np.where(valid, cy * W + cx, 0)
        vals = m[flat] * valid[:, None]
        corner_vals.append(vals)
        corner_w.append(w * valid)
        corner_idx.append((flat, valid))

    result = sum(w[:, None] * v for w, v in zip(corner_w, corner_vals))
    out = Tensor(result, requires_grad=_tracks(feature_map, points))
    if not out.requires_grad:
        return out

    def bwd(g):
        if feature_map.requires_grad:
            # one flat bincount beats four np.add.at scatters by an order
            # of magnitude; invalid corners already carry zero weight
            idx = np.concatenate([f for f, _ in corner_idx])
            wg = np.concatenate([w[:, None] * g for w in corner_w])
            flat2 = idx[:, None] * C + np.arange(C)
            gm = np.bincount(flat2.ravel(), weights=wg.ravel(),
                             minlength=H * W * C)
            _accum(feature_map, gm.reshape(H, W, C))
        if points.requires_grad:
            v00, v10, v01, v11 = corner_vals
            ddx = (v10 - v00) * (1.0 - fy)[:, None] + (v11 - v01) * fy[:, None]
            ddy = (v01 - v00) * (1.0 - fx)[:, None] + (v11 - v10) * fx[:, None]
            gp = np.stack([(g * ddx).sum(axis=1), (g * ddy).sum(axis=1)], axis=1)
            _accum(points, gp)

    return _record(out, bwd)


def extract_patches(a: Tensor, kh: int, kw: int, stride: int, pad: int) -> Tensor:
    """im2col: [H, W, C] -> [H'*W', kh*kw*C] patch matrix for convolution."""
    H, W, C = a.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    padded = np.zeros((Hp, Wp, C))
    padded[pad:pad + H, pad:pad + W, :] = a.data

    iy = (np.arange(Ho) * stride)[:, None, None, None]
    ix = (np.arange(Wo) * stride)[None, :, None, None]
    ky = np.arange(kh)[None, None, :, None]
    kx = np.arange(kw)[None, None, None, :]
    rows = (iy + ky)  # [Ho, 1, kh, 1]
    cols = (ix + kx)  # [1, Wo, 1, kw]
    patches = padded[rows, cols]  # [Ho, Wo, kh, kw, C]
    out = Tensor(patches.reshape(Ho * Wo, kh * kw * C), requires_grad=_tracks(a))
    if not out.requires_grad:
        return out

    def bwd(g):
        gp = np.zeros((Hp, Wp, C))
        g5 = g.reshape(Ho, Wo, kh, kw, C)
        np.add.at(gp, (rows, cols), g5)
        _accum(a, gp[pad:pad + H, pad:pad + W, :])

    return _record(out, bwd)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(loss, requires_grad=_tracks(logits))
    if not out.requires_grad:
        return out
    return _record(out, lambda g: _accum(logits, g * (_sigmoid_np(x) - t)))


def assert_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values produced by {what}")
    return t
