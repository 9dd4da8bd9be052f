"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value in the package is a `Tensor`: a float64 numpy array plus an
optional gradient. Operations executed while a `Tape` is active are recorded
in execution order; `Tape.backward` replays the record in reverse and
accumulates gradients on every tensor that requires them. With no active
tape, the same functions are plain numpy forward computations (used for
inference).

Supported primitives: matmul (with leading batch dims), add, mul,
permute/reshape, slice/pad/concat, softmax over the last axis, layer norm,
gelu, exp, sum, conv2d, nearest-neighbor 2x upsampling, 2x2 max pooling,
binary/softmax cross-entropy, smooth-L1. Everything else in the package is
composed from these.

Determinism: all reductions use numpy's fixed deterministic algorithms and
every backward accumulation happens in reverse execution order, so repeated
forward+backward runs on identical inputs are bit-identical.
"""

from __future__ import annotations

import os
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "tensor",
    "matmul",
    "add",
    "mul",
    "permute",
    "reshape",
    "slice_",
    "pad",
    "concat",
    "softmax_last",
    "layer_norm",
    "gelu",
    "exp",
    "sum_all",
    "conv2d",
    "upsample2x_nearest",
    "maxpool2x2",
    "bce_with_logits_mean",
    "softmax_cross_entropy_mean",
    "smooth_l1",
]

# Optional per-op finiteness checking (slow); NaN/Inf anywhere is an error
# state per the Tensor contract, so tests can flip this on.
_CHECK_FINITE = os.environ.get("VDF_CHECK_FINITE", "") not in ("", "0")


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


class Tensor:
    """A dense float64 array with an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise ContractError("tensor holds non-finite values")
        self.data = arr
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

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar; constants are wrapped as grad-free tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _NEG_ONE))

    def __neg__(self):
        return mul(self, _NEG_ONE)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return slice_(self, key)


class Parameter(Tensor):
    """A named, trainable tensor. Names must be unique within a model."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_NEG_ONE = Tensor(-1.0)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations.

    Each entry holds the output tensor, its input tensors, and a closure
    mapping the output gradient to per-input gradients. The reverse pass
    walks entries last-to-first, so gradient accumulation order is fixed by
    execution order (bit-deterministic).
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._entries.append((out, inputs, backward))

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(input) onto .grad of every recorded input."""
        if loss.shape != ():
            raise ContractError(
                f"backward expects a scalar loss, got shape {loss.shape}"
            )
        loss.grad = np.ones((), dtype=np.float64)
        for out, inputs, backward in reversed(self._entries):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                # Gradient arrays are never mutated in place, so holding a
                # view returned by a backward closure is safe.
                inp.grad = g if inp.grad is None else inp.grad + g


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _result(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Build the output tensor and record the op if a tape is listening."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise ContractError("operation produced non-finite values")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = bool(needs)
    out.grad = None
    if needs:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Elementwise and linear algebra
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading batch dimensions follow numpy semantics; a 2D operand (the usual
    weight-matrix case) is broadcast across the other operand's batch dims
    and receives the summed gradient.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), backward)


def permute(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    data = np.transpose(t.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(data, (t,), backward)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = np.reshape(t.data, shape)
    orig = t.shape

    def backward(g):
        return (np.reshape(g, orig),)

    return _result(data, (t,), backward)


def slice_(t: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing; gradient is zero-embedded."""
    data = t.data[key]
    orig = t.shape

    def backward(g):
        full = np.zeros(orig, dtype=np.float64)
        full[key] = g
        return (full,)

    return _result(data, (t,), backward)


def pad(t: Tensor, pad_width: Sequence[tuple], value: float = 0.0) -> Tensor:
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    data = np.pad(t.data, pad_width, constant_values=value)
    crop = tuple(
        slice(lo, lo + n) for (lo, _), n in zip(pad_width, t.shape)
    )

    def backward(g):
        return (g[crop],)

    return _result(data, (t,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _result(data, tuple(tensors), backward)


def softmax_last(t: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (t,), backward)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    c = t.shape[-1]
    mu = t.data.mean(axis=-1, keepdims=True)
    xc = t.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        sum_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=sum_axes)
        dbeta = g.sum(axis=sum_axes)
        dxhat = g * gamma.data
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return dx, dgamma, dbeta

    return _result(data, (t, gamma, beta), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(t.data * _INV_SQRT2))
    data = t.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * t.data * t.data)
        return (g * (cdf + t.data * pdf),)

    return _result(data, (t,), backward)


def exp(t: Tensor) -> Tensor:
    data = np.exp(t.data)

    def backward(g):
        return (g * data,)

    return _result(data, (t,), backward)


def sum_all(t: Tensor) -> Tensor:
    data = np.asarray(t.data.sum(), dtype=np.float64)
    shape = t.shape

    def backward(g):
        return (np.broadcast_to(g, shape),)

    return _result(data, (t,), backward)


# --------------------------------------------------------------------------
# Spatial ops (single image, channels-first)
# --------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    """(C, Hp, Wp) -> (C*kh*kw, ho*wo) patch matrix."""
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + ho * stride : stride, j : j + wo * stride : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution of a (C,H,W) image with (Cout,Cin,kh,kw) weights."""
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channels differ: input {x.shape}, weight {weight.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    data = (w2 @ cols + bias.data[:, None]).reshape(cout, ho, wo)

    def backward(g):
        g2 = g.reshape(cout, ho * wo)
        dw = (g2 @ cols.T).reshape(weight.shape)
        db = g2.sum(axis=1)
        dcols = (w2.T @ g2).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros((cin, hp, wp), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[:, i, j]
        if padding:
            dx = dxp[:, padding : padding + h, padding : padding + w]
        else:
            dx = dxp
        return dx, dw, db

    return _result(data, (x, weight, bias), backward)


def upsample2x_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of a (C,H,W) map."""
    data = x.data.repeat(2, axis=1).repeat(2, axis=2)
    c, h, w = x.shape

    def backward(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _result(data, (x,), backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped.

    Ties within a block route the gradient to the first maximal cell in
    row-major order (deterministic).
    """
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"maxpool2x2 needs extents >= 2, got {x.shape}")
    blocks = (
        x.data[:, : h2 * 2, : w2 * 2]
        .reshape(c, h2, 2, w2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h2, w2, 4)
    )
    idx = blocks.argmax(axis=-1)
    data = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((c, h2, w2, 4), dtype=np.float64)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        dx = np.zeros((c, h, w), dtype=np.float64)
        dx[:, : h2 * 2, : w2 * 2] = (
            gb.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2 * 2, w2 * 2)
        )
        return (dx,)

    return _result(data, (x,), backward)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def bce_with_logits_mean(logits: Tensor, targets: Tensor) -> Tensor:
    """Binary cross-entropy with logits, averaged over all elements.

    Stable form: max(x,0) - x*y + log(1 + exp(-|x|)).
    """
    if logits.shape != targets.shape:
        raise ShapeError(
            f"bce shapes differ: logits {logits.shape}, targets {targets.shape}"
        )
    x, y = logits.data, targets.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = max(per.size, 1)
    data = np.asarray(per.sum() / n, dtype=np.float64)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * (sig - y) / n, None)

    return _result(data, (logits, targets), backward)


def softmax_cross_entropy_mean(logits: Tensor, onehot: Tensor) -> Tensor:
    """Mean softmax cross-entropy over the last axis against one-hot rows."""
    if logits.shape != onehot.shape:
        raise ShapeError(
            f"cross-entropy shapes differ: {logits.shape} vs {onehot.shape}"
        )
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    rows = max(logits.data.size // logits.shape[-1], 1)
    data = np.asarray(-(onehot.data * logp).sum() / rows, dtype=np.float64)

    def backward(g):
        p = np.exp(logp)
        return (g * (p - onehot.data) / rows, None)

    return _result(data, (logits, onehot), backward)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5*d^2/beta for |d| < beta, else |d| - beta/2."""
    if pred.shape != target.shape:
        raise ShapeError(
            f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}"
        )
    if beta <= 0:
        raise ContractError("smooth_l1 beta must be positive")
    d = pred.data - target.data
    ad = np.abs(d)
    data = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)

    def backward(g):
        gd = g * np.clip(d / beta, -1.0, 1.0)
        return gd, -gd

    return _result(data, (pred, target), backward)
