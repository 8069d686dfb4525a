"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`ComputationRecord` is active are appended
to it; :func:`backward` then walks the record in reverse to produce a
gradient for every parameter the record was opened with. Outside a record the
same functions simply evaluate, which is how evaluation-mode forwards and
finite-difference probes run.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "ContractError",
    "MissingRecordError",
    "NonFiniteError",
    "backward",
    "grad_check",
    "precision",
    "set_precision",
    "get_dtype",
    "strict",
    "set_strict",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32
_strict = False
_local = threading.local()


class ContractError(ValueError):
    """Raised when an operation's precondition does not hold."""


class MissingRecordError(RuntimeError):
    """Raised when backward is asked about a tensor that no live record produced."""


class NonFiniteError(FloatingPointError):
    """Raised in strict mode when an operation produces NaN or Inf."""


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


def set_strict(flag: bool) -> None:
    global _strict
    _strict = bool(flag)


@contextlib.contextmanager
def strict(flag: bool = True) -> Iterator[None]:
    previous = _strict
    set_strict(flag)
    try:
        yield
    finally:
        set_strict(previous)


class Tensor:
    """An array plus an optional handle into the active computation record."""

    __slots__ = ("data", "node", "record")

    def __init__(self, data, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or _dtype)
        self.node: int | None = None
        self.record: ComputationRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, node={self.node})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    param: str | None = None


@dataclass
class ComputationRecord:
    """Append-only tape of operations, opened over a set of named parameters.

    Only tensors listed in ``params`` become differentiable leaves; every other
    tensor entering an operation is treated as a constant. Use as a context
    manager to make it the active record for the current thread.
    """

    params: Mapping[str, Tensor] = field(default_factory=dict)
    nodes: list[_Node] = field(default_factory=list)
    cleared: bool = False

    def __post_init__(self):
        self.params = dict(self.params)
        self._leaves = {id(t): name for name, t in self.params.items()}

    def __enter__(self) -> "ComputationRecord":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _node_of(self, t: Tensor) -> int | None:
        if t.record is self and t.node is not None:
            return t.node
        name = self._leaves.get(id(t))
        if name is None:
            return None
        self.nodes.append(_Node("param", (), None, name))
        t.record, t.node = self, len(self.nodes) - 1
        return t.node

    def clear(self) -> None:
        self.nodes = []
        self.cleared = True
        for t in self.params.values():
            if t.record is self:
                t.record, t.node = None, None


def _stack() -> list[ComputationRecord]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_record() -> ComputationRecord | None:
    stack = _stack()
    return stack[-1] if stack else None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_dtype))


def _emit(kind: str, out: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    if _strict and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    result = Tensor(out)
    rec = active_record()
    if rec is None:
        return result
    result.record = rec
    ids = tuple(rec._node_of(t) for t in inputs)
    if all(i is None for i in ids):
        return result
    rec.nodes.append(_Node(kind, tuple(-1 if i is None else i for i in ids), grad_fn))
    result.node = len(rec.nodes) - 1
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # Written so NaN propagates instead of being zeroed.
    out = np.where(a.data <= 0, 0, a.data).astype(a.data.dtype)
    return _emit("relu", out, (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Branches keep exp() arguments non-positive.
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(x.dtype)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), grad_fn)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if not 0 <= p < 1:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1 - p)
    return _emit("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[start:stop]`` along the leading axis."""
    shape, dtype = a.shape, a.data.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[start:stop] = g
        return (full,)

    return _emit("take_rows", a.data[start:stop], (a,), grad_fn)


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis)), (a,), grad_fn)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------- convolution


def _pad(x: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _windows(x: np.ndarray, kernel, stride) -> np.ndarray:
    """(N, C, H, W) -> (N, C, Ho, Wo, kh, kw) strided view."""
    view = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=(2, 3))
    return view[:, :, :: stride[0], :: stride[1]]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation of (N, C, H, W) with (F, C, kh, kw) filters."""
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ContractError(f"conv2d expects {cw} input channels, got {c}")
    sh, sw = stride
    xp = _pad(x.data, padding)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ContractError(f"conv2d kernel {(kh, kw)} larger than padded input {xp.shape[2:]}")
    cols = _windows(xp, (kh, kw), stride)
    ho, wo = cols.shape[2], cols.shape[3]
    wd = weight.data
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, wd, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[..., i, j].transpose(0, 3, 1, 2)
        ph, pw = padding
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _emit("conv2d", out, inputs, grad_fn)


def max_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Max pooling without padding; ties route gradient to the first maximum in row-major order."""
    kh, kw = kernel
    sh, sw = stride or kernel
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise ContractError(f"max_pool2d kernel {kernel} larger than input {(h, w)}")
    cols = _windows(x.data, (kh, kw), (sh, sw))
    ho, wo = cols.shape[2], cols.shape[3]
    flat = cols.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            hit = arg == k
            if hit.any():
                gx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += g * hit
        return (gx,)

    return _emit("max_pool2d", np.ascontiguousarray(out), (x,), grad_fn)


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, *, mean_: np.ndarray | None = None,
               var_: np.ndarray | None = None, eps: float = 1e-5):
    """Per-channel normalization over every axis except axis 1.

    With ``mean_``/``var_`` given the statistics are constants (evaluation
    mode); otherwise batch statistics are used and returned alongside the
    output so the caller can update running estimates.
    """
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = [1] * x.data.ndim
    bshape[1] = -1
    xd = x.data
    training = mean_ is None
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
    else:
        mu, var = mean_.astype(xd.dtype), var_.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gamma = scale.data.reshape(bshape)
    out = xhat * gamma + shift.data.reshape(bshape)
    m = xd.size // xd.shape[1]

    def grad_fn(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gxhat = g * gamma
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return (gx, gscale, gshift)

    result = _emit("batch_norm", out, (x, scale, shift), grad_fn)
    if training:
        return result, mu, var
    return result


# ---------------------------------------------------------------- gradients


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every parameter of its record.

    Parameters the loss does not reach get zero arrays. The record is cleared
    afterwards, so a second call on the same loss raises MissingRecordError.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    rec = loss.record
    if rec is None or rec.cleared:
        raise MissingRecordError("loss was not computed inside a live ComputationRecord")
    grads: list[np.ndarray | None] = [None] * len(rec.nodes)
    if loss.node is not None:
        grads[loss.node] = np.ones(loss.shape, dtype=loss.data.dtype)
        for idx in range(loss.node, -1, -1):
            g = grads[idx]
            node = rec.nodes[idx]
            if g is None or node.backward is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if inp < 0 or gi is None:
                    continue
                grads[inp] = gi if grads[inp] is None else grads[inp] + gi
    out: dict[str, np.ndarray] = {}
    for name, t in rec.params.items():
        g = grads[t.node] if (t.record is rec and t.node is not None) else None
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    rec.clear()
    return out


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    *,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-12,
) -> float:
    """Max relative error between :func:`backward` and central differences.

    ``f`` takes no arguments and must read the current values of ``params``.
    With ``max_entries`` set, at most that many entries per parameter tensor
    are probed (chosen by ``seed``); otherwise every entry is.

    Each entry scores ``|analytic - numeric| / max(floor, |analytic| + |numeric|)``.
    Raise ``floor`` above the finite-difference roundoff (about
    ``ulp(f) / eps``) when the network has entries whose true gradient is zero.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    with ComputationRecord(params):
        loss = f()
    if loss.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    analytic = backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(a_flat[i])
            worst = max(worst, abs(a - numeric) / max(floor, abs(a) + abs(numeric)))
    return worst
