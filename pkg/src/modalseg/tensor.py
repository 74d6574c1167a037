"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable primitive records
its operands and a closure mapping the output gradient to operand gradients.
:func:`backward` walks a :class:`GradTape` (an ordered record of executed
primitives) in reverse and accumulates gradients into leaf tensors.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf in the checked profile."""


@dataclass(frozen=True)
class Profile:
    name: str
    dtype: type
    check_finite: bool


PROFILES = {
    "test": Profile("test", np.float64, True),
    "train": Profile("train", np.float32, False),
}

_state = threading.local()
_profile = PROFILES["test"]
# op name -> multiplier applied to that op's operand gradients (negative-control hook)
_grad_corruption: dict[str, float] = {}


def get_profile() -> Profile:
    return _profile


def set_profile(name: str) -> Profile:
    global _profile
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}")
    _profile = PROFILES[name]
    return _profile


@contextlib.contextmanager
def profile(name: str):
    previous = _profile.name
    set_profile(name)
    try:
        yield _profile
    finally:
        set_profile(previous)


def corrupt_gradient(op: str, factor: float | None) -> None:
    """Scale the gradient rule of ``op`` by ``factor`` (``None`` restores it).

    Only meant for negative-control tests of the gradient checker.
    """
    if factor is None:
        _grad_corruption.pop(op, None)
    else:
        _grad_corruption[op] = float(factor)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _profile.dtype)
        if arr.size == 0:
            raise ValueError("tensor extents must be positive")
        if _profile.check_finite and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = "detach"
        out.name = None
        return out

    def backward(self, tape: GradTape | None = None) -> None:
        backward(self, tape)

    # operator sugar; the functions live below ------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class GradTape:
    """Ordered record of primitives; operands always precede results.

    Use as a context manager to record every primitive executed inside the
    block, or build one after the fact with :meth:`from_loss`.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._previous = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def __enter__(self) -> GradTape:
        self._previous = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous

    @classmethod
    def from_loss(cls, loss: Tensor) -> GradTape:
        tape = cls()
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent._backward is not None:
                    stack.append((parent, False))
        return tape


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    if _profile.check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward_fn
        tape = getattr(_state, "tape", None)
        if tape is not None:
            tape.record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor, tape: GradTape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is None:
        tape = GradTape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        scale = _grad_corruption.get(node.op)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if scale is not None:
                pg = pg * scale
            if parent._backward is None:
                pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(f, x: Tensor, eps: float = 1e-5, indices=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    ``indices`` restricts the check to a subset of flat positions of ``x``.
    """
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for k in positions:
            orig = flat[k]
            flat[k] = orig + eps
            plus = float(f(x).data)
            flat[k] = orig - eps
            minus = float(f(x).data)
            flat[k] = orig
            numeric = (plus - minus) / (2 * eps)
            a = analytic.reshape(-1)[k]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data**exponent, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def clip_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor

    def bw(g):
        return (g * mask,)

    return _result(np.maximum(a.data, floor), (a,), bw, "clip_min")


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[k] for k in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra and neural primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul extent mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for rank {x.ndim}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm affine extents {gain.shape}/{bias.shape} do not match {d}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def bw(g):
        gxhat = g * gain.data
        gx = inv_std * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), bw, "layer_norm")


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), bw, "gelu")


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    if k > size + 2 * padding:
        raise ValueError(f"kernel {k} larger than padded input {size + 2 * padding}")
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           channels_last: bool = False) -> Tensor:
    """Cross-correlation of ``x`` [B, C, H, W] with ``kernel`` [O, C, K, K].

    With ``channels_last`` the input is [B, H, W, C] and the output [B, Ho, Wo, O].
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects a rank-4 input and kernel [O,C,K,K]")
    xd = x.data if channels_last else x.data.transpose(0, 2, 3, 1)
    batch, height, width, channels = xd.shape
    out_ch, k_ch, kh, kw = kernel.shape
    if k_ch != channels:
        raise ValueError(f"channel mismatch: input {channels}, kernel {k_ch}")
    ho = _out_extent(height, kh, stride, padding)
    wo = _out_extent(width, kw, stride, padding)
    xp = _pad_hw_last(xd, padding)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = windows.reshape(batch, ho, wo, channels * kh * kw)
    wmat = kernel.data.reshape(out_ch, -1)
    out = cols @ wmat.T  # [B, Ho, Wo, O]
    parents = (x, kernel)
    if bias is not None:
        out += bias.data
        parents = parents + (bias,)

    def bw(g):
        g_rows = g if channels_last else g.transpose(0, 2, 3, 1)
        gk = None
        if kernel.requires_grad:
            gk = (g_rows.reshape(-1, out_ch).T @ cols.reshape(-1, wmat.shape[1])).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = (g_rows @ wmat).reshape(batch, ho, wo, channels, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                        gcols[..., i, j]
                    )
            gx = gxp[:, padding : padding + height, padding : padding + width] if padding else gxp
            if not channels_last:
                gx = gx.transpose(0, 3, 1, 2)
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g_rows.reshape(-1, out_ch).sum(axis=0),)
        return grads

    if not channels_last:
        out = out.transpose(0, 3, 1, 2)
    return _result(np.ascontiguousarray(out), parents, bw, "conv2d")


def _pad_hw_last(a: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    """Pad the two spatial axes of a channel-last array [.., H, W, C]."""
    if padding == 0:
        return a
    width = [(0, 0)] * (a.ndim - 3) + [(padding, padding), (padding, padding), (0, 0)]
    return np.pad(a, width, constant_values=value)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Per-channel stride-1 convolution of channel-last ``x`` [B, H, W, C]; ``kernel`` is [C, K, K]."""
    batch, height, width, channels = x.shape
    if kernel.shape[0] != channels:
        raise ValueError(f"channel mismatch: input {channels}, kernel {kernel.shape[0]}")
    kh, kw = kernel.shape[1:]
    ho = _out_extent(height, kh, 1, padding)
    wo = _out_extent(width, kw, 1, padding)
    xp = _pad_hw_last(x.data, padding)
    w = kernel.data.transpose(1, 2, 0)
    out = np.zeros((batch, ho, wo, channels), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + ho, j : j + wo] * w[i, j]
    parents = (x, kernel)
    if bias is not None:
        out += bias.data
        parents = parents + (bias,)

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                if gxp is not None:
                    gxp[:, i : i + ho, j : j + wo] += g * w[i, j]
                gk[i, j] = np.einsum("bhwc,bhwc->c", g, xp[:, i : i + ho, j : j + wo])
        gx = None
        if gxp is not None:
            gx = gxp[:, padding : padding + height, padding : padding + width] if padding else gxp
        grads = (gx, gk.transpose(2, 0, 1))
        if bias is not None:
            grads = grads + (g.reshape(-1, channels).sum(axis=0),)
        return grads

    return _result(out, parents, bw, "depthwise_conv2d")


def avg_pool3(x: Tensor) -> Tensor:
    """3x3 average pool over channel-last [.., H, W, C], stride 1, same padding.

    Padded cells are not counted, so constant inputs stay constant.
    """
    height, width = x.shape[-3:-1]
    xp = _pad_hw_last(x.data, 1)
    ones = np.pad(np.ones((height, width), dtype=x.data.dtype), 1)
    total = np.zeros_like(x.data)
    count = np.zeros((height, width), dtype=x.data.dtype)
    for i in range(3):
        for j in range(3):
            total += xp[..., i : i + height, j : j + width, :]
            count += ones[i : i + height, j : j + width]
    inv = (1.0 / count)[:, :, None]

    def bw(g):
        gs = g * inv
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[..., i : i + height, j : j + width, :] += gs
        return (gxp[..., 1:-1, 1:-1, :],)

    return _result(total * inv, (x,), bw, "avg_pool3")


def max_pool3(x: Tensor) -> Tensor:
    """3x3 max pool over channel-last [.., H, W, C], stride 1, same padding."""
    height, width = x.shape[-3:-1]
    xp = _pad_hw_last(x.data, 1, value=-np.inf)
    out = xp[..., 0:height, 0:width, :].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for k in range(1, 9):
        i, j = divmod(k, 3)
        cand = xp[..., i : i + height, j : j + width, :]
        better = cand > out
        out = np.where(better, cand, out)
        arg[better] = k

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            gxp[..., i : i + height, j : j + width, :] += np.where(arg == k, g, 0.0)
        return (gxp[..., 1:-1, 1:-1, :],)

    return _result(out, (x,), bw, "max_pool3")


def interpolation_matrix(out_size: int, in_size: int, dtype=None) -> np.ndarray:
    """Linear-interpolation weights [out, in], half-pixel (align_corners=False)."""
    if out_size < 1:
        raise ValueError("output extent must be >= 1")
    dtype = dtype or _profile.dtype
    mat = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        mat[i, i0] += 1.0 - lam
        mat[i, i1] += lam
    return mat


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with bilinear weights (align_corners=False)."""
    height, width = x.shape[-2:]
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    if (out_h, out_w) == (height, width):
        return x
    rows = interpolation_matrix(out_h, height, x.data.dtype)
    cols = interpolation_matrix(out_w, width, x.data.dtype)
    out = rows @ x.data @ cols.T

    def bw(g):
        return (rows.T @ g @ cols,)

    return _result(out, (x,), bw, "bilinear_upsample")
