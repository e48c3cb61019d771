"""Minimal reverse-mode differentiable kernel on float64 numpy arrays.

Every value is a :class:`Tensor` of rank at most 3, laid out as
``(batch, channels, frames)`` for activations.  Operations build a graph of
closures; :meth:`Tensor.backward` walks it in reverse topological order.
Backward passes are coded by hand and checked against central finite
differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "InvalidArgumentError",
    "ContractViolationError",
    "as_tensor",
    "conv1d",
    "linear",
    "sigmoid",
    "softmax",
    "layernorm",
    "concat",
    "split",
    "add",
    "mul",
    "add_scaled",
    "relu",
    "bmm",
    "transpose",
    "scale",
    "bce_loss",
    "adam_step",
]

BCE_EPS = 1e-7
LAYERNORM_EPS = 1e-5


class InvalidArgumentError(ValueError):
    """Raised when an operation receives arguments it cannot accept."""


class ContractViolationError(RuntimeError):
    """Raised when a caller breaks a documented precondition of a stateful op."""


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Parameters
    ----------
    data : array_like
        Values, rank 0 to 3.  Always copied to a contiguous float64 array.
    requires_grad : bool
        Whether gradients should be accumulated into :attr:`grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 3:
            raise InvalidArgumentError(f"tensor rank {arr.ndim} exceeds 3")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor.

        A scalar output uses an implicit seed gradient of one.
        """
        if grad is None:
            if self.data.size != 1:
                raise InvalidArgumentError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = ""
    live = [p for p in parents if _needs_grad(p)]
    if live:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@dataclass
class Parameter:
    """A named tensor plus its Adam moment buffers."""

    tensor: Tensor
    trainable: bool = True
    name: str = ""
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable
        self.tensor.name = self.name
        if self.trainable:
            self.m = np.zeros_like(self.tensor.data)
            self.v = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting sum."""
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise InvalidArgumentError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting product."""
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise InvalidArgumentError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    return _result(x.data * s, (x,), lambda g: (g * s,))


def add_scaled(a: Tensor, b: Tensor, s1, s2) -> Tensor:
    """``s1 * a + s2 * b``; ``s1``/``s2`` may be floats or scalar tensors."""
    if a.shape != b.shape:
        raise InvalidArgumentError(f"add_scaled: shape mismatch {a.shape} vs {b.shape}")
    if isinstance(s1, Tensor) or isinstance(s2, Tensor):
        return add(mul(as_tensor(s1), a), mul(as_tensor(s2), b))
    return _result(s1 * a.data + s2 * b.data, (a, b), lambda g: (g * s1, g * s2))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the channel axis of a ``(b, c, t)`` tensor per frame."""
    if x.data.ndim != 3 or gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise InvalidArgumentError(
            f"layernorm: x {x.shape}, gain {gain.shape}, shift {shift.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gw = gain.data[None, :, None]
    out = xhat * gw + shift.data[None, :, None]
    c = x.shape[1]

    def backward(g):
        dxhat = g * gw
        dx = inv / c * (c * dxhat - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return _result(out, (x, gain, shift), backward)


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-frame affine map over channels.

    ``x`` is ``(b, c_in, t)``, ``weight`` is ``(c_out, c_in)`` and ``bias``
    is ``(c_out,)``.  Returns ``(b, c_out, t)``.
    """
    if x.data.ndim != 3 or weight.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise InvalidArgumentError(f"linear: x {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise InvalidArgumentError(f"linear: bias {bias.shape} for weight {weight.shape}")
    w = weight.data
    out = np.matmul(w, x.data)
    if bias is not None:
        out += bias.data[None, :, None]

    def backward(g):
        gx = np.matmul(w.T, g)
        gw = np.tensordot(g, x.data, axes=([0, 2], [0, 2]))
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(n, i, k) @ (n, k, j)``."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise InvalidArgumentError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return np.matmul(g, b.data.transpose(0, 2, 1)), np.matmul(a.data.transpose(0, 2, 1), g)

    return _result(out, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes of a rank-3 tensor."""
    if x.data.ndim != 3:
        raise InvalidArgumentError("transpose expects a rank-3 tensor")
    return _result(x.data.transpose(0, 2, 1).copy(), (x,), lambda g: (g.transpose(0, 2, 1),))


# ---------------------------------------------------------------------------
# structure


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise InvalidArgumentError("concat of an empty sequence")
    ref = xs[0].shape
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            n != m for ax, (n, m) in enumerate(zip(x.shape, ref)) if ax != axis % len(ref)
        ):
            raise InvalidArgumentError(f"concat: shape {x.shape} incompatible with {ref}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(xs), backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`concat`."""
    if sum(sizes) != x.shape[axis]:
        raise InvalidArgumentError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.data.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)

        def backward(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        outs.append(_result(x.data[sl].copy(), (x,), backward))
        start += n
    return outs


# ---------------------------------------------------------------------------
# convolution


def _shift_matrices(n: int, k: int, dilation: int) -> np.ndarray:
    """``(k, n, n)`` stack; tap ``j`` reads offset ``(j - k // 2) * dilation``."""
    out = np.zeros((k, n, n))
    rows = np.arange(n)
    for j in range(k):
        cols = rows + (j - k // 2) * dilation
        ok = (cols >= 0) & (cols < n)
        out[j, rows[ok], cols[ok]] = 1.0
    return out


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           dilation: int = 1, axis: str = "time") -> Tensor:
    """Dilated 1-D convolution with "same" zero padding.

    Parameters
    ----------
    x : Tensor
        Input of shape ``(b, c, t)``.
    weight : Tensor
        For ``axis="time"``: ``(c_out, c_in, k)``, mixing channels.
        For ``axis="channel"``: ``(k,)``, a single kernel slid along the
        channel axis and shared by every frame.
    bias : Tensor, optional
        ``(c_out,)`` for the time axis, ``(1,)`` for the channel axis.
    dilation : int
        Tap spacing, at least 1.
    axis : {"time", "channel"}
        Axis the kernel slides along.

    Returns
    -------
    Tensor
        Same length as ``x`` along the convolved axis.  Taps that fall
        outside the axis read zeros.
    """
    if dilation < 1 or int(dilation) != dilation:
        raise InvalidArgumentError(f"dilation must be a positive integer, got {dilation}")
    if x.data.ndim != 3:
        raise InvalidArgumentError(f"conv1d expects a (b, c, t) input, got {x.shape}")
    k = weight.shape[-1]
    if k % 2 == 0:
        raise InvalidArgumentError(f"kernel size must be odd, got {k}")
    half = k // 2
    if axis == "time":
        if x.shape[2] == 0:
            raise InvalidArgumentError("conv1d over an empty time axis")
        if weight.data.ndim != 3 or weight.shape[1] != x.shape[1]:
            raise InvalidArgumentError(f"conv1d: weight {weight.shape} for input {x.shape}")
        c_out = weight.shape[0]
        if bias is not None and bias.shape != (c_out,):
            raise InvalidArgumentError(f"conv1d: bias {bias.shape} for {c_out} outputs")
        pad = half * dilation
        t = x.shape[2]
        xp = np.zeros(x.shape[:2] + (t + 2 * pad,))
        xp[:, :, pad:pad + t] = x.data
        taps = [xp[:, :, j * dilation:j * dilation + t] for j in range(k)]
        w = weight.data
        out = np.zeros((x.shape[0], c_out, t))
        for j in range(k):
            out += np.matmul(w[:, :, j], taps[j])
        if bias is not None:
            out += bias.data[None, :, None]

        def backward(g):
            gp = np.zeros_like(xp)
            gw = np.empty_like(w)
            for j in range(k):
                gp[:, :, j * dilation:j * dilation + t] += np.matmul(w[:, :, j].T, g)
                gw[:, :, j] = np.tensordot(g, taps[j], axes=([0, 2], [0, 2]))
            gb = g.sum(axis=(0, 2)) if bias is not None else None
            return gp[:, :, pad:pad + t], gw, gb

    elif axis == "channel":
        if x.shape[1] == 0:
            raise InvalidArgumentError("conv1d over an empty channel axis")
        if weight.data.ndim != 1:
            raise InvalidArgumentError(f"channel-axis conv1d takes a 1-D kernel, got {weight.shape}")
        if bias is not None and bias.shape != (1,):
            raise InvalidArgumentError(f"channel-axis conv1d takes a (1,) bias, got {bias.shape}")
        # a kernel shared along the channel axis is a banded (c, c) matrix
        c = x.shape[1]
        shifts = _shift_matrices(c, k, dilation)
        w = weight.data
        band = np.tensordot(w, shifts, axes=1)
        out = np.matmul(band, x.data)
        if bias is not None:
            out += bias.data[0]

        def backward(g):
            gx = np.matmul(band.T, g)
            outer = np.tensordot(g, x.data, axes=([0, 2], [0, 2]))
            gw = np.tensordot(shifts, outer, axes=([1, 2], [0, 1]))
            gb = np.array([g.sum()]) if bias is not None else None
            return gx, gw, gb

    else:
        raise InvalidArgumentError(f"axis must be 'time' or 'channel', got {axis!r}")

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# loss and optimiser


def bce_loss(pred: Tensor, target, weights=None) -> Tensor:
    """Mean binary cross-entropy with soft targets.

    ``pred`` is clamped to ``[1e-7, 1 - 1e-7]``; the clamp passes no gradient
    where it is active.  Frames with zero weight are excluded from the mean.
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if y.shape != pred.shape:
        raise InvalidArgumentError(f"bce_loss: pred {pred.shape} vs target {y.shape}")
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
        if w.shape != y.shape:
            raise InvalidArgumentError(f"bce_loss: weights {w.shape} vs target {y.shape}")
    n = np.count_nonzero(w)
    if n == 0:
        raise InvalidArgumentError("bce_loss: every frame is masked")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    terms = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    loss = np.array((w * terms).sum() / n)
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def backward(g):
        dp = w * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
        return (g * dp * inside,)

    return _result(loss, (pred,), backward)


def adam_step(params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place, on trainable parameters."""
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            raise ContractViolationError(f"parameter {p.name!r} has no gradient")
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.tensor.data = p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
