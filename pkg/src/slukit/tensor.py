"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Storage is row-major numpy float32 by default (float64 is available for
high-precision oracles via the ``precision`` context manager); reductions
accumulate in float64 regardless of storage width. Operations record onto
the innermost active :class:`Tape`; without an active tape they run
forward-only, which is what inference paths rely on.

A tape is single-use: one forward pass, one ``backward``. Training loops
open a fresh tape every step.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, TapeError

_FLOAT_TYPES = (np.float32, np.float64)

_default_dtype: type = np.float32
_tape_stack: list["Tape"] = []


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_TYPES:
        raise NumericError(f"unsupported storage dtype {dtype!r}")
    previous = _default_dtype
    _default_dtype = dtype
    try:
        yield
    finally:
        _default_dtype = previous


def default_dtype():
    return _default_dtype


class Tensor:
    """N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype.type)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; every method defers to the module-level ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype.type)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss."""
    if loss.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is detached: it was not produced under an active tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; build a fresh tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        for tensor_in, grad_in in zip(node.inputs, node.backward_fn(out_grad)):
            if grad_in is None or not tensor_in.requires_grad:
                continue
            grad_in = np.asarray(grad_in, dtype=tensor_in.data.dtype)
            if tensor_in.grad is None:
                tensor_in.grad = grad_in.copy() if grad_in.base is not None else grad_in
            else:
                tensor_in.grad = tensor_in.grad + grad_in


def _result_dtype(*tensors: Tensor):
    if any(t.data.dtype == np.float64 for t in tensors):
        return np.float64
    return np.float32


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    dt = _result_dtype(a, b)
    out = np.add(a.data, b.data, dtype=dt)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    dt = _result_dtype(a, b)
    out = np.multiply(a.data, b.data, dtype=dt)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, back)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = a.data * np.asarray(s, dtype=a.data.dtype)

    def back(g):
        return (g * s,)

    return _record((a,), out, back)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def back(g):
        return (g * (a.data > 0),)

    return _record((a,), out, back)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return a
    keep = np.asarray(rng.random(a.shape) >= p, dtype=a.data.dtype)
    keep /= np.asarray(1.0 - p, dtype=a.data.dtype)
    out = a.data * keep

    def back(g):
        return (g * keep,)

    return _record((a,), out, back)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _record((a,), out, back)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)

    def back(g):
        return (np.transpose(g, np.argsort(axes) if axes is not None else None),)

    return _record((a,), out, back)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out = out.astype(a.data.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record((a,), np.asarray(out), back)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64) / n
    out = out.astype(a.data.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / np.asarray(n, dtype=a.data.dtype),)

    return _record((a,), np.asarray(out), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with leading batch broadcasting; accumulates in f64."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    dt = _result_dtype(a, b)
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    out = np.matmul(a64, b64).astype(dt)

    def back(g):
        g64 = g.astype(np.float64, copy=False)
        ga = np.matmul(g64, np.swapaxes(b64, -1, -2))
        gb = np.matmul(np.swapaxes(a64, -1, -2), g64)
        return (
            _unbroadcast(ga, a.shape).astype(dt),
            _unbroadcast(gb, b.shape).astype(dt),
        )

    return _record((a, b), out, back)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: ids of any shape index the first axis of ``weight``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(
            f"embedding id out of range [0, {weight.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    out = weight.data[ids]

    def back(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _record((weight,), out, back)


def conv3x3s2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 stride-2 valid convolution over the two middle axes.

    x: [B, T, D, Cin], w: [3, 3, Cin, Cout], b: [Cout] -> [B, T', D', Cout]
    with T' = (T - 3)//2 + 1 = (T - 1)//2 and likewise for D'.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    B, T, D, cin = x.shape
    if w.shape[:3] != (3, 3, cin):
        raise DimensionError(f"conv kernel {w.shape} does not fit input {x.shape}")
    if T < 3 or D < 3:
        raise DimensionError(f"input {x.shape} too short for a 3x3 stride-2 stage")
    cout = w.shape[3]
    t_out = (T - 3) // 2 + 1
    d_out = (D - 3) // 2 + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (3, 3), axis=(1, 2))
    windows = windows[:, ::2, ::2]  # [B, t_out, d_out, cin, 3, 3]
    cols = np.ascontiguousarray(np.moveaxis(windows, 3, 5))  # [..., 3, 3, cin]
    cols2d = cols.reshape(B * t_out * d_out, 9 * cin).astype(np.float64, copy=False)
    wflat = w.data.reshape(9 * cin, cout).astype(np.float64, copy=False)
    dt = _result_dtype(x, w, b)
    out = (cols2d @ wflat).astype(dt).reshape(B, t_out, d_out, cout) + b.data

    def back(g):
        g2d = g.reshape(B * t_out * d_out, cout).astype(np.float64, copy=False)
        gw = (cols2d.T @ g2d).astype(dt).reshape(3, 3, cin, cout)
        gb = np.sum(g2d, axis=0, dtype=np.float64).astype(dt)
        gcols = (g2d @ wflat.T).astype(dt).reshape(B, t_out, d_out, 3, 3, cin)
        gx = np.zeros_like(x.data)
        for ki in range(3):
            for kj in range(3):
                gx[:, ki : ki + 2 * t_out : 2, kj : kj + 2 * d_out : 2, :] += gcols[
                    :, :, :, ki, kj, :
                ]
        return gx, gw, gb

    return _record((x, w, b), out, back)


# ---------------------------------------------------------------------------
# normalizations and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rejects non-finite input."""
    x = _as_tensor(x)
    if axis >= x.ndim or axis < -x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data.astype(np.float64) - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y64 = e / np.sum(e, axis=axis, keepdims=True)
    y = y64.astype(x.data.dtype)

    def back(g):
        dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (y * (g - dot),)

    return _record((x,), y, back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax input contains non-finite values")
    x64 = x.data.astype(np.float64)
    m = np.max(x64, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x64 - m), axis=axis, keepdims=True))
    out64 = x64 - lse
    out = out64.astype(x.data.dtype)
    p = np.exp(out64).astype(x.data.dtype)

    def back(g):
        tot = np.sum(g, axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (g - p * tot,)

    return _record((x,), out, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise NumericError(f"layer_norm eps must be > 0, got {eps}")
    n = x.shape[-1]
    x64 = x.data.astype(np.float64)
    mu = np.mean(x64, axis=-1, keepdims=True)
    var = np.mean((x64 - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = (x64 - mu) * inv
    xhat = xhat64.astype(x.data.dtype)
    out = xhat * gain.data + bias.data

    def back(g):
        gxhat = (g * gain.data).astype(np.float64)
        m1 = np.mean(gxhat, axis=-1, keepdims=True)
        m2 = np.mean(gxhat * xhat64, axis=-1, keepdims=True)
        gx = (inv * (gxhat - m1 - xhat64 * m2)).astype(x.data.dtype)
        axes = tuple(range(x.ndim - 1))
        ggain = np.sum(g * xhat, axis=axes, dtype=np.float64).astype(gain.data.dtype)
        gbias = np.sum(g, axis=axes, dtype=np.float64).astype(bias.data.dtype)
        return gx, _unbroadcast(ggain, gain.shape), _unbroadcast(gbias, bias.shape)

    return _record((x, gain, bias), out, back)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    label_smoothing: float = 0.0,
    pad_id: int | None = None,
) -> Tensor:
    """Mean smoothed negative log-likelihood over non-pad positions.

    logits: [N, V]; targets: int array [N] with values in [0, V) or pad_id.
    An all-pad target yields loss 0 with zero gradient.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [N, V] logits, got {logits.shape}")
    if not 0.0 <= label_smoothing < 1.0:
        raise NumericError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"targets length {targets.shape[0]} != rows {n}")
    live = np.ones(n, dtype=bool) if pad_id is None else targets != pad_id
    checked = targets[live]
    if checked.size and (checked.min() < 0 or checked.max() >= v):
        raise DimensionError(
            f"target id out of range [0, {v}): min={checked.min()}, max={checked.max()}"
        )
    dt = logits.data.dtype
    count = int(live.sum())
    x64 = logits.data.astype(np.float64)
    m = np.max(x64, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x64 - m), axis=-1, keepdims=True))
    logp = x64 - lse
    safe_targets = np.where(live, targets, 0)
    nll = -logp[np.arange(n), safe_targets]
    smooth = -np.mean(logp, axis=-1)
    per_row = (1.0 - label_smoothing) * nll + label_smoothing * smooth
    total = float(np.sum(per_row[live])) / count if count else 0.0
    out = np.asarray(total, dtype=dt)

    def back(g):
        if count == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        q = np.full((n, v), label_smoothing / v)
        q[np.arange(n), safe_targets] += 1.0 - label_smoothing
        gx = (p - q) * (live[:, None] / count)
        return ((gx * np.asarray(g, dtype=np.float64)).astype(dt),)

    return _record((logits,), out, back)


# ---------------------------------------------------------------------------
# parameter helpers


def parameter(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """Trainable tensor initialized uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data.astype(_default_dtype), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=_default_dtype), requires_grad=False)
