"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Operations executed inside ``with Tape() as tape:`` are appended to the tape
together with a vector-Jacobian closure; ``backward(tape, loss)`` replays the
tape in reverse. Outside a tape the same functions just compute values, which
is how inference runs. All arithmetic is float64.
"""
from __future__ import annotations

import logging
import math
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonScalarLoss, ShapeMismatch

logger = logging.getLogger(__name__)

Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Vjp


class Tape:
    """Ordered record of primitive operations; one tape per thread at a time."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: Vjp) -> None:
        self.entries.append(TapeEntry(output, inputs, vjp))

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes do not broadcast", a.shape, b.shape) from None


# -------------- Elementwise --------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data**2, (x,), lambda g: (2.0 * x.data * g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


SIGMOID_EPS = 1e-7


def sigmoid(x) -> Tensor:
    """Logistic function kept inside [SIGMOID_EPS, 1 - SIGMOID_EPS]."""
    x = as_tensor(x)
    y = np.clip(0.5 * (1.0 + np.tanh(0.5 * x.data)), SIGMOID_EPS, 1.0 - SIGMOID_EPS)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data >= floor
    return _result(np.maximum(x.data, floor), (x,), lambda g: (g * mask,))


# -------------- Reductions and shape --------------

def reduce_sum(x, axis: int | tuple[int, ...] | None = None) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(x.data.sum(axis=axis), (x,), vjp)


def reduce_mean(x, axis: int | tuple[int, ...] | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis), 1.0 / count)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape: incompatible target", x.shape, tuple(shape)) from None
    return _result(y, (x,), lambda g: (g.reshape(x.shape),))


def take_last(x, start: int, stop: int) -> Tensor:
    """Slice ``start:stop`` of the last axis."""
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeMismatch(f"take_last: bad range {start}:{stop}", x.shape)

    def vjp(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    return _result(x.data[..., start:stop], (x,), vjp)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch("mse: operands differ", a.shape, b.shape)
    return reduce_mean(square(sub(a, b)))


# -------------- Layers --------------

def dense(x, W, b=None) -> Tensor:
    """``x @ W + b`` for a batch ``x`` of shape (n, in) and ``W`` of shape (in, out)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeMismatch("dense: input/weight mismatch", x.shape, W.shape)
    y = _result(x.data @ W.data, (x, W), lambda g: (g @ W.data.T, x.data.T @ g))
    if b is None:
        return y
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise ShapeMismatch("dense: bias mismatch", b.shape, (W.shape[1],))
    return add(y, b)


def conv3d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation.

    x: (n, c, d, h, w); kernels: (o, c, kd, kh, kw); output (n, o, d', h', w').
    """
    x, k = as_tensor(x), as_tensor(kernels)
    if x.ndim != 5 or k.ndim != 5 or x.shape[1] != k.shape[1]:
        raise ShapeMismatch("conv3d: input/kernel mismatch", x.shape, k.shape)
    if stride < 1 or padding < 0:
        raise ValueError("conv3d needs stride >= 1 and padding >= 0")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    ksize = k.shape[2:]
    if any(xp.shape[2 + i] < ksize[i] for i in range(3)):
        raise ShapeMismatch("conv3d: kernel larger than padded input", x.shape, k.shape)
    win = sliding_window_view(xp, ksize, axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    out_spatial = win.shape[2:5]
    y = np.tensordot(win, k.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # (n, d', h', w', o)
    y = np.moveaxis(y, -1, 1)

    def vjp(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gxp = np.zeros_like(xp)
        D, H, W = out_spatial
        for i in range(ksize[0]):
            for j in range(ksize[1]):
                for l in range(ksize[2]):
                    contrib = np.einsum("nodhw,oc->ncdhw", g, k.data[:, :, i, j, l])
                    gxp[
                        :,
                        :,
                        i : i + stride * D : stride,
                        j : j + stride * H : stride,
                        l : l + stride * W : stride,
                    ] += contrib
        gx = gxp[:, :, p : xp.shape[2] - p, p : xp.shape[3] - p, p : xp.shape[4] - p]
        return gx, gk

    out = _result(np.ascontiguousarray(y), (x, k), vjp)
    if bias is None:
        return out
    bias = as_tensor(bias)
    if bias.shape != (k.shape[0],):
        raise ShapeMismatch("conv3d: bias mismatch", bias.shape, (k.shape[0],))
    return add(out, reshape(bias, (1, -1, 1, 1, 1)))


def maxpool3d(x, size: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 5 or any(s % size for s in x.shape[2:]):
        raise ShapeMismatch(f"maxpool3d: spatial dims must divide by {size}", x.shape)
    n, c, D, H, W = x.shape
    blocks = x.data.reshape(n, c, D // size, size, H // size, size, W // size, size)
    y = blocks.max(axis=(3, 5, 7))

    def vjp(g):
        ye = y[:, :, :, None, :, None, :, None]
        mask = blocks == ye
        mask = mask / mask.sum(axis=(3, 5, 7), keepdims=True)
        gx = mask * g[:, :, :, None, :, None, :, None]
        return (gx.reshape(x.shape),)

    return _result(y, (x,), vjp)


def upsample3d(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the three spatial axes."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeMismatch("upsample3d: expected (n, c, d, h, w)", x.shape)
    y = x.data
    for axis in (2, 3, 4):
        y = np.repeat(y, factor, axis=axis)
    n, c, D, H, W = x.shape

    def vjp(g):
        g = g.reshape(n, c, D, factor, H, factor, W, factor)
        return (g.sum(axis=(3, 5, 7)),)

    return _result(y, (x,), vjp)


# -------------- Backward --------------

def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse pass from a scalar ``loss``.

    Returns the gradient of every leaf tensor that requires one (parameters)
    and also stores it on ``leaf.grad``.
    """
    if loss.data.ndim != 0:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    produced = {id(e.output) for e in tape.entries}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) not in produced:
                leaves[id(inp)] = inp
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else np.array(gi, dtype=np.float64)
    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        out[leaf] = leaf.grad
    return out


# -------------- Optimisation --------------

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]
) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update; parameters get fresh arrays."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != np.shape(g):
            raise ShapeMismatch(f"adam_step: gradient for {name}", params[name].shape, np.shape(g))
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name, np.zeros_like(p.data))
        v = state.second_moment.get(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name], state.second_moment[name] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass(frozen=True)
class LrSchedule:
    initial_rate: float = 1e-3
    decay: float = 0.995

    def __post_init__(self) -> None:
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if not self.initial_rate > 0:
            raise ValueError("initial_rate must be > 0")


def decay_rate(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.initial_rate * schedule.decay**epoch


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


# -------------- Parameter blob --------------

BLOB_MAGIC = b"MFPB"
BLOB_VERSION = 1


def encode_parameters(named: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(named.items()) if isinstance(named, Mapping) else list(named)
    parts = [BLOB_MAGIC, struct.pack("<II", BLOB_VERSION, len(items))]
    for name, values in items:
        arr = np.ascontiguousarray(values, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_parameters(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != BLOB_MAGIC:
        raise ValueError("not a parameter blob (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != BLOB_VERSION:
        raise ValueError(f"unsupported parameter blob version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
        pos += 8 * size
        out[name] = values.reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise ValueError(f"parameter blob has {len(blob) - pos} trailing bytes")
    return out
