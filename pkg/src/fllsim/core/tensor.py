"""
Dense tensors with reverse-mode differentiation.

A Tensor wraps a numpy array (float32 unless a check-precision context is
active). Operations run eagerly; when a Tape is active and at least one
operand requires a gradient, the operation is appended to the tape together
with a closure computing its input gradients. `backward` walks the tape once
in reverse and returns gradients for named trainable tensors only.

The op set is closed: matmul, layernorm, add, mul, scale, gelu, relu,
softmax, softmax_cross_entropy, reshape, transpose, select, mean_tokens,
concat, l2_normalize and reduce_sum. Broadcasting is limited to a scalar
operand or an operand matching the trailing dimensions of the other.

Two ambient counters observe every op:
    - an OpCounter (see `count_ops`) accumulates matmul forward FLOPs,
      whether or not the op is taped;
    - the Tape keeps per-node FLOPs and output sizes, which the resource
      ledger reads as backward cost and retained activation memory.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from fllsim.core.errors import DimensionError, NonFiniteError, UsageError

ParamId = Tuple[int, str]

WORD_BYTES = 4  # accounting always assumes float32 words
BACKWARD_FLOP_FACTOR = 2

_DTYPE: ContextVar[type] = ContextVar("fllsim_dtype", default=np.float32)
_TAPE: ContextVar[Optional["Tape"]] = ContextVar("fllsim_tape", default=None)
_COUNTER: ContextVar[Optional["OpCounter"]] = ContextVar("fllsim_counter", default=None)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextmanager
def check_precision() -> Iterator[None]:
    """Create tensors in float64 inside the block (finite-difference checks)."""
    token = _DTYPE.set(np.float64)
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    """
    Dense n-dimensional array plus autodiff metadata.

    Attributes
    ----------
    data : np.ndarray
        Row-major values.
    requires_grad : bool
        Trainable leaf, or an op output that depends on one.
    name : ParamId or None
        Parameter id (layer index, parameter name) for leaves that should
        appear in gradient maps.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[ParamId] = None):
        self.data = np.asarray(data, dtype=_DTYPE.get())
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]] = field(repr=False)
    flops: int = 0


class Tape:
    """
    Ordered record of differentiable ops.

    Nodes are appended in execution order, which is a topological order of
    the graph; `backward` visits them once, last to first.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)
        self._token = None

    @property
    def activation_words(self) -> int:
        """Words held by taped op outputs (retained until backward)."""
        return sum(node.output.size for node in self.nodes)

    @property
    def forward_flops(self) -> int:
        return sum(node.flops for node in self.nodes)

    @property
    def backward_flops(self) -> int:
        return BACKWARD_FLOP_FACTOR * self.forward_flops


@dataclass
class OpCounter:
    forward_flops: int = 0


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


# Recording helpers

def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward, flops: int = 0) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")

    counter = _COUNTER.get()
    if counter is not None:
        counter.forward_flops += flops

    tape = _TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        tape.nodes.append(TapeNode(op, tuple(inputs), result, backward, flops))
    return result


def _check_broadcast(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...], op: str) -> None:
    if a_shape == b_shape:
        return
    small, big = (b_shape, a_shape) if len(b_shape) <= len(a_shape) else (a_shape, b_shape)
    if int(np.prod(small)) == 1 and len(small) <= len(big):
        return
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise DimensionError(
        f"{op}: cannot broadcast {a_shape} with {b_shape} "
        "(only scalar and trailing-row broadcast are supported)"
    )


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back onto the operand's shape."""
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return np.asarray(grad.sum()).reshape(shape)
    return grad.reshape((-1,) + tuple(shape)).sum(axis=0)


# Elementwise ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward(g):
        return (
            _reduce_to(g, a.shape) if a.requires_grad else None,
            _reduce_to(g, b.shape) if b.requires_grad else None,
        )

    return _record("add", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data

    def backward(g):
        return (
            _reduce_to(g * b.data, a.shape) if a.requires_grad else None,
            _reduce_to(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _record("mul", out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = x.data * x.data.dtype.type(factor)

    def backward(g):
        return (g * g.dtype.type(factor),)

    return _record("scale", out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _record("gelu", out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _record("relu", out, (x,), backward)


# Linear algebra and normalization

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    `a` may carry leading batch axes; `b` is either a 2-D weight shared by
    the whole batch or has the same leading axes as `a`.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} @ {b.shape}")

    out = np.matmul(a.data, b.data)
    k = a.shape[-1]
    flops = 2 * out.size * k

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record("matmul", out, (a, b), backward, flops)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm: last dimension {d} of {x.shape} does not match "
            f"gamma {gamma.shape} / beta {beta.shape}"
        )

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _record("layernorm", out, (x, gamma, beta), backward)


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}"
        )
    if b and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(
            f"softmax_cross_entropy: labels must lie in [0, {c}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    out = np.asarray(-log_probs[rows, labels].mean())

    def backward(g):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (probs * (g / b),)

    return _record("softmax_cross_entropy", out, (logits,), backward)


# Shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from e

    def backward(g):
        return (g.reshape(x.shape),)

    return _record("reshape", out, (x,), backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", out, (x,), backward)


def select(x: Tensor, index: int) -> Tensor:
    """Take x[index] along the first axis."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record("select", out, (x,), backward)


def mean_tokens(x: Tensor, start: int = 0) -> Tensor:
    """Mean over axis 1 of x[:, start:] ([n, tokens, d] -> [n, d])."""
    if x.ndim != 3 or not 0 <= start < x.shape[1]:
        raise DimensionError(f"mean_tokens: cannot pool {x.shape} from token {start}")
    count = x.shape[1] - start
    out = x.data[:, start:].mean(axis=1)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:] = (g / count)[:, None, :]
        return (full,)

    return _record("mean_tokens", out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _record("concat", out, tensors, backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit L2 norm; norms are clamped at eps."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward(g):
        projected = g - out * (g * out).sum(axis=-1, keepdims=True)
        return (np.where(norm > eps, projected, g) / denom,)

    return _record("l2_normalize", out, (x,), backward)


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def backward(g):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return _record("reduce_sum", out, (x,), backward)


# Reverse pass

def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict[ParamId, np.ndarray]:
    """
    Gradients of a scalar loss with respect to every named trainable leaf.

    Frozen tensors never get an entry; if nothing reachable is trainable the
    map is empty.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    tape = tape if tape is not None else _TAPE.get()
    if tape is None or not any(node.output is loss for node in tape.nodes):
        raise UsageError("backward: the loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if inp.name is not None:
                leaves[key] = inp

    return {
        t.name: np.asarray(grads[key], dtype=t.data.dtype).reshape(t.shape)
        for key, t in leaves.items()
        if key in grads
    }
