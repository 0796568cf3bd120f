"""Dense float64 tensors with a reverse-mode gradient tape, counter-based
random streams and a central-difference gradient oracle.

Every differentiable primitive records ``(output id, input ids, vjp)`` on the
tape of its inputs. Node ids are handed out in creation order, so the tape is
topologically sorted by construction and ``backward`` is a single reverse
sweep.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

DTYPE = np.float64


class ContractViolation(ValueError):
    """Raised when a caller breaks a documented precondition."""


class TapeError(RuntimeError):
    """Internal inconsistency of a gradient tape (e.g. a cycle)."""


# --------------------------------------------------------------------------
# tape + tensor


class GradTape:
    """Records primitive ops applied to watched tensors.

    A tape belongs to one logical task; do not share it across threads while
    recording.
    """

    def __init__(self) -> None:
        self._ids = itertools.count()
        self.nodes: list[tuple[int, tuple[int, ...], Callable]] = []
        self.leaves: dict[int, tuple[int, ...]] = {}

    def _new_id(self) -> int:
        return next(self._ids)

    def watch(self, value) -> "Tensor":
        """Return a leaf tensor whose gradient ``backward`` will report."""
        t = value if isinstance(value, Tensor) else tensor(value)
        leaf = Tensor(t.data, tape=self, node=self._new_id())
        self.leaves[leaf.node] = leaf.shape
        return leaf

    def record(self, out_data: np.ndarray, inputs: Sequence["Tensor"], vjp: Callable) -> "Tensor":
        out = Tensor(out_data, tape=self, node=self._new_id())
        in_ids = tuple(t.node if t.tape is self else -1 for t in inputs)
        self.nodes.append((out.node, in_ids, vjp))
        return out

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Gradient of a scalar ``loss`` w.r.t. every leaf of this tape.

        Leaves the loss does not depend on get zero gradients.
        """
        if loss.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.tape is self:
            grads[loss.node] = np.ones_like(loss.data)
            for out_id, in_ids, vjp in reversed(self.nodes):
                if out_id > loss.node:
                    continue
                g = grads.pop(out_id, None)
                if g is None:
                    continue
                for i, gi in zip(in_ids, vjp(g)):
                    if i < 0 or gi is None or gi is False:
                        continue
                    if i >= out_id:
                        raise TapeError(f"node {out_id} consumes later node {i}: cycle on tape")
                    if i in grads:
                        grads[i] = grads[i] + gi
                    else:
                        grads[i] = gi
        return {
            leaf: np.asarray(grads.get(leaf, np.zeros(shape)), dtype=DTYPE).reshape(shape)
            for leaf, shape in self.leaves.items()
        }


class Tensor:
    """Immutable float64 array, optionally attached to a ``GradTape``."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data: np.ndarray, tape: GradTape | None = None, node: int = -1) -> None:
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(values, shape: Sequence[int] | None = None) -> Tensor:
    """Build a constant tensor, rejecting NaN/Inf."""
    data = np.array(values, dtype=DTYPE)
    if shape is not None:
        if int(np.prod(shape)) != data.size:
            raise ContractViolation(f"{data.size} values do not fill shape {tuple(shape)}")
        data = data.reshape(tuple(shape))
    if not np.all(np.isfinite(data)):
        raise ContractViolation("tensor values must be finite")
    return Tensor(data)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _tape_of(*ts: Tensor) -> GradTape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractViolation("operands live on different tapes")
            tape = t.tape
    return tape


def _make(out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(out, inputs, vjp)


def _need(t: Tensor) -> bool:
    """Whether a vjp must produce a gradient for operand ``t`` (falsy -> skipped)."""
    return t.tape is not None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_need(a) and _unbroadcast(g, a.shape), _need(b) and _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_need(a) and _unbroadcast(g, a.shape), _need(b) and _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_need(a) and _unbroadcast(g * b.data, a.shape),
                            _need(b) and _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_need(a) and _unbroadcast(g / b.data, a.shape),
                            _need(b) and _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need ``ndim >= 2``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul operands must be at least 2-d")

    def vjp(g):
        ga = _need(a) and _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _need(b) and _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in parts)

    def vjp(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx], dtype=DTYPE), (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
    return _make(a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),))


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = 0. Not differentiable; arrays only."""
    return np.sign(x)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax_cross_entropy(logits, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Batch mean (or sum) of ``-log softmax(logits)[label]``.

    ``logits`` is ``[n, k]``; ``labels`` integer ``[n]``. With
    ``reduction="sum"`` the input gradient of row ``i`` is exactly the
    gradient of example ``i``'s own loss.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractViolation(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractViolation(f"labels must lie in [0, {k})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    if reduction == "mean":
        loss, scale = -logp[rows, labels].mean(), 1.0 / n
    elif reduction == "sum":
        loss, scale = -logp[rows, labels].sum(), 1.0
    else:
        raise ContractViolation(f"unknown reduction {reduction!r}")

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g * scale) if scale != 1.0 else grad * g,)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), vjp)


def im2col(x, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Patches of a channels-last batch ``[n, h, w, c]`` -> ``[n, oh, ow, k*k*c]``.

    Patch layout is (ki, kj, c) row-major.
    """
    x = as_tensor(x)
    n, h, w, c = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ContractViolation(f"kernel {k} too large for input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: [n, h', w', c, k, k] -> pick strides -> [n, oh, ow, k, k, c]
    win = win[:, ::stride, ::stride][:, :oh, :ow]
    cols = np.ascontiguousarray(np.transpose(win, (0, 1, 2, 4, 5, 3))).reshape(n, oh, ow, k * k * c)

    def vjp(g):
        g = g.reshape(n, oh, ow, k, k, c)
        full = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                full[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += g[:, :, :, i, j, :]
        if pad:
            full = full[:, pad:pad + h, pad:pad + w, :]
        return (full,)

    return _make(cols, (x,), vjp)


# --------------------------------------------------------------------------
# gradients


def grad(f: Callable[..., Tensor], *args: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Value and gradient of scalar ``f`` w.r.t. each array argument."""
    tape = GradTape()
    leaves = [tape.watch(as_tensor(a)) for a in args]
    out = f(*leaves)
    g = tape.backward(out)
    return float(out.data), [g[leaf.node] for leaf in leaves]


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradient of ``loss`` for every leaf on its tape, keyed by leaf id."""
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        return {}
    return loss.tape.backward(loss)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient ``(f(x+h e_i) - f(x-h e_i)) / 2h`` per coordinate."""
    if h <= 0:
        raise ContractViolation("finite-difference step must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    flat = x.reshape(-1)
    out = np.empty(flat.size, dtype=DTYPE)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


# --------------------------------------------------------------------------
# random streams


@dataclass
class RngStream:
    """Counter-based random stream keyed by ``(seed, label)``.

    Draws come from Philox4x64 with a key derived from the seed and label;
    ``counter`` counts consumed 256-bit blocks, so any ``(seed, label,
    counter)`` triple reproduces the same draws on every platform.
    """

    seed: int
    label: str
    counter: int = 0
    _key: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        digest = hashlib.sha256(f"{int(self.seed)}/{self.label}".encode()).digest()
        self._key = np.frombuffer(digest[:16], dtype="<u8").astype(np.uint64)

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    def _bits(self, nwords: int) -> np.ndarray:
        blocks = -(-nwords // 4)
        bg = np.random.Philox(key=self._key, counter=np.array([self.counter, 0, 0, 0], dtype=np.uint64))
        raw = bg.random_raw(blocks * 4)
        self.counter += blocks
        return raw[:nwords]

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws in the open interval (0, 1)."""
        shape = tuple(int(s) for s in shape) if np.ndim(shape) else (int(shape),)
        n = int(np.prod(shape))
        bits = self._bits(n)
        return (((bits >> np.uint64(11)).astype(DTYPE) + 0.5) * (1.0 / 9007199254740992.0)).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws via the Box-Muller transform."""
        shape = tuple(shape) if np.ndim(shape) else (int(shape),)
        n = int(np.prod(shape))
        m = -(-n // 2)
        u = self.uniform((2 * m,))
        r = np.sqrt(-2.0 * np.log(u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, high: int, size: int) -> np.ndarray:
        return np.minimum((self.uniform((size,)) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable") if n else np.zeros(0, dtype=np.int64)


def normal_sample(stream: RngStream, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """I.i.d. Gaussian tensor; ``std == 0`` returns the constant ``mean``."""
    if std < 0:
        raise ContractViolation("standard deviation must be non-negative")
    shape = tuple(shape) if np.ndim(shape) else (int(shape),)
    if std == 0:
        # keep the stream aligned with the std > 0 path
        stream.counter += -(-2 * (-(-int(np.prod(shape)) // 2)) // 4)
        return Tensor(np.full(shape, float(mean), dtype=DTYPE))
    return Tensor(mean + std * stream.normal(shape))
