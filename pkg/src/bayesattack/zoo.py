"""Small differentiable classifiers: MLPs and a strided convnet.

Parameters live in one flat float64 vector; a segment table maps layer names
to slices of it. ``forward`` accepts the flat vector as a constant, as a tape
leaf (for parameter gradients) or as a ``[batch, n_params]`` array holding one
parameter draw per example.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import numcore as nc
from .numcore import ContractViolation, RngStream, Tensor

CONV_KERNEL = 3
CONV_STRIDE = 2
CONV_PAD = 1


@dataclass(frozen=True)
class ArchSpec:
    kind: str  # "mlp" | "convnet"
    hidden: tuple[int, ...]  # widths (mlp) or channel counts (convnet)
    input_shape: tuple[int, ...]
    classes: int
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.kind not in ("mlp", "convnet"):
            raise ContractViolation(f"unknown architecture kind {self.kind!r}")
        if self.activation not in ("relu", "gelu"):
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if not self.hidden or min(self.hidden) < 1:
            raise ContractViolation("need at least one hidden layer of positive width")
        if self.classes < 2:
            raise ContractViolation("need at least two classes")
        if self.kind == "convnet" and len(self.input_shape) != 3:
            raise ContractViolation("convnet input shape must be (channels, height, width)")

    @property
    def channels(self) -> int:
        return self.input_shape[0] if len(self.input_shape) == 3 else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(d["kind"], tuple(d["hidden"]), tuple(d["input_shape"]), int(d["classes"]),
                   d.get("activation", "relu"))

    @classmethod
    def parse(cls, text: str, input_shape, classes: int) -> "ArchSpec":
        """Parse ``mlp:128x64`` / ``convnet:8x16:gelu`` shorthand."""
        parts = text.strip().split(":")
        act = parts[2] if len(parts) > 2 else "relu"
        return cls(parts[0], tuple(int(h) for h in parts[1].split("x")), tuple(input_shape), classes, act)

    def short(self) -> str:
        return f"{self.kind}:{'x'.join(map(str, self.hidden))}:{self.activation}"


class Segment(NamedTuple):
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


def _conv_out(n: int) -> int:
    return (n + 2 * CONV_PAD - CONV_KERNEL) // CONV_STRIDE + 1


def segment_table(arch: ArchSpec) -> tuple[Segment, ...]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if arch.kind == "mlp":
        fan_in = int(np.prod(arch.input_shape))
        for i, width in enumerate(arch.hidden):
            shapes += [(f"fc{i}.weight", (fan_in, width)), (f"fc{i}.bias", (width,))]
            fan_in = width
        shapes += [("head.weight", (fan_in, arch.classes)), ("head.bias", (arch.classes,))]
    else:
        c, h, w = arch.input_shape
        for i, ch in enumerate(arch.hidden):
            shapes += [(f"conv{i}.weight", (CONV_KERNEL, CONV_KERNEL, c, ch)), (f"conv{i}.bias", (ch,))]
            c, h, w = ch, _conv_out(h), _conv_out(w)
        shapes += [("head.weight", (c * h * w, arch.classes)), ("head.bias", (arch.classes,))]
    table, offset = [], 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        table.append(Segment(name, offset, n, shape))
        offset += n
    return tuple(table)


def param_count(arch: ArchSpec) -> int:
    last = segment_table(arch)[-1]
    return last.offset + last.length


def unflatten(vec: np.ndarray, segments) -> dict[str, np.ndarray]:
    return {s.name: vec[..., s.offset:s.offset + s.length].reshape(vec.shape[:-1] + s.shape)
            for s in segments}


def flatten(arrays: dict[str, np.ndarray], segments) -> np.ndarray:
    return np.concatenate([np.asarray(arrays[s.name], dtype=nc.DTYPE).reshape(-1) for s in segments])


@dataclass
class Model:
    arch: ArchSpec
    params: np.ndarray
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self) -> None:
        self.params = np.asarray(self.params, dtype=nc.DTYPE)
        self.norm_mean = np.atleast_1d(np.asarray(self.norm_mean, dtype=nc.DTYPE))
        self.norm_std = np.atleast_1d(np.asarray(self.norm_std, dtype=nc.DTYPE))
        if self.params.shape != (param_count(self.arch),):
            raise ContractViolation(
                f"expected {param_count(self.arch)} parameters, got {self.params.shape}")
        if self.norm_mean.shape != (self.arch.channels,) or self.norm_std.shape != (self.arch.channels,):
            raise ContractViolation("normalization needs one mean/std per input channel")
        if np.any(self.norm_std <= 0):
            raise ContractViolation("normalization std must be positive")

    @property
    def segments(self) -> tuple[Segment, ...]:
        return segment_table(self.arch)

    def with_params(self, params: np.ndarray) -> "Model":
        return replace(self, params=np.array(params, dtype=nc.DTYPE))


def init_model(arch: ArchSpec, stream: RngStream, norm_mean=None, norm_std=None) -> Model:
    """He-normal weights, zero biases."""
    arrays = {}
    for s in segment_table(arch):
        if s.name.endswith("bias"):
            arrays[s.name] = np.zeros(s.shape)
        else:
            fan_in = int(np.prod(s.shape[:-1]))
            arrays[s.name] = stream.normal(s.shape) * np.sqrt(2.0 / fan_in)
    c = arch.channels
    return Model(arch, flatten(arrays, segment_table(arch)),
                 np.zeros(c) if norm_mean is None else norm_mean,
                 np.ones(c) if norm_std is None else norm_std)


# --------------------------------------------------------------------------
# forward / loss


def _activate(arch: ArchSpec, h: Tensor) -> Tensor:
    return nc.relu(h) if arch.activation == "relu" else nc.gelu(h)


def _normalize(model: Model, x: Tensor) -> Tensor:
    arch = model.arch
    if len(arch.input_shape) == 3:
        shape = (1, arch.channels, 1, 1)
        return (x - model.norm_mean.reshape(shape)) / model.norm_std.reshape(shape)
    return (x - model.norm_mean[0]) / model.norm_std[0]


def _dense(h: Tensor, w: Tensor, b: Tensor, batched: bool) -> Tensor:
    if batched:
        n, d = h.shape
        out = nc.matmul(h.reshape((n, 1, d)), w)
        return out.reshape((n, w.shape[-1])) + b
    return nc.matmul(h, w) + b


def forward(model: Model, x, params=None) -> Tensor:
    """Logits ``[batch, classes]`` for raw inputs in ``[0, 1]``.

    ``params`` overrides ``model.params``: a flat vector (array or tape
    tensor) or a ``[batch, n_params]`` matrix of per-example parameters.
    """
    arch = model.arch
    x = nc.as_tensor(x)
    if x.shape[1:] != arch.input_shape:
        raise ContractViolation(f"input shape {x.shape[1:]} does not match {arch.input_shape}")
    n = x.shape[0]
    p = nc.as_tensor(model.params if params is None else params)
    batched = p.ndim == 2
    if batched and p.shape[0] != n:
        raise ContractViolation("per-example parameters need one row per input")
    if p.shape[-1] != param_count(arch):
        raise ContractViolation(f"expected {param_count(arch)} parameters, got {p.shape[-1]}")

    def seg(s: Segment) -> Tensor:
        if batched:
            return p[:, s.offset:s.offset + s.length].reshape((n,) + s.shape)
        return p[s.offset:s.offset + s.length].reshape(s.shape)

    segs = {s.name: s for s in segment_table(arch)}
    h = _normalize(model, x)
    if arch.kind == "mlp":
        h = h.reshape((n, -1))
        for i in range(len(arch.hidden)):
            h = _activate(arch, _dense(h, seg(segs[f"fc{i}.weight"]), seg(segs[f"fc{i}.bias"]), batched))
    else:
        h = nc.transpose(h, (0, 2, 3, 1))
        for i in range(len(arch.hidden)):
            w, b = seg(segs[f"conv{i}.weight"]), seg(segs[f"conv{i}.bias"])
            cols = nc.im2col(h, CONV_KERNEL, CONV_STRIDE, CONV_PAD)
            kkc, ch = w.shape[-4] * w.shape[-3] * w.shape[-2], w.shape[-1]
            if batched:
                w = w.reshape((n, 1, kkc, ch))
                b = b.reshape((n, 1, 1, ch))
            else:
                w = w.reshape((kkc, ch))
            h = _activate(arch, nc.matmul(cols, w) + b)
        h = h.reshape((n, -1))
    return _dense(h, seg(segs["head.weight"]), seg(segs["head.bias"]), batched)


def loss_ce(logits, y, reduction: str = "mean") -> Tensor:
    """Batch-mean (or summed) softmax cross-entropy."""
    return nc.softmax_cross_entropy(logits, np.asarray(y), reduction)


def per_example_loss(logits: np.ndarray, y) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(logits)), np.asarray(y)]


def predict(model: Model, x, batch_size: int = 1024) -> np.ndarray:
    x = np.asarray(x, dtype=nc.DTYPE)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([forward(model, x[i:i + batch_size]).data.argmax(axis=1)
                           for i in range(0, len(x), batch_size)])


def accuracy(model: Model, x, y) -> float:
    y = np.asarray(y)
    return float((predict(model, x) == y).mean()) if len(y) else float("nan")


def loss_and_param_grad(model: Model, x, y, params=None) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. the flat parameter vector."""
    value, (g,) = nc.grad(lambda w: loss_ce(forward(model, x, w), y),
                          model.params if params is None else params)
    return value, g


def loss_and_input_grad(model: Model, x, y, params=None) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. the inputs."""
    value, (g,) = nc.grad(lambda xx: loss_ce(forward(model, xx, params), y), x)
    return value, g


# --------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.lr >= 0:
            raise ContractViolation("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ContractViolation("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractViolation("weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractViolation("batch size must be positive and epochs non-negative")


class SGD:
    """Heavy-ball SGD with coupled weight decay: ``v = mu v + g + wd w; w -= lr v``."""

    def __init__(self, lr: float, momentum: float, weight_decay: float) -> None:
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buf: np.ndarray | None = None

    def step(self, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        d = g + self.weight_decay * w if self.weight_decay else g
        self.buf = d if self.buf is None else self.momentum * self.buf + d
        return w - self.lr * self.buf


@dataclass
class TrainResult:
    model: Model
    history: list[float]
    train_accuracy: float


def minibatches(n: int, batch_size: int, stream: RngStream):
    order = stream.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_sgd(model: Model, inputs: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
              stream: RngStream | None = None) -> TrainResult:
    if len(labels) == 0:
        raise ContractViolation("training set is empty")
    stream = stream or RngStream(cfg.seed, "train")
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    w = model.params.copy()
    history = []
    for epoch in range(cfg.epochs):
        losses, sizes = [], []
        for idx in minibatches(len(labels), cfg.batch_size, stream):
            value, g = loss_and_param_grad(model, inputs[idx], labels[idx], w)
            if not np.isfinite(value) or not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            if cfg.lr:
                w = opt.step(w, g)
            losses.append(value)
            sizes.append(len(idx))
        history.append(float(np.average(losses, weights=sizes)))
    out = model.with_params(w) if cfg.lr else model
    return TrainResult(out, history, accuracy(out, inputs, labels))


def fit_normalization(arch: ArchSpec, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of raw training inputs."""
    if len(arch.input_shape) == 3:
        axes = (0, 2, 3)
        return inputs.mean(axis=axes), inputs.std(axis=axes) + 1e-8
    return np.array([inputs.mean()]), np.array([inputs.std() + 1e-8])


# --------------------------------------------------------------------------
# checkpoints


MAGIC = b"BTCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad-magic"


class VersionMismatchError(CheckpointError):
    code = "version-mismatch"


class ChecksumError(CheckpointError):
    code = "checksum"


class TruncatedError(ChecksumError):
    code = "truncated"


def write_container(path, header: dict, arrays: list[np.ndarray]) -> None:
    """``BTCK | u16 version | u32 len | header json | f64 LE blob | crc32``."""
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    body = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(head)) + head + blob
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_container(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 14:
        raise TruncatedError(f"{path}: truncated header")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    header = json.loads(body[10:10 + hlen].decode("utf-8"))
    blob = body[10 + hlen:]
    expected = 8 * sum(int(np.prod(a["shape"])) for a in header.get("arrays", []))
    if len(blob) != expected:
        raise TruncatedError(f"{path}: blob holds {len(blob)} bytes, expected {expected}")
    return header, np.frombuffer(blob, dtype="<f8").astype(nc.DTYPE)


def split_blob(header: dict, blob: np.ndarray) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for a in header["arrays"]:
        n = int(np.prod(a["shape"]))
        out[a["name"]] = blob[off:off + n].reshape(a["shape"])
        off += n
    return out


def save_checkpoint(model: Model, path) -> None:
    header = {
        "kind": "model",
        "arch": model.arch.to_dict(),
        "normalization": {"mean": model.norm_mean.tolist(), "std": model.norm_std.tolist()},
        "arrays": [{"name": "params", "shape": [len(model.params)]}],
    }
    write_container(path, header, [model.params])


def load_checkpoint(path) -> Model:
    header, blob = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r}, not a model")
    norm = header["normalization"]
    # json floats round-trip exactly (repr-based), so metadata is bit-identical
    return Model(ArchSpec.from_dict(header["arch"]), split_blob(header, blob)["params"],
                 np.array(norm["mean"]), np.array(norm["std"]))
