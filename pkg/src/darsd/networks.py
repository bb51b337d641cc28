"""Feature extractor, discriminator and classifier heads, plus checkpoint I/O."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    clip,
    conv1d,
    leaky_relu,
    matmul,
    mean,
    mul,
    record_custom,
    relu,
    reshape,
    sigmoid,
)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Holds named parameter tensors; the optimizer swaps them in place by name."""

    prefix = ""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.training = True

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=f"{self.prefix}{name}")

    def named_parameters(self):
        for k, v in self.params.items():
            yield f"{self.prefix}{k}", v

    def set(self, name: str, data: np.ndarray) -> None:
        """Install a new tensor for ``name`` (with or without the module prefix)."""
        if name.startswith(self.prefix):
            name = name[len(self.prefix):]
        self.params[name] = Tensor(data, requires_grad=True, name=f"{self.prefix}{name}")

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


def _dropout(h: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0 or rng is None:
        return h
    keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return mul(h, keep)


def _affine(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if h.ndim != 2 or h.shape[1] != w.shape[0]:
        raise ShapeError(f"affine layer expects (batch, {w.shape[0]}), got {h.shape}")
    return add(matmul(h, w), b)


class Encoder(Module):
    """Causal dilated conv stack, global average pool over time, linear head to d."""

    prefix = "encoder."

    def __init__(self, in_channels: int, hidden: int = 32, out_dim: int = 32,
                 kernel_size: int = 5, dilations=(1, 2), dropout: float = 0.0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.hidden = hidden
        self.out_dim = out_dim
        self.kernel_size = kernel_size
        self.dilations = tuple(int(x) for x in dilations)
        self.dropout = dropout
        self.layers = []
        cin = in_channels
        for i, dil in enumerate(self.dilations):
            self.layers.append((cin, hidden, kernel_size, dil))
            self._add(f"conv{i}.w", _uniform(rng, cin * kernel_size, (kernel_size, cin, hidden)))
            self._add(f"conv{i}.b", np.zeros(hidden))
            cin = hidden
        self._add("head.w", _uniform(rng, hidden, (hidden, out_dim)))
        self._add("head.b", np.zeros(out_dim))

    @property
    def receptive_field(self) -> int:
        return 1 + sum((k - 1) * dil for _, _, k, dil in self.layers)

    def forward(self, x, rng: np.random.Generator | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ShapeError(f"encoder expects (batch, T, {self.in_channels}), got {x.shape}")
        if x.shape[1] < self.receptive_field:
            raise ShapeError(f"sequence length {x.shape[1]} shorter than receptive field {self.receptive_field}")
        h = x
        for i, (_, _, _, dil) in enumerate(self.layers):
            h = relu(add(conv1d(h, self.params[f"conv{i}.w"], dilation=dil), self.params[f"conv{i}.b"]))
            h = _dropout(h, self.dropout, rng, self.training)
        pooled = mean(h, axis=1)
        return _affine(pooled, self.params["head.w"], self.params["head.b"])


class Discriminator(Module):
    prefix = "disc."

    def __init__(self, in_dim: int, hidden: int = 32, slope: float = 0.2,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.slope = slope
        self._add("l1.w", _uniform(rng, in_dim, (in_dim, hidden)))
        self._add("l1.b", np.zeros(hidden))
        self._add("l2.w", _uniform(rng, hidden, (hidden, 1)))
        self._add("l2.b", np.zeros(1))

    def logits(self, f: Tensor) -> Tensor:
        h = leaky_relu(_affine(f, self.params["l1.w"], self.params["l1.b"]), self.slope)
        return reshape(_affine(h, self.params["l2.w"], self.params["l2.b"]), (-1,))

    def forward(self, f: Tensor) -> Tensor:
        """Probability that each row is an original (not reconstructed) feature."""
        # |logit| <= 30 keeps the output strictly inside (0, 1) in float64
        return sigmoid(clip(self.logits(f), -30.0, 30.0))


class Classifier(Module):
    prefix = "clf."

    def __init__(self, in_dim: int, n_classes: int, hidden: int = 32, dropout: float = 0.1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.n_classes = n_classes
        self.dropout = dropout
        self._add("l1.w", _uniform(rng, in_dim, (in_dim, hidden)))
        self._add("l1.b", np.zeros(hidden))
        self._add("l2.w", _uniform(rng, hidden, (hidden, n_classes)))
        self._add("l2.b", np.zeros(n_classes))

    def forward(self, f: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = relu(_affine(f, self.params["l1.w"], self.params["l1.b"]))
        h = _dropout(h, self.dropout, rng, self.training)
        return _affine(h, self.params["l2.w"], self.params["l2.b"])


def grad_reverse(f: Tensor, strength: float = 1.0) -> Tensor:
    """Identity forward; backward scales the incoming gradient by -strength."""
    if strength < 0:
        raise ValueError("grad_reverse strength must be >= 0")
    return record_custom("grad_reverse", f.data, (f,), lambda g: (-strength * g,))


def classify(clf: Classifier, f: Tensor) -> Tensor:
    return clf(f)


def predict(logits: Tensor) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits.data, axis=1)


# ---------------------------------------------------------------------------
# checkpoint format

MAGIC = b"DARSDCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, blobs: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: magic, u32 version, u32 count, then per blob
    u32 name length, utf-8 name, u32 ndim, u64 dims, little-endian f64 payload."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(blobs))]
    for name, arr in blobs.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> OrderedDict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            nbytes = 8 * size
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated blob {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header ({e})") from None
    return out
