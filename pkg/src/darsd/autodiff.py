"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op records a node on the active :class:`Tape`.  Calling
:func:`backward` on a scalar walks that tape in exact reverse recording order
and accumulates gradients into every ``requires_grad`` tensor it reaches.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericDomainError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """Immutable float64 array; only ``grad`` changes after construction."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all of these go through the primitive set
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, op, out, inputs, backward_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops.  Confined to one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor],
               backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        out.requires_grad = True
        out.tape_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(op, out, tuple(inputs), backward_fn))
        return out

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.grad_enabled = True


_local = _State()


def _state() -> _State:
    return _local


def active_tape() -> Tape | None:
    st = _state()
    if not st.grad_enabled or not st.stack:
        return None
    return st.stack[-1]


@contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def _wrap(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out


def record_custom(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Hook for ops defined outside this module (e.g. gradient reversal)."""
    return _wrap(op, data, inputs, backward_fn)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor that ``loss`` depends on."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.tape_id is None:
        raise ContractError("loss was not recorded on a tape (no requires_grad inputs?)")

    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.tape_id is None and t.grad is None:
                t.grad = np.zeros_like(t.data)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.tape_id is None:
                t.grad = t.grad + gi
            else:
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        node.out.grad = g


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _wrap("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _wrap("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _wrap("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _wrap("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _wrap("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericDomainError("log: input must be strictly positive")
    return _wrap("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _wrap("sum", out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    if not np.all(np.isfinite(x.data)):
        raise NumericDomainError("softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _wrap("softmax", s, (x,), bw)


def _norms(x: np.ndarray, what: str) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(n == 0):
        raise DegenerateVectorError(f"cosine similarity: zero-norm {what}")
    return n


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities, ``out[i, j] = cos(a_i, b_j)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: incompatible shapes {a.shape} and {b.shape}")
    na, nb = _norms(a.data, "row in first argument"), _norms(b.data, "row in second argument")
    ua, ub = a.data / na, b.data / nb
    c = ua @ ub.T

    def bw(g):
        ga = (g @ ub - (g * c).sum(axis=1, keepdims=True) * ua) / na
        gb = (g.T @ ua - (g * c).sum(axis=0)[:, None] * ub) / nb
        return ga, gb

    return _wrap("cosine", c, (a, b), bw)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two vectors; raises on zero norm instead of returning 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: expected equal 1-D shapes, got {a.shape} and {b.shape}")
    return reshape(cosine_matrix(reshape(a, (1, -1)), reshape(b, (1, -1))), ())


def conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Causal dilated convolution.

    x: batch x T x C_in, w: K x C_in x C_out.  Output keeps length T; position
    t only sees inputs at t, t - dilation, ..., t - (K-1)*dilation.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    n, T, cin = x.shape
    K, _, cout = w.shape
    pad = (K - 1) * dilation
    xp = np.concatenate([np.zeros((n, pad, cin)), x.data], axis=1)
    # tap k multiplies x[t - (K-1-k)*dilation]
    cols = np.stack([xp[:, k * dilation: k * dilation + T, :] for k in range(K)], axis=2)
    cols2 = cols.reshape(n * T, K * cin)
    w2 = w.data.reshape(K * cin, cout)
    out = (cols2 @ w2).reshape(n, T, cout)

    def bw(g):
        g2 = g.reshape(n * T, cout)
        gw = (cols2.T @ g2).reshape(K, cin, cout)
        gcols = (g2 @ w2.T).reshape(n, T, K, cin)
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[:, k * dilation: k * dilation + T, :] += gcols[:, :, k, :]
        return gxp[:, pad:, :], gw

    return _wrap("conv1d", out, (x, w), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {e}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _wrap("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def index(x: Tensor, idx) -> Tensor:
    """Numpy-style indexing / gather; repeated indices accumulate in backward."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    elif isinstance(idx, list):
        idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _wrap("index", np.array(out), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _wrap("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {x.shape}")
    return _wrap("transpose", x.data.T, (x,), lambda g: (g.T,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _wrap("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# composites


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return relu(x) + mul(relu(mul(x, -1.0)), -slope)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise sigmoid as the second entry of softmax([0, x])."""
    z = reshape(x, (-1, 1))
    pair = concat([Tensor(np.zeros_like(z.data)), z], axis=1)
    return reshape(index(softmax(pair, axis=1), (slice(None), 1)), x.shape)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log(softmax(x, axis=axis))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    p = softmax(logits, axis=1)
    picked = index(p, (np.arange(n), labels))
    return mul(sum_(log(clip(picked, 1e-300, 1.0))), -1.0 / n)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_(mul(a, b))


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` is called with the tensors in ``inputs`` and must return a scalar.
    Reports the error, never asserts.
    """
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    with Tape():
        loss = f(*leaves)
        backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    worst = 0.0
    with no_grad():
        for k, t in enumerate(inputs):
            base = t.data.copy()
            flat = base.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = _eval(f, inputs, k, base)
                flat[i] = orig - eps
                lo = _eval(f, inputs, k, base)
                flat[i] = orig
                num = (hi - lo) / (2 * eps)
                a = analytic[k].reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


def _eval(f, inputs, k, data) -> float:
    args = [Tensor(data) if j == k else Tensor(t.data) for j, t in enumerate(inputs)]
    return float(f(*args).data)
