"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays (float32 by default).  Every differentiable op
appends a node to the active :class:`Tape`; :func:`backward` walks that tape
in reverse once.  Reductions and the optimizer moments accumulate in float64.
"""
from __future__ import annotations

import contextlib
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@dataclass
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of op nodes.

    A tape can be replayed backward once; recording onto a consumed tape
    starts a fresh generation.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0
        self.consumed = False

    def reset(self):
        self.nodes = []
        self.generation += 1
        self.consumed = False

    def record(self, node: Node):
        if self.consumed:
            self.reset()
        self.nodes.append(node)

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev


_ACTIVE_TAPE = Tape()


def active_tape() -> Tape:
    return _ACTIVE_TAPE


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._generation = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    @property
    def T(self):
        return transpose(self)


def _raise_item(shape):
    raise ShapeError(f"item(): tensor of shape {shape} is not a scalar")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = _ACTIVE_TAPE
        tape.record(Node(op, tuple(inputs), out, backward_fn))
        out._tape = tape
        out._generation = tape.generation
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    return _make("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # derivative at exactly 0 is 0
    return _make("relu", (x,), np.where(mask, x.data, 0).astype(x.data.dtype),
                 lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make("reshape", (x,), data, lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-d tensor, got shape {x.shape}")
    return _make("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


# ----------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out_features, in_features)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = (g @ wd, g.T @ xd)
        if b is not None:
            grads += (g.sum(axis=0, dtype=np.float64).astype(g.dtype),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _make("linear", inputs, out, backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation on NCHW input with zero padding."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    n, c, h, wd_ = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd_ + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2).copy()

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + wd_] if padding else dxp
        grads = (dx, dw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", inputs, out, backward)


# ----------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, dtype=np.float64).astype(x.data.dtype)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _make("sum", (x,), out, backward)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    out = x.data.mean(axis=axes, dtype=np.float64).astype(x.data.dtype)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, shape).astype(g.dtype),)

    return _make("mean", (x,), out, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW input, got shape {x.shape}")
    return mean(x, axis=(2, 3))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    x64 = x.data.astype(np.float64)
    norm = np.maximum(np.sqrt((x64 * x64).sum(axis=-1, keepdims=True)), eps)
    y64 = x64 / norm

    def backward(g):
        g64 = g.astype(np.float64)
        dx = (g64 - y64 * (g64 * y64).sum(axis=-1, keepdims=True)) / norm
        return (dx.astype(g.dtype),)

    return _make("l2_normalize", (x,), y64.astype(x.data.dtype), backward)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    x64 = x.data.astype(np.float64)
    m = x64.max(axis=axis, keepdims=True)
    e = np.exp(x64 - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def backward(g):
        return ((np.expand_dims(g.astype(np.float64), axis) * soft).astype(g.dtype),)

    return _make("logsumexp", (x,), out.astype(x.data.dtype), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return ((d * (float(g) / n)).astype(logits.data.dtype),)

    return _make("softmax_cross_entropy", (logits,), np.asarray(loss), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target array."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data.astype(np.float64) - target.astype(np.float64)
    loss = (diff * diff).mean()

    def backward(g):
        return ((2.0 * float(g) / diff.size) * diff).astype(pred.data.dtype),

    return _make("mse", (pred,), np.asarray(loss), backward)


# ----------------------------------------------------------------- backward

def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("backward: loss was not recorded on a tape (no input requires grad)")
    if tape.consumed or loss._generation != tape.generation:
        raise TapeError("backward: tape already replayed; run a new forward pass first")
    if not tape.nodes:
        raise TapeError("backward: tape is empty")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# ----------------------------------------------------------------- randomness / init

def rng_stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named consumer (data, init, train-shuffle, noise, ...)."""
    entropy = [int(seed), zlib.crc32(name.encode("utf-8")), *map(int, keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def seeded_init(shape, scheme: str, rng: np.random.Generator | None = None,
                fan_in: int | None = None, name: str | None = None) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        data = np.zeros(shape, dtype=_DTYPE)
    elif scheme == "uniform-fan-in":
        if rng is None:
            raise ValueError("uniform-fan-in init needs an rng")
        fan_in = fan_in or (math.prod(shape[1:]) if len(shape) > 1 else shape[0])
        bound = 1.0 / math.sqrt(fan_in)
        data = rng.uniform(-bound, bound, size=shape).astype(_DTYPE)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=True, name=name)


# ----------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState):
    """One bias-corrected Adam update, in place on ``params``."""
    if not state.m:
        state.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("adam_step: params, grads and state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {p.name or i}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        g64 = g.astype(np.float64)
        m *= state.beta1
        m += (1.0 - state.beta1) * g64
        v *= state.beta2
        v += (1.0 - state.beta2) * g64 * g64
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)


# ----------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: dict
    tol: float
    failures: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures and all(e <= self.tol for e in self.errors.values())


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], tol: float = 1e-4,
               h: float = 1e-3, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backward() against central finite differences.

    ``fn`` rebuilds the scalar loss from ``params`` on each call.  Run it under
    ``precision(np.float64)`` so the differences are meaningful.  The
    per-parameter error is ``max|a - n| / max(max|n|, max|a|, 1e-8)``.
    """
    errors, failures = {}, []
    try:
        for p in params:
            p.grad = None
        with Tape():
            loss = fn()
            if not np.all(np.isfinite(loss.data)):
                return GradCheckReport({}, tol, ["non-finite loss"])
            backward(loss)
    except (NumericError, FloatingPointError) as exc:
        return GradCheckReport({}, tol, [str(exc)])

    with no_grad():
        for idx, p in enumerate(params):
            label = p.name or f"param{idx}"
            analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
            numeric = np.zeros(len(entries))
            for k, e in enumerate(entries):
                orig = flat[e]
                flat[e] = orig + h
                fp = float(fn().data)
                flat[e] = orig - h
                fm = float(fn().data)
                flat[e] = orig
                numeric[k] = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[entries]
            if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(a))):
                failures.append(f"{label}: non-finite gradient")
                errors[label] = math.inf
                continue
            scale = max(np.abs(numeric).max(initial=0.0), np.abs(a).max(initial=0.0), 1e-8)
            errors[label] = float(np.abs(a - numeric).max(initial=0.0) / scale)
    return GradCheckReport(errors, tol, failures)
