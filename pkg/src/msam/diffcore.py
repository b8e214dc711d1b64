"""Minimal dense-tensor reverse-mode autodiff with an Adam optimizer.

Everything trainable in this package (the chunk encoder, the synonym
attention head, the prevalence refiner) runs on the handful of primitives
defined here.  Training works in float32; building parameters as float64
promotes the whole graph to double precision, which is what the
finite-difference gradient checker expects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "OpError",
    "GraphStateError",
    "as_tensor",
    "backward",
    "topo_order",
    "zero_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "embedding",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "sqrt",
    "tsum",
    "tmean",
    "max_pool",
    "masked_softmax",
    "bce_with_logits",
    "huber_sum",
    "sigmoid_array",
    "OptimizerState",
    "adam_step",
    "linear_lr",
    "finite_diff_check",
    "snapshot_params",
    "restore_params",
]


class OpError(ValueError):
    """An op received incompatible inputs; the message names the node."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class GraphStateError(RuntimeError):
    """Backward was requested in a state where no gradient can be produced."""


def _as_array(data, dtype=None) -> np.ndarray:
    from_numpy = isinstance(data, (np.ndarray, np.generic))
    arr = data if isinstance(data, np.ndarray) else np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float32)
    # Python floats and lists come in as float64; the working precision is
    # float32 unless the values already live in a numpy float64 container.
    if arr.dtype == np.float64 and not from_numpy:
        return arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array plus the tape hooks needed for reverse-mode autodiff.

    The tape is implicit: every op returns a new Tensor that remembers its
    parents and a closure propagating the output gradient to them.  Values
    are treated as immutable while a graph referencing them is alive;
    optimizer updates replace ``data`` wholesale between graphs.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: str = "leaf", parents: tuple = (), backward=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap ``x`` as a constant Tensor, following ``like``'s dtype if given."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def topo_order(out: Tensor) -> list[Tensor]:
    """Operation records of the graph below ``out``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
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
            stack.append((p, False))
    return order


def backward(out: Tensor) -> None:
    """Propagate d(out)/d(leaf) to every ``requires_grad`` leaf below ``out``.

    Gradients accumulate additively, so repeated backward calls (one per
    instance of an effective batch) sum into the same ``.grad`` buffers.
    """
    if out.data.size != 1:
        raise GraphStateError(
            f"backward needs a scalar output, got shape {out.data.shape}")
    if not out.requires_grad:
        raise GraphStateError(
            "output does not depend on any requires_grad tensor; run a forward "
            "pass over trainable parameters first")
    order = topo_order(out)
    out.grad = np.ones_like(out.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor] | dict) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return Tensor(a.data + b.data, op="add", parents=(a, b), backward=bwd)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return Tensor(a.data - b.data, op="sub", parents=(a, b), backward=bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return Tensor(a.data * b.data, op="mul", parents=(a, b), backward=bwd)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data / b.data

    def bwd(g):
        _accum(a, g / b.data)
        _accum(b, -g * out / b.data)

    return Tensor(out, op="div", parents=(a, b), backward=bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, -g)

    return Tensor(-a.data, op="neg", parents=(a,), backward=bwd)


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise OpError("matmul", f"expects 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise OpError("matmul", f"inner dimensions differ: {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor(a.data @ b.data, op="matmul", parents=(a, b), backward=bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise OpError("transpose", f"expects a 2-d tensor, got shape {a.data.shape}")

    def bwd(g):
        _accum(a, g.T)

    return Tensor(a.data.T, op="transpose", parents=(a,), backward=bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), op="reshape", parents=(a,), backward=bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """A contiguous slice along one axis; backward scatters into the source."""
    if not (0 <= start and start + length <= a.data.shape[axis]):
        raise OpError("narrow", f"slice [{start},{start + length}) outside axis "
                                f"{axis} of shape {a.data.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)

    return Tensor(a.data[index], op="narrow", parents=(a,), backward=bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accum(p, g[tuple(index)])

    return Tensor(np.concatenate([p.data for p in parts], axis=axis),
                  op="concat", parents=parts, backward=bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise OpError("embedding", f"id out of range [0, {table.data.shape[0]}): "
                                   f"min={ids.min()}, max={ids.max()}")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return Tensor(table.data[ids], op="embedding", parents=(table,), backward=bwd)


# ---------------------------------------------------------------------------
# nonlinearities and reductions
# ---------------------------------------------------------------------------

def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on a plain array."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return Tensor(out, op="tanh", parents=(a,), backward=bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_array(a.data)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return Tensor(out, op="sigmoid", parents=(a,), backward=bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return Tensor(np.maximum(a.data, 0), op="relu", parents=(a,), backward=bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)

    return Tensor(out, op="exp", parents=(a,), backward=bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g / a.data)

    return Tensor(np.log(a.data), op="log", parents=(a,), backward=bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / out)

    return Tensor(out, op="sqrt", parents=(a,), backward=bwd)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims),
                  op="sum", parents=(a,), backward=bwd)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape) / n)

    return Tensor(a.data.mean(axis=axis, keepdims=keepdims),
                  op="mean", parents=(a,), backward=bwd)


def max_pool(a: Tensor, axis: int = 0) -> Tensor:
    """Max over one axis.  The gradient routes to the argmax position only;
    ties go to the lowest index."""
    a = as_tensor(a)
    idx = a.data.argmax(axis=axis)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis),
                          np.expand_dims(np.asarray(g), axis), axis)
        _accum(a, full)

    return Tensor(a.data.max(axis=axis), op="max_pool", parents=(a,), backward=bwd)


def masked_softmax(a: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with masked logits pinned to -1e9.

    ``mask`` is broadcast against the input; True marks positions that may
    receive probability mass.  A row with no unmasked position is an error,
    not a uniform distribution.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not m.any(axis=axis).all():
            raise OpError("masked_softmax", "a row has no unmasked position")
        x = np.where(m, x, x.dtype.type(-1e9))
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return Tensor(out, op="masked_softmax", parents=(a,), backward=bwd)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Sum of per-element binary cross-entropy, evaluated in logit form.

    Uses max(z,0) - z*y + log1p(exp(-|z|)), which never overflows; the
    gradient is sigmoid(z) - y.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.data.shape:
        raise OpError("bce_with_logits", f"targets shape {t.shape} does not match "
                                         f"logits shape {logits.data.shape}")
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bwd(g):
        _accum(logits, g * (sigmoid_array(z) - t))

    return Tensor(per.sum(), op="bce_with_logits", parents=(logits,), backward=bwd)


def huber_sum(pred: Tensor, target, delta: float) -> Tensor:
    """Summed elementwise Huber penalty on (pred - target)."""
    if delta <= 0:
        raise OpError("huber_sum", f"delta must be positive, got {delta}")
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.data.shape:
        raise OpError("huber_sum", f"target shape {t.shape} does not match "
                                   f"prediction shape {pred.data.shape}")
    d = pred.data - t
    a = np.abs(d)
    quad = a < delta
    per = np.where(quad, 0.5 * a * a, delta * (a - 0.5 * delta))

    def bwd(g):
        _accum(pred, g * np.where(quad, d, delta * np.sign(d)))

    return Tensor(per.sum(), op="huber_sum", parents=(pred,), backward=bwd)


# ---------------------------------------------------------------------------
# optimizer and schedules
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moments plus step counter for one named parameter set."""

    lr: float
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimizerState, params: dict[str, Tensor],
              lr: float | None = None) -> None:
    """One bias-corrected Adam update over ``params`` using their ``.grad``.

    A non-finite gradient raises before any parameter is touched; missing
    gradients count as zero so untouched parameters stay put.
    """
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise OpError("adam_step", f"non-finite gradient for parameter {name!r}")
        grads[name] = g

    state.step += 1
    t = state.step
    lr_t = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr_t * m_hat / (np.sqrt(v_hat) + state.eps)


def linear_lr(step: int, total_steps: int, lr0: float) -> float:
    """Linearly decayed learning rate, reaching exactly zero at the end."""
    if total_steps == 0:
        raise OpError("linear_lr", "total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise OpError("linear_lr", f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps)


def snapshot_params(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def restore_params(params: dict[str, Tensor], snapshot: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        p.data = snapshot[name].copy()


def finite_diff_check(fn: Callable[[], Tensor], params: dict[str, Tensor],
                      epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must be a deterministic closure over ``params`` returning a scalar
    Tensor, and the parameters must be float64.  Returns the maximum over all
    parameter components of |analytic - numeric| / max(1, |analytic|).
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise OpError("finite_diff_check", f"epsilon {epsilon} outside [1e-7, 1e-3]")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise OpError("finite_diff_check",
                          f"parameter {name!r} is {p.dtype}, need float64")

    zero_grad(params)
    out = fn()
    backward(out)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        a = analytic[name]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = fn().item()
            flat[i] = orig - epsilon
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            if not (np.isfinite(numeric) and np.isfinite(a.reshape(-1)[i])):
                raise OpError("finite_diff_check",
                              f"non-finite value while checking {name!r}")
            err = abs(a.reshape(-1)[i] - numeric) / max(1.0, abs(a.reshape(-1)[i]))
            worst = max(worst, err)
    return worst
