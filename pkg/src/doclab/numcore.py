"""Dense tensors with define-by-run reverse-mode gradients, plus an Adam optimizer.

Operations executed inside an active :class:`Tape` are recorded; outside a tape
they run as plain numpy with no bookkeeping, which is what sampling and
evaluation use.

    with Tape() as tape:
        loss = softmax_cross_entropy(linear(x, w), targets, mask)
    backward(loss, tape)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateInputError, NonFiniteError, ShapeError, UsageError

_TAPES: list["Tape"] = []
_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> bool:
    """Toggle the per-operation NaN/Inf check; returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable
    op: str


class Tape:
    """Ordered log of executed primitives; replayed in reverse by :func:`backward`."""

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable, op: str) -> None:
        self.records.append(_Record(out, inputs, fn, op))
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    tape = active_tape()
    if tape is not None and req:
        tape.record(out, inputs, fn, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# plain numpy kernels (also used by the cache-based inference path)


def np_log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_layer_norm(x, gain, bias, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


_GELU_C = math.sqrt(2.0 / math.pi)


def np_gelu(x: np.ndarray):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def np_causal_attention(q, k, v, q_offset: int = 0):
    """Softmax attention where query ``i`` sits at position ``q_offset + i``."""
    tq, tk = q.shape[-2], k.shape[-2]
    scores = (q @ np.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    qpos = np.arange(q_offset, q_offset + tq)[:, None]
    kpos = np.arange(tk)[None, :]
    scores = np.where(kpos > qpos, -np.inf, scores)
    probs = np_softmax(scores)
    return probs @ v, probs


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _emit("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g, needs: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g, needs: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g, needs: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DegenerateInputError("log of a non-positive value")
    return _emit("log", np.log(a.data), (a,), lambda g, needs: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g, needs: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g, needs):
        return (
            _unbroadcast(g * pick_a, a.shape) if needs[0] else None,
            _unbroadcast(g * ~pick_a, b.shape) if needs[1] else None,
        )

    return _emit("minimum", np.minimum(a.data, b.data), (a, b), bw)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    def bw(g, needs):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _emit(
        "mean",
        np.asarray(a.data.mean()),
        (a,),
        lambda g, needs: (np.full(a.shape, g / n, dtype=a.dtype),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g, needs: (g.transpose(inv),))


def take(a: Tensor, index) -> Tensor:
    """Gather along the first axis."""
    idx = np.asarray(index, dtype=np.int64)

    def bw(g, needs):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take", a.data[idx], (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for ``x[..., k]`` and ``w[d, k]``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")

    def bw(g, needs):
        gx = g @ w.data if needs[0] else None
        gw = None
        if needs[1]:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        return gx, gw

    return _emit("linear", x.data @ w.data.T, (x, w), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g, needs):
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _emit("embedding", table.data[ids], (table,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    y, xhat, inv = np_layer_norm(x.data, gain.data, bias.data, eps)

    def bw(g, needs):
        gx = gg = gb = None
        if needs[0]:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if needs[1]:
            gg = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        if needs[2]:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _emit("layer_norm", y, (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    y, t = np_gelu(x.data)

    def bw(g, needs):
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * _GELU_C * (
            1.0 + 3 * 0.044715 * (x.data * x.data)
        )
        return (g * d,)

    return _emit("gelu", y, (x,), bw)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Fused masked softmax attention over ``[..., T, head_dim]`` operands."""
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"attention operands differ: {q.shape} {k.shape} {v.shape}")
    out, probs = np_causal_attention(q.data, k.data, v.data)
    inv_sqrt = 1.0 / math.sqrt(q.shape[-1])

    def bw(g, needs):
        gv = np.swapaxes(probs, -1, -2) @ g
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True)) * inv_sqrt
        gq = ds @ k.data
        gk = np.swapaxes(ds, -1, -2) @ q.data
        return gq, gk, gv

    return _emit("causal_attention", out, (q, k, v), bw)


def softmax_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions where ``mask`` holds.

    ``logits`` is ``[..., V]``; ``targets`` and ``mask`` match its leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    lead = logits.shape[:-1]
    if targets.shape != lead or mask.shape != lead:
        raise ShapeError(
            f"targets {targets.shape} / mask {mask.shape} must match logits prefix {lead}"
        )
    count = int(mask.sum())
    if count == 0:
        raise DegenerateInputError("cross-entropy mask selects no positions")
    vocab = logits.shape[-1]
    flat_t = targets.reshape(-1)
    flat_m = mask.reshape(-1)
    if flat_t[flat_m].size and (flat_t[flat_m].min() < 0 or flat_t[flat_m].max() >= vocab):
        raise ShapeError(f"target id out of range [0, {vocab})")
    safe_t = np.where(flat_m, flat_t, 0)
    logp = np_log_softmax(logits.data.reshape(-1, vocab))
    picked = logp[np.arange(logp.shape[0]), safe_t]
    value = -(picked * flat_m).sum() / count

    def bw(g, needs):
        grad = np.exp(logp)
        grad[np.arange(grad.shape[0]), safe_t] -= 1.0
        grad *= (flat_m * (g / count))[:, None]
        return (grad.reshape(logits.shape),)

    return _emit("softmax_cross_entropy", np.asarray(value, dtype=logits.dtype), (logits,), bw)


def log_softmax_gather(logits: Tensor, targets, temperature: float = 1.0) -> Tensor:
    """``log softmax(logits / temperature)[target]`` at every leading position."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} must match logits prefix {logits.shape[:-1]}")
    inv_t = 1.0 / float(temperature)
    vocab = logits.shape[-1]
    logp = np_log_softmax(logits.data.reshape(-1, vocab) * inv_t)
    rows = np.arange(logp.shape[0])
    flat_t = targets.reshape(-1)
    out = logp[rows, flat_t].reshape(targets.shape)

    def bw(g, needs):
        grad = -np.exp(logp)
        grad[rows, flat_t] += 1.0
        grad *= (g.reshape(-1) * inv_t)[:, None]
        return (grad.reshape(logits.shape),)

    return _emit("log_softmax_gather", out, (logits,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every grad-requiring leaf on ``tape``.

    Leaves recorded on the tape but not reachable from ``loss`` end with a zero
    gradient. Gradients accumulate until cleared (the optimizer clears them).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise UsageError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        for t in rec.inputs:
            if t.requires_grad and id(t) not in tape._produced:
                leaves[id(t)] = t
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in rec.inputs)
        in_grads = rec.backward(g, needs)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in tape._produced:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments and hyper-parameters. Weight decay is decoupled (AdamW form)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_grad_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def optimizer_step(params: Mapping[str, Tensor], state: OptimizerState) -> None:
    """One bias-corrected Adam update over ``params``; clears their gradients afterwards."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            bad = int(np.size(p.grad) - np.isfinite(p.grad).sum())
            raise NonFiniteError(f"gradient of {name!r} has {bad} non-finite entries")
    factor = 1.0
    if state.max_grad_norm is not None:
        norm = global_grad_norm(params)
        if norm > state.max_grad_norm:
            factor = state.max_grad_norm / (norm + 1e-12)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad * factor
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise ShapeError(f"optimizer moments for {name!r} have shape {m.shape}, param {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.lr * state.weight_decay * p.data
        p.data = (p.data - update).astype(p.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_grad(fn: Callable[[], float], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to every entry of ``t``."""
    out = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    view = out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = fn()
        flat[i] = keep - step
        down = fn()
        flat[i] = keep
        view[i] = (up - down) / (2 * step)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(np.asarray(a, np.float64) - np.asarray(b, np.float64))) / denom


def gradcheck(
    build: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``build`` re-runs the forward computation and returns a scalar tensor; it is
    called under a fresh tape for the analytic pass and without one for the
    numeric pass. Parameters should be float64.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build()
    backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_grad(lambda: build().item(), p, step)
        worst = max(worst, relative_error(a, n))
        p.grad = None
    return worst
