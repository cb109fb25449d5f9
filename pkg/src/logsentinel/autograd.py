"""Dense-tensor kernels with reverse-mode automatic differentiation.

The op surface is exactly what a small decoder-only transformer and a
policy-gradient loop need: matmul, embedding lookup, softmax, layer norm,
GELU, dropout, fused cross-entropy / log-softmax gathers, and a handful of
elementwise ops for the clipped-ratio objective. Every op records a backward
closure on a global tape; `backward` walks the tape in exact reverse
recording order and accumulates gradients additively into leaf tensors.

Data is float32 by default. float64 is supported so test oracles can run
central finite differences at high precision; production code never uses it.
Broadcasting is deliberately restricted: bias-add over the last axis and
constant masks only. Everything else is explicit reshape/transpose.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Additive mask value: exp(-1e9) underflows to exactly 0 in float32 and
# float64, so masked softmax entries contribute nothing bit-wise.
MASK_FILL = -1e9


class Tensor:
    """N-dimensional float value tracked by the autograd tape.

    Leaves are tensors created directly by callers (parameters, inputs).
    `backward` populates `grad` on leaves only; intermediate gradients stay
    internal to the backward walk. Repeated `backward` calls accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Tape:
    """Ordered record of ops; backward traverses it in reverse."""

    __slots__ = ("entries", "enabled")

    def __init__(self):
        self.entries = []
        self.enabled = True

    def record(self, out: Tensor, backward_fn) -> None:
        self.entries.append((out, backward_fn))

    def clear(self) -> None:
        self.entries.clear()


class _ThreadTapes(threading.local):
    # Each thread records on its own tape, so parallel eval-mode scoring
    # cannot corrupt the training thread's recording state.
    def __init__(self):
        self.tape = Tape()


_TAPES = _ThreadTapes()


def _tape() -> Tape:
    return _TAPES.tape


def clear_tape() -> None:
    _tape().clear()


def tape_size() -> int:
    return len(_tape().entries)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on this thread (eval passes, rollout scoring)."""
    tape = _tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


def _result(data: np.ndarray, requires_grad: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad and _tape().enabled
    out.grad = None
    out.is_leaf = False
    return out


def _recording(*tensors: Tensor) -> bool:
    return _tape().enabled and any(t.requires_grad for t in tensors)


def _check_same_dtype(a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded tape.

    Leaf tensors with requires_grad get their `grad` buffer accumulated;
    calling backward twice without zeroing doubles leaf gradients.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward root must be scalar, got shape {loss.data.shape}")
    if loss.is_leaf:
        if loss.requires_grad:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += np.ones((), dtype=loss.data.dtype)
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t.is_leaf:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        else:
            key = id(t)
            if key in pending:
                pending[key] = pending[key] + g
            else:
                pending[key] = np.asarray(g, dtype=t.data.dtype)

    for out, backward_fn in reversed(_tape().entries):
        grad = pending.pop(id(out), None)
        if grad is None:
            continue
        backward_fn(grad, accumulate)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked leading dims and 2-D weights.

    Backward: dA = dC @ Bᵀ, dB = Aᵀ @ dC, summed over broadcast dims.
    """
    _check_same_dtype(a, b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = _result(a.data @ b.data, a.requires_grad or b.requires_grad)
    if _recording(a, b):
        def backward_fn(g, accumulate):
            if a.requires_grad:
                accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
        _tape().record(out, backward_fn)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors."""
    _check_same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _result(a.data + b.data, a.requires_grad or b.requires_grad)
    if _recording(a, b):
        def backward_fn(g, accumulate):
            accumulate(a, g)
            accumulate(b, g)
        _tape().record(out, backward_fn)
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Broadcast a 1-D bias over the last axis of x."""
    _check_same_dtype(x, bias)
    if bias.data.ndim != 1 or x.data.shape[-1] != bias.data.shape[0]:
        raise ValueError(f"add_bias expects bias [{x.data.shape[-1]}], got {bias.data.shape}")
    out = _result(x.data + bias.data, x.requires_grad or bias.requires_grad)
    if _recording(x, bias):
        def backward_fn(g, accumulate):
            accumulate(x, g)
            accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))
        _tape().record(out, backward_fn)
    return out


def add_const(x: Tensor, const) -> Tensor:
    """Add a constant array (broadcastable); no gradient flows to the constant."""
    const = np.asarray(const, dtype=x.data.dtype)
    out = _result(x.data + const, x.requires_grad)
    if _recording(x):
        def backward_fn(g, accumulate):
            accumulate(x, g)
        _tape().record(out, backward_fn)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _result(a.data * b.data, a.requires_grad or b.requires_grad)
    if _recording(a, b):
        a_data, b_data = a.data, b.data
        def backward_fn(g, accumulate):
            accumulate(a, g * b_data)
            accumulate(b, g * a_data)
        _tape().record(out, backward_fn)
    return out


def mul_const(x: Tensor, const) -> Tensor:
    """Multiply by a constant scalar or same-shape array."""
    const = np.asarray(const, dtype=x.data.dtype)
    out = _result(x.data * const, x.requires_grad)
    if _recording(x):
        def backward_fn(g, accumulate):
            accumulate(x, _unbroadcast(g * const, x.data.shape))
        _tape().record(out, backward_fn)
    return out


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    out = _result(out_data, x.requires_grad)
    if _recording(x):
        def backward_fn(g, accumulate):
            accumulate(x, g * out_data)
        _tape().record(out, backward_fn)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero outside the open interval."""
    out = _result(np.clip(x.data, lo, hi), x.requires_grad)
    if _recording(x):
        inside = (x.data > lo) & (x.data < hi)
        def backward_fn(g, accumulate):
            accumulate(x, g * inside)
        _tape().record(out, backward_fn)
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties route the gradient to `a`."""
    _check_same_dtype(a, b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"minimum shape mismatch: {a.data.shape} vs {b.data.shape}")
    take_a = a.data <= b.data
    out = _result(np.where(take_a, a.data, b.data), a.requires_grad or b.requires_grad)
    if _recording(a, b):
        def backward_fn(g, accumulate):
            accumulate(a, g * take_a)
            accumulate(b, g * ~take_a)
        _tape().record(out, backward_fn)
    return out


def mean_all(x: Tensor) -> Tensor:
    """Mean over all elements, producing a scalar."""
    out = _result(np.asarray(x.data.mean(), dtype=x.data.dtype), x.requires_grad)
    if _recording(x):
        inv_n = 1.0 / x.data.size
        def backward_fn(g, accumulate):
            accumulate(x, np.full_like(x.data, g * inv_n))
        _tape().record(out, backward_fn)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum over all elements, producing a scalar."""
    out = _result(np.asarray(x.data.sum(), dtype=x.data.dtype), x.requires_grad)
    if _recording(x):
        def backward_fn(g, accumulate):
            accumulate(x, np.full_like(x.data, g))
        _tape().record(out, backward_fn)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _result(np.ascontiguousarray(x.data).reshape(shape), x.requires_grad)
    if _recording(x):
        def backward_fn(g, accumulate):
            accumulate(x, g.reshape(x.data.shape))
        _tape().record(out, backward_fn)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = _result(np.ascontiguousarray(x.data.transpose(axes)), x.requires_grad)
    if _recording(x):
        inverse = tuple(np.argsort(axes))
        def backward_fn(g, accumulate):
            accumulate(x, np.ascontiguousarray(g.transpose(inverse)))
        _tape().record(out, backward_fn)
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    out = _result(table.data[ids], table.requires_grad)
    if _recording(table):
        def backward_fn(g, accumulate):
            grad = np.zeros_like(table.data)
            np.add.at(grad, ids.ravel(), g.reshape(-1, table.data.shape[-1]))
            accumulate(table, grad)
        _tape().record(out, backward_fn)
    return out


def gather_rows(x: Tensor, batch_idx: np.ndarray, row_idx: np.ndarray) -> Tensor:
    """Select rows (b, t, :) from a [B, T, V] tensor into [N, V]."""
    batch_idx = np.asarray(batch_idx)
    row_idx = np.asarray(row_idx)
    out = _result(x.data[batch_idx, row_idx], x.requires_grad)
    if _recording(x):
        def backward_fn(g, accumulate):
            grad = np.zeros_like(x.data)
            np.add.at(grad, (batch_idx, row_idx), g)
            accumulate(x, grad)
        _tape().record(out, backward_fn)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability."""
    if not np.isfinite(x.data).all():
        bad = int(x.data.size - np.isfinite(x.data).sum())
        raise ValueError(f"softmax_rows: non-finite input ({bad} bad element(s))")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    out_data = expd / expd.sum(axis=-1, keepdims=True)
    out = _result(out_data, x.requires_grad)
    if _recording(x):
        def backward_fn(g, accumulate):
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            accumulate(x, out_data * (g - dot))
        _tape().record(out, backward_fn)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_same_dtype(x, gain)
    _check_same_dtype(x, bias)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = _result(x_hat * gain.data + bias.data, x.requires_grad or gain.requires_grad or bias.requires_grad)
    if _recording(x, gain, bias):
        def backward_fn(g, accumulate):
            if gain.requires_grad:
                accumulate(gain, (g * x_hat).reshape(-1, g.shape[-1]).sum(axis=0))
            if bias.requires_grad:
                accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))
            if x.requires_grad:
                gg = g * gain.data
                mean_gg = gg.mean(axis=-1, keepdims=True)
                mean_gg_xhat = (gg * x_hat).mean(axis=-1, keepdims=True)
                accumulate(x, (gg - mean_gg - x_hat * mean_gg_xhat) * inv_std)
        _tape().record(out, backward_fn)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU activation (tanh approximation)."""
    inner = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = _result(0.5 * x.data * (1.0 + t), x.requires_grad)
    if _recording(x):
        def backward_fn(g, accumulate):
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner))
        _tape().record(out, backward_fn)
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller is responsible for gating on train mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = _result(x.data * keep, x.requires_grad)
    if _recording(x):
        def backward_fn(g, accumulate):
            accumulate(x, g * keep)
        _tape().record(out, backward_fn)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-probability of `targets` under row softmax.

    Rows whose target equals `ignore_id` contribute exactly zero to the loss
    and to the gradient. Fused log-softmax keeps the computation stable.
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ValueError(f"cross_entropy expects [N,V] logits and [N] targets, got {logits.data.shape} / {targets.shape}")
    n_rows, vocab = logits.data.shape
    valid = np.ones(n_rows, dtype=bool) if ignore_id is None else targets != ignore_id
    checked = targets[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no non-ignored targets")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    safe_targets = np.where(valid, targets, 0)
    nll = log_z - shifted[np.arange(n_rows), safe_targets]
    loss = np.asarray((nll * valid).sum() / n_valid, dtype=logits.data.dtype)
    out = _result(loss, logits.requires_grad)
    if _recording(logits):
        def backward_fn(g, accumulate):
            probs = np.exp(shifted - log_z[:, None])
            probs[np.arange(n_rows), safe_targets] -= 1.0
            probs *= (valid / n_valid * g)[:, None]
            accumulate(logits, probs.astype(logits.data.dtype))
        _tape().record(out, backward_fn)
    return out


def gather_log_softmax(logits: Tensor, ids: np.ndarray) -> Tensor:
    """Per-row log-probability of the chosen id: logp[n] = log softmax(logits[n])[ids[n]]."""
    ids = np.asarray(ids)
    if logits.data.ndim != 2 or ids.shape != (logits.data.shape[0],):
        raise ValueError(f"gather_log_softmax expects [N,V] logits and [N] ids, got {logits.data.shape} / {ids.shape}")
    n_rows = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    out = _result(shifted[np.arange(n_rows), ids] - log_z, logits.requires_grad)
    if _recording(logits):
        def backward_fn(g, accumulate):
            grad = -np.exp(shifted - log_z[:, None]) * g[:, None]
            grad[np.arange(n_rows), ids] += g
            accumulate(logits, grad.astype(logits.data.dtype))
        _tape().record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers plus the bias-correction step counter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction; mutates params in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / (1.0 - beta1 ** t)
        v_hat = state.v[i] / (1.0 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale gradients in place so the global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads:
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            if g is not None:
                g *= scale
    return norm
