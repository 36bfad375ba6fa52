"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Only the operations the waveform network needs are provided. Tensors are
2-D ``channels x time`` arrays (biases are 1-D); there is no general
broadcasting. A tape is built implicitly as operations run and is consumed
by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, UsageError

_ids = itertools.count(1)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense float array that may participate in the tape."""

    __slots__ = ("data", "_grad", "requires_grad", "tape_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self._grad = None
        self.requires_grad = requires_grad
        self.tape_id = next(_ids)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        self._grad = None

    def _accumulate(self, g, fresh=False):
        # ``fresh`` marks a buffer no one else holds, so it can be adopted as is
        if self._grad is None:
            if fresh and g.dtype == self.data.dtype:
                self._grad = g
            else:
                self._grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self._grad += g

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _result(data, parents, backward_fn):
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward_fn
    return out


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ConfigurationError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def channel_mix(x, weight, bias=None):
    """1x1 convolution: ``out[c, t] = sum_k weight[c, k] * x[k, t] + bias[c]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ConfigurationError("channel_mix expects 2-D input and weight")
    if weight.shape[1] != x.shape[0]:
        raise ConfigurationError(
            f"channel_mix: weight {weight.shape} does not match input channels {x.shape[0]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"channel_mix: bias shape {bias.shape}, expected ({weight.shape[0]},)")
    if weight.shape[1] <= 2:
        # narrow inputs (the aux track): broadcasting beats a rank-1 BLAS call
        out = weight.data[:, :1] * x.data[:1]
        for k in range(1, weight.shape[1]):
            out += weight.data[:, k : k + 1] * x.data[k : k + 1]
    else:
        out = weight.data @ x.data
    if bias is not None:
        out += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(weight.data.T @ g, fresh=True)
        if weight.requires_grad:
            weight._accumulate(g @ x.data.T, fresh=True)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=1), fresh=True)

    return _result(out, parents, backward_fn)


def _gather_index(offsets, length):
    offsets = np.asarray(offsets)
    if offsets.shape != (length,):
        raise ConfigurationError(f"causal_gather: {offsets.shape[0] if offsets.ndim else 0} offsets for {length} samples")
    if length and offsets.min() < 1:
        raise ConfigurationError("causal_gather: offsets must be >= 1 to stay causal")
    src = np.arange(length) - offsets
    valid = src >= 0
    return src, valid


def causal_gather(x, offsets):
    """``out[:, t] = x[:, t - offsets[t]]``, zero where the index falls before 0."""
    T = x.shape[1]
    src, valid = _gather_index(offsets, T)
    out = np.zeros_like(x.data)
    dst = np.flatnonzero(valid)
    src_valid = src[valid]
    out[:, dst] = x.data[:, src_valid]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        # constant-offset rows map injectively; variable offsets can collide
        if src_valid.size and np.all(np.diff(src_valid) > 0):
            gx[:, src_valid] = g[:, dst]
        else:
            np.add.at(gx.T, src_valid, g[:, dst].T)
        x._accumulate(gx, fresh=True)

    return _result(out, (x,), backward_fn)


def scatter_adjoint(y, offsets):
    """Plain-array adjoint of :func:`causal_gather` (no tape)."""
    y = np.asarray(y)
    src, valid = _gather_index(offsets, y.shape[1])
    out = np.zeros_like(y)
    np.add.at(out.T, src[valid], y[:, valid].T)
    return out


def code_mix(weight, codes, shift=0):
    """Channel mix of one-hot codes, i.e. ``weight @ onehot(codes)`` shifted by ``shift``.

    Column ``t`` receives ``weight[:, codes[t - shift]]`` or zero when
    ``t - shift < 0``. Computed by column lookup rather than a dense one-hot
    product.
    """
    codes = np.asarray(codes, dtype=np.int64)
    Q = weight.shape[1]
    if codes.size and (codes.min() < 0 or codes.max() >= Q):
        raise DataError(f"codes must lie in [0, {Q - 1}]")
    T = codes.shape[0]
    out = np.zeros((weight.shape[0], T), dtype=weight.data.dtype)
    used = codes[: max(T - shift, 0)]
    out[:, shift:] = weight.data[:, used]

    def backward_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw.T, used, g[:, shift:].T)
        weight._accumulate(gw, fresh=True)

    return _result(out, (weight,), backward_fn)


def add_bias(x, bias):
    """``x[c, t] + bias[c]``."""
    if bias.shape != (x.shape[0],):
        raise ConfigurationError(f"add_bias: bias shape {bias.shape}, expected ({x.shape[0]},)")

    def backward_fn(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=1), fresh=True)
        if x.requires_grad:
            x._accumulate(g, fresh=True)

    return _result(x.data + bias.data[:, None], (x, bias), backward_fn)


def rows(x, start, stop):
    """Channel slice ``x[start:stop]``."""
    out = x.data[start:stop].copy()

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        x._accumulate(gx, fresh=True)

    return _result(out, (x,), backward_fn)


def add(a, b):
    _check_same_shape(a, b, "add")

    def backward_fn(g):
        # g belongs to the finished output node; one parent may adopt it
        if a.requires_grad:
            a._accumulate(g, fresh=True)
        if b.requires_grad:
            b._accumulate(g, fresh=not a.requires_grad)

    return _result(a.data + b.data, (a, b), backward_fn)


def mul(a, b):
    _check_same_shape(a, b, "mul")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * b.data, fresh=True)
        if b.requires_grad:
            b._accumulate(g * a.data, fresh=True)

    return _result(a.data * b.data, (a, b), backward_fn)


def tanh(x):
    y = np.tanh(x.data)

    def backward_fn(g):
        x._accumulate(g * (1.0 - y * y), fresh=True)

    return _result(y, (x,), backward_fn)


def _sigmoid(v):
    # tanh form never overflows
    out = np.tanh(v * 0.5)
    out += 1.0
    out *= 0.5
    return out


def sigmoid(x):
    y = _sigmoid(x.data)

    def backward_fn(g):
        x._accumulate(g * y * (1.0 - y), fresh=True)

    return _result(y, (x,), backward_fn)


def relu(x):
    mask = x.data > 0
    y = np.where(mask, x.data, 0).astype(x.data.dtype)

    def backward_fn(g):
        x._accumulate(g * mask, fresh=True)

    return _result(y, (x,), backward_fn)


def log_softmax(logits):
    """Column-wise log-softmax on a plain array."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def softmax_cross_entropy(logits, targets):
    """Mean over time of ``-log softmax(logits[:, t])[targets[t]]``."""
    targets = np.asarray(targets, dtype=np.int64)
    Q, T = logits.shape
    if targets.shape != (T,):
        raise DataError(f"expected {T} targets, got {targets.shape}")
    if T and (targets.min() < 0 or targets.max() >= Q):
        raise DataError(f"targets must lie in [0, {Q - 1}]")
    logp = log_softmax(logits.data)
    cols = np.arange(T)
    loss = -logp[targets, cols].mean()

    def backward_fn(g):
        p = np.exp(logp)
        p[targets, cols] -= 1.0
        logits._accumulate(p * (g / T), fresh=True)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward_fn)


def weighted_sum(x, weights):
    """Scalar ``sum(x * weights)`` for a constant array ``weights``."""
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.shape:
        raise ConfigurationError(f"weighted_sum: shape mismatch {x.shape} vs {w.shape}")

    def backward_fn(g):
        x._accumulate(g * w, fresh=True)

    return _result(np.asarray((x.data * w).sum(), dtype=x.data.dtype), (x,), backward_fn)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d loss / d leaf into every reachable leaf's ``grad``.

    The tape hanging off ``loss`` is released afterwards.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    loss._grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._grad = None


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper):
        state = cls(**hyper)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, grads, state):
    """In-place Adam update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ConfigurationError("adam_step: params, grads and moments differ in length")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ConfigurationError(f"adam_step: shape mismatch for parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (state.learning_rate / c1) * m / (np.sqrt(v / c2) + state.epsilon)
        p.data -= step.astype(p.data.dtype, copy=False)
