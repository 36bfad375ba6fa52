"""Central finite-difference checks of every differentiable operation."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .model import (
    ADAPTIVE,
    AuxTrack,
    MacroblockSpec,
    ModelConfig,
    build_dilation_plan,
    forward_teacher_forced,
    init_params,
    residual_block_forward,
)
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


class CheckResult(NamedTuple):
    name: str
    max_rel_error: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def relative_error(analytic, numeric):
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def numeric_gradient(loss_fn, tensor, h=STEP):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``tensor``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with tn.no_grad():
            up = float(loss_fn().data)
        flat[i] = orig - h
        with tn.no_grad():
            down = float(loss_fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check(name, loss_fn, tensors, h=STEP):
    """Max relative error between backprop and finite differences over ``tensors``."""
    for t in tensors:
        t.zero_grad()
    tn.backward(loss_fn())
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        worst = max(worst, relative_error(a, numeric_gradient(loss_fn, t, h)))
    return CheckResult(name, worst)


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def tiny_config(kinds=(ADAPTIVE,), channels=4, blocks=2):
    return ModelConfig(
        macroblocks=tuple(MacroblockSpec(k, 1, blocks) for k in kinds),
        residual_channels=channels,
        gate_channels=channels,
        skip_channels=channels,
        output_mid_channels=channels,
        dense_factor=8,
    )


def run_all(seed=0):
    """Run every operation and end-to-end check in 64-bit; returns results."""
    rng = np.random.default_rng(seed)
    results = []
    C, T = 3, 7

    x, w, b = _leaf(rng, 4, T), _leaf(rng, C, 4), _leaf(rng, C)
    r = rng.standard_normal((C, T))
    results.append(check("channel_mix", lambda: tn.weighted_sum(tn.channel_mix(x, w, b), r), [x, w, b]))

    a, c = _leaf(rng, C, T), _leaf(rng, C, T)
    rr = rng.standard_normal((C, T))
    offsets = rng.integers(1, 4, size=T)
    results.append(check("causal_gather", lambda: tn.weighted_sum(tn.causal_gather(a, offsets), rr), [a]))
    results.append(check("add", lambda: tn.weighted_sum(tn.add(a, c), rr), [a, c]))
    results.append(check("mul", lambda: tn.weighted_sum(tn.mul(a, c), rr), [a, c]))
    results.append(check("tanh", lambda: tn.weighted_sum(tn.tanh(a), rr), [a]))
    results.append(check("sigmoid", lambda: tn.weighted_sum(tn.sigmoid(a), rr), [a]))
    results.append(check("relu", lambda: tn.weighted_sum(tn.relu(a), rr), [a]))
    results.append(check("rows", lambda: tn.weighted_sum(tn.rows(a, 1, 3), rr[1:3]), [a]))
    bias = _leaf(rng, C)
    results.append(check("add_bias", lambda: tn.weighted_sum(tn.add_bias(a, bias), rr), [a, bias]))

    codes = rng.integers(0, 6, size=T)
    wc = _leaf(rng, C, 6)
    results.append(check("code_mix", lambda: tn.weighted_sum(tn.code_mix(wc, codes, 1), rr), [wc]))

    logits = _leaf(rng, 8, 5)
    targets = rng.integers(0, 8, size=5)
    results.append(check("softmax_cross_entropy", lambda: tn.softmax_cross_entropy(logits, targets), [logits]))

    # shared input consumed twice
    results.append(
        check("fan_out", lambda: tn.weighted_sum(tn.mul(tn.tanh(a), tn.sigmoid(a)), rr), [a])
    )

    cfg = tiny_config()
    params = init_params(cfg, seed, dtype=np.float64, zero_head=False)
    T2 = 32
    aux = AuxTrack.constant(2500.0, T2, aux_scale_hz=cfg.aux_scale_hz)
    plan = build_dilation_plan(cfg, aux)
    xb = _leaf(rng, cfg.residual_channels, T2)
    cond = Tensor(aux.conditioning, dtype=np.float64)
    off = rng.integers(1, 9, size=T2)
    rb = rng.standard_normal((cfg.residual_channels, T2))
    sb = rng.standard_normal((cfg.skip_channels, T2))
    block = params.block(0)

    def block_loss():
        res, skip = residual_block_forward(xb, cond, off, block, cfg.gate_channels)
        return tn.add(tn.weighted_sum(res, rb), tn.weighted_sum(skip, sb))

    results.append(check("residual_block", block_loss, [xb] + list(block.values())))

    seq = rng.integers(0, 256, size=T2)

    def model_loss():
        return tn.softmax_cross_entropy(forward_teacher_forced(params, cfg, seq, aux, plan), seq)

    # the 256-column input tables are large; the other tensors are checked in full
    small = [t for name, t in params.tensors.items() if not name.startswith("causal.w")]
    results.append(check("end_to_end", model_loss, small))
    causal = params["causal.w_cur"]
    used = np.unique(np.concatenate([[128], seq[:-1]]))
    causal.zero_grad()
    tn.backward(model_loss())
    analytic = causal.grad[:, used].copy()
    causal.zero_grad()
    numeric = numeric_gradient(model_loss, causal)[:, used]
    results.append(CheckResult("end_to_end_input_layer", relative_error(analytic, numeric)))
    return results
