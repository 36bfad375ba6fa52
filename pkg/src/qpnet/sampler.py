"""Sample-by-sample autoregressive generation with time-variant dilations.

Every residual block keeps a ring buffer of its own past inputs, long
enough for the largest offset it can be asked for. Each new sample gathers
``x[t - d'[t]]`` straight from those buffers, so the per-sample offset can
change freely. Fixed-dilation queue rotation cannot do that.

Generation is vectorized over a batch of independent requests. Each row has
its own clock, random stream and dilation track, so a request produces the
same codes whether it runs alone or in a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, DataError
from .model import (
    ADAPTIVE,
    MID_CODE,
    AuxTrack,
    compute_dilation_factor,
    effective_receptive_field_for_f0,
    forward_teacher_forced,
)
from .signal import AudioClip, mulaw_decode_array, mulaw_encode_array

CATEGORICAL = "categorical"
ARGMAX = "argmax"


@dataclass
class GenerationRequest:
    """One generation job.

    ``f0`` is a constant in Hz or a per-sample track covering the generated
    samples; the seed region uses its first value. ``seed_length`` defaults
    to the longest effective receptive field for the requested F0.
    """

    f0: object
    seconds: float = 1.0
    seed_clip: AudioClip | None = None
    sampling_mode: str = CATEGORICAL
    temperature: float = 1.0
    rng_seed: int = 0
    seed_length: int | None = None

    def __post_init__(self):
        if self.seconds <= 0:
            raise ConfigurationError("seconds must be positive")
        if self.sampling_mode not in (CATEGORICAL, ARGMAX):
            raise ConfigurationError(f"sampling_mode must be {CATEGORICAL!r} or {ARGMAX!r}")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")


def _f0_track(request, n_out):
    f0 = np.asarray(request.f0, dtype=np.float64)
    if f0.ndim == 0:
        return np.full(n_out, float(f0))
    if f0.shape != (n_out,):
        raise DataError(f"per-sample F0 track has {f0.shape[0]} values, {n_out} samples requested")
    return f0


def seed_length_for(config, f0):
    return effective_receptive_field_for_f0(config, float(np.min(f0)))


class LayerStateBuffer:
    """Ring buffers of every block's past inputs for a batch of rows."""

    def __init__(self, config, capacities, batch, dtype=np.float32):
        self.capacities = [int(c) for c in capacities]
        R = config.residual_channels
        self.buffers = [np.zeros((batch, R, c), dtype=dtype) for c in self.capacities]
        self.time = np.zeros(batch, dtype=np.int64)
        self.stream = np.full(batch, MID_CODE, dtype=np.int64)
        self.prev_stream = np.full(batch, -1, dtype=np.int64)

    @property
    def batch(self):
        return self.time.shape[0]

    def load_row(self, row, histories, codes):
        """Fill one row from per-layer histories ``(R, S)`` of a seed of ``S`` codes."""
        S = len(codes)
        for buf, cap, hist in zip(self.buffers, self.capacities, histories):
            keep = min(cap, S)
            idx = np.arange(S - keep, S)
            buf[row][:, idx % cap] = hist[:, S - keep :]
        self.time[row] = S
        if S:
            self.stream[row] = codes[-1]
            self.prev_stream[row] = codes[-2] if S >= 2 else MID_CODE

    def read(self, layer, offsets):
        t = self.time - offsets
        cap = self.capacities[layer]
        rows = np.arange(self.batch)
        out = self.buffers[layer][rows, :, t % cap]
        out[t < 0] = 0.0
        return out

    def write(self, layer, values):
        cap = self.capacities[layer]
        self.buffers[layer][np.arange(self.batch), :, self.time % cap] = values


def capacities_for(config, min_f0):
    e = compute_dilation_factor(min_f0, config.sample_rate, config.dense_factor) if config.has_adaptive else 1
    return [base * (e if kind == ADAPTIVE else 1) + 1 for kind, base in config.layers()]


def seed_receptive_field(params, config, seed_codes, aux, capacities=None):
    """Buffers holding what a teacher-forced pass over the seed leaves behind.

    An empty seed yields zero buffers at time 0.
    """
    seed_codes = np.asarray(seed_codes, dtype=np.int64)
    if capacities is None:
        capacities = capacities_for(config, float(aux.continuous_f0().min()) if len(aux) else 1e9)
    dtype = params["causal.w_cur"].data.dtype
    state = LayerStateBuffer(config, capacities, 1, dtype)
    if seed_codes.size:
        histories = _seed_histories(params, config, seed_codes, aux)
        state.load_row(0, histories, seed_codes)
    return state


def _seed_histories(params, config, codes, aux):
    collected = []
    with tn.no_grad():
        forward_teacher_forced(params, config, codes, aux, collect=collected)
    return collected


class _Weights:
    """Plain arrays laid out for row-major ``(batch, channels)`` stepping."""

    def __init__(self, params, config):
        a = params.arrays()
        self.G = config.gate_channels
        self.causal_cur = a["causal.w_cur"].T.copy()
        self.causal_prev = a["causal.w_prev"].T.copy()
        self.causal_bias = a["causal.bias"]
        self.blocks = []
        for i in range(len(config.layers())):
            p = f"block{i}."
            self.blocks.append(
                (
                    a[p + "w_cur"].T.copy(),
                    a[p + "w_prev"].T.copy(),
                    a[p + "w_aux"].T.copy(),
                    a[p + "bias"],
                    a[p + "w_res"].T.copy(),
                    a[p + "b_res"],
                    a[p + "w_skip"].T.copy(),
                    a[p + "b_skip"],
                )
            )
        self.mid = a["head.w_mid"].T.copy()
        self.b_mid = a["head.b_mid"]
        self.out = a["head.w_out"].T.copy()
        self.b_out = a["head.b_out"]


def step_logits(weights, state, offsets, cond):
    """Logits ``(batch, 256)`` for the next sample of every row; advances buffers.

    ``offsets`` is a list (per layer) of ``(batch,)`` offsets and ``cond`` is
    ``(batch, aux_dim)`` conditioning for the current time.
    """
    h = weights.causal_cur[state.stream]
    has_prev = state.prev_stream >= 0
    h = h + np.where(has_prev[:, None], weights.causal_prev[np.maximum(state.prev_stream, 0)], 0)
    h = h + weights.causal_bias
    skip_sum = None
    G = weights.G
    for layer, (w_cur, w_prev, w_aux, bias, w_res, b_res, w_skip, b_skip) in enumerate(weights.blocks):
        past = state.read(layer, offsets[layer])
        state.write(layer, h)
        u = h @ w_cur + bias + past @ w_prev + cond @ w_aux
        z = np.tanh(u[:, :G]) * tn._sigmoid(u[:, G:])
        skip = z @ w_skip + b_skip
        h = h + (z @ w_res + b_res)
        skip_sum = skip if skip_sum is None else skip_sum + skip
    mid = np.maximum(skip_sum, 0) @ weights.mid + weights.b_mid
    return np.maximum(mid, 0) @ weights.out + weights.b_out


def advance(state, codes):
    state.prev_stream = state.stream.copy()
    state.stream = np.asarray(codes, dtype=np.int64)
    state.time += 1


def draw_categorical(logits, temperatures, uniforms):
    """Inverse-CDF draw per row from ``softmax(logits / temperature)``."""
    z = logits.astype(np.float64) / np.asarray(temperatures, dtype=np.float64)[:, None]
    z -= z.max(axis=1, keepdims=True)
    cdf = np.cumsum(np.exp(z), axis=1)
    target = uniforms * cdf[:, -1]
    return np.minimum((cdf < target[:, None]).sum(axis=1), logits.shape[1] - 1)


class BatchGenerator:
    """Runs several :class:`GenerationRequest` jobs in lockstep."""

    def __init__(self, params, config, min_supported_f0=None):
        self.params = params
        self.config = config
        self.weights = _Weights(params, config)
        self.min_supported_f0 = min_supported_f0

    def _prepare(self, request):
        fs = self.config.sample_rate
        n_out = int(round(request.seconds * fs))
        f0_out = _f0_track(request, n_out)
        if np.any(f0_out <= 0):
            raise DataError("generation F0 must be positive")
        if request.seed_clip is None:
            seed_codes = np.zeros(0, dtype=np.int64)
        else:
            if len(request.seed_clip) < 1:
                raise DataError("seed clip must hold at least one sample")
            want = request.seed_length or seed_length_for(self.config, f0_out)
            seed_codes = mulaw_encode_array(request.seed_clip.samples[-want:])
        S = seed_codes.shape[0]
        f0_all = np.concatenate([np.full(S, f0_out[0]), f0_out])
        return n_out, seed_codes, f0_all

    def run(self, requests, return_logits=False):
        """Generate every request; optionally also return logits ``(B, N, 256)`` and codes."""
        cfg = self.config
        prepared = [self._prepare(r) for r in requests]
        lowest = min(float(f0.min()) for _, _, f0 in prepared)
        if self.min_supported_f0 is not None:
            if lowest < self.min_supported_f0:
                raise ConfigurationError(
                    f"requested F0 {lowest:g} Hz needs offsets beyond the buffers; "
                    f"minimum supported F0 is {self.min_supported_f0:g} Hz"
                )
            lowest = self.min_supported_f0
        B = len(requests)
        dtype = self.params["causal.w_cur"].data.dtype
        state = LayerStateBuffer(cfg, capacities_for(cfg, lowest), B, dtype)
        n_max = max(p[0] for p in prepared)
        # per-row tracks indexed by generation step; finished rows hold their last value
        factors = np.ones((B, n_max), dtype=np.int64)
        cond = np.zeros((B, n_max, cfg.aux_dim), dtype=dtype)
        for row, (n_out, seed_codes, f0_all) in enumerate(prepared):
            S = seed_codes.shape[0]
            aux = AuxTrack(f0_all, np.ones(len(f0_all), bool), f0_all / cfg.aux_scale_hz)
            if S:
                state.load_row(row, _seed_histories(self.params, cfg, seed_codes, aux.slice(0, S)), seed_codes)
            steps = np.minimum(S + np.arange(n_max), len(f0_all) - 1)
            if cfg.has_adaptive:
                factors[row] = compute_dilation_factor(f0_all[steps], cfg.sample_rate, cfg.dense_factor)
            cond[row] = aux.conditioning[:, steps].T
        uniforms = np.stack([np.random.default_rng(r.rng_seed).random(n_max) for r in requests])
        argmax_rows = np.array([r.sampling_mode == ARGMAX for r in requests])
        temperatures = np.array([r.temperature for r in requests])
        layer_kinds = cfg.layers()
        ones = np.ones(B, dtype=np.int64)
        out_codes = np.empty((B, n_max), dtype=np.int64)
        logits_log = np.empty((B, n_max, cfg.quantization_levels), dtype=dtype) if return_logits else None
        for n in range(n_max):
            e_now = factors[:, n]
            offsets = [base * (e_now if kind == ADAPTIVE else ones) for kind, base in layer_kinds]
            logits = step_logits(self.weights, state, offsets, cond[:, n])
            if logits_log is not None:
                logits_log[:, n] = logits
            codes = np.empty(B, dtype=np.int64)
            if argmax_rows.any():
                codes[argmax_rows] = np.argmax(logits[argmax_rows], axis=1)
            if not argmax_rows.all():
                cat = ~argmax_rows
                codes[cat] = draw_categorical(logits[cat], temperatures[cat], uniforms[cat, n])
            out_codes[:, n] = codes
            advance(state, codes)
        fs = cfg.sample_rate
        clips = [AudioClip(mulaw_decode_array(out_codes[b, : prepared[b][0]]), fs) for b in range(B)]
        if return_logits:
            return clips, logits_log, out_codes
        return clips


def generate(params, config, request, min_supported_f0=None):
    """Generate one clip of ``round(seconds * fs)`` samples."""
    return BatchGenerator(params, config, min_supported_f0).run([request])[0]


def generate_batch(params, config, requests, min_supported_f0=None, batch_size=None):
    if not requests:
        return []
    size = batch_size or len(requests)
    gen = BatchGenerator(params, config, min_supported_f0)
    clips = []
    for start in range(0, len(requests), size):
        clips.extend(gen.run(requests[start : start + size]))
    return clips
