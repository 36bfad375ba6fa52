"""Network configuration, dilation planning and the differentiable forward pass.

A network is a causal input layer, a cascade of macroblocks (each a run of
fixed or adaptive chunks of residual blocks) and a two-layer output head fed
by the sum of every block's skip output. Adaptive blocks stretch their
dilation by a per-sample factor derived from the auxiliary F0.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import CheckpointError, CheckpointVersionError, ConfigurationError, DataError
from .signal import DEFAULT_SAMPLE_RATE, LEVELS
from .tensor import AdamState, Tensor

FIXED = "fixed"
ADAPTIVE = "adaptive"
MID_CODE = LEVELS // 2
CHECKPOINT_VERSION = "qpnet-checkpoint/1"


@dataclass(frozen=True)
class MacroblockSpec:
    kind: str
    chunks: int
    blocks_per_chunk: int

    def __post_init__(self):
        if self.kind not in (FIXED, ADAPTIVE):
            raise ConfigurationError(f"macroblock kind must be 'fixed' or 'adaptive', got {self.kind!r}")
        if self.chunks < 1 or self.blocks_per_chunk < 1:
            raise ConfigurationError("chunks and blocks_per_chunk must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    macroblocks: tuple
    residual_channels: int = 32
    gate_channels: int = 32
    skip_channels: int = 32
    output_mid_channels: int = 16
    dense_factor: int = 8
    aux_dim: int = 1
    sample_rate: int = DEFAULT_SAMPLE_RATE
    quantization_levels: int = LEVELS
    aux_scale_hz: float = 400.0

    def __post_init__(self):
        blocks = tuple(
            m if isinstance(m, MacroblockSpec) else MacroblockSpec(**m) for m in self.macroblocks
        )
        object.__setattr__(self, "macroblocks", blocks)
        if not blocks:
            raise ConfigurationError("a model needs at least one macroblock")
        for name in ("residual_channels", "gate_channels", "skip_channels", "output_mid_channels", "aux_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.dense_factor < 1:
            raise ConfigurationError("dense_factor must be >= 1")
        if self.quantization_levels != LEVELS:
            raise ConfigurationError("only 256-level mu-law output is supported")

    def layers(self):
        """``(kind, base_dilation)`` for every residual block, in order."""
        out = []
        for mb in self.macroblocks:
            for _ in range(mb.chunks):
                out.extend((mb.kind, 2**b) for b in range(mb.blocks_per_chunk))
        return out

    @property
    def has_adaptive(self):
        return any(mb.kind == ADAPTIVE for mb in self.macroblocks)

    def to_dict(self):
        d = asdict(self)
        d["macroblocks"] = [asdict(m) for m in self.macroblocks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["macroblocks"] = tuple(m if isinstance(m, MacroblockSpec) else MacroblockSpec(**m) for m in d["macroblocks"])
        return cls(**d)

    def with_changes(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)

    def as_fixed(self):
        """Structurally equal network with every macroblock fixed."""
        d = self.to_dict()
        d["macroblocks"] = [dict(m, kind=FIXED) for m in d["macroblocks"]]
        return ModelConfig.from_dict(d)


# Table-I style rosters: name -> macroblock list
ARCHITECTURES = {
    "WNf": [(FIXED, 3, 10)],
    "WNc": [(FIXED, 4, 4)],
    "QPNet": [(FIXED, 3, 4), (ADAPTIVE, 1, 4)],
    "rQPNet": [(ADAPTIVE, 1, 4), (FIXED, 3, 4)],
    "pQPNet": [(ADAPTIVE, 4, 4)],
}

PROFILES = {
    "desk": dict(residual_channels=32, gate_channels=32, skip_channels=32, output_mid_channels=16),
    "paper": dict(residual_channels=128, gate_channels=128, skip_channels=128, output_mid_channels=64),
}


def named_config(name, profile="desk", dense_factor=8, **overrides):
    if name not in ARCHITECTURES:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(ARCHITECTURES)}")
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    blocks = tuple(MacroblockSpec(k, c, b) for k, c, b in ARCHITECTURES[name])
    kwargs = dict(PROFILES[profile], dense_factor=dense_factor)
    kwargs.update(overrides)
    return ModelConfig(macroblocks=blocks, **kwargs)


# --- pitch-dependent dilation --------------------------------------------

def compute_dilation_factor(f0_t, fs, dense_factor):
    """``max(1, round_half_up(fs / (f0 * a)))``; vectorizes over ``f0_t``."""
    f0 = np.asarray(f0_t, dtype=np.float64)
    if np.any(~np.isfinite(f0)) or np.any(f0 <= 0):
        raise DataError("F0 must be positive; interpolate unvoiced regions first")
    e = np.maximum(1, np.floor(fs / (f0 * dense_factor) + 0.5)).astype(np.int64)
    return int(e) if e.ndim == 0 else e


def interpolate_f0(f0, voiced):
    """Fill unvoiced runs linearly between voiced neighbours; hold the edges."""
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.asarray(voiced, dtype=bool)
    if f0.shape != voiced.shape:
        raise DataError("f0 and voiced flags differ in length")
    idx = np.flatnonzero(voiced)
    if idx.size == 0:
        raise DataError("cannot interpolate F0 without any voiced sample")
    if np.any(f0[idx] <= 0):
        raise DataError("voiced samples need positive F0")
    out = np.interp(np.arange(f0.shape[0]), idx, f0[idx])
    out[idx] = f0[idx]
    return out


@dataclass
class AuxTrack:
    """Per-sample F0 (Hz), voicing and network conditioning (``aux_dim x T``)."""

    f0: np.ndarray
    voiced: np.ndarray
    conditioning: np.ndarray

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        cond = np.asarray(self.conditioning, dtype=np.float32)
        if cond.ndim == 1:
            cond = cond[None, :]
        self.conditioning = cond
        if not (self.f0.shape == self.voiced.shape == cond.shape[1:]):
            raise DataError(
                f"aux lengths disagree: f0 {self.f0.shape}, voiced {self.voiced.shape}, "
                f"conditioning {cond.shape}"
            )
        if np.any(self.f0[self.voiced] <= 0):
            raise DataError("voiced samples need positive F0")

    def __len__(self):
        return self.f0.shape[0]

    @classmethod
    def constant(cls, f0, length, aux_scale_hz=400.0, noise_amplitude=0.0, rng=None):
        """Constant-pitch track; conditioning ``(f0 + U(-n, n)) / aux_scale_hz``."""
        f0_track = np.full(length, float(f0))
        cond = f0_track.copy()
        if noise_amplitude:
            rng = rng if rng is not None else np.random.default_rng()
            cond = cond + rng.uniform(-noise_amplitude, noise_amplitude, size=length)
        return cls(f0_track, np.ones(length, dtype=bool), cond / aux_scale_hz)

    def slice(self, start, stop):
        return AuxTrack(self.f0[start:stop], self.voiced[start:stop], self.conditioning[:, start:stop])

    def continuous_f0(self):
        if self.voiced.all():
            return self.f0
        return interpolate_f0(self.f0, self.voiced)


@dataclass
class DilationPlan:
    """Per-layer per-sample offsets ``d'[layer][t]`` plus the factor track."""

    kinds: list
    base: list
    offsets: list
    factors: np.ndarray

    @property
    def length(self):
        return int(self.factors.shape[0])

    def max_offsets(self):
        return [int(o.max()) if o.size else b for o, b in zip(self.offsets, self.base)]


def build_dilation_plan(config, aux, force_unit_factor=False):
    T = len(aux)
    if T < 1:
        raise DataError("aux track is empty")
    if force_unit_factor or not config.has_adaptive:
        factors = np.ones(T, dtype=np.int64)
    else:
        factors = compute_dilation_factor(aux.continuous_f0(), config.sample_rate, config.dense_factor)
    kinds, bases, offsets = [], [], []
    for kind, base in config.layers():
        kinds.append(kind)
        bases.append(base)
        if kind == FIXED:
            offsets.append(np.full(T, base, dtype=np.int64))
        else:
            offsets.append(factors * base)
    return DilationPlan(kinds, bases, offsets, factors)


def receptive_field_length(config):
    """Samples seen with every dilation factor at 1 (causal layer counts one)."""
    return 1 + sum(mb.chunks * (2**mb.blocks_per_chunk - 1) for mb in config.macroblocks)


def effective_receptive_field_length(config, aux, t):
    if not 0 <= t < len(aux):
        raise DataError(f"sample index {t} outside track of length {len(aux)}")
    f0 = aux.continuous_f0()[t]
    e = compute_dilation_factor(f0, config.sample_rate, config.dense_factor)
    total = 1
    for kind, base in config.layers():
        total += base * (e if kind == ADAPTIVE else 1)
    return total


def effective_receptive_field_for_f0(config, f0):
    e = compute_dilation_factor(f0, config.sample_rate, config.dense_factor)
    return 1 + sum(base * (e if kind == ADAPTIVE else 1) for kind, base in config.layers())


# --- parameters ------------------------------------------------------------

class NetworkParams:
    """Named parameter tensors; shapes are a pure function of the config."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    def arrays(self):
        return {k: v.data for k, v in self.tensors.items()}

    def count(self):
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self, dtype=None):
        return NetworkParams(
            self.config,
            {
                k: Tensor(v.data.astype(dtype or v.data.dtype, copy=True), requires_grad=True, name=k)
                for k, v in self.tensors.items()
            },
        )

    def block(self, i):
        p = f"block{i}."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def parameter_shapes(config):
    R, G, S = config.residual_channels, config.gate_channels, config.skip_channels
    M, Q, A = config.output_mid_channels, config.quantization_levels, config.aux_dim
    shapes = {
        "causal.w_cur": (R, Q),
        "causal.w_prev": (R, Q),
        "causal.bias": (R,),
    }
    for i in range(len(config.layers())):
        shapes.update(
            {
                f"block{i}.w_cur": (2 * G, R),
                f"block{i}.w_prev": (2 * G, R),
                f"block{i}.w_aux": (2 * G, A),
                f"block{i}.bias": (2 * G,),
                f"block{i}.w_res": (R, G),
                f"block{i}.b_res": (R,),
                f"block{i}.w_skip": (S, G),
                f"block{i}.b_skip": (S,),
            }
        )
    shapes.update(
        {
            "head.w_mid": (M, S),
            "head.b_mid": (M,),
            "head.w_out": (Q, M),
            "head.b_out": (Q,),
        }
    )
    return shapes


def parameter_count(config):
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def init_params(config, seed=0, dtype=np.float32, zero_head=True):
    """Xavier-uniform weights, zero biases; the final projection starts at zero."""
    rng = np.random.default_rng(seed)
    G = config.gate_channels
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 1 or (zero_head and name == "head.w_out"):
            arr = np.zeros(shape)
        else:
            fan_out = G if shape[0] == 2 * G and name.startswith("block") else shape[0]
            bound = np.sqrt(6.0 / (shape[1] + fan_out))
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return NetworkParams(config, tensors)


# --- forward ---------------------------------------------------------------

def residual_block_forward(x, aux, offsets, bp, gate_channels):
    """One residual block: two-tap (current, ``t - d'[t]``) conv, gated by aux.

    Returns ``(residual_out, skip_out)``.
    """
    if np.shape(offsets) != (x.shape[1],):
        raise ConfigurationError(f"plan row has {np.shape(offsets)} offsets for {x.shape[1]} samples")
    u = tn.add(
        tn.channel_mix(x, bp["w_cur"], bp["bias"]),
        tn.channel_mix(tn.causal_gather(x, offsets), bp["w_prev"]),
    )
    u = tn.add(u, tn.channel_mix(aux, bp["w_aux"]))
    z = tn.mul(tn.tanh(tn.rows(u, 0, gate_channels)), tn.sigmoid(tn.rows(u, gate_channels, 2 * gate_channels)))
    residual = tn.add(x, tn.channel_mix(z, bp["w_res"], bp["b_res"]))
    skip = tn.channel_mix(z, bp["w_skip"], bp["b_skip"])
    return residual, skip


def shifted_input(codes):
    """Teacher-forcing stream: codes delayed by one with a mid-scale start."""
    codes = np.asarray(codes, dtype=np.int64)
    out = np.empty_like(codes)
    out[:1] = MID_CODE
    out[1:] = codes[:-1]
    return out


def causal_layer(params, stream):
    h = tn.add(tn.code_mix(params["causal.w_cur"], stream, 0), tn.code_mix(params["causal.w_prev"], stream, 1))
    return tn.add_bias(h, params["causal.bias"])


def output_head(params, skip_sum):
    h = tn.channel_mix(tn.relu(skip_sum), params["head.w_mid"], params["head.b_mid"])
    return tn.channel_mix(tn.relu(h), params["head.w_out"], params["head.b_out"])


def forward_teacher_forced(params, config, input_codes, aux, plan=None, collect=None):
    """Logits ``(256, T)``; column ``t`` predicts sample ``t`` from samples ``< t``.

    ``collect``, if a list, receives each block's input (the running
    residual stream) as a plain array.
    """
    codes = input_codes.codes if hasattr(input_codes, "codes") else np.asarray(input_codes)
    T = codes.shape[0]
    if len(aux) != T:
        raise DataError(f"input has {T} samples but aux has {len(aux)}")
    if plan is None:
        plan = build_dilation_plan(config, aux)
    if plan.length != T:
        raise ConfigurationError(f"dilation plan covers {plan.length} samples, input has {T}")
    dtype = params["causal.w_cur"].data.dtype
    cond = Tensor(aux.conditioning.astype(dtype, copy=False))
    x = causal_layer(params, shifted_input(codes))
    skip_sum = None
    G = config.gate_channels
    for i, offsets in enumerate(plan.offsets):
        if collect is not None:
            collect.append(x.data)
        x, skip = residual_block_forward(x, cond, offsets, params.block(i), G)
        skip_sum = skip if skip_sum is None else tn.add(skip_sum, skip)
    return output_head(params, skip_sum)


def softmax_columns(logits):
    return np.exp(tn.log_softmax(np.asarray(logits, dtype=np.float64)))


# --- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: NetworkParams
    adam: AdamState | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, params, adam=None, step=0, meta=None):
    """Write an ``.npz`` container with a versioned JSON header."""
    header = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "step": int(step),
        "param_names": params.names(),
        "meta": meta or {},
    }
    arrays = {f"param/{k}": v for k, v in params.arrays().items()}
    if adam is not None:
        header["adam"] = {
            "learning_rate": adam.learning_rate,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "epsilon": adam.epsilon,
            "step_count": adam.step_count,
        }
        for k, m, v in zip(params.names(), adam.first_moment, adam.second_moment):
            arrays[f"adam_m/{k}"] = m
            arrays[f"adam_v/{k}"] = v
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path):
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            if "header" not in z.files:
                raise CheckpointError(f"{path}: no header record")
            header = json.loads(z["header"].tobytes().decode())
            if header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointVersionError(
                    f"{path}: checkpoint version {header.get('version')!r}, expected {CHECKPOINT_VERSION!r}"
                )
            config = ModelConfig.from_dict(header["config"])
            names = header["param_names"]
            tensors = {k: Tensor(z[f"param/{k}"].copy(), requires_grad=True, name=k) for k in names}
            adam = None
            if "adam" in header:
                adam = AdamState(**header["adam"])
                adam.first_moment = [z[f"adam_m/{k}"].copy() for k in names]
                adam.second_moment = [z[f"adam_v/{k}"].copy() for k in names]
    except (zipfile.BadZipFile, EOFError, KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({exc})") from exc
    expected = parameter_shapes(config)
    for k, t in tensors.items():
        if tuple(t.shape) != tuple(expected.get(k, ())):
            raise CheckpointError(f"{path}: parameter {k} has shape {t.shape}, config expects {expected.get(k)}")
    return Checkpoint(config, NetworkParams(config, tensors), adam, header["step"], header.get("meta", {}))
