"""Sinusoid dataset construction and the teacher-forced optimization loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from ._runtime import tune_allocator
from .errors import ConfigurationError, DataError, TrainingDivergedError
from .model import AuxTrack, forward_teacher_forced, save_checkpoint
from .signal import (
    DEFAULT_SAMPLE_RATE,
    QuantizedClip,
    add_noise_snr,
    mulaw_encode,
    synth_sinusoid,
)
from .tensor import AdamState

log = logging.getLogger(__name__)

TRAIN_F0 = tuple(range(80, 401, 20))
HELDOUT_STREAM = 2**31 - 1


@dataclass
class DatasetSpec:
    f0_list: tuple = TRAIN_F0
    utterances_per_f0: int = 24
    total_utterances: int | None = None
    seconds_per_utterance: float = 1.0
    signal_snr_db: float = 20.0
    aux_noise_amplitude: float = 1.0
    amplitude: float = 0.5
    sample_rate: int = DEFAULT_SAMPLE_RATE
    aux_scale_hz: float = 400.0
    seed: int = 0

    def __post_init__(self):
        self.f0_list = tuple(float(f) for f in self.f0_list)
        if not self.f0_list:
            raise ConfigurationError("f0_list is empty")
        for f in self.f0_list:
            if not 0 < f < self.sample_rate / 2:
                raise ConfigurationError(f"training F0 {f} Hz is not below Nyquist ({self.sample_rate / 2} Hz)")

    @property
    def size(self):
        if self.total_utterances is not None:
            return int(self.total_utterances)
        return len(self.f0_list) * self.utterances_per_f0

    @property
    def f0_range(self):
        return min(self.f0_list), max(self.f0_list)


@dataclass
class TrainingItem:
    input: QuantizedClip
    target: QuantizedClip
    aux: AuxTrack
    f0: float
    phase: float


def make_item(spec, f0, rng, aux_noise_amplitude=None):
    """One noisy-input / clean-target utterance with its auxiliary track."""
    phase = rng.uniform(0.0, 2 * np.pi)
    clean = synth_sinusoid(f0, spec.seconds_per_utterance, spec.sample_rate, phase, spec.amplitude)
    noisy = add_noise_snr(clean, spec.signal_snr_db, rng)
    amp = spec.aux_noise_amplitude if aux_noise_amplitude is None else aux_noise_amplitude
    aux = AuxTrack.constant(f0, len(clean), spec.aux_scale_hz, amp, rng)
    return TrainingItem(mulaw_encode(noisy), mulaw_encode(clean), aux, float(f0), float(phase))


class SinusoidDataset:
    """Deterministic, lazily synthesized sinusoid corpus.

    Item ``i`` depends only on ``(spec.seed, i)``, so items can be rebuilt in
    any order or in parallel. F0 values are assigned round-robin.
    """

    def __init__(self, spec):
        self.spec = spec

    def __len__(self):
        return self.spec.size

    def f0_of(self, i):
        return self.spec.f0_list[i % len(self.spec.f0_list)]

    def __getitem__(self, i):
        if not 0 <= i < len(self):
            raise IndexError(i)
        rng = np.random.default_rng([self.spec.seed, i])
        return make_item(self.spec, self.f0_of(i), rng)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def heldout(self):
        """Clean-conditioning utterance outside the training stream."""
        rng = np.random.default_rng([self.spec.seed, HELDOUT_STREAM])
        f0 = self.spec.f0_list[len(self.spec.f0_list) // 2]
        return make_item(self.spec, f0, rng, aux_noise_amplitude=0.0)


def build_sinusoid_dataset(spec):
    return SinusoidDataset(spec)


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    final_lr_fraction: float = 1.0
    batch_size: int = 1
    batch_length_samples: int = 22050
    epochs: int = 2
    checkpoint_every_steps: int = 0
    seed: int = 0
    log_every_steps: int = 50

    def __post_init__(self):
        if self.batch_size != 1:
            raise ConfigurationError("only minibatches of one utterance are supported")
        if self.batch_length_samples < 1 or self.epochs < 0:
            raise ConfigurationError("batch_length_samples must be >= 1 and epochs >= 0")
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigurationError("final_lr_fraction must be in (0, 1]")

    def learning_rate_at(self, step, total):
        """Cosine decay from ``learning_rate`` to ``learning_rate * final_lr_fraction``."""
        if self.final_lr_fraction == 1.0 or total <= 1:
            return self.learning_rate
        progress = min(step / (total - 1), 1.0)
        low = self.learning_rate * self.final_lr_fraction
        return low + 0.5 * (self.learning_rate - low) * (1 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    params: object
    adam: AdamState
    history: list = field(default_factory=list)
    heldout_loss: float = float("nan")
    seconds: float = 0.0

    @property
    def steps(self):
        return self.adam.step_count


def _crop(item, length, rng):
    T = len(item.target)
    if T <= length:
        return item.input.codes, item.target.codes, item.aux
    start = int(rng.integers(0, T - length + 1))
    stop = start + length
    return item.input.codes[start:stop], item.target.codes[start:stop], item.aux.slice(start, stop)


def schedule(n_items, epochs, seed):
    """Global step -> dataset index; one seeded permutation per epoch."""
    order = []
    for epoch in range(epochs):
        order.extend(np.random.default_rng([seed, epoch]).permutation(n_items).tolist())
    return order


def loss_on(params, config, item):
    with tn.no_grad():
        logits = forward_teacher_forced(params, config, item.input, item.aux)
        return float(tn.softmax_cross_entropy(logits, item.target.codes).data)


def train_step(params, config, adam, inputs, targets, aux):
    logits = forward_teacher_forced(params, config, inputs, aux)
    loss = tn.softmax_cross_entropy(logits, targets)
    value = float(loss.data)
    if not math.isfinite(value):
        return value
    tn.backward(loss)
    tensors = params.values()
    tn.adam_step(tensors, [t.grad for t in tensors], adam)
    params.zero_grad()
    return value


def train(
    params,
    train_config,
    dataset,
    adam=None,
    max_steps=None,
    checkpoint_dir=None,
    progress=None,
):
    """Teacher-forced training; resumes from ``adam.step_count`` when given."""
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    tune_allocator()
    config = params.config
    if adam is None:
        adam = AdamState.for_params(params.values(), learning_rate=train_config.learning_rate)
    order = schedule(len(dataset), train_config.epochs, train_config.seed)
    total = len(order) if max_steps is None else min(len(order), max_steps)
    history = []
    started = time.perf_counter()
    while adam.step_count < total:
        step = adam.step_count
        adam.learning_rate = train_config.learning_rate_at(step, len(order))
        item = dataset[order[step]]
        rng = np.random.default_rng([train_config.seed, HELDOUT_STREAM, step])
        inputs, targets, aux = _crop(item, train_config.batch_length_samples, rng)
        value = train_step(params, config, adam, inputs, targets, aux)
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"loss became {value} at step {step} (learning rate {adam.learning_rate:g})"
            )
        history.append((adam.step_count, value))
        if train_config.log_every_steps and adam.step_count % train_config.log_every_steps == 0:
            recent = np.mean([v for _, v in history[-train_config.log_every_steps :]])
            log.info("step %d/%d loss %.4f (%.1fs)", adam.step_count, total, recent, time.perf_counter() - started)
        if progress is not None:
            progress(adam.step_count, total, value)
        every = train_config.checkpoint_every_steps
        if checkpoint_dir is not None and every and adam.step_count % every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step{adam.step_count:07d}.npz", params, adam, adam.step_count)
    heldout = loss_on(params, config, dataset.heldout()) if hasattr(dataset, "heldout") else float("nan")
    return TrainResult(params, adam, history, heldout, time.perf_counter() - started)


def write_loss_csv(path, history):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in history:
            w.writerow([step, f"{loss:.6f}"])


def spec_to_dict(spec):
    d = asdict(spec)
    if "f0_list" in d:
        d["f0_list"] = list(d["f0_list"])
    return d
