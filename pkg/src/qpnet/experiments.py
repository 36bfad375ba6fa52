"""Sinusoid-generation studies: dense-factor sweep and model comparison.

Each study trains models on the same synthetic corpus, generates every
(test F0, phase) pair from a noisy seed and scores the output by SNR and
PSD-peak pitch. Results are grouped into bands around the training range
``[L, U]`` and written as CSV files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigurationError, TrainingDivergedError
from .model import (
    ARCHITECTURES,
    PROFILES,
    init_params,
    load_checkpoint,
    named_config,
    save_checkpoint,
)
from .sampler import GenerationRequest, capacities_for, generate_batch, seed_length_for
from .signal import (
    DEFAULT_SEARCH_FLOOR_HZ,
    add_noise_snr,
    measure_tone,
    periodogram,
    synth_sinusoid,
    write_wav,
)
from .training import DatasetSpec, TrainingConfig, build_sinusoid_dataset, spec_to_dict, train, write_loss_csv

log = logging.getLogger(__name__)

TEST_F0 = tuple(range(10, 81, 10)) + (100, 200, 300, 400) + tuple(range(450, 801, 50))
BANDS = ("under_half_L", "above_half_L", "inside", "under_3half_U", "above_3half_U")
AVERAGE = "average"
SUMMARY_HEADER = ["model", "dense_factor", "band", "mean_snr_db", "mean_logf0_rmse", "n"]
ROW_HEADER = [
    "profile",
    "model",
    "dense_factor",
    "f0_hz",
    "phase_index",
    "band",
    "status",
    "snr_db",
    "measured_f0_hz",
    "detected",
    "log_f0_error",
]
PSD_POLICIES = ("none", "first_phase", "all")
GENERATION_BUFFER_BUDGET = 256 << 20


def band_of(f0, lower, upper):
    """Band label of a test frequency relative to the training range ``[lower, upper]``."""
    if f0 <= 0:
        raise ConfigurationError(f"test frequency must be positive, got {f0}")
    if f0 <= lower / 2:
        return "under_half_L"
    if f0 <= lower:
        return "above_half_L"
    if f0 <= upper:
        return "inside"
    if f0 <= 1.5 * upper:
        return "under_3half_U"
    return "above_3half_U"


@dataclass
class ExperimentSpec:
    models: tuple = ("WNc", "pQPNet")
    comparison_dense_factor: int = 8
    sweep_model: str = "pQPNet"
    dense_factors: tuple = (1, 8, 64)
    profile: str = "desk"
    model_overrides: dict = field(default_factory=dict)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig(learning_rate=3e-3))
    sweep_training: dict = field(default_factory=lambda: {"epochs": 6, "final_lr_fraction": 0.05})
    epochs_override: dict = field(default_factory=lambda: {"1": 10})
    max_steps: int | None = None
    test_f0: tuple = TEST_F0
    phases_per_f0: int = 10
    test_seconds: float = 1.0
    test_amplitude: float = 0.5
    seed_snr_db: float = 20.0
    sampling_mode: str = "categorical"
    temperature: float = 1.0
    seed: int = 0
    generation_batch: int = 20
    write_wavs: bool = True
    psd_dump: str = "first_phase"

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec(**self.dataset)
        if isinstance(self.training, dict):
            self.training = TrainingConfig(**self.training)
        self.models = tuple(self.models)
        self.dense_factors = tuple(int(a) for a in self.dense_factors)
        self.test_f0 = tuple(float(f) for f in self.test_f0)
        self.epochs_override = {str(k): int(v) for k, v in self.epochs_override.items()}
        unknown = sorted(set(self.sweep_training) - {f.name for f in fields(TrainingConfig)})
        if unknown:
            raise ConfigurationError(f"unknown sweep_training keys: {', '.join(unknown)}")
        for m in self.models + (self.sweep_model,):
            if m not in ARCHITECTURES:
                raise ConfigurationError(f"unknown model {m!r}; choose from {sorted(ARCHITECTURES)}")
        if self.profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if any(a < 1 for a in self.dense_factors) or self.comparison_dense_factor < 1:
            raise ConfigurationError("dense factors must be >= 1")
        if self.phases_per_f0 < 1 or self.test_seconds <= 0:
            raise ConfigurationError("phases_per_f0 must be >= 1 and test_seconds > 0")
        if self.psd_dump not in PSD_POLICIES:
            raise ConfigurationError(f"psd_dump must be one of {PSD_POLICIES}")
        nyquist = self.dataset.sample_rate / 2
        for f in self.test_f0:
            if not 0 < f < nyquist:
                raise ConfigurationError(f"test F0 {f} Hz outside (0, {nyquist}) Hz")

    @property
    def train_range(self):
        return self.dataset.f0_range

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["dataset"] = spec_to_dict(self.dataset)
        d["training"] = asdict(self.training)
        for k in ("models", "dense_factors", "test_f0"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known - {"_comment"})
        if unknown:
            raise ConfigurationError(f"unknown experiment keys: {', '.join(unknown)}")
        d = {k: v for k, v in d.items() if k in known}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def with_seed(self, seed):
        """Copy with every seed (init, corpus, shuffling, test) set to ``seed``."""
        d = self.to_dict()
        d["seed"] = seed
        d["dataset"]["seed"] = seed
        d["training"]["seed"] = seed
        return ExperimentSpec.from_dict(d)

    def with_changes(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ExperimentSpec.from_dict(d)

    def model_config(self, name, dense_factor):
        return named_config(
            name,
            profile=self.profile,
            dense_factor=dense_factor,
            sample_rate=self.dataset.sample_rate,
            aux_scale_hz=self.dataset.aux_scale_hz,
            **self.model_overrides,
        )

    def sweep_training_for(self, dense_factor):
        """Training settings of one sweep run: ``training``, then ``sweep_training``,
        then the per-factor ``epochs_override``."""
        d = {**asdict(self.training), **self.sweep_training}
        d["epochs"] = self.epochs_override.get(str(dense_factor), d["epochs"])
        return TrainingConfig(**d)


def load_spec(path):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return ExperimentSpec.from_dict(data)


def save_spec(path, spec):
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


# --- report ------------------------------------------------------------------

@dataclass
class UtteranceRow:
    profile: str
    model: str
    dense_factor: int
    f0_hz: float
    phase_index: int
    band: str
    status: str
    snr_db: float
    measured_f0_hz: float
    detected: bool
    log_f0_error: float


@dataclass
class BandSummary:
    model: str
    dense_factor: int
    band: str
    mean_snr_db: float
    mean_logf0_rmse: float
    n: int
    snr_ci95: tuple = (math.nan, math.nan)
    abs_log_f0_ci95: tuple = (math.nan, math.nan)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    clips: dict = field(default_factory=dict)
    psds: dict = field(default_factory=dict)

    def lookup(self, model, dense_factor, band):
        for s in self.summary:
            if s.model == model and s.dense_factor == dense_factor and s.band == band:
                return s
        raise KeyError((model, dense_factor, band))

    def groups(self):
        seen = []
        for s in self.summary:
            if (s.model, s.dense_factor) not in seen:
                seen.append((s.model, s.dense_factor))
        return seen

    def extend(self, other):
        self.rows.extend(other.rows)
        self.summary.extend(other.summary)
        self.clips.update(other.clips)
        self.psds.update(other.psds)


def _ci95(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return (math.nan, math.nan)
    m = values.mean()
    half = stats.t.ppf(0.975, values.size - 1) * values.std(ddof=1) / math.sqrt(values.size)
    return (float(m - half), float(m + half))


def band_group_metrics(rows, lower, upper):
    """Per-band aggregates for the rows of one (model, dense factor) group.

    SNR is averaged over utterances; the log-F0 figure is the RMSE over the
    band's utterances. The ``average`` entry is the mean of the band values.
    Rows whose status is not ``ok`` are excluded.
    """
    if not rows:
        return []
    model, a = rows[0].model, rows[0].dense_factor
    by_band = {b: [] for b in BANDS}
    for r in rows:
        assert (r.model, r.dense_factor) == (model, a), "rows span several groups"
        band = band_of(r.f0_hz, lower, upper)
        assert band == r.band, f"row band {r.band} disagrees with {band} for {r.f0_hz} Hz"
        if r.status == "ok":
            by_band[band].append(r)
    out = []
    for band in BANDS:
        members = by_band[band]
        if not members and not any(band_of(r.f0_hz, lower, upper) == band for r in rows):
            continue
        snr = [r.snr_db for r in members]
        err = [r.log_f0_error for r in members]
        out.append(
            BandSummary(
                model,
                a,
                band,
                float(np.mean(snr)) if snr else math.nan,
                float(np.sqrt(np.mean(np.square(err)))) if err else math.nan,
                len(members),
                _ci95(snr),
                _ci95(np.abs(err)),
            )
        )
    valid = [s for s in out if s.n]
    out.append(
        BandSummary(
            model,
            a,
            AVERAGE,
            float(np.mean([s.mean_snr_db for s in valid])) if valid else math.nan,
            float(np.mean([s.mean_logf0_rmse for s in valid])) if valid else math.nan,
            sum(s.n for s in out),
        )
    )
    return out


def _fmt(x):
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else f"{x:.4f}"
    return str(x)


def wav_name(model, dense_factor, f0, phase_index):
    return f"{model}_{dense_factor}_{f0:g}_{phase_index}.wav"


def emit_report(report, out_dir):
    """Write ``summary.csv``, ``per_utterance.csv``, ``band_ci.csv``,
    ``report.json``, PSD dumps and WAVs under ``out_dir``; returns the paths."""
    if not report.rows and not report.summary:
        raise ConfigurationError("report is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"summary": out / "summary.csv", "rows": out / "per_utterance.csv", "ci": out / "band_ci.csv"}
    with paths["summary"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for s in report.summary:
            w.writerow([_fmt(getattr(s, k)) for k in SUMMARY_HEADER])
    with paths["rows"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROW_HEADER)
        for r in report.rows:
            w.writerow([_fmt(getattr(r, k)) for k in ROW_HEADER])
    with paths["ci"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "dense_factor", "band", "snr_ci95_low", "snr_ci95_high", "abs_log_f0_ci95_low", "abs_log_f0_ci95_high", "n"])
        for s in report.summary:
            if s.band != AVERAGE:
                w.writerow([_fmt(v) for v in (s.model, s.dense_factor, s.band, *s.snr_ci95, *s.abs_log_f0_ci95, s.n)])
    (out / "report.json").write_text(json.dumps(report.meta, indent=2, sort_keys=True) + "\n")
    if report.psds:
        psd_dir = out / "psd"
        psd_dir.mkdir(exist_ok=True)
        for (model, a, f0, k), psd in report.psds.items():
            with (psd_dir / wav_name(model, a, f0, k).replace(".wav", ".csv")).open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["freq_hz", "power"])
                for f, p in zip(psd.freqs, psd.power):
                    w.writerow([f"{f:.4f}", f"{p:.6e}"])
    if report.clips:
        wav_dir = out / "wav"
        wav_dir.mkdir(exist_ok=True)
        for (model, a, f0, k), clip in report.clips.items():
            write_wav(wav_dir / wav_name(model, a, f0, k), clip)
    return paths


def read_summary(path):
    """Rows of ``summary.csv`` as dicts with numeric fields parsed."""
    with Path(path).open(newline="") as fh:
        out = []
        for rec in csv.DictReader(fh):
            rec["dense_factor"] = int(rec["dense_factor"])
            rec["n"] = int(rec["n"])
            rec["mean_snr_db"] = float(rec["mean_snr_db"])
            rec["mean_logf0_rmse"] = float(rec["mean_logf0_rmse"])
            out.append(rec)
    return out


# --- training and evaluation -------------------------------------------------

def _fingerprint(spec, config, training):
    payload = {
        "config": config.to_dict(),
        "dataset": spec_to_dict(spec.dataset),
        "training": asdict(training),
        "max_steps": spec.max_steps,
        "seed": spec.seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def train_model(spec, name, dense_factor, model_dir=None, training=None):
    """Train (or reload a matching cached checkpoint of) one roster model.

    ``training`` defaults to ``spec.training``.
    """
    config = spec.model_config(name, dense_factor)
    tcfg = spec.training if training is None else training
    fingerprint = _fingerprint(spec, config, tcfg)
    ck_path = None
    if model_dir is not None:
        ck_path = Path(model_dir) / f"{name}_a{dense_factor}.npz"
        if ck_path.exists():
            ck = load_checkpoint(ck_path)
            if ck.meta.get("fingerprint") == fingerprint:
                log.info("reusing %s", ck_path)
                return ck.params, ck.meta
    params = init_params(config, spec.seed)
    dataset = build_sinusoid_dataset(spec.dataset)
    log.info("training %s a=%d: %d steps", name, dense_factor, min(len(dataset) * tcfg.epochs, spec.max_steps or 10**12))
    result = train(params, tcfg, dataset, max_steps=spec.max_steps)
    meta = {
        "fingerprint": fingerprint,
        "heldout_loss": result.heldout_loss,
        "final_loss": result.history[-1][1] if result.history else math.nan,
        "steps": result.steps,
        "train_seconds": round(result.seconds, 1),
    }
    if ck_path is not None:
        save_checkpoint(ck_path, params, result.adam, result.steps, meta)
        write_loss_csv(ck_path.with_name(ck_path.stem + "_loss.csv"), result.history)
    return params, meta


def grid_requests(spec, config):
    """``(f0, phase_index, request)`` for the whole test grid."""
    out = []
    fs = spec.dataset.sample_rate
    for f0 in spec.test_f0:
        seed_len = seed_length_for(config, f0)
        for k in range(spec.phases_per_f0):
            phase = 2 * math.pi * k / spec.phases_per_f0
            clean = synth_sinusoid(f0, seed_len / fs, fs, phase, spec.test_amplitude)
            rng = np.random.default_rng([spec.seed, int(round(f0 * 1000)), k])
            seed_clip = add_noise_snr(clean, spec.seed_snr_db, rng)
            req = GenerationRequest(
                f0,
                spec.test_seconds,
                seed_clip=seed_clip,
                sampling_mode=spec.sampling_mode,
                temperature=spec.temperature,
                rng_seed=int(rng.integers(2**63 - 1)),
                seed_length=seed_len,
            )
            out.append((f0, k, req))
    return out


def _batches(items, config, max_batch):
    """Group requests (lowest F0 first) so ring buffers stay within budget."""
    items = sorted(items, key=lambda it: (it[0], it[1]))
    batches, current = [], []
    for it in items:
        trial = current + [it]
        per_row = 4 * config.residual_channels * sum(capacities_for(config, trial[0][0]))
        if current and (len(trial) > max_batch or per_row * len(trial) > GENERATION_BUFFER_BUDGET):
            batches.append(current)
            current = [it]
        else:
            current = trial
    if current:
        batches.append(current)
    return batches


def score_clip(clip, f0, search_floor_hz=DEFAULT_SEARCH_FLOOR_HZ):
    """``(snr_db, measured_f0, detected, log_f0_error)``.

    An undetectable tone counts as measured at the search floor.
    """
    m = measure_tone(clip)
    measured = m.freq_hz if m.detected and m.freq_hz > 0 else search_floor_hz
    return m.snr_db, measured, m.detected, math.log(measured / f0)


def evaluate_model(params, config, spec, label, progress=None):
    """Generate and score the test grid for one trained model."""
    lower, upper = spec.train_range
    a = config.dense_factor
    report = EvalReport()
    results = {}
    items = grid_requests(spec, config)
    started = time.perf_counter()
    for batch in _batches(items, config, spec.generation_batch):
        clips = generate_batch(params, config, [req for _, _, req in batch])
        for (f0, k, _), clip in zip(batch, clips):
            results[(f0, k)] = clip
        if progress is not None:
            progress(len(results), len(items))
        log.info("%s a=%d: generated %d/%d (%.0fs)", label, a, len(results), len(items), time.perf_counter() - started)
    for f0, k, _ in items:
        clip = results[(f0, k)]
        snr, measured, detected, err = score_clip(clip, f0)
        report.rows.append(
            UtteranceRow(spec.profile, label, a, f0, k, band_of(f0, lower, upper), "ok", snr, measured, detected, err)
        )
        key = (label, a, f0, k)
        if spec.write_wavs:
            report.clips[key] = clip
        if spec.psd_dump == "all" or (spec.psd_dump == "first_phase" and k == 0):
            report.psds[key] = periodogram(clip)
    report.summary = band_group_metrics(report.rows, lower, upper)
    return report


def failed_report(spec, label, a, reason):
    lower, upper = spec.train_range
    report = EvalReport()
    for f0 in spec.test_f0:
        for k in range(spec.phases_per_f0):
            report.rows.append(
                UtteranceRow(
                    spec.profile, label, a, f0, k, band_of(f0, lower, upper), "failed",
                    math.nan, math.nan, False, math.nan,
                )
            )
    report.summary = band_group_metrics(report.rows, lower, upper)
    report.meta = {"failed": reason}
    return report


def _run(spec, jobs, out_dir, kind):
    out_dir = Path(out_dir) if out_dir is not None else None
    model_dir = out_dir / "models" if out_dir is not None else None
    report = EvalReport(meta={"kind": kind, "profile": spec.profile, "spec": spec.to_dict(), "models": {}})
    for name, a, training in jobs:
        key = f"{name}_a{a}"
        try:
            params, meta = train_model(spec, name, a, model_dir, training)
        except TrainingDivergedError as exc:
            log.warning("%s diverged: %s", key, exc)
            report.extend(failed_report(spec, name, a, str(exc)))
            report.meta["models"][key] = {"status": "failed", "reason": str(exc)}
            continue
        part = evaluate_model(params, params.config, spec, name, None)
        report.extend(part)
        report.meta["models"][key] = {
            "status": "ok",
            "parameters": params.count(),
            "heldout_loss": round(float(meta.get("heldout_loss", math.nan)), 4),
            "steps": meta.get("steps"),
            "epochs": training.epochs,
        }
    if out_dir is not None:
        emit_report(report, out_dir)
    return report


def run_dense_sweep(spec, out_dir=None):
    """One ``spec.sweep_model`` per dense factor, scored on the test grid.

    Each factor trains with ``spec.sweep_training_for(a)``.
    """
    if not spec.dense_factors:
        raise ConfigurationError("dense_factors is empty")
    jobs = [(spec.sweep_model, a, spec.sweep_training_for(a)) for a in spec.dense_factors]
    return _run(spec, jobs, out_dir, "dense_sweep")


def run_model_comparison(spec, out_dir=None):
    """Every roster model at ``spec.comparison_dense_factor``, same corpus and seeds."""
    if not spec.models:
        raise ConfigurationError("model roster is empty")
    jobs = [(m, spec.comparison_dense_factor, spec.training) for m in spec.models]
    return _run(spec, jobs, out_dir, "model_comparison")
