"""Waveform synthesis, mu-law companding, spectra and tone measurements."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigurationError, DataError, MeasurementError, WavFormatError

DEFAULT_SAMPLE_RATE = 22050
MU = 255
LEVELS = 256
SNR_CAP_DB = 60.0
DEFAULT_SEARCH_FLOOR_HZ = 5.0


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ConfigurationError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio samples must be finite")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def seconds(self):
        return len(self) / self.sample_rate


@dataclass
class QuantizedClip:
    codes: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= LEVELS):
            raise DataError("mu-law codes must lie in [0, 255]")

    def __len__(self):
        return self.codes.shape[0]


class PSD(NamedTuple):
    freqs: np.ndarray
    power: np.ndarray
    sample_rate: int
    n_samples: int

    @property
    def resolution(self):
        return self.sample_rate / self.n_samples


class ToneMeasurement(NamedTuple):
    snr_db: float
    freq_hz: float
    detected: bool


def mulaw_encode_array(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size and (np.abs(x).max() > 1.0 or not np.all(np.isfinite(x))):
        raise DataError("mu-law input must lie in [-1, 1]; normalize first")
    y = np.sign(x) * np.log1p(MU * np.abs(x)) / math.log1p(MU)
    return np.clip(np.floor((y + 1.0) * 128.0), 0, LEVELS - 1).astype(np.int64)


def mulaw_decode_array(codes):
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= LEVELS):
        raise DataError("mu-law codes must lie in [0, 255]")
    y = (codes.astype(np.float64) + 0.5) / 128.0 - 1.0
    return np.sign(y) * (np.power(float(LEVELS), np.abs(y)) - 1.0) / MU


def mulaw_encode(clip):
    return QuantizedClip(mulaw_encode_array(clip.samples), clip.sample_rate)


def mulaw_decode(q):
    return AudioClip(mulaw_decode_array(q.codes), q.sample_rate)


def synth_sinusoid(f0, seconds, sample_rate=DEFAULT_SAMPLE_RATE, phase=0.0, amplitude=1.0):
    if not 0 < f0 < sample_rate / 2:
        raise ConfigurationError(f"f0={f0} Hz must lie in (0, {sample_rate / 2}) Hz")
    if not 0 < amplitude <= 1:
        raise ConfigurationError(f"amplitude must lie in (0, 1], got {amplitude}")
    n = int(round(seconds * sample_rate))
    t = np.arange(n)
    return AudioClip(amplitude * np.sin(2 * np.pi * f0 * t / sample_rate + phase), sample_rate)


def add_noise_snr(clip, target_snr_db, rng_seed=None):
    """Add white Gaussian noise at an exact signal-to-noise power ratio.

    ``target_snr_db=math.inf`` returns an unchanged copy. The result is
    rescaled if its peak would exceed 1.
    """
    x = clip.samples
    p_signal = float(np.mean(x * x)) if len(x) else 0.0
    if p_signal == 0.0:
        raise DataError("cannot set an SNR on a silent clip")
    if math.isinf(target_snr_db) and target_snr_db > 0:
        return AudioClip(x.copy(), clip.sample_rate)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    noise = rng.standard_normal(len(x))
    noise *= math.sqrt(p_signal / 10 ** (target_snr_db / 10) / np.mean(noise * noise))
    y = x + noise
    peak = np.abs(y).max()
    if peak > 1.0:
        y = y / peak
    return AudioClip(y, clip.sample_rate)


def periodogram(clip):
    """One-sided Hann-windowed periodogram over the whole clip.

    Normalized so that ``power.sum()`` equals the energy of the windowed
    signal.
    """
    x = clip.samples
    n = len(x)
    if n < 2:
        raise DataError("periodogram needs at least 2 samples")
    xw = x * np.hanning(n)
    spec = np.fft.rfft(xw)
    power = (spec.real**2 + spec.imag**2) / n
    if n % 2 == 0:
        power[1:-1] *= 2.0
    else:
        power[1:] *= 2.0
    freqs = np.arange(power.shape[0]) * clip.sample_rate / n
    return PSD(freqs, power, clip.sample_rate, n)


def psd_peak_hz(psd, search_floor_hz=DEFAULT_SEARCH_FLOOR_HZ):
    """Frequency of the strongest bin at or above ``search_floor_hz``, parabolically refined."""
    if psd.power.size == 0:
        raise MeasurementError("empty PSD")
    candidates = np.flatnonzero(psd.freqs >= search_floor_hz)
    if candidates.size == 0:
        raise MeasurementError(f"no PSD bins at or above {search_floor_hz} Hz")
    k = int(candidates[np.argmax(psd.power[candidates])])
    if psd.power[k] <= 0:
        raise MeasurementError("PSD is all zero; no tone to locate")
    delta = 0.0
    if 0 < k < psd.power.size - 1:
        a, b, c = psd.power[k - 1 : k + 2]
        if a > 0 and c > 0:
            la, lb, lc = np.log([a, b, c])
            denom = la - 2 * lb + lc
            if denom < 0:
                delta = 0.5 * (la - lc) / denom
    return float((k + delta) * psd.resolution)


def _fit_residual(x, t, freq):
    w = 2 * np.pi * freq * t
    basis = np.stack([np.sin(w), np.cos(w)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    fit = basis @ coef
    return fit, x - fit


def measure_tone(clip, f0_hint=None, search_floor_hz=DEFAULT_SEARCH_FLOOR_HZ):
    """Single-sinusoid least-squares fit; SNR is fitted power over residual power.

    The frequency (detected from the PSD peak or taken from ``f0_hint``) is
    refined within one bin to minimize the residual.
    """
    x = clip.samples
    n = len(x)
    if n < 2 or not np.any(x):
        return ToneMeasurement(-SNR_CAP_DB, float("nan"), False)
    psd = periodogram(clip)
    if f0_hint is None:
        try:
            f_est = psd_peak_hz(psd, search_floor_hz)
        except MeasurementError:
            return ToneMeasurement(-SNR_CAP_DB, float("nan"), False)
    else:
        f_est = float(f0_hint)
    t = np.arange(n) / clip.sample_rate
    bin_hz = psd.resolution
    lo = max(f_est - bin_hz, 1e-6)
    hi = min(f_est + bin_hz, clip.sample_rate / 2)
    res = minimize_scalar(
        lambda f: float(np.sum(_fit_residual(x, t, f)[1] ** 2)),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-7},
    )
    freq = float(res.x)
    fit, resid = _fit_residual(x, t, freq)
    p_fit = float(np.mean(fit * fit))
    p_res = float(np.mean(resid * resid))
    if p_fit <= 0:
        return ToneMeasurement(-SNR_CAP_DB, freq, True)
    if p_res <= p_fit * 10 ** (-SNR_CAP_DB / 10):
        return ToneMeasurement(SNR_CAP_DB, freq, True)
    snr = 10 * math.log10(p_fit / p_res)
    return ToneMeasurement(float(np.clip(snr, -SNR_CAP_DB, SNR_CAP_DB)), freq, True)


def estimate_snr(clip, f0_hint=None):
    """SNR in dB of the dominant tone, capped to [-60, 60]."""
    return measure_tone(clip, f0_hint).snr_db


def log_f0_rmse(true_f0, measured_f0):
    a = np.asarray(true_f0, dtype=np.float64)
    b = np.asarray(measured_f0, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DataError("log_f0_rmse needs at least one value")
    if np.any(a <= 0) or np.any(b <= 0) or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DataError("frequencies must be finite and positive")
    return float(np.sqrt(np.mean((np.log(a) - np.log(b)) ** 2)))


# --- WAV I/O -------------------------------------------------------------

def write_wav(path, clip):
    """16-bit PCM mono RIFF/WAVE."""
    x = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    header = b"".join(
        [
            b"RIFF",
            struct.pack("<I", 36 + len(data)),
            b"WAVE",
            b"fmt ",
            struct.pack("<IHHIIHH", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16),
            b"data",
            struct.pack("<I", len(data)),
        ]
    )
    Path(path).write_bytes(header + data)


def read_wav(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise WavFormatError(f"{path}: truncated RIFF header at offset 0")
    if raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file (offset 0)")
    fmt = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + 16 > len(raw):
                raise WavFormatError(f"{path}: truncated 'fmt ' chunk at offset {pos}")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", raw, body)
            if tag != 1 or channels != 1 or bits != 16:
                raise WavFormatError(
                    f"{path}: unsupported encoding at offset {body} "
                    f"(format {tag}, {channels} channels, {bits} bits); need PCM16 mono"
                )
            fmt = rate
        elif cid == b"data":
            if fmt is None:
                raise WavFormatError(f"{path}: missing 'fmt ' chunk before 'data' at offset {pos}")
            if body + size > len(raw):
                raise WavFormatError(
                    f"{path}: truncated 'data' chunk at offset {pos}: "
                    f"declares {size} bytes, {len(raw) - body} present"
                )
            pcm = np.frombuffer(raw, dtype="<i2", count=size // 2, offset=body)
            return AudioClip(pcm.astype(np.float64) / 32768.0, fmt)
        pos = body + size + (size & 1)
    missing = "'fmt '" if fmt is None else "'data'"
    raise WavFormatError(f"{path}: missing {missing} chunk (file ends at offset {len(raw)})")
