"""Waveform to normalized log-mel front end."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from scipy import signal
from scipy.io import wavfile

LOG_EPS = 1e-10
TARGET_RATE = 16000


@dataclass
class WaveClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelParams:
    window_s: float = 0.025
    hop_s: float = 0.010
    n_bins: int = 64
    f_min: float = 60.0
    f_max: float = 7800.0
    window_kind: str = "hamming"
    n_fft: int = 1024
    sample_rate: int = TARGET_RATE

    def __post_init__(self):
        if not 0 < self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 < f_min < f_max <= sample_rate/2")
        if self.hop_s > self.window_s:
            raise ValueError("hop_s must not exceed window_s")
        if self.n_fft < self.window_samples:
            raise ValueError("n_fft shorter than the analysis window")

    @property
    def window_samples(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_s * self.sample_rate))

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.window_samples) // self.hop_samples

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MelSpec:
    """Log-mel matrix, frames along axis 0 and mel bins along axis 1."""

    values: np.ndarray
    frame_hop_s: float = 0.010

    @property
    def bin_count(self) -> int:
        return self.values.shape[1]

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames * self.frame_hop_s


@dataclass
class GlobalStats:
    min_val: float
    max_val: float
    n_frames_seen: int
    mel_params_hash: str = ""

    def __post_init__(self):
        if not self.min_val < self.max_val:
            raise ValueError(f"degenerate stats: min {self.min_val} >= max {self.max_val}")
        if self.n_frames_seen <= 0:
            raise ValueError("stats computed from zero frames")

    def merge(self, other: "GlobalStats") -> "GlobalStats":
        if self.mel_params_hash != other.mel_params_hash:
            raise ValueError("cannot merge stats computed with different mel params")
        return GlobalStats(
            min(self.min_val, other.min_val),
            max(self.max_val, other.max_val),
            self.n_frames_seen + other.n_frames_seen,
            self.mel_params_hash,
        )

    def save(self, path, **extra):
        record = {
            "min": self.min_val,
            "max": self.max_val,
            "n_frames_seen": self.n_frames_seen,
            "mel_params_hash": self.mel_params_hash,
            **extra,
        }
        Path(path).write_text(json.dumps(record, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GlobalStats":
        record = json.loads(Path(path).read_text())
        return cls(
            float(record["min"]),
            float(record["max"]),
            int(record["n_frames_seen"]),
            record.get("mel_params_hash", ""),
        )


def read_wav(path) -> WaveClip:
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: only single-channel audio is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return WaveClip(samples, int(rate))


def write_wav(path, clip: WaveClip, pcm16: bool = True):
    if pcm16:
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    wavfile.write(path, clip.sample_rate, data)


def resample(clip: WaveClip, target_rate: int = TARGET_RATE) -> WaveClip:
    if len(clip.samples) == 0:
        raise ValueError("cannot resample an empty clip")
    if clip.sample_rate == target_rate:
        return WaveClip(clip.samples.copy(), target_rate)
    ratio = Fraction(target_rate, clip.sample_rate)
    out = signal.resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    return WaveClip(out, target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(params: MelParams) -> np.ndarray:
    """Triangular, area-normalized filters; shape (n_fft//2 + 1, n_bins)."""
    fft_freqs = np.arange(params.n_fft // 2 + 1) * params.sample_rate / params.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(params.f_min), hz_to_mel(params.f_max), params.n_bins + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lo) / (center - lo)
    falling = (hi - fft_freqs[None, :]) / (hi - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= 2.0 / (hi - lo)
    return weights.T


def _window(params: MelParams) -> np.ndarray:
    return signal.get_window(params.window_kind, params.window_samples, fftbins=True)


def mel_spectrogram(clip: WaveClip, params: MelParams | None = None) -> MelSpec:
    params = params or MelParams()
    if clip.sample_rate != params.sample_rate:
        raise ValueError(f"clip at {clip.sample_rate} Hz, expected {params.sample_rate} Hz; resample first")
    win, hop = params.window_samples, params.hop_samples
    if len(clip.samples) < win:
        raise ValueError(f"clip of {len(clip.samples)} samples is shorter than one {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, win)[::hop]
    spectrum = np.fft.rfft(frames * _window(params), n=params.n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    mel_power = power @ mel_filterbank(params)
    return MelSpec(np.log(mel_power + LOG_EPS), params.hop_s)


def compute_global_stats(
    items: Iterable[Union[WaveClip, MelSpec]], params: MelParams | None = None
) -> GlobalStats:
    """Global min/max over every log-mel value of a dataset.

    Items may be raw clips (converted with ``params``) or precomputed specs.
    """
    params = params or MelParams()
    lo, hi, frames = math.inf, -math.inf, 0
    for item in items:
        spec = item if isinstance(item, MelSpec) else mel_spectrogram(item, params)
        lo = min(lo, float(spec.values.min()))
        hi = max(hi, float(spec.values.max()))
        frames += spec.n_frames
    if frames == 0:
        raise ValueError("cannot compute stats over an empty stream")
    return GlobalStats(lo, hi, frames, params.digest())


def normalize(spec: MelSpec, stats: GlobalStats) -> MelSpec:
    span = stats.max_val - stats.min_val
    if span <= 0:
        raise ValueError("degenerate stats")
    return MelSpec((spec.values - stats.min_val) / span, spec.frame_hop_s)


def denormalize(spec: MelSpec, stats: GlobalStats) -> MelSpec:
    return MelSpec(spec.values * (stats.max_val - stats.min_val) + stats.min_val, spec.frame_hop_s)


def load_normalized(path, params: MelParams, stats: GlobalStats) -> MelSpec:
    clip = read_wav(path)
    if clip.sample_rate != params.sample_rate:
        clip = resample(clip, params.sample_rate)
    return normalize(mel_spectrogram(clip, params), stats)
