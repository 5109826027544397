"""Deterministic synthetic audio corpus for desk-scale runs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import signal

from .dsp import TARGET_RATE, WaveClip, write_wav

KINDS = ("pure_tone", "chirp", "noise_band", "am_tone")

# position of (index within class) % 10 -> split
_SPLITS = ["train"] * 6 + ["valid"] * 2 + ["test"] * 2


@dataclass
class ClassSpec:
    """One class: a generator kind plus (lo, hi) ranges for its parameters.

    pure_tone: f0          chirp: f0, f1 (+ period, sweep)
    noise_band: center, width          am_tone: f0, mod_rate, depth

    A chirp glides log-linearly from f0 to f1 over the whole clip, or, with a
    ``period`` range, repeats every period: ``sweep="saw"`` restarts at f0,
    ``sweep="triangle"`` glides back to f0 within the period.
    """

    kind: str
    f0: tuple = (300.0, 600.0)
    f1: tuple = (1200.0, 2400.0)
    center: tuple = (800.0, 1600.0)
    width: tuple = (100.0, 300.0)
    mod_rate: tuple = (2.0, 4.0)
    depth: tuple = (0.8, 1.0)
    period: Optional[tuple] = None
    sweep: str = "saw"
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.sweep not in ("saw", "triangle"):
            raise ValueError(f"unknown sweep shape {self.sweep!r}")
        for attr in ("f0", "f1", "center", "width", "mod_rate", "depth", "period"):
            if getattr(self, attr) is None:
                continue
            lo, hi = getattr(self, attr)
            if lo > hi:
                raise ValueError(f"{attr}: lo > hi")
            setattr(self, attr, (float(lo), float(hi)))
        if not self.name:
            self.name = self.kind


@dataclass
class SynthSpec:
    n_clips: int = 300
    clip_len_s: float = 10.0
    classes: List[ClassSpec] = field(default_factory=lambda: design("tones"))
    seed: int = 0
    sample_rate: int = TARGET_RATE
    peak: float = 0.5
    noise_db: float = -40.0
    n_folds: int = 5
    distractor_rate: float = 0.0  # transient events per second, independent of the class
    distractor_db: tuple = (0.0, 6.0)  # event level relative to the class sound RMS
    distractor_len_s: tuple = (0.1, 0.6)
    distractor_band: tuple = (200.0, 5000.0)

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]
        if len(self.classes) < 2:
            raise ValueError("need at least 2 classes")
        if self.n_clips < len(self.classes):
            raise ValueError("fewer clips than classes")


# Named class sets. "tones" separates on the mean spectrum alone; "sirens"
# needs the sweep direction and shape, which an untrained encoder captures poorly.
DESIGNS = {
    "tones": [
        ClassSpec("pure_tone", f0=(200.0, 400.0), name="low_tone"),
        ClassSpec("pure_tone", f0=(800.0, 1600.0), name="mid_tone"),
        ClassSpec("pure_tone", f0=(3000.0, 6000.0), name="high_tone"),
    ],
    "sirens": [
        ClassSpec("chirp", f0=(300.0, 500.0), f1=(2000.0, 3000.0), period=(0.5, 1.0), name="rising_saw"),
        ClassSpec("chirp", f0=(2000.0, 3000.0), f1=(300.0, 500.0), period=(0.5, 1.0), name="falling_saw"),
        ClassSpec("chirp", f0=(300.0, 500.0), f1=(2000.0, 3000.0), period=(1.0, 2.0), sweep="triangle",
                  name="triangle"),
    ],
}


def design(name: str) -> List[ClassSpec]:
    try:
        return [ClassSpec(**asdict(c)) for c in DESIGNS[name]]
    except KeyError:
        raise ValueError(f"unknown corpus design {name!r}; choose from {sorted(DESIGNS)}") from None


def _uniform(rng, bounds):
    return rng.uniform(*bounds)


def synth_clip(cls: ClassSpec, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    if cls.kind == "pure_tone":
        f0 = _uniform(rng, cls.f0)
        x = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    elif cls.kind == "chirp":
        f0, f1 = _uniform(rng, cls.f0), _uniform(rng, cls.f1)
        if cls.period is None:
            pos = t / t[-1]
        else:
            period = _uniform(rng, cls.period)
            pos = np.mod(t / period + rng.uniform(), 1.0)
            if cls.sweep == "triangle":
                pos = 1.0 - np.abs(2.0 * pos - 1.0)
        freq = f0 * (f1 / f0) ** pos
        x = np.sin(2 * np.pi * np.cumsum(freq) / sr + rng.uniform(0, 2 * np.pi))
    elif cls.kind == "noise_band":
        center, width = _uniform(rng, cls.center), _uniform(rng, cls.width)
        lo, hi = max(center - width / 2, 20.0), min(center + width / 2, sr / 2 - 20.0)
        sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
        x = signal.sosfilt(sos, rng.standard_normal(n))
    else:
        f0, rate, depth = _uniform(rng, cls.f0), _uniform(rng, cls.mod_rate), _uniform(rng, cls.depth)
        envelope = 1.0 - depth * 0.5 * (1 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        x = envelope * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    return x


def distractor_events(spec: SynthSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Short Hann-windowed tone or noise bursts at random times and frequencies (unit class RMS)."""
    sr = spec.sample_rate
    out = np.zeros(n)
    for _ in range(rng.poisson(spec.distractor_rate * spec.clip_len_s)):
        length = max(2, int(_uniform(rng, spec.distractor_len_s) * sr))
        start = int(rng.integers(0, max(1, n - length)))
        length = min(length, n - start)
        t = np.arange(length) / sr
        freq = np.exp(rng.uniform(*np.log(spec.distractor_band)))
        if rng.random() < 0.5:
            burst = np.sqrt(2) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        else:
            lo, hi = freq / 1.2, min(freq * 1.2, sr / 2 - 20.0)
            sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
            burst = signal.sosfilt(sos, rng.standard_normal(length))
            burst /= max(np.sqrt(np.mean(burst**2)), 1e-12)
        gain = 10 ** (_uniform(rng, spec.distractor_db) / 20)
        out[start:start + length] += gain * burst * np.hanning(length)
    return out


def clip_samples(spec: SynthSpec, index: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, index])
    n = int(round(spec.clip_len_s * spec.sample_rate))
    x = synth_clip(spec.classes[index % len(spec.classes)], n, spec.sample_rate, rng)
    if spec.distractor_rate > 0:
        x = x / max(np.sqrt(np.mean(x**2)), 1e-12)
        x = x + distractor_events(spec, n, rng)
    x = spec.peak * x / max(np.max(np.abs(x)), 1e-12)
    noise_rms = spec.peak * 10 ** (spec.noise_db / 20)
    return x + noise_rms * rng.standard_normal(n)


def clip_record(spec: SynthSpec, index: int) -> dict:
    n_classes = len(spec.classes)
    label = index % n_classes
    within = index // n_classes
    return {"path": f"clip_{index:05d}.wav", "label": label, "fold": within % spec.n_folds,
            "split": _SPLITS[within % len(_SPLITS)]}


def generate_corpus(spec: SynthSpec, out_dir, header: dict | None = None) -> Path:
    """Write WAV files and ``manifest.jsonl``; returns the manifest path.

    The first manifest line is a header record (``{"header": {...}}``); every
    following line describes one clip.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(spec.n_clips):
        write_wav(out_dir / f"clip_{i:05d}.wav", WaveClip(clip_samples(spec, i), spec.sample_rate))
        records.append(clip_record(spec, i))
    head = {"synth_spec": asdict(spec), "class_names": [c.name for c in spec.classes]}
    if header:
        head["args"] = header
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        fh.write(json.dumps({"header": head}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest


def read_manifest(path) -> tuple:
    """(header or None, list of clip records with absolute paths)."""
    path = Path(path)
    header, records = None, []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "header" in rec:
                header = rec["header"]
                continue
            rec = dict(rec)
            clip_path = Path(rec["path"])
            if not clip_path.is_absolute():
                clip_path = path.parent / clip_path
            rec["path"] = str(clip_path)
            records.append(rec)
    return header, records
