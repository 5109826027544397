"""Positive-pair creation: two segment crops, each augmented by Mixup then RRC."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class SegmentPairConfig:
    segment_len_s: float = 6.0
    use_two_segments: bool = True
    clip_len_s: float = 10.0

    def __post_init__(self):
        if not 0 < self.segment_len_s <= self.clip_len_s:
            raise ValueError("need 0 < segment_len_s <= clip_len_s")

    def min_overlap_s(self) -> float:
        return max(0.0, 2 * self.segment_len_s - self.clip_len_s)


@dataclass
class AugmentConfig:
    mixup_alpha: float = 0.4
    memory_size: int = 2048
    rrc_freq_scale: tuple = (0.6, 1.5)
    rrc_time_scale: tuple = (0.6, 1.5)
    mixup: bool = True
    rrc: bool = True
    order: str = "mixup_first"

    def __post_init__(self):
        self.rrc_freq_scale = tuple(self.rrc_freq_scale)
        self.rrc_time_scale = tuple(self.rrc_time_scale)
        if not 0.0 <= self.mixup_alpha <= 1.0:
            raise ValueError("mixup_alpha must be in [0, 1]")
        if self.memory_size < 1:
            raise ValueError("memory_size must be >= 1")
        for lo, hi in (self.rrc_freq_scale, self.rrc_time_scale):
            if not 0 < lo <= hi:
                raise ValueError("scale ranges need 0 < lo <= hi")
        if self.order not in ("mixup_first", "rrc_first"):
            raise ValueError(f"unknown augmentation order {self.order!r}")


class MemoryBank:
    """Fixed-capacity FIFO of past segments used as Mixup partners."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.buffer = deque(maxlen=capacity)

    def __len__(self):
        return len(self.buffer)

    def push(self, seg: np.ndarray):
        self.buffer.append(np.array(seg, copy=True))

    def sample(self, shape, rng: np.random.Generator) -> Optional[np.ndarray]:
        candidates = [i for i, item in enumerate(self.buffer) if item.shape == tuple(shape)]
        if not candidates:
            return None
        return self.buffer[candidates[rng.integers(len(candidates))]]

    def state(self) -> list:
        return list(self.buffer)

    def load_state(self, items):
        self.buffer = deque((np.array(x, copy=True) for x in items), maxlen=self.capacity)


@dataclass
class ViewPair:
    x: np.ndarray
    x_prime: np.ndarray
    overlap_s: float


def segment_frames(cfg: SegmentPairConfig, hop_s: float) -> int:
    return int(round(cfg.segment_len_s / hop_s))


def sample_segment_pair(spec: np.ndarray, cfg: SegmentPairConfig, rng: np.random.Generator,
                        hop_s: float = 0.010):
    """Crop two segments from ``spec`` (frames x bins) at independent uniform offsets.

    Returns ``(seg_a, seg_b, overlap_s)``.
    """
    n = segment_frames(cfg, hop_s)
    total = spec.shape[0]
    if total < n:
        raise ValueError(f"spec has {total} frames, segment needs {n}")
    start_a = int(rng.integers(0, total - n + 1))
    if cfg.use_two_segments:
        start_b = int(rng.integers(0, total - n + 1))
    else:
        start_b = start_a
    overlap = (n - abs(start_a - start_b)) * hop_s
    return spec[start_a:start_a + n].copy(), spec[start_b:start_b + n].copy(), overlap


def log_mixup_exp(seg: np.ndarray, other: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0.0:
        return seg.copy()
    return np.log((1.0 - lam) * np.exp(seg) + lam * np.exp(other))


def mixup_augment(seg: np.ndarray, bank: MemoryBank, alpha: float, rng: np.random.Generator,
                  lam: Optional[float] = None) -> np.ndarray:
    """Mix ``seg`` with a random past segment in the linear domain, then push it to the bank."""
    if lam is None:
        lam = float(rng.uniform(0.0, alpha)) if alpha > 0 else 0.0
    partner = bank.sample(seg.shape, rng) if len(bank) else None
    out = seg.copy() if partner is None else log_mixup_exp(seg, partner, lam)
    bank.push(seg)
    return out


def _axis_coords(size: int, start: float, extent: float) -> np.ndarray:
    # align-corners mapping: output index 0 -> start, size-1 -> start + extent - 1
    if size == 1:
        return np.array([start + (extent - 1) / 2.0])
    return start + np.arange(size) * (extent - 1.0) / (size - 1.0)


def _interp_weights(n: int, coords: np.ndarray) -> np.ndarray:
    """(n, len(coords)) linear-interpolation matrix with edge clamping."""
    # out-of-range coordinates clamp to the edge, i.e. virtual replication padding
    coords = np.clip(coords, 0.0, n - 1.0)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    w = np.zeros((n, len(coords)))
    cols = np.arange(len(coords))
    w[lo, cols] += 1.0 - frac
    w[hi, cols] += frac
    return w


def _interp_rows(x: np.ndarray, coords: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    coords = np.clip(coords, 0.0, n - 1.0)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (coords - lo)[:, None]
    a, b = x[lo], x[hi]
    return a + (b - a) * frac


def resized_crop(seg: np.ndarray, top: float, left: float, height: float, width: float) -> np.ndarray:
    """Bilinearly resample the (top, left, height, width) region back to ``seg.shape``."""
    rows = _axis_coords(seg.shape[0], top, height)
    cols = _axis_coords(seg.shape[1], left, width)
    out = _interp_rows(seg, rows) @ _interp_weights(seg.shape[1], cols)
    return out.astype(seg.dtype, copy=False)


def rrc_augment(seg: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if seg.size == 0:
        raise ValueError("empty segment")
    n_time, n_freq = seg.shape
    height = n_time * rng.uniform(*cfg.rrc_time_scale)
    width = n_freq * rng.uniform(*cfg.rrc_freq_scale)
    top = rng.uniform(min(0.0, n_time - height), max(0.0, n_time - height))
    left = rng.uniform(min(0.0, n_freq - width), max(0.0, n_freq - width))
    return resized_crop(seg, top, left, height, width)


def augment_segment(seg: np.ndarray, aug: AugmentConfig, bank: MemoryBank,
                    rng: np.random.Generator) -> np.ndarray:
    steps = ["mixup", "rrc"] if aug.order == "mixup_first" else ["rrc", "mixup"]
    for step in steps:
        if step == "mixup" and aug.mixup:
            seg = mixup_augment(seg, bank, aug.mixup_alpha, rng)
        elif step == "rrc" and aug.rrc:
            seg = rrc_augment(seg, aug, rng)
    return seg


def create_views(spec: np.ndarray, pair_cfg: SegmentPairConfig, aug_cfg: AugmentConfig,
                 bank: MemoryBank, rng: np.random.Generator, hop_s: float = 0.010) -> ViewPair:
    seg_a, seg_b, overlap = sample_segment_pair(spec, pair_cfg, rng, hop_s)
    x = augment_segment(seg_a, aug_cfg, bank, rng)
    x_prime = augment_segment(seg_b, aug_cfg, bank, rng)
    return ViewPair(x, x_prime, overlap)
