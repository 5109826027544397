"""Run configuration: one JSON document with a section per subsystem.

Every key is optional; missing keys take the documented defaults, unknown keys
raise :class:`ConfigError`. Schema (section -> fields)::

    preset        "small" | "base" | "custom"   (fills encoder + schedules + epochs)
    mel           window_s, hop_s, n_bins, f_min, f_max, window_kind, n_fft, sample_rate
    views.pair    segment_len_s, use_two_segments, clip_len_s
    views.augment mixup_alpha, memory_size, rrc_freq_scale, rrc_time_scale, mixup, rrc, order
    encoder       n_blocks, n_heads, dim, inner_dim, stack_frames, max_tokens, qkv_bias
    heads         hidden_dim, out_dim, use_predictor
    schedules     peak_lr, min_lr, warmup_epochs, m0, wd_start, wd_end, ema_override
    optimizer     beta1, beta2, eps, grad_clip, teacher_eval, ema_bn_stats
    data          batch_size, epochs, seed, pretrain_splits, log_every, checkpoint_every
    eval          see :class:`segssl.evaluation.EvalConfig`
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .dsp import MelParams
from .encoder import EncoderConfig
from .evaluation import EvalConfig
from .objective import HeadConfig
from .views import AugmentConfig, SegmentPairConfig


class ConfigError(ValueError):
    pass


PRESETS = {
    "small": {"encoder": {"n_blocks": 12, "n_heads": 6, "dim": 384, "inner_dim": 1536},
              "schedules": {"peak_lr": 5e-4, "m0": 0.99}, "data": {"epochs": 300}},
    "base": {"encoder": {"n_blocks": 12, "n_heads": 12, "dim": 768, "inner_dim": 3072},
             "schedules": {"peak_lr": 2e-4, "m0": 0.9995}, "data": {"epochs": 200}},
}


@dataclass
class EncoderSection:
    n_blocks: int = 12
    n_heads: int = 6
    dim: int = 384
    inner_dim: int = 1536
    stack_frames: int = 4
    max_tokens: Optional[int] = None
    qkv_bias: bool = True


@dataclass
class ScheduleSection:
    peak_lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_epochs: float = 10
    m0: float = 0.99
    wd_start: float = 0.04
    wd_end: float = 0.4
    ema_override: Optional[float] = None  # constant EMA decay, for ablations


@dataclass
class OptimizerSection:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: Optional[float] = None
    teacher_eval: bool = True
    ema_bn_stats: bool = True


@dataclass
class DataSection:
    batch_size: int = 1536
    epochs: int = 300
    seed: int = 0
    pretrain_splits: list = field(default_factory=lambda: ["train", "valid"])
    log_every: int = 1
    checkpoint_every: int = 0  # epochs; 0 = only at the end


@dataclass
class ViewsSection:
    pair: SegmentPairConfig = field(default_factory=SegmentPairConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class Config:
    preset: str = "small"
    mel: MelParams = field(default_factory=MelParams)
    views: ViewsSection = field(default_factory=ViewsSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    heads: HeadConfig = field(default_factory=HeadConfig)
    schedules: ScheduleSection = field(default_factory=ScheduleSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def encoder_config(self) -> EncoderConfig:
        enc = self.encoder
        max_tokens = enc.max_tokens
        if max_tokens is None:
            seg_frames = int(round(self.views.pair.segment_len_s / self.mel.hop_s))
            chunk_frames = int(round(self.eval_chunk_s() / self.mel.hop_s))
            max_tokens = max(seg_frames, chunk_frames) // enc.stack_frames
        return EncoderConfig(
            n_blocks=enc.n_blocks, n_heads=enc.n_heads, dim=enc.dim, inner_dim=enc.inner_dim,
            stack_frames=enc.stack_frames, input_bins=self.mel.n_bins, max_tokens=max_tokens,
            qkv_bias=enc.qkv_bias,
        )

    def eval_chunk_s(self) -> float:
        return self.eval.chunk_s if self.eval.chunk_s is not None else self.views.pair.segment_len_s

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(_jsonable(self.to_dict()), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path):
        Path(path).write_text(json.dumps(_jsonable(self.to_dict()), indent=2) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTION_TYPES.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_SECTION_TYPES = {
    (Config, "mel"): MelParams,
    (Config, "views"): ViewsSection,
    (Config, "encoder"): EncoderSection,
    (Config, "heads"): HeadConfig,
    (Config, "schedules"): ScheduleSection,
    (Config, "optimizer"): OptimizerSection,
    (Config, "data"): DataSection,
    (Config, "eval"): EvalConfig,
    (ViewsSection, "pair"): SegmentPairConfig,
    (ViewsSection, "augment"): AugmentConfig,
}


def config_from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    preset = data.get("preset", "small")
    if preset not in ("small", "base", "custom"):
        raise ConfigError(f"preset: unknown value {preset!r}")
    merged = _deep_merge(PRESETS.get(preset, {}), data)
    return _build(Config, merged, "")


def load_config(path=None, overrides: Optional[dict] = None) -> Config:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if overrides:
        data = _deep_merge(data, overrides)
    return config_from_dict(data)
