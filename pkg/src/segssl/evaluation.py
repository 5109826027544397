"""Downstream protocols: chunked embedding, linear probe, finetuning, metrics."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import views
from .dsp import GlobalStats, MelParams, WaveClip, mel_spectrogram, normalize
from .encoder import TransformerEncoder
from .schedules import CosineSchedule

DEFAULT_LR_GRID = (3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1)


@dataclass
class TaskSpec:
    name: str
    label_mode: str = "single_label"
    n_classes: int = 2
    folds: int = 1
    max_crop_s: float = 12.0
    chunk_s: float = 6.0

    def __post_init__(self):
        if self.label_mode not in ("single_label", "multi_label"):
            raise ValueError(f"unknown label_mode {self.label_mode!r}")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")


@dataclass
class EvalConfig:
    protocol: str = "linear"
    epochs: Optional[int] = None  # linear 100, finetune 50
    batch_size: Optional[int] = None  # linear 1024, finetune 512
    lr_grid: list = field(default_factory=lambda: list(DEFAULT_LR_GRID))
    momentum: float = 0.9
    warmup_epochs: int = 5
    min_lr: float = 1e-6
    standardize: bool = True
    pooling: str = "per_block"
    mixup: bool = False
    mixup_alpha: float = 0.5
    rrc: bool = False
    max_crop_s: float = 12.0
    chunk_s: Optional[float] = None  # None follows the pre-training segment length
    valid_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in ("linear", "finetune"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not self.lr_grid or any(lr <= 0 for lr in self.lr_grid):
            raise ValueError("lr_grid must be non-empty and positive")

    @property
    def n_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 100 if self.protocol == "linear" else 50

    @property
    def n_batch(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 1024 if self.protocol == "linear" else 512


# ---------------------------------------------------------------- chunking

def chunk_bounds(n_samples: int, sample_rate: int, max_crop_s: float = 12.0, chunk_s: float = 6.0,
                 min_samples: int = 0) -> list:
    """Sample ranges of the chunks a clip is split into.

    Longer than ``max_crop_s``: centre crop to ``max_crop_s``. Up to ``chunk_s``:
    one chunk. Otherwise consecutive non-overlapping ``chunk_s`` chunks plus a
    shorter remainder chunk; a remainder under ``min_samples`` is dropped.
    """
    crop = int(round(max_crop_s * sample_rate))
    size = int(round(chunk_s * sample_rate))
    start = 0
    if n_samples > crop:
        start = (n_samples - crop) // 2
        n_samples = crop
    if n_samples <= size:
        return [(start, start + n_samples)]
    bounds = []
    for offset in range(0, n_samples, size):
        end = min(offset + size, n_samples)
        if end - offset < min_samples and bounds:
            break
        bounds.append((start + offset, start + end))
    return bounds


def clip_chunks(clip: WaveClip, params: MelParams, stats: GlobalStats, max_crop_s: float,
                chunk_s: float, stack_frames: int = 4) -> list:
    """Normalized log-mel matrices, one per chunk."""
    min_samples = params.window_samples + (stack_frames - 1) * params.hop_samples
    if len(clip.samples) < params.window_samples:
        raise ValueError("clip shorter than one mel window")
    out = []
    for a, b in chunk_bounds(len(clip.samples), clip.sample_rate, max_crop_s, chunk_s, min_samples):
        spec = mel_spectrogram(WaveClip(clip.samples[a:b], clip.sample_rate), params)
        out.append(normalize(spec, stats).values.astype(np.float32))
    return out


@torch.no_grad()
def embed_chunks(chunks: Sequence[np.ndarray], encoder: TransformerEncoder, mode: str,
                 pooling: str = "per_block") -> torch.Tensor:
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    embs = [encoder.embed(torch.as_tensor(c, dtype=dtype)[None], mode, pooling)[0] for c in chunks]
    encoder.train(was_training)
    return torch.stack(embs).mean(dim=0)


def chunk_and_embed(clip: WaveClip, encoder: TransformerEncoder, mode: str, params: MelParams,
                    stats: GlobalStats, max_crop_s: float = 12.0, chunk_s: float = 6.0,
                    pooling: str = "per_block") -> torch.Tensor:
    chunks = clip_chunks(clip, params, stats, max_crop_s, chunk_s, encoder.cfg.stack_frames)
    return embed_chunks(chunks, encoder, mode, pooling)


# ---------------------------------------------------------------- metrics

def accuracy(scores, labels) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if len(scores) == 0:
        raise ValueError("accuracy of an empty prediction set")
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def average_precision(scores, positives) -> float:
    """Area under the precision-recall step curve; tied scores share one threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives).astype(bool)
    n_pos = positives.sum()
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positives[order]
    tp = np.cumsum(y)
    # last index of each run of tied scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp_at, n_at = tp[last], last + 1
    new_pos = np.diff(np.r_[0, tp_at])
    return float(np.sum(new_pos * tp_at / n_at) / n_pos)


def mean_average_precision(scores, targets) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    aps = [average_precision(scores[:, k], targets[:, k]) for k in range(targets.shape[1])
           if targets[:, k].any()]
    if not aps:
        raise ValueError("no class has a positive example")
    return float(np.mean(aps))


def score(task: TaskSpec, scores, labels) -> float:
    if task.label_mode == "multi_label":
        return mean_average_precision(scores, labels)
    return accuracy(scores, labels)


def metric_name(task: TaskSpec) -> str:
    return "mAP" if task.label_mode == "multi_label" else "accuracy"


def multi_hot(label_lists, n_classes: int) -> np.ndarray:
    out = np.zeros((len(label_lists), n_classes), dtype=np.float32)
    for i, labels in enumerate(label_lists):
        out[i, list(labels)] = 1.0
    return out


# ---------------------------------------------------------------- linear probe

class LinearProbe(nn.Module):
    def __init__(self, in_dim, n_classes, mean=None, std=None):
        super().__init__()
        self.register_buffer("mean", torch.zeros(in_dim) if mean is None else mean)
        self.register_buffer("std", torch.ones(in_dim) if std is None else std)
        self.linear = nn.Linear(in_dim, n_classes)

    def forward(self, x):
        return self.linear((x - self.mean) / self.std)


def _loss_fn(task: TaskSpec):
    if task.label_mode == "multi_label":
        return nn.BCEWithLogitsLoss()
    return lambda logits, y: torch.sum(-y * F.log_softmax(logits, dim=-1), dim=-1).mean()


def _targets(task: TaskSpec, labels) -> torch.Tensor:
    labels = np.asarray(labels)
    if task.label_mode == "multi_label":
        return torch.as_tensor(labels, dtype=torch.float32)
    return F.one_hot(torch.as_tensor(labels, dtype=torch.long), task.n_classes).float()


def _check_labels(task: TaskSpec, labels):
    labels = np.asarray(labels)
    if task.label_mode == "single_label" and len(np.unique(labels)) < 2:
        raise ValueError("training set contains a single class")
    if task.label_mode == "multi_label" and not labels.any():
        raise ValueError("training set has no positive labels")


def stratified_split(labels, fraction: float, seed: int = 0):
    """Deterministic (train_idx, valid_idx) split holding out ``fraction`` of each class."""
    labels = np.asarray(labels)
    key = labels if labels.ndim == 1 else labels.argmax(axis=1)
    rng = np.random.default_rng(seed)
    train, valid = [], []
    for cls in np.unique(key):
        idx = rng.permutation(np.nonzero(key == cls)[0])
        n_valid = int(round(len(idx) * fraction))
        if n_valid >= len(idx):
            n_valid = len(idx) - 1
        valid.extend(idx[:n_valid])
        train.extend(idx[n_valid:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(valid, dtype=int))


def _fit_probe(x, y, task, cfg: EvalConfig, lr: float) -> LinearProbe:
    torch.manual_seed(cfg.seed)
    if cfg.standardize:
        mean, std = x.mean(dim=0), x.std(dim=0, unbiased=False).clamp_min(1e-6)
    else:
        mean = std = None
    probe = LinearProbe(x.shape[1], task.n_classes, mean, std)
    opt = torch.optim.SGD(probe.parameters(), lr=lr, momentum=cfg.momentum)
    loss_fn = _loss_fn(task)
    n = len(x)
    batch = min(cfg.n_batch, n)
    steps_per_epoch = math.ceil(n / batch)
    sched = CosineSchedule(lr, cfg.min_lr, cfg.n_epochs * steps_per_epoch)
    gen = torch.Generator().manual_seed(cfg.seed)
    step = 0
    for _ in range(cfg.n_epochs):
        perm = torch.randperm(n, generator=gen)
        for i in range(steps_per_epoch):
            idx = perm[i * batch:(i + 1) * batch]
            for group in opt.param_groups:
                group["lr"] = sched(step)
            loss = loss_fn(probe(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    return probe


@torch.no_grad()
def predict(model: nn.Module, x: torch.Tensor) -> np.ndarray:
    model.eval()
    return model(x).numpy()


def train_linear_probe(train_x, train_y, task: TaskSpec, cfg: EvalConfig,
                       valid_x=None, valid_y=None):
    """Fit a linear classifier on frozen embeddings, choosing the lr on a validation split.

    Returns ``(probe, lr_chosen, valid_score)``. Without an explicit validation
    set a stratified ``cfg.valid_fraction`` of the training set is held out for
    the search and the final probe is refit on all training data.
    """
    train_x = torch.as_tensor(np.asarray(train_x), dtype=torch.float32)
    _check_labels(task, train_y)
    refit = valid_x is None
    if refit:
        tr, va = stratified_split(train_y, cfg.valid_fraction, cfg.seed)
        fit_x, fit_y = train_x[tr], np.asarray(train_y)[tr]
        valid_x, valid_y = train_x[va], np.asarray(train_y)[va]
    else:
        fit_x, fit_y = train_x, train_y
        valid_x = torch.as_tensor(np.asarray(valid_x), dtype=torch.float32)
    best = None
    for lr in cfg.lr_grid:
        probe = _fit_probe(fit_x, _targets(task, fit_y), task, cfg, lr)
        val = score(task, predict(probe, valid_x), valid_y)
        if best is None or val > best[2]:
            best = (probe, lr, val)
    probe, lr, val = best
    if refit:
        probe = _fit_probe(train_x, _targets(task, train_y), task, cfg, lr)
    return probe, lr, val


# ---------------------------------------------------------------- finetuning

class FinetuneModel(nn.Module):
    def __init__(self, encoder: TransformerEncoder, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(2 * encoder.cfg.dim, n_classes)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(self.encoder.embed(x, "finetune"))

    @torch.no_grad()
    def predict_chunks(self, chunks) -> torch.Tensor:
        emb = embed_chunks(chunks, self.encoder, "finetune")
        return self.head(emb)


def mix_labels(a, b, lam: float):
    """Label Mixup: weight ``1 - lam`` on ``a`` and ``lam`` on ``b``."""
    return (1.0 - lam) * a + lam * b


def _random_crop(spec: np.ndarray, n_frames: int, rng) -> np.ndarray:
    if spec.shape[0] <= n_frames:
        return spec
    start = rng.integers(0, spec.shape[0] - n_frames + 1)
    return spec[start:start + n_frames]


def _finetune_batch(specs, targets, idx, n_frames, cfg: EvalConfig, rng):
    crops = [_random_crop(specs[i], n_frames, rng) for i in idx]
    length = min(c.shape[0] for c in crops)
    x = np.stack([c[:length] for c in crops])
    y = targets[idx].clone()
    if cfg.mixup and len(idx) > 1:
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        perm = rng.permutation(len(idx))
        x = views.log_mixup_exp(x, x[perm], lam)
        y = mix_labels(y, y[perm], lam)
    if cfg.rrc:
        aug = views.AugmentConfig()
        x = np.stack([views.rrc_augment(s, aug, rng) for s in x])
    return torch.as_tensor(x, dtype=torch.float32), y


def _fit_finetune(encoder, train_specs, targets, task, cfg: EvalConfig, lr, n_frames):
    torch.manual_seed(cfg.seed)
    model = FinetuneModel(copy.deepcopy(encoder), task.n_classes)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=cfg.momentum)
    loss_fn = _loss_fn(task)
    n = len(train_specs)
    batch = min(cfg.n_batch, n)
    steps_per_epoch = max(1, n // batch)
    sched = CosineSchedule(lr, cfg.min_lr, cfg.n_epochs * steps_per_epoch,
                           min(cfg.warmup_epochs, cfg.n_epochs) * steps_per_epoch)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for _ in range(cfg.n_epochs):
        perm = rng.permutation(n)
        for i in range(steps_per_epoch):
            idx = perm[i * batch:(i + 1) * batch]
            x, y = _finetune_batch(train_specs, targets, idx, n_frames, cfg, rng)
            for group in opt.param_groups:
                group["lr"] = sched(step)
            loss = loss_fn(model(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    return model


def finetune(encoder: TransformerEncoder, train_specs, train_y, valid_chunks, valid_y,
             task: TaskSpec, cfg: EvalConfig, chunk_frames: int):
    """Jointly train a copy of ``encoder`` and a linear head.

    ``train_specs`` are whole-clip normalized log-mels, randomly cropped to
    ``chunk_frames`` per step; ``valid_chunks`` is a list of per-clip chunk lists.
    Returns ``(model, lr_chosen, valid_score)``. The passed encoder is not modified.
    """
    _check_labels(task, train_y)
    targets = _targets(task, train_y)
    best = None
    for lr in cfg.lr_grid:
        model = _fit_finetune(encoder, train_specs, targets, task, cfg, lr, chunk_frames)
        val = score(task, predict_clips(model, valid_chunks), valid_y)
        if best is None or val > best[2]:
            best = (model, lr, val)
    return best


def predict_clips(model: FinetuneModel, chunk_lists) -> np.ndarray:
    model.eval()
    return torch.stack([model.predict_chunks(chunks) for chunks in chunk_lists]).numpy()


# ---------------------------------------------------------------- k-fold

def kfold_evaluate(features, labels, fold_ids, task: TaskSpec, cfg: EvalConfig,
                   fit: Optional[Callable] = None) -> dict:
    """Train on all folds but one, test on the held-out fold, for every fold."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    fold_ids = np.asarray(fold_ids)
    folds = sorted(np.unique(fold_ids).tolist())
    if len(folds) < 2:
        raise ValueError("k-fold evaluation needs at least 2 folds")
    if task.folds > 1 and len(folds) != task.folds:
        raise ValueError(f"task declares {task.folds} folds but labels cover {len(folds)} (empty fold)")
    fit = fit or (lambda x, y: train_linear_probe(x, y, task, cfg))
    per_fold = {}
    for f in folds:
        test = fold_ids == f
        if not test.any() or test.all():
            raise ValueError(f"fold {f} is empty or covers the whole dataset")
        model, lr, _ = fit(features[~test], labels[~test])
        scores = predict(model, torch.as_tensor(features[test], dtype=torch.float32))
        per_fold[int(f)] = {"value": score(task, scores, labels[test]), "lr": lr}
    values = [v["value"] for v in per_fold.values()]
    return {"per_fold": per_fold, "mean": float(np.mean(values))}
