"""End-to-end helpers: manifest -> features -> pre-training -> downstream score."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .config import Config
from .dsp import GlobalStats, compute_global_stats, mel_spectrogram, normalize, read_wav, resample
from .encoder import TransformerEncoder
from .evaluation import (TaskSpec, clip_chunks, embed_chunks, finetune, kfold_evaluate,
                         metric_name, multi_hot, predict, predict_clips, score, train_linear_probe)
from .pretrain import init_state, pretrain
from .synth import read_manifest

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    records: list
    clips: list
    header: Optional[dict] = None

    def indices(self, splits: Sequence[str]) -> list:
        return [i for i, r in enumerate(self.records) if r.get("split", "train") in splits]

    def labels(self, idx, task: TaskSpec):
        if task.label_mode == "multi_label":
            return multi_hot([self.records[i]["labels"] for i in idx], task.n_classes)
        return np.array([self.records[i]["label"] for i in idx])

    def task(self, name="task", folds: int = 1, label_mode: Optional[str] = None) -> TaskSpec:
        multi = any("labels" in r for r in self.records)
        mode = label_mode or ("multi_label" if multi else "single_label")
        if mode == "multi_label":
            n = 1 + max(max(r["labels"]) for r in self.records if r.get("labels"))
        else:
            n = 1 + max(r["label"] for r in self.records)
        return TaskSpec(name, mode, n, folds)


def load_corpus(manifest, sample_rate: int = 16000) -> Corpus:
    header, records = read_manifest(manifest)
    clips = []
    for rec in records:
        clip = read_wav(rec["path"])
        if clip.sample_rate != sample_rate:
            clip = resample(clip, sample_rate)
        clips.append(clip)
    return Corpus(records, clips, header)


def corpus_stats(corpus: Corpus, cfg: Config, splits: Optional[Sequence[str]] = None) -> GlobalStats:
    idx = corpus.indices(splits) if splits else range(len(corpus.clips))
    return compute_global_stats((corpus.clips[i] for i in idx), cfg.mel)


def pretrain_specs(corpus: Corpus, cfg: Config, stats: GlobalStats) -> list:
    idx = corpus.indices(cfg.data.pretrain_splits)
    return [normalize(mel_spectrogram(corpus.clips[i], cfg.mel), stats).values.astype(np.float32) for i in idx]


def corpus_chunks(corpus: Corpus, cfg: Config, stats: GlobalStats, stack_frames: int) -> list:
    return [clip_chunks(c, cfg.mel, stats, cfg.eval.max_crop_s, cfg.eval_chunk_s(), stack_frames)
            for c in corpus.clips]


@torch.no_grad()
def extract_features(encoder: TransformerEncoder, chunk_lists, mode: str = "linear_eval",
                     pooling: str = "per_block") -> np.ndarray:
    return torch.stack([embed_chunks(c, encoder, mode, pooling) for c in chunk_lists]).numpy()


def linear_eval(encoder: TransformerEncoder, corpus: Corpus, cfg: Config, stats: GlobalStats,
                task: Optional[TaskSpec] = None, chunks=None) -> dict:
    """Frozen-encoder linear probe on the corpus' train/valid/test splits (or folds)."""
    task = task or corpus.task()
    chunks = chunks if chunks is not None else corpus_chunks(corpus, cfg, stats, encoder.cfg.stack_frames)
    feats = extract_features(encoder, chunks, "linear_eval", cfg.eval.pooling)
    result = {"task": task.name, "protocol": "linear", "metric_name": metric_name(task)}
    if task.folds > 1:
        idx = list(range(len(corpus.records)))
        folds = np.array([corpus.records[i]["fold"] for i in idx])
        missing = set(range(task.folds)) - set(folds.tolist())
        if missing:
            raise ValueError(f"folds {sorted(missing)} have no clips")
        out = kfold_evaluate(feats, corpus.labels(idx, task), folds, task, cfg.eval)
        result.update(value=out["mean"], per_fold=out["per_fold"],
                      lr_chosen=[v["lr"] for v in out["per_fold"].values()])
        return result
    tr, va, te = corpus.indices(["train"]), corpus.indices(["valid"]), corpus.indices(["test"])
    probe, lr, val = train_linear_probe(feats[tr], corpus.labels(tr, task), task, cfg.eval,
                                        feats[va] if va else None, corpus.labels(va, task) if va else None)
    test_idx = te or va
    value = score(task, predict(probe, torch.as_tensor(feats[test_idx])), corpus.labels(test_idx, task))
    result.update(value=value, lr_chosen=lr, valid_value=val)
    return result


def finetune_eval(encoder: TransformerEncoder, corpus: Corpus, cfg: Config, stats: GlobalStats,
                  task: Optional[TaskSpec] = None, chunks=None) -> dict:
    task = task or corpus.task()
    chunks = chunks if chunks is not None else corpus_chunks(corpus, cfg, stats, encoder.cfg.stack_frames)
    tr, va, te = corpus.indices(["train"]), corpus.indices(["valid"]), corpus.indices(["test"])
    specs = [normalize(mel_spectrogram(corpus.clips[i], cfg.mel), stats).values.astype(np.float32) for i in tr]
    chunk_frames = int(round(cfg.eval_chunk_s() / cfg.mel.hop_s))
    model, lr, val = finetune(encoder, specs, corpus.labels(tr, task), [chunks[i] for i in va],
                              corpus.labels(va, task), task, cfg.eval, chunk_frames)
    test_idx = te or va
    value = score(task, predict_clips(model, [chunks[i] for i in test_idx]), corpus.labels(test_idx, task))
    return {"task": task.name, "protocol": "finetune", "metric_name": metric_name(task),
            "value": value, "lr_chosen": lr, "valid_value": val}


def random_encoder(cfg: Config) -> TransformerEncoder:
    return init_state(cfg, 2).teacher.encoder


def pretrain_and_probe(cfg: Config, corpus: Corpus, stats: Optional[GlobalStats] = None,
                       out_dir=None, control: bool = False) -> dict:
    """Pre-train on the corpus, then linear-probe the teacher encoder.

    With ``control`` the probe is also run on the untrained initial encoder.
    """
    stats = stats or corpus_stats(corpus, cfg, cfg.data.pretrain_splits)
    specs = pretrain_specs(corpus, cfg, stats)
    state, losses = pretrain(cfg, specs, out_dir)
    chunks = corpus_chunks(corpus, cfg, stats, cfg.encoder_config().stack_frames)
    out = {"losses": losses, "state": state, "stats": stats,
           "probe": linear_eval(state.teacher.encoder, corpus, cfg, stats, chunks=chunks)}
    if control:
        out["control"] = linear_eval(random_encoder(cfg), corpus, cfg, stats, chunks=chunks)
    return out
