"""Teacher-student pre-training loop, collapse diagnostics and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .config import Config
from .objective import Student, Teacher, ema_update, init_teacher, symmetric_loss
from .schedules import ScheduleSet
from .views import MemoryBank, ViewPair, create_views, segment_frames

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SEGSSLCK"
CHECKPOINT_VERSION = 1


class NumericalAbort(RuntimeError):
    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


class CheckpointError(RuntimeError):
    pass


@dataclass
class CollapseReport:
    cosine_mean: float
    embed_std: float
    per_dim_std: np.ndarray
    loss: Optional[float] = None


@dataclass
class TrainState:
    cfg: Config
    student: Student
    teacher: Teacher
    optimizer: torch.optim.Optimizer
    schedules: ScheduleSet
    bank: MemoryBank
    steps_per_epoch: int
    step: int = 0

    @property
    def total_steps(self) -> int:
        return self.schedules.lr.total_steps

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch


def _no_decay(name: str, param: torch.Tensor) -> bool:
    return param.ndim < 2 or "cls_token" in name or "pos_embed" in name


def param_groups(student: Student):
    decay, no_decay = [], []
    for name, p in student.named_parameters():
        if p.requires_grad:
            (no_decay if _no_decay(name, p) else decay).append(p)
    return [{"params": decay, "apply_wd": True}, {"params": no_decay, "apply_wd": False, "weight_decay": 0.0}]


def steps_per_epoch(n_clips: int, batch_size: int) -> int:
    return max(1, n_clips // batch_size)


def init_state(cfg: Config, n_clips: int) -> TrainState:
    torch.manual_seed(cfg.data.seed)
    student = Student(cfg.encoder_config(), cfg.heads)
    teacher = init_teacher(student)
    opt = torch.optim.AdamW(
        param_groups(student), lr=0.0, betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
        eps=cfg.optimizer.eps, weight_decay=cfg.schedules.wd_start,
    )
    spe = steps_per_epoch(n_clips, cfg.data.batch_size)
    total = spe * cfg.data.epochs
    sch = cfg.schedules
    schedules = ScheduleSet.build(total, min(total, int(round(sch.warmup_epochs * spe))), sch.peak_lr, sch.min_lr,
                                  sch.wd_start, sch.wd_end, sch.m0)
    return TrainState(cfg, student, teacher, opt, schedules, MemoryBank(cfg.views.augment.memory_size), spe)


def epoch_batches(state: TrainState, specs: Sequence[np.ndarray], epoch: int, start: int = 0):
    """Yield (batch_index, list of ViewPair) for one epoch.

    Clip order and per-sample augmentation seeds derive from (seed, epoch, index)
    only, so any batch can be regenerated after a restart.
    """
    cfg = state.cfg
    order = np.random.default_rng([cfg.data.seed, epoch]).permutation(len(specs))
    batch = min(cfg.data.batch_size, len(specs))
    for b in range(start, state.steps_per_epoch):
        pairs = []
        for idx in order[b * batch:(b + 1) * batch]:
            rng = np.random.default_rng([cfg.data.seed, epoch, int(idx)])
            pairs.append(create_views(specs[idx], cfg.views.pair, cfg.views.augment, state.bank, rng,
                                      cfg.mel.hop_s))
        yield b, pairs


def collate(pairs: Sequence[ViewPair], dtype=torch.float32):
    x = torch.as_tensor(np.stack([p.x for p in pairs]), dtype=dtype)
    x_prime = torch.as_tensor(np.stack([p.x_prime for p in pairs]), dtype=dtype)
    return x, x_prime


def train_step(state: TrainState, pairs: Sequence[ViewPair]):
    """One AdamW step on the student followed by the EMA teacher update."""
    if len(pairs) < 2:
        raise ValueError("a training batch needs at least 2 pairs (batch-norm)")
    cfg = state.cfg
    values = state.schedules.at(state.step)
    if cfg.schedules.ema_override is not None:
        values["m"] = cfg.schedules.ema_override
    for group in state.optimizer.param_groups:
        group["lr"] = values["lr"]
        group["weight_decay"] = values["wd"] if group["apply_wd"] else 0.0
    x, x_prime = collate(pairs, next(state.student.parameters()).dtype)
    state.student.train()
    loss = symmetric_loss(x, x_prime, state.student, state.teacher, cfg.optimizer.teacher_eval)
    if not torch.isfinite(loss):
        dump = {"step": state.step, "loss": loss.item(), **values,
                "param_norms": {n: p.detach().norm().item() for n, p in state.student.named_parameters()}}
        raise NumericalAbort(f"non-finite loss at step {state.step}", dump)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.optimizer.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.student.parameters(), cfg.optimizer.grad_clip)
    state.optimizer.step()
    ema_update(state.teacher, state.student, values["m"], cfg.optimizer.ema_bn_stats)
    state.step += 1
    return loss.item(), values


@torch.no_grad()
def collapse_diagnostics(teacher: Teacher, probe: torch.Tensor, loss: Optional[float] = None) -> CollapseReport:
    was_training = teacher.training
    teacher.eval()
    h = teacher.encoder(probe).tokens[:, 0]
    z = F.normalize(teacher.projector(h), dim=-1)
    teacher.train(was_training)
    n = len(z)
    sim = z @ z.T
    off_diag = (sim.sum() - sim.diagonal().sum()) / (n * (n - 1))
    # spread is measured on the encoder embedding, agreement on the projections
    per_dim = F.normalize(h, dim=-1).std(dim=0, unbiased=False)
    return CollapseReport(float(off_diag.clamp(-1, 1)), float(per_dim.mean()), per_dim.numpy(), loss)


def probe_batch(specs: Sequence[np.ndarray], n_frames: int, size: int = 16) -> torch.Tensor:
    """Centre crops of the first ``size`` clips."""
    crops = []
    for spec in specs[:size]:
        start = max(0, (spec.shape[0] - n_frames) // 2)
        crops.append(spec[start:start + n_frames])
    return torch.as_tensor(np.stack(crops), dtype=torch.float32)


def pretrain(cfg: Config, specs: Sequence[np.ndarray], out_dir=None, state: Optional[TrainState] = None,
             max_steps: Optional[int] = None, on_step: Optional[Callable] = None) -> tuple:
    """Run (or resume) pre-training on normalized log-mel matrices.

    Writes ``metrics.jsonl`` and ``checkpoint.bin`` under ``out_dir`` when given.
    Returns ``(state, losses)``.
    """
    if state is None:
        state = init_state(cfg, len(specs))
    n_frames = segment_frames(cfg.views.pair, cfg.mel.hop_s)
    probe = probe_batch(specs, n_frames, min(16, len(specs))) if len(specs) >= 2 else None
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = open(out_dir / "metrics.jsonl", "a")
    losses = []
    stop = state.total_steps if max_steps is None else min(state.total_steps, state.step + max_steps)
    try:
        while state.step < stop:
            epoch, skip = divmod(state.step, state.steps_per_epoch)
            for _, pairs in epoch_batches(state, specs, epoch, skip):
                loss, values = train_step(state, pairs)
                losses.append(loss)
                record = {"step": state.step, "loss": loss, "lr": values["lr"], "wd": values["wd"],
                          "m": values["m"], "cosine_mean": None, "embed_std": None}
                end_of_epoch = state.step % state.steps_per_epoch == 0
                if end_of_epoch and probe is not None:
                    rep = collapse_diagnostics(state.teacher, probe, loss)
                    record["cosine_mean"], record["embed_std"] = rep.cosine_mean, rep.embed_std
                    log.info("epoch %d step %d loss %.4f cos %.3f std %.4f", state.epoch, state.step,
                             loss, rep.cosine_mean, rep.embed_std)
                if metrics is not None and (state.step % cfg.data.log_every == 0 or end_of_epoch):
                    metrics.write(json.dumps(record) + "\n")
                    metrics.flush()
                if on_step is not None:
                    on_step(state, record)
                every = cfg.data.checkpoint_every
                if out_dir is not None and end_of_epoch and every and state.epoch % every == 0:
                    save_checkpoint(state, out_dir / "checkpoint.bin")
                if state.step >= stop:
                    break
    finally:
        if metrics is not None:
            metrics.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "checkpoint.bin")
    return state, losses


# ---------------------------------------------------------------- checkpoints
#
# Byte layout (all integers little-endian):
#   8 bytes   magic "SEGSSLCK"
#   u32       format version
#   u64       manifest length M, then M bytes of UTF-8 JSON
#   u32       number of tensors N, then N records:
#               u16 name length, name bytes (UTF-8)
#               u8  dtype code (see _DTYPES), u8 ndim, ndim x u64 shape
#               u64 payload length, payload (little-endian, C order)
#   u32       CRC-32 of every preceding byte

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8, 4: np.int32, 5: np.bool_}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, order="C")
    code = _CODES[np.dtype(arr.dtype.type)]
    payload = arr.astype(np.dtype(arr.dtype.type).newbyteorder("<"), copy=False).tobytes()
    name_b = name.encode()
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + struct.pack("<Q", len(payload)) + payload


def write_archive(path, manifest: dict, tensors: dict):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    blob = json.dumps(manifest, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        buf.write(_tensor_record(name, arr))
    data = buf.getvalue()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data + struct.pack("<I", zlib.crc32(data)))
    tmp.replace(path)


def read_archive(path) -> tuple:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted archive)")
    try:
        pos = 8
        (version,) = struct.unpack_from("<I", body, pos)
        pos += 4
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (m_len,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        manifest = json.loads(body[pos:pos + m_len].decode())
        pos += m_len
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode()
            pos += name_len
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            (size,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
            arr = np.frombuffer(body[pos:pos + size], dtype=dtype).reshape(shape)
            tensors[name] = arr.astype(np.dtype(_DTYPES[code]))
            pos += size
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed archive ({exc})") from exc
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes in archive")
    return manifest, tensors


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def save_checkpoint(state: TrainState, path):
    tensors = {}
    for name, t in state.student.state_dict().items():
        tensors[f"student/{name}"] = _np(t)
    for name, t in state.teacher.state_dict().items():
        tensors[f"teacher/{name}"] = _np(t)
    opt_state = state.optimizer.state_dict()
    for idx, slots in opt_state["state"].items():
        for key, t in slots.items():
            tensors[f"optim/{idx}/{key}"] = _np(torch.as_tensor(t))
    for i, item in enumerate(state.bank.state()):
        tensors[f"bank/{i:06d}"] = np.asarray(item)
    tensors["rng/torch"] = _np(torch.get_rng_state())
    groups = [{k: v for k, v in g.items() if k != "params"} | {"params": g["params"]}
              for g in opt_state["param_groups"]]
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": state.cfg.digest(),
        "config": state.cfg.to_dict(),
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "total_steps": state.total_steps,
        "seed": state.cfg.data.seed,
        "optim_param_groups": json.loads(json.dumps(groups, default=list)),
    }
    write_archive(path, manifest, tensors)


def load_checkpoint(path, cfg: Optional[Config] = None) -> TrainState:
    """Rebuild a :class:`TrainState`; refuses archives from another config."""
    from .config import config_from_dict

    manifest, tensors = read_archive(path)
    stored = config_from_dict(manifest["config"])
    if stored.digest() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match its stored config")
    if cfg is not None and cfg.digest() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint was written with a different config")
    cfg = cfg or stored
    n_clips = manifest["steps_per_epoch"] * max(1, cfg.data.batch_size)
    state = init_state(cfg, n_clips)
    state.steps_per_epoch = manifest["steps_per_epoch"]
    if state.total_steps != manifest["total_steps"]:
        raise CheckpointError(f"{path}: schedule length mismatch")

    def sub(prefix):
        return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}

    try:
        state.student.load_state_dict(sub("student/"))
        state.teacher.load_state_dict(sub("teacher/"))
        opt_state = {"state": {}, "param_groups": manifest["optim_param_groups"]}
        for name, t in sub("optim/").items():
            idx, key = name.split("/")
            opt_state["state"].setdefault(int(idx), {})[key] = t
        for g in opt_state["param_groups"]:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        state.optimizer.load_state_dict(opt_state)
    except (RuntimeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: state does not fit the model ({exc})") from exc
    bank = [tensors[k] for k in sorted(k for k in tensors if k.startswith("bank/"))]
    state.bank.load_state(bank)
    torch.set_rng_state(torch.from_numpy(tensors["rng/torch"].copy()))
    state.step = manifest["step"]
    return state
