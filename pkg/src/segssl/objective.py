"""Projector/predictor heads, the normalized-MSE objective and the EMA teacher."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .encoder import EncoderConfig, TransformerEncoder


@dataclass
class HeadConfig:
    hidden_dim: int = 4096
    out_dim: int = 256
    use_predictor: bool = True

    def __post_init__(self):
        if self.hidden_dim < 1 or self.out_dim < 1:
            raise ValueError("head dims must be >= 1")


class MLPHead(nn.Module):
    """linear -> batch-norm -> ReLU -> linear."""

    def __init__(self, in_dim, hidden_dim, out_dim):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.bn = nn.BatchNorm1d(hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, h):
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"head expects dim {self.in_dim}, got {h.shape[-1]}")
        if self.training and h.shape[0] < 2:
            raise ValueError("batch-norm in train mode needs a batch of at least 2")
        return self.fc2(F.relu(self.bn(self.fc1(h))))


class Student(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, head_cfg: HeadConfig):
        super().__init__()
        self.encoder = TransformerEncoder(enc_cfg)
        self.projector = MLPHead(enc_cfg.dim, head_cfg.hidden_dim, head_cfg.out_dim)
        if head_cfg.use_predictor:
            self.predictor = MLPHead(head_cfg.out_dim, head_cfg.hidden_dim, head_cfg.out_dim)
        else:
            self.predictor = nn.Identity()

    def forward(self, x):
        z = self.projector(self.encoder(x).tokens[:, 0])
        return self.predictor(z)


class Teacher(nn.Module):
    def __init__(self, encoder: TransformerEncoder, projector: MLPHead):
        super().__init__()
        self.encoder = encoder
        self.projector = projector

    def forward(self, x):
        return self.projector(self.encoder(x).tokens[:, 0])


def init_teacher(student: Student) -> Teacher:
    teacher = Teacher(copy.deepcopy(student.encoder), copy.deepcopy(student.projector))
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def normalized_mse(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Squared distance between L2-normalized vectors, ``2 - 2 cos(p, z)`` per row.

    ``z`` is the target and is detached.
    """
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(z.shape)}")
    z = z.detach()
    p_norm = p.norm(dim=-1, keepdim=True)
    z_norm = z.norm(dim=-1, keepdim=True)
    if (p_norm == 0).any() or (z_norm == 0).any():
        raise ValueError("normalized_mse is undefined for zero vectors")
    return ((p / p_norm - z / z_norm) ** 2).sum(dim=-1)


def symmetric_loss(x: torch.Tensor, x_prime: torch.Tensor, student: Student, teacher: Teacher,
                   teacher_eval: bool = True) -> torch.Tensor:
    """Batch mean of loss(student(X'), teacher(X)) + loss(student(X), teacher(X'))."""
    was_training = teacher.training
    teacher.train(not teacher_eval)
    with torch.no_grad():
        z = teacher(x)
        z_prime = teacher(x_prime)
    teacher.train(was_training)
    p_prime = student(x_prime)
    p = student(x)
    return (normalized_mse(p_prime, z) + normalized_mse(p, z_prime)).mean()


def _teacher_pairs(teacher: Teacher, student: Student):
    t_state = dict(teacher.encoder.named_parameters(prefix="encoder"))
    t_state.update(teacher.projector.named_parameters(prefix="projector"))
    t_state.update(teacher.encoder.named_buffers(prefix="encoder"))
    t_state.update(teacher.projector.named_buffers(prefix="projector"))
    s_state = dict(student.encoder.named_parameters(prefix="encoder"))
    s_state.update(student.projector.named_parameters(prefix="projector"))
    s_state.update(student.encoder.named_buffers(prefix="encoder"))
    s_state.update(student.projector.named_buffers(prefix="projector"))
    if t_state.keys() != s_state.keys():
        raise ValueError("teacher and student parameter sets differ")
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        yield name, t, s


@torch.no_grad()
def ema_update(teacher: Teacher, student: Student, m: float, ema_bn_stats: bool = True) -> Teacher:
    """phi <- m * phi + (1 - m) * theta, applied in place to the teacher.

    Batch-norm running statistics follow the same rule unless ``ema_bn_stats``
    is False, in which case they are copied from the student. The integer
    batch counter is always copied.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError("decay must be in [0, 1]")
    for name, t, s in _teacher_pairs(teacher, student):
        if not t.is_floating_point():
            t.copy_(s)
        elif name.endswith(("running_mean", "running_var")) and not ema_bn_stats:
            t.copy_(s)
        elif m == 1.0:
            continue
        elif m == 0.0:
            t.copy_(s)
        else:
            t.mul_(m).add_(s, alpha=1.0 - m)
    return teacher
