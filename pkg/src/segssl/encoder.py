"""Frame-stacking transformer encoder with a CLS token."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import torch
from torch import nn
from torch.nn import functional as F

EMBED_MODES = ("pretrain", "linear_eval", "finetune")


@dataclass
class EncoderConfig:
    n_blocks: int = 12
    n_heads: int = 6
    dim: int = 384
    inner_dim: int = 1536
    stack_frames: int = 4
    input_bins: int = 64
    max_tokens: int = 150  # 6 s at 10 ms hop, stacked by 4
    qkv_bias: bool = True

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.inner_dim < self.dim:
            raise ValueError("inner_dim must be >= dim")
        if self.stack_frames < 1 or self.n_blocks < 1 or self.max_tokens < 1:
            raise ValueError("stack_frames, n_blocks and max_tokens must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "EncoderConfig":
        presets = {
            "small": dict(n_blocks=12, n_heads=6, dim=384, inner_dim=1536),
            "base": dict(n_blocks=12, n_heads=12, dim=768, inner_dim=3072),
        }
        try:
            base = presets[name.lower()]
        except KeyError:
            raise ValueError(f"unknown encoder preset {name!r}") from None
        return cls(**{**base, **overrides})


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form count of learnable encoder parameters."""
    d, inner = cfg.dim, cfg.inner_dim
    patch = cfg.stack_frames * cfg.input_bins * d + d
    cls_and_pos = d + (cfg.max_tokens + 1) * d
    qkv = 3 * d * d + (3 * d if cfg.qkv_bias else 0)
    block = 2 * d + qkv + d * d + d + 2 * d + d * inner + inner + inner * d + d
    return patch + cls_and_pos + cfg.n_blocks * block


class Attention(nn.Module):
    def __init__(self, dim, num_heads, qkv_bias=True):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        x = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(x.transpose(1, 2).reshape(B, N, C))


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, num_heads, inner_dim, qkv_bias=True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, qkv_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, inner_dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, T+1, d), index 0 is CLS
    per_block_outputs: Optional[List[torch.Tensor]] = None


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.patch_embed = nn.Linear(cfg.stack_frames * cfg.input_bins, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_tokens + 1, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.n_heads, cfg.inner_dim, cfg.qkv_bias) for _ in range(cfg.n_blocks)
        )
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def stack_and_project(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L, C) log-mel -> (B, L // stack, d) tokens; trailing frames are dropped."""
        if x.dim() == 2:
            x = x.unsqueeze(0)
        B, L, C = x.shape
        k = self.cfg.stack_frames
        if L < k:
            raise ValueError(f"need at least {k} frames, got {L}")
        if C != self.cfg.input_bins:
            raise ValueError(f"expected {self.cfg.input_bins} bins, got {C}")
        T = L // k
        x = x[:, : T * k].reshape(B, T, k * C)
        return self.patch_embed(x)

    def forward(self, x: torch.Tensor, keep_per_block: bool = False) -> TokenSequence:
        tokens = self.stack_and_project(x)
        B, T, _ = tokens.shape
        if T > self.cfg.max_tokens:
            raise ValueError(f"{T} tokens exceed the positional table ({self.cfg.max_tokens})")
        tokens = torch.cat([self.cls_token.expand(B, -1, -1), tokens], dim=1)
        tokens = tokens + self.pos_embed[:, : T + 1]
        per_block = [] if keep_per_block else None
        for blk in self.blocks:
            tokens = blk(tokens)
            if keep_per_block:
                per_block.append(tokens)
        return TokenSequence(tokens, per_block)

    def embed(self, x: torch.Tensor, mode: str = "pretrain", pooling: str = "per_block") -> torch.Tensor:
        seq = self(x, keep_per_block=(mode == "linear_eval"))
        return extract_embedding(seq, mode, pooling)

    def embed_dim(self, mode: str, pooling: str = "per_block") -> int:
        return embedding_dim(self.cfg, mode, pooling)


def embedding_dim(cfg: EncoderConfig, mode: str, pooling: str = "per_block") -> int:
    if mode == "pretrain":
        return cfg.dim
    if mode == "finetune" or (mode == "linear_eval" and pooling == "joint"):
        return 2 * cfg.dim
    if mode == "linear_eval":
        return cfg.dim * (cfg.n_blocks + 1)
    raise ValueError(f"unknown embedding mode {mode!r}")


def extract_embedding(seq: TokenSequence, mode: str, pooling: str = "per_block") -> torch.Tensor:
    """Segment embedding from an encoded sequence.

    ``linear_eval`` concatenates the final CLS with the time-average of every
    block's non-CLS tokens (``pooling="per_block"``), or with one average taken
    jointly over all blocks (``pooling="joint"``).
    """
    cls = seq.tokens[:, 0]
    if mode == "pretrain":
        return cls
    if mode == "finetune":
        return torch.cat([cls, seq.tokens[:, 1:].mean(dim=1)], dim=-1)
    if mode == "linear_eval":
        if not seq.per_block_outputs:
            raise ValueError("linear_eval embedding needs per-block outputs")
        averages = [out[:, 1:].mean(dim=1) for out in seq.per_block_outputs]
        if pooling == "per_block":
            return torch.cat([cls, *averages], dim=-1)
        if pooling == "joint":
            return torch.cat([cls, torch.stack(averages).mean(dim=0)], dim=-1)
        raise ValueError(f"unknown pooling {pooling!r}")
    raise ValueError(f"unknown embedding mode {mode!r}")
