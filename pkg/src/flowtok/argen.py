"""Autoregressive generator over continuous 1D tokens: a causal transformer
with a class-token prefix produces per-position condition vectors, and a
small velocity-denoising head models each token's distribution."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from .nets import Attention, Mlp, normalize_tokens
from .sampling import cfg_combine


@dataclass
class ARConfig:
    d_ar: int = 128
    depth: int = 3
    heads: int = 4
    K: int = 16
    n_classes: int = 4
    head_hidden: int = 128
    head_depth: int = 3
    token_dim: int = 16
    diff_train_steps: int = 1000
    diff_sample_steps: int = 100
    label_drop: float = 0.1

    def __post_init__(self):
        if self.d_ar % self.heads != 0:
            raise ValueError("d_ar must be divisible by heads")
        if not 0 <= self.label_drop < 1:
            raise ValueError("label_drop must lie in [0, 1)")

    @property
    def null_class_id(self) -> int:
        # reserved one past the real classes
        return self.n_classes


class ARBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: Tensor, bias: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x), bias)
        return x + self.mlp(self.ln2(x))


class ARModel(nn.Module):
    """Causal transformer over [class embedding, token embeddings]; output i
    is the condition vector for token i given the class and tokens < i."""

    def __init__(self, cfg: ARConfig):
        super().__init__()
        self.cfg = cfg
        self.class_emb = nn.Embedding(cfg.n_classes + 1, cfg.d_ar)  # +1 null
        self.token_in = nn.Linear(cfg.token_dim, cfg.d_ar)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.K + 1, cfg.d_ar))
        self.blocks = nn.ModuleList(ARBlock(cfg.d_ar, cfg.heads) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.d_ar)
        nn.init.trunc_normal_(self.pos_emb, std=0.02)
        nn.init.trunc_normal_(self.class_emb.weight, std=0.02)

    def conditions(self, prefix: Tensor, class_ids: Tensor) -> Tensor:
        """(B, L, token_dim) prefix with L < = K, (B,) class ids ->
        (B, L+1, d_ar) condition vectors for token positions 0..L."""
        cfg = self.cfg
        B, L = prefix.shape[0], prefix.shape[1]
        if L > cfg.K:
            raise ValueError(f"prefix of length {L} exceeds K={cfg.K}")
        if (class_ids > cfg.null_class_id).any() or (class_ids < 0).any():
            raise ValueError("class id out of range")
        cls = self.class_emb(class_ids).unsqueeze(1)
        if L:
            x = torch.cat([cls, self.token_in(prefix)], dim=1)
        else:
            x = cls
        x = x + self.pos_emb[: L + 1]
        causal = torch.ones(L + 1, L + 1, dtype=torch.bool).tril()
        bias = torch.zeros(L + 1, L + 1, dtype=x.dtype).masked_fill(~causal, float("-inf"))
        for blk in self.blocks:
            x = blk(x, bias)
        return self.final_norm(x)


def ar_conditions(model: ARModel, prefix: Tensor, class_ids: Tensor) -> Tensor:
    return model.conditions(prefix, class_ids)


class TokenDistributionHead(nn.Module):
    """Velocity-denoising MLP over a single token: maps (noised token, noise
    level, condition vector) to the straight-path velocity prediction."""

    LEVEL_DIM = 32

    def __init__(self, cfg: ARConfig):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.token_dim + self.LEVEL_DIM + cfg.d_ar] + [cfg.head_hidden] * cfg.head_depth
        layers = []
        for a, b in zip(dims, dims[1:]):
            layers += [nn.Linear(a, b), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(dims[-1], cfg.token_dim)

    @staticmethod
    def _level_embed(s: Tensor, dim: int) -> Tensor:
        half = dim // 2
        freqs = torch.exp(-math.log(1e4) * torch.arange(half, dtype=s.dtype) / half)
        args = s[:, None] * freqs[None] * 100.0
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)

    def forward(self, noised: Tensor, level: Tensor, cond: Tensor) -> Tensor:
        emb = self._level_embed(level, self.LEVEL_DIM)
        return self.out(self.body(torch.cat([noised, emb, cond], dim=-1)))


def diffusion_head_loss(cond: Tensor, token_target: Tensor, rng: torch.Generator,
                        head: TokenDistributionHead) -> Tensor:
    """Teacher-forced denoising loss for one (condition, token) pair batch:
    noise the target along the straight path at a sampled grid level and
    regress the velocity (noise - token) with squared error."""
    B = token_target.shape[0]
    T = head.cfg.diff_train_steps
    j = torch.randint(0, T + 1, (B,), generator=rng)
    s = (j.to(token_target.dtype) / T)
    eps = torch.randn(token_target.shape, generator=rng, dtype=token_target.dtype)
    noised = (1 - s[:, None]) * token_target + s[:, None] * eps
    pred = head(noised, s, cond)
    return (pred - (eps - token_target)).pow(2).mean()


def head_sample(head: TokenDistributionHead, cond: Tensor,
                cond_null: Optional[Tensor], scale: float,
                rng: torch.Generator) -> Tensor:
    """Euler-integrate the head's velocity field from pure noise to a token,
    with guidance when scale != 1 (the null branch is skipped at scale 1)."""
    S = head.cfg.diff_sample_steps
    B = cond.shape[0]
    y = torch.randn(B, head.cfg.token_dim, generator=rng, dtype=cond.dtype)
    for i in range(S):
        s = torch.full((B,), 1.0 - i / S, dtype=cond.dtype)
        v = head(y, s, cond)
        if scale != 1.0:
            if cond_null is None:
                raise ValueError("guided sampling needs the null-class condition")
            v = cfg_combine(v, head(y, s, cond_null), scale)
        y = y - (1.0 / S) * v
    return y


def cfg_schedule(k: int, K: int, s_max: float) -> float:
    """Linear guidance ramp: near 1 for the first token, s_max for the last."""
    if not 0 <= k < K:
        raise ValueError(f"k must lie in [0, {K}), got {k}")
    if s_max < 1:
        raise ValueError("s_max must be >= 1")
    return 1.0 + (s_max - 1.0) * (k + 1) / K


@torch.no_grad()
def ar_generate(model: ARModel, head: TokenDistributionHead, class_ids: Tensor,
                s_max: float, rng: torch.Generator) -> Tensor:
    """Sample (B, K, token_dim) unit-norm token sequences position by
    position, guiding each token at cfg_schedule(k, K, s_max)."""
    cfg = model.cfg
    B = class_ids.shape[0]
    null_ids = torch.full((B,), cfg.null_class_id, dtype=torch.long)
    prefix = torch.zeros(B, 0, cfg.token_dim)
    for k in range(cfg.K):
        cond = model.conditions(prefix, class_ids)[:, -1]
        scale = cfg_schedule(k, cfg.K, s_max)
        cond_null = model.conditions(prefix, null_ids)[:, -1] if scale != 1.0 else None
        token = head_sample(head, cond, cond_null, scale, rng)
        token = normalize_tokens(token)
        prefix = torch.cat([prefix, token.unsqueeze(1)], dim=1)
    return prefix


def ar_train_loss(model: ARModel, head: TokenDistributionHead, tokens: Tensor,
                  class_ids: Tensor, rng: torch.Generator) -> Tensor:
    """Teacher forcing over a whole batch of sequences: conditions from
    ground-truth prefixes, one denoising term per position, class ids dropped
    to the null id at label_drop rate so guidance has a trained null branch."""
    cfg = model.cfg
    B, K, d = tokens.shape
    if K != cfg.K:
        raise ValueError(f"sequence length {K} != configured K={cfg.K}")
    drop = torch.rand(B, generator=rng) < cfg.label_drop
    ids = torch.where(drop, torch.full_like(class_ids, cfg.null_class_id), class_ids)
    conds = model.conditions(tokens[:, : K - 1], ids)      # (B, K, d_ar)
    flat_cond = conds.reshape(B * K, -1)
    flat_target = tokens.reshape(B * K, d)
    return diffusion_head_loss(flat_cond, flat_target, rng, head)


@dataclass
class ARTrainConfig:
    epochs: int = 8
    lr: float = 5e-5
    warmup_frac: float = 0.24      # warmup epochs as a fraction of the run
    batch_size: int = 64
    weight_decay: float = 0.05
    grad_clip: float = 3.0
    ema: float = 0.999


def ar_lr_at(cfg: ARTrainConfig, step: int, total_steps: int) -> float:
    # linear warmup to the constant rate
    warmup = max(int(cfg.warmup_frac * total_steps), 1)
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    return cfg.lr


@torch.no_grad()
def generate_image(decoder, codec, model: ARModel, head: TokenDistributionHead,
                   class_ids: Tensor, s_max: float, rng: torch.Generator,
                   latent_shape: tuple[int, ...]) -> tuple[Tensor, Tensor]:
    """Full pipeline: sample token sequences, render with one decoder jump
    from pure noise (no decoder-side guidance), map latents to pixels."""
    from .sampling import one_step

    tokens = ar_generate(model, head, class_ids, s_max, rng)
    eps = torch.randn((class_ids.shape[0], *latent_shape), generator=rng,
                      dtype=tokens.dtype)
    latents = one_step(decoder, tokens, eps)
    return codec.decode(latents), tokens
