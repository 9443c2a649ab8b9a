"""Causal encoder (patch transformer with register tokens and a one-way
attention mask) and the mean-velocity decoder (patch transformer modulated by
the (t, t-r) embedding and conditioned in-context on a token slice)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .flowmath import TimePair

ALLOWED_TOKEN_COUNTS = (16, 32, 64, 128, 256)


@dataclass
class EncoderConfig:
    image_side: int = 32
    patch_size: int = 8
    d_e: int = 64
    depth: int = 3
    heads: int = 4
    K: int = 16
    d_token: int = 16
    channels: int = 3

    def __post_init__(self):
        if self.image_side % self.patch_size != 0:
            raise ValueError("image_side must be divisible by patch_size")
        if self.d_e % self.heads != 0:
            raise ValueError("d_e must be divisible by heads")
        if self.K not in ALLOWED_TOKEN_COUNTS:
            raise ValueError(f"K must be one of {ALLOWED_TOKEN_COUNTS}, got {self.K}")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2


@dataclass
class DecoderConfig:
    latent_side: int = 32
    patch_size: int = 8
    d_model: int = 128
    depth: int = 4
    heads: int = 4
    token_dim: int = 16
    n_tokens: int = 16
    repa_layer: int = 2
    channels: int = 3

    def __post_init__(self):
        if self.latent_side % self.patch_size != 0:
            raise ValueError("latent_side must be divisible by patch_size")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if not 1 <= self.repa_layer <= self.depth:
            raise ValueError("repa_layer must lie in [1, depth]")

    @property
    def n_patches(self) -> int:
        return (self.latent_side // self.patch_size) ** 2


@dataclass
class EncoderOutput:
    image_features: Tensor  # (B, N, d_e)
    tokens: Tensor          # (B, K, d_token), unit rows


def build_causal_mask(n_patches: int, K: int) -> Tensor:
    """Boolean (n_patches+K)^2 mask, True where attention is allowed.

    Patch rows see every patch and no token; token row k sees every patch
    and tokens 0..k.
    """
    if n_patches < 1 or K < 1:
        raise ValueError("n_patches and K must be >= 1")
    n = n_patches + K
    mask = torch.zeros(n, n, dtype=torch.bool)
    mask[:, :n_patches] = True  # everyone sees the patches
    token_rows = torch.arange(K).unsqueeze(1)
    token_cols = torch.arange(K).unsqueeze(0)
    mask[n_patches:, n_patches:] = token_cols <= token_rows
    return mask


def normalize_tokens(raw: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each token row to unit L2 norm (epsilon-guarded)."""
    norm = raw.norm(dim=-1, keepdim=True).clamp_min(eps)
    return raw / norm


@dataclass
class TokenSlice:
    values: Tensor   # (..., L, d_token)
    indices: Tensor  # (L,) absolute row indices into the full sequence


def select_tokens(tokens: Tensor, pair: TimePair) -> TokenSlice:
    """Token rows conditioning the subpath [r, t].

    r == t returns the full sequence (instantaneous mode); otherwise rows k
    with floor(r*K) <= k < ceil(t*K), which is non-empty for r < t.  The
    mapping is piecewise constant in (r, t) and carries no gradient.
    """
    K = tokens.shape[-2]
    if pair.is_instantaneous:
        lo, hi = 0, K
    else:
        lo = min(int(math.floor(pair.r * K)), K - 1)
        hi = max(int(math.ceil(pair.t * K)), lo + 1)
    idx = torch.arange(lo, hi, device=tokens.device)
    return TokenSlice(values=tokens[..., lo:hi, :], indices=idx)


@dataclass
class TokenCondition:
    """Batched decoder conditioning: a (possibly padded) token slice per
    sample plus per-sample null flags for the unconditional branch."""

    values: Tensor      # (B, L, d_token)
    indices: Tensor     # (B, L) long
    mask: Tensor        # (B, L) bool, True where a real token sits
    null: Tensor        # (B,) bool, True -> replace with the null sentinel

    @classmethod
    def full(cls, tokens: Tensor) -> "TokenCondition":
        """Condition on every token row (instantaneous / full-interval mode)."""
        B, K, _ = tokens.shape
        idx = torch.arange(K, device=tokens.device).expand(B, K)
        return cls(values=tokens, indices=idx,
                   mask=torch.ones(B, K, dtype=torch.bool, device=tokens.device),
                   null=torch.zeros(B, dtype=torch.bool, device=tokens.device))

    @classmethod
    def from_slice(cls, sl: TokenSlice) -> "TokenCondition":
        values = sl.values if sl.values.ndim == 3 else sl.values.unsqueeze(0)
        B, L, _ = values.shape
        idx = sl.indices.to(values.device).expand(B, L)
        return cls(values=values, indices=idx,
                   mask=torch.ones(B, L, dtype=torch.bool, device=values.device),
                   null=torch.zeros(B, dtype=torch.bool, device=values.device))

    @classmethod
    def null_condition(cls, batch: int, d_token: int, device=None) -> "TokenCondition":
        return cls(values=torch.zeros(batch, 1, d_token, device=device),
                   indices=torch.zeros(batch, 1, dtype=torch.long, device=device),
                   mask=torch.ones(batch, 1, dtype=torch.bool, device=device),
                   null=torch.ones(batch, dtype=torch.bool, device=device))


def pad_slices(slices: list[TokenSlice], d_token: int) -> TokenCondition:
    """Stack per-sample slices of unequal length into one padded condition."""
    B = len(slices)
    L = max(s.values.shape[-2] for s in slices)
    ref = slices[0].values
    values = torch.zeros(B, L, d_token, dtype=ref.dtype, device=ref.device)
    indices = torch.zeros(B, L, dtype=torch.long, device=ref.device)
    mask = torch.zeros(B, L, dtype=torch.bool, device=ref.device)
    for i, s in enumerate(slices):
        n = s.values.shape[-2]
        values[i, :n] = s.values
        indices[i, :n] = s.indices
        mask[i, :n] = True
    return TokenCondition(values=values, indices=indices, mask=mask,
                          null=torch.zeros(B, dtype=torch.bool))


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, N, C*patch*patch) in row-major patch order."""
    B, C, H, W = x.shape
    h, w = H // patch, W // patch
    x = x.reshape(B, C, h, patch, w, patch)
    x = x.permute(0, 2, 4, 1, 3, 5)
    return x.reshape(B, h * w, C * patch * patch)


def unpatchify(x: Tensor, patch: int, channels: int, side: int) -> Tensor:
    B, N, _ = x.shape
    h = w = side // patch
    x = x.reshape(B, h, w, channels, patch, patch)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(B, channels, side, side)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, bias: Optional[Tensor] = None) -> Tensor:
        # bias: additive attention mask, broadcastable to (B, h, L, L)
        B, L, D = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, L, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(B, L, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(B, L, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Mlp(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, mult * dim)
        self.fc2 = nn.Linear(mult * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: Tensor, bias: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x), bias)
        return x + self.mlp(self.ln2(x))


def mask_to_bias(mask: Tensor) -> Tensor:
    """Boolean attend-mask -> additive float bias (0 allowed, -inf blocked)."""
    bias = torch.zeros(mask.shape, dtype=torch.float32)
    return bias.masked_fill(~mask, float("-inf"))


class CausalEncoder(nn.Module):
    """Patch transformer whose K appended registers read the image and their
    predecessors only; register outputs become the 1D token sequence."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.channels * cfg.patch_size**2
        self.patch_embed = nn.Linear(patch_dim, cfg.d_e)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.n_patches, cfg.d_e))
        self.registers = nn.Parameter(torch.zeros(cfg.K, cfg.d_e))
        self.blocks = nn.ModuleList(EncoderBlock(cfg.d_e, cfg.heads) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.d_e)
        self.token_head = nn.Linear(cfg.d_e, cfg.d_token)
        self.register_buffer("attn_bias", mask_to_bias(build_causal_mask(cfg.n_patches, cfg.K)),
                             persistent=False)
        nn.init.trunc_normal_(self.pos_emb, std=0.02)
        nn.init.trunc_normal_(self.registers, std=0.02)

    def forward(self, images: Tensor) -> EncoderOutput:
        cfg = self.cfg
        if images.shape[-2:] != (cfg.image_side, cfg.image_side):
            raise ValueError(f"expected {cfg.image_side}x{cfg.image_side} images, "
                             f"got {tuple(images.shape[-2:])}")
        B = images.shape[0]
        x = self.patch_embed(patchify(images, cfg.patch_size)) + self.pos_emb
        x = torch.cat([x, self.registers.expand(B, -1, -1)], dim=1)
        bias = self.attn_bias
        for blk in self.blocks:
            x = blk(x, bias)
        x = self.final_norm(x)
        h_e = x[:, : cfg.n_patches]
        raw = self.token_head(x[:, cfg.n_patches:])
        return EncoderOutput(image_features=h_e, tokens=normalize_tokens(raw))


class IntervalEmbed(nn.Module):
    """Sinusoidal embeddings of t and t-r fused into one modulation vector."""

    def __init__(self, dim: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(2 * freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    @staticmethod
    def sinusoidal(x: Tensor, dim: int, max_period: float = 1e4) -> Tensor:
        # times live in [0,1]; the 100x stretch keeps the fastest component
        # smooth enough for finite-difference checks of the directional
        # derivative while still resolving small intervals
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype) / half)
        args = x[:, None] * freqs[None] * 100.0
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)

    def forward(self, r: Tensor, t: Tensor) -> Tensor:
        emb = torch.cat([self.sinusoidal(t, self.freq_dim),
                         self.sinusoidal(t - r, self.freq_dim)], dim=-1)
        return self.mlp(emb)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = Mlp(dim)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x: Tensor, c: Tensor, bias: Optional[Tensor]) -> Tensor:
        s1, g1, s2, g2, sh1, sh2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.attn(modulate(self.ln1(x), sh1, s1), bias)
        return x + g2.unsqueeze(1) * self.mlp(modulate(self.ln2(x), sh2, s2))


class VelocityDecoder(nn.Module):
    """Patch transformer predicting the average velocity over [r, t] of the
    noised latent, conditioned in-context on a token slice whose positions
    carry their absolute index embeddings.

    Output head is zero-initialized, so an untrained decoder predicts zero
    velocity.  Returns (velocity, hidden states at repa_layer restricted to
    latent-patch positions).
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.channels * cfg.patch_size**2
        self.patch_embed = nn.Linear(patch_dim, cfg.d_model)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.n_patches, cfg.d_model))
        self.token_in = nn.Linear(cfg.token_dim, cfg.d_model)
        self.index_emb = nn.Embedding(cfg.n_tokens, cfg.d_model)
        self.null_token = nn.Parameter(torch.zeros(cfg.d_model))
        self.time_embed = IntervalEmbed(cfg.d_model)
        self.blocks = nn.ModuleList(DecoderBlock(cfg.d_model, cfg.heads) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(cfg.d_model, elementwise_affine=False)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(cfg.d_model, 2 * cfg.d_model))
        self.head = nn.Linear(cfg.d_model, patch_dim)
        nn.init.trunc_normal_(self.pos_emb, std=0.02)
        nn.init.trunc_normal_(self.index_emb.weight, std=0.02)
        nn.init.trunc_normal_(self.null_token, std=0.02)
        nn.init.zeros_(self.final_ada[1].weight)
        nn.init.zeros_(self.final_ada[1].bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _embed_condition(self, cond: TokenCondition, batch: int) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        dtype = self.token_in.weight.dtype
        if cond is None:
            cond = TokenCondition.null_condition(batch, cfg.token_dim)
        if cond.values.shape[-1] != cfg.token_dim:
            raise ValueError(f"token dim {cond.values.shape[-1]} != configured {cfg.token_dim}")
        emb = self.token_in(cond.values.to(dtype)) + self.index_emb(cond.indices)
        mask = cond.mask
        if cond.null.any():
            null_row = self.null_token.expand(emb.shape[0], 1, -1)
            first = torch.where(cond.null[:, None, None], null_row, emb[:, :1])
            emb = torch.cat([first, emb[:, 1:]], dim=1)
            keep_first = mask[:, :1] | cond.null[:, None]
            rest = mask[:, 1:] & ~cond.null[:, None]
            mask = torch.cat([keep_first, rest], dim=1)
        return emb, mask

    def forward(
        self,
        z_t: Tensor,
        r: Tensor,
        t: Tensor,
        cond: Optional[TokenCondition],
    ) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        B = z_t.shape[0]
        if z_t.shape[-2:] != (cfg.latent_side, cfg.latent_side):
            raise ValueError(f"expected {cfg.latent_side}x{cfg.latent_side} latents")
        r = torch.as_tensor(r, dtype=z_t.dtype).expand(B) if not torch.is_tensor(r) else r
        t = torch.as_tensor(t, dtype=z_t.dtype).expand(B) if not torch.is_tensor(t) else t

        cond_emb, cond_mask = self._embed_condition(cond, B)
        L_cond = cond_emb.shape[1]
        patches = self.patch_embed(patchify(z_t, cfg.patch_size)) + self.pos_emb
        x = torch.cat([cond_emb, patches], dim=1)

        key_mask = torch.cat(
            [cond_mask, torch.ones(B, cfg.n_patches, dtype=torch.bool, device=z_t.device)], dim=1)
        bias = torch.zeros(B, 1, 1, key_mask.shape[1], dtype=z_t.dtype, device=z_t.device)
        bias = bias.masked_fill(~key_mask[:, None, None, :], float("-inf"))

        c = self.time_embed(r.to(z_t.dtype), t.to(z_t.dtype))
        repa_hidden = None
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x, c, bias)
            if i == cfg.repa_layer:
                repa_hidden = x[:, L_cond:]
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        out = self.head(modulate(self.final_norm(x[:, L_cond:]), shift, scale))
        u = unpatchify(out, cfg.patch_size, cfg.channels, cfg.latent_side)
        return u, repa_hidden


def decode_velocity(
    decoder: VelocityDecoder,
    z_t: Tensor,
    pair: TimePair,
    tokens: Optional[Tensor],
) -> tuple[Tensor, Tensor]:
    """Single-pair convenience call: tokens is a full (B, K, d) sequence (the
    matching slice is taken here) or None for the unconditional branch."""
    B = z_t.shape[0]
    if tokens is None:
        cond = None
    else:
        cond = TokenCondition.from_slice(select_tokens(tokens, pair))
    r = torch.full((B,), pair.r, dtype=z_t.dtype, device=z_t.device)
    t = torch.full((B,), pair.t, dtype=z_t.dtype, device=z_t.device)
    return decoder(z_t, r, t, cond)


class LatentCodec:
    """Seam for a frozen pretrained latent space; identity at desk scale."""

    def encode(self, pixels: Tensor) -> Tensor:
        return pixels

    def decode(self, latents: Tensor) -> Tensor:
        return latents


class Tokenizer(nn.Module):
    """Encoder + decoder bundle trained jointly; the unit of checkpointing."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
                 codec: Optional[LatentCodec] = None):
        super().__init__()
        if dec_cfg.token_dim != enc_cfg.d_token:
            raise ValueError("decoder token_dim must equal encoder d_token")
        if dec_cfg.n_tokens != enc_cfg.K:
            raise ValueError("decoder n_tokens must equal encoder K")
        self.encoder = CausalEncoder(enc_cfg)
        self.decoder = VelocityDecoder(dec_cfg)
        self.codec = codec if codec is not None else LatentCodec()

    @property
    def enc_cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    @property
    def dec_cfg(self) -> DecoderConfig:
        return self.decoder.cfg

    def encode(self, images: Tensor) -> EncoderOutput:
        return self.encoder(self.codec.encode(images))
