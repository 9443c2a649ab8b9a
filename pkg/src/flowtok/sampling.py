"""Inference procedures over a frozen decoder: one-jump reconstruction from
pure noise, multi-step Euler sampling with guidance, and subpath
reconstruction used by the causality probes."""

from __future__ import annotations

from typing import Callable, Optional

import torch
from torch import Tensor

from .flowmath import TimePair, interpolate
from .nets import TokenCondition, select_tokens

# decoder protocol: callable(z, r, t, cond) -> (velocity, repa_hidden)
DecoderFn = Callable[[Tensor, Tensor, Tensor, Optional[TokenCondition]], tuple[Tensor, Tensor]]


def cfg_combine(cond: Tensor, uncond: Tensor, scale: float) -> Tensor:
    """Classifier-free guidance blend: uncond + scale*(cond - uncond)."""
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch {tuple(cond.shape)} vs {tuple(uncond.shape)}")
    if scale == 1.0:
        return cond
    if scale == 0.0:
        return uncond
    return uncond + scale * (cond - uncond)


def _times(batch: int, value: float, like: Tensor) -> Tensor:
    return torch.full((batch,), value, dtype=like.dtype, device=like.device)


@torch.no_grad()
def one_step(decoder: DecoderFn, tokens: Tensor, eps: Tensor) -> Tensor:
    """Single mean-velocity jump from pure noise over the whole path:
    eps - u(eps, 0, 1, all tokens).  Guidance is disabled here by contract."""
    B = eps.shape[0]
    cond = TokenCondition.full(tokens)
    u, _ = decoder(eps, _times(B, 0.0, eps), _times(B, 1.0, eps), cond)
    return eps - u


@torch.no_grad()
def multi_step(
    decoder: DecoderFn,
    tokens: Tensor,
    eps: Tensor,
    n_steps: int,
    cfg_scale: float = 1.0,
) -> Tensor:
    """Euler integration of the instantaneous field from t=1 to t=0 on a
    uniform grid, querying the decoder in r=t mode with all tokens; when
    cfg_scale != 1 the null branch is queried too and blended."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if cfg_scale < 0:
        raise ValueError("cfg_scale must be >= 0")
    B = eps.shape[0]
    cond = TokenCondition.full(tokens)
    grid = torch.linspace(1.0, 0.0, n_steps + 1, dtype=eps.dtype)
    z = eps
    for i in range(n_steps):
        t_i = _times(B, grid[i].item(), eps)
        v, _ = decoder(z, t_i, t_i, cond)
        if cfg_scale != 1.0:
            v_null, _ = decoder(z, t_i, t_i, None)
            v = cfg_combine(v, v_null, cfg_scale)
        z = z - (grid[i] - grid[i + 1]).item() * v
    return z


@torch.no_grad()
def subpath_reconstruct(
    decoder: DecoderFn,
    x: Tensor,
    pair: TimePair,
    tokens_full: Tensor,
    eps: Tensor,
) -> Tensor:
    """One mean-velocity jump along [r, t]: noise x to z_t, condition on the
    matching token slice, return z_t - (t-r)*u."""
    if pair.r >= pair.t:
        raise ValueError("subpath reconstruction needs r < t")
    B = x.shape[0]
    z_t = interpolate(x, eps, pair.t)
    cond = TokenCondition.from_slice(select_tokens(tokens_full, pair))
    u, _ = decoder(z_t, _times(B, pair.r, x), _times(B, pair.t, x), cond)
    return z_t - (pair.t - pair.r) * u


def prefix_reconstruct(decoder: DecoderFn, x: Tensor, k: int,
                       tokens_full: Tensor, eps: Tensor) -> Tensor:
    """Reconstruct from the first k tokens via the subpath [0, k/K]."""
    K = tokens_full.shape[-2]
    if not 1 <= k <= K:
        raise ValueError(f"k must lie in [1, {K}], got {k}")
    return subpath_reconstruct(decoder, x, TimePair(0.0, k / K), tokens_full, eps)


def segment_reconstruct(decoder: DecoderFn, x: Tensor, a: int, b: int,
                        tokens_full: Tensor, eps: Tensor) -> Tensor:
    """One jump along the segment [a/K, b/K] conditioned on tokens a..b-1."""
    K = tokens_full.shape[-2]
    if not 0 <= a < b <= K:
        raise ValueError(f"need 0 <= a < b <= {K}, got a={a}, b={b}")
    return subpath_reconstruct(decoder, x, TimePair(a / K, b / K), tokens_full, eps)
