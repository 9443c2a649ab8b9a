"""Desk-scale evaluation: PSNR, single-scale SSIM, Fréchet feature distance,
token-usage balance statistics, and the prefix-reconstruction causality
probe."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .flowmath import AdaptiveLossConfig, sample_time_pairs
from .sampling import prefix_reconstruct

PSNR_CAP_DB = 99.0


def psnr(a: Tensor, b: Tensor, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); exact matches are capped at 99 dB."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = (a.double() - b.double()).pow(2).mean().item()
    if mse == 0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak**2 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim(a: Tensor, b: Tensor, k1: float = 0.01, k2: float = 0.03,
         dynamic_range: float = 1.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
    over windows and channels.  Inputs are (H, W) or (C, H, W)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.ndim != 3:
        raise ValueError("ssim expects (H, W) or (C, H, W) images")
    if min(a.shape[-2:]) < 11:
        raise ValueError("image side must be >= 11 for the 11x11 window")

    window = _gaussian_window()
    C = a.shape[0]
    kernel = window.expand(C, 1, 11, 11)
    x = a.double().unsqueeze(0)
    y = b.double().unsqueeze(0)

    def filt(img):
        return F.conv2d(img, kernel, groups=C)

    mu_x, mu_y = filt(x), filt(y)
    sigma_x = filt(x * x) - mu_x**2
    sigma_y = filt(y * y) - mu_y**2
    sigma_xy = filt(x * y) - mu_x * mu_y

    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sigma_x + sigma_y + c2)
    return float((num / den).mean())


def _psd_sqrt_trace(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((sigma_a sigma_b)^{1/2}) via eigendecomposition of the symmetrized
    product, clipping negative eigenvalues from floating-point noise."""
    vals_a, vecs_a = np.linalg.eigh(sigma_a)
    vals_a = np.clip(vals_a, 0.0, None)
    root_a = (vecs_a * np.sqrt(vals_a)) @ vecs_a.T
    inner = root_a @ sigma_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_distance(features_a, features_b, reg: float = 1e-6) -> float:
    """Squared Wasserstein-2 distance between Gaussian fits of two feature
    sets: ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})."""
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[0] == 0 or fb.shape[0] == 0:
        raise ValueError("each feature set must be a non-empty (n, d) array")
    if fa.shape[1] != fb.shape[1]:
        raise ValueError("feature dimensions differ")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    d = fa.shape[1]
    sigma_a = np.cov(fa, rowvar=False).reshape(d, d) + reg * np.eye(d)
    sigma_b = np.cov(fb, rowvar=False).reshape(d, d) + reg * np.eye(d)
    mean_term = float(((mu_a - mu_b) ** 2).sum())
    trace_term = float(np.trace(sigma_a) + np.trace(sigma_b)) - 2 * _psd_sqrt_trace(sigma_a, sigma_b)
    return max(mean_term + trace_term, 0.0)


def token_usage_histogram(
    K: int,
    n_draws: int,
    selector: str,
    rng: torch.Generator,
    q: float = AdaptiveLossConfig().q,
) -> Tensor:
    """Per-index inclusion frequency of a token-selection rule over n_draws.

    "interval" simulates the training-time rule: with probability q the pair
    collapses to r = t and all K tokens are used, otherwise the sorted pair
    selects rows in [floor(r*K), ceil(t*K)).  "all" always selects every row;
    "first-k" selects a uniform-length prefix (nested-dropout style).
    """
    if selector not in ("interval", "all", "first-k"):
        raise ValueError(f"unknown selector {selector!r}")
    counts = torch.zeros(K, dtype=torch.float64)
    idx = torch.arange(K, dtype=torch.float64)
    if selector == "all":
        return torch.ones(K, dtype=torch.float64)
    if selector == "first-k":
        ks = torch.randint(1, K + 1, (n_draws,), generator=rng)
        for kk in range(1, K + 1):
            counts[:kk] += (ks == kk).sum()
        return counts / n_draws
    r, t = sample_time_pairs(rng, AdaptiveLossConfig(q=q), n=n_draws, dtype=torch.float64)
    collapsed = (r == t)
    counts += collapsed.sum()  # r = t conditions on all rows
    r, t = r[~collapsed], t[~collapsed]
    lo = torch.floor(r * K).clamp(max=K - 1)
    hi = torch.ceil(t * K).clamp(min=1)
    hi = torch.maximum(hi, lo + 1)
    included = (idx[None, :] >= lo[:, None]) & (idx[None, :] < hi[:, None])
    counts += included.double().sum(dim=0)
    return counts / n_draws


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(vals):
        order = np.argsort(vals, kind="stable")
        rk = np.empty(len(vals), dtype=np.float64)
        rk[order] = np.arange(1, len(vals) + 1)
        # average tied ranks
        vals = np.asarray(vals, dtype=np.float64)
        for v in np.unique(vals):
            m = vals == v
            if m.sum() > 1:
                rk[m] = rk[m].mean()
        return rk

    rx, ry = ranks(list(xs)), ranks(list(ys))
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float((rx**2).sum() * (ry**2).sum()))
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


@torch.no_grad()
def causality_probe(
    tokenizer,
    images: Tensor,
    ks: Sequence[int],
    rng: torch.Generator,
    batch_size: int = 64,
) -> list[tuple[int, float]]:
    """Mean prefix-reconstruction error per prefix length k, normalized by
    the squared subpath length so values are comparable across k.

    The raw jump error ||z_t - (t-r)u - x||^2 scales with t^2 = (k/K)^2 even
    for a perfect model; dividing it out measures how well the first k tokens
    explain the mean velocity of their subpath, which is the causality claim
    under test.  A zero-velocity (untrained) decoder scores a flat curve.
    """
    K = tokenizer.enc_cfg.K
    errors = []
    for k in ks:
        if not 1 <= k <= K:
            raise ValueError(f"k must lie in [1, {K}], got {k}")
        t = k / K
        total, count = 0.0, 0
        for start in range(0, images.shape[0], batch_size):
            x = tokenizer.codec.encode(images[start : start + batch_size])
            tokens = tokenizer.encode(images[start : start + batch_size]).tokens
            eps = torch.randn(x.shape, generator=rng, dtype=x.dtype)
            recon = prefix_reconstruct(tokenizer.decoder, x, k, tokens, eps)
            err = (recon - x).pow(2).flatten(1).mean(dim=1) / t**2
            total += float(err.sum())
            count += x.shape[0]
        errors.append((k, total / count))
    return errors
