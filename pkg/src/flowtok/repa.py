"""Alignment of internal representations against a frozen per-patch feature
backend: decoder hidden states through a trainable projection, and encoder
image features directly (no projection, equal widths)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


class VfmBackend(Protocol):
    """Frozen per-patch feature source. Same input -> same output; never
    receives gradients."""

    d_vfm: int
    grid: int  # patches per image side

    def features(self, images: Tensor, ids: list[str] | None = None) -> Tensor:
        """(B, C, H, W) images -> (B, N, d_vfm) detached features."""
        ...


class StubVfm(nn.Module):
    """Frozen randomly-initialized patch network standing in for a pretrained
    vision backbone.  Deterministic given (image, seed)."""

    def __init__(self, image_side: int, patch_size: int, d_vfm: int,
                 channels: int = 3, seed: int = 0):
        super().__init__()
        if image_side % patch_size != 0:
            raise ValueError("image_side must be divisible by patch_size")
        self.d_vfm = d_vfm
        self.grid = image_side // patch_size
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        patch_dim = channels * patch_size**2
        self.patch_size = patch_size

        def rand(*shape, scale):
            return torch.randn(*shape, generator=g) * scale

        self.w1 = nn.Parameter(rand(patch_dim, d_vfm, scale=patch_dim**-0.5), requires_grad=False)
        self.b1 = nn.Parameter(rand(d_vfm, scale=0.1), requires_grad=False)
        self.w2 = nn.Parameter(rand(d_vfm, d_vfm, scale=d_vfm**-0.5), requires_grad=False)
        self.b2 = nn.Parameter(rand(d_vfm, scale=0.1), requires_grad=False)
        # 3x3 depthwise mixing over the patch grid couples neighbouring
        # patches, so the features are not purely local
        self.mix = nn.Parameter(rand(d_vfm, 3, 3, scale=0.3), requires_grad=False)

    @torch.no_grad()
    def features(self, images: Tensor, ids: list[str] | None = None) -> Tensor:
        from .nets import patchify

        p = patchify(images, self.patch_size)
        h = torch.tanh(p @ self.w1 + self.b1)
        B, N, d = h.shape
        hg = h.transpose(1, 2).reshape(B, d, self.grid, self.grid)
        hg = hg + F.conv2d(hg, self.mix.unsqueeze(1), padding=1, groups=d)
        h = hg.reshape(B, d, N).transpose(1, 2)
        return torch.tanh(h @ self.w2 + self.b2)


def stub_vfm(image: Tensor, seed: int, patch_size: int = 8, d_vfm: int = 64) -> Tensor:
    """One-shot stub features for a (B, C, H, W) batch or a single image."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    backend = StubVfm(image.shape[-1], patch_size, d_vfm,
                      channels=image.shape[1], seed=seed)
    return backend.features(image)


class FolderVfm:
    """Precomputed per-image features read from a directory.

    Layout: meta.json with {"d_vfm": int, "grid": int} plus one <image_id>.npy
    array of shape (grid*grid, d_vfm) per image.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        meta = json.loads((self.root / "meta.json").read_text())
        self.d_vfm = int(meta["d_vfm"])
        self.grid = int(meta["grid"])

    def features(self, images: Tensor, ids: list[str] | None = None) -> Tensor:
        if ids is None:
            raise ValueError("folder backend needs image ids")
        mats = []
        for i in ids:
            arr = np.load(self.root / f"{i}.npy")
            if arr.shape != (self.grid * self.grid, self.d_vfm):
                raise ValueError(f"feature file {i}: bad shape {arr.shape}")
            mats.append(torch.from_numpy(arr))
        return torch.stack(mats).to(images.dtype)

    @staticmethod
    def write(root: str | Path, d_vfm: int, grid: int,
              feats: dict[str, np.ndarray]):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "meta.json").write_text(json.dumps({"d_vfm": d_vfm, "grid": grid}))
        for image_id, arr in feats.items():
            np.save(root / f"{image_id}.npy", arr)


class RepaProjection(nn.Module):
    """Trainable 2-layer map from decoder width to the feature width."""

    def __init__(self, d_model: int, d_vfm: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, d_model), nn.SiLU(),
                                 nn.Linear(d_model, d_vfm))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


def _mean_negative_cosine(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-2] != b.shape[-2]:
        raise ValueError(f"patch count mismatch: {a.shape[-2]} vs {b.shape[-2]}")
    return -F.cosine_similarity(a, b, dim=-1).mean()


def repa_loss(repa_hidden: Tensor, h_vfm: Tensor, proj: RepaProjection) -> Tensor:
    """Negative mean per-patch cosine between frozen features and projected
    decoder hidden states; gradient reaches proj and the decoder only."""
    return _mean_negative_cosine(proj(repa_hidden), h_vfm.detach())


def repa_a_loss(h_e: Tensor, h_vfm: Tensor) -> Tensor:
    """Negative mean per-patch cosine between frozen features and encoder
    image features, no projection (equal widths enforced by config)."""
    if h_e.shape[-1] != h_vfm.shape[-1]:
        raise ValueError(f"encoder width {h_e.shape[-1]} != feature width "
                         f"{h_vfm.shape[-1]}; configure d_e == d_vfm")
    return _mean_negative_cosine(h_e, h_vfm.detach())
