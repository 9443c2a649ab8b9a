"""Datasets and image I/O: a deterministic synthetic-shapes generator
(colored primitives on smoothly textured backgrounds, class = shape type),
a folder-of-images ingester, and PNG grid export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
from PIL import Image
from torch import Tensor

SHAPE_NAMES = ("circle", "square", "triangle", "cross")


@dataclass
class Dataset:
    images: Tensor          # (N, 3, H, W) float32 in [0, 1]
    labels: Tensor          # (N,) long
    ids: list[str]
    n_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]


def _background(side: int, rs: np.random.RandomState) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    angle = rs.uniform(0, 2 * math.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    c0 = rs.uniform(0.05, 0.65, size=3)
    c1 = rs.uniform(0.35, 0.95, size=3)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    # mild sinusoidal texture so backgrounds are not constant per row
    fx, fy = rs.uniform(1.0, 3.0, size=2)
    phase = rs.uniform(0, 2 * math.pi)
    tex = 0.05 * np.sin(2 * math.pi * (fx * xx + fy * yy) + phase)
    return np.clip(img + tex, 0.0, 1.0)


def _shape_mask(side: int, shape: str, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        dist = np.sqrt(dx**2 + dy**2) - radius
    elif shape == "square":
        dist = np.maximum(np.abs(dx), np.abs(dy)) - radius
    elif shape == "triangle":
        # upward triangle: inside when below the two slanted edges and above
        # the base
        base = dy + radius * 0.75
        left = -dy + 1.5 * dx + radius * 0.75
        right = -dy - 1.5 * dx + radius * 0.75
        dist = -np.minimum(np.minimum(base, left), right) * 0.8
    elif shape == "cross":
        arm = radius * 0.45
        bar_h = np.maximum(np.abs(dx) - radius, np.abs(dy) - arm)
        bar_v = np.maximum(np.abs(dy) - radius, np.abs(dx) - arm)
        dist = np.minimum(bar_h, bar_v)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    aa = 1.5 / side
    return np.clip(0.5 - dist / aa, 0.0, 1.0)


def synthetic_image(index: int, seed: int, side: int, n_classes: int) -> tuple[np.ndarray, int]:
    """Deterministic (image, label) for one index; image is (3, side, side)."""
    rs = np.random.RandomState((seed * 1_000_003 + index) % (2**31 - 1))
    label = index % n_classes
    img = _background(side, rs)
    color = rs.uniform(0.0, 1.0, size=3)
    cx, cy = rs.uniform(0.3, 0.7, size=2)
    radius = rs.uniform(0.15, 0.3)
    mask = _shape_mask(side, SHAPE_NAMES[label % len(SHAPE_NAMES)], cx, cy, radius)
    img = img * (1 - mask) + color[:, None, None] * mask
    return img.astype(np.float32), label


def synthetic_dataset(n: int, side: int = 32, n_classes: int = 4, seed: int = 0) -> Dataset:
    if not 1 <= n_classes <= len(SHAPE_NAMES):
        raise ValueError(f"n_classes must lie in [1, {len(SHAPE_NAMES)}]")
    images = torch.empty(n, 3, side, side)
    labels = torch.empty(n, dtype=torch.long)
    ids = []
    for i in range(n):
        img, label = synthetic_image(i, seed, side, n_classes)
        images[i] = torch.from_numpy(img)
        labels[i] = label
        ids.append(f"synth-{seed}-{i:06d}")
    return Dataset(images=images, labels=labels, ids=ids, n_classes=n_classes)


def folder_dataset(path: str | Path, labels_file: str = "labels.csv") -> Dataset:
    """Folder of images plus a labels CSV with rows `filename,label`."""
    root = Path(path)
    rows = list(csv.reader((root / labels_file).open()))
    images, labels, ids = [], [], []
    for fname, label in rows:
        with Image.open(root / fname) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        images.append(torch.from_numpy(arr).permute(2, 0, 1))
        labels.append(int(label))
        ids.append(Path(fname).stem)
    if not images:
        raise ValueError(f"no images listed in {root / labels_file}")
    return Dataset(images=torch.stack(images), labels=torch.tensor(labels, dtype=torch.long),
                   ids=ids, n_classes=max(labels) + 1)


def to_model_space(images: Tensor) -> Tensor:
    """[0,1] display range -> [-1,1] model range."""
    return images * 2 - 1


def to_display(x: Tensor) -> Tensor:
    return ((x + 1) / 2).clamp(0.0, 1.0)


def iterate_batches(
    dataset: Dataset,
    batch_size: int,
    rng: torch.Generator,
    shuffle: bool = True,
) -> Iterator[tuple[Tensor, Tensor, list[str]]]:
    n = len(dataset)
    order = torch.randperm(n, generator=rng) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        sel = order[start : start + batch_size]
        yield (dataset.images[sel], dataset.labels[sel],
               [dataset.ids[i] for i in sel.tolist()])


def write_image_grid(path: str | Path, images: Tensor, columns: Optional[int] = None,
                     pad: int = 2):
    """Write a (N, 3, H, W) [0,1] tensor as one PNG grid."""
    n, _, h, w = images.shape
    columns = columns or min(n, 8)
    rows = math.ceil(n / columns)
    canvas = np.ones((rows * (h + pad) + pad, columns * (w + pad) + pad, 3), dtype=np.float32)
    arr = images.clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy()
    for i in range(n):
        rr, cc = divmod(i, columns)
        y = pad + rr * (h + pad)
        x = pad + cc * (w + pad)
        canvas[y : y + h, x : x + w] = arr[i]
    out = (canvas * 255).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out).save(path)
