"""Single-file checkpoint container: a zip holding manifest.json (version,
config snapshot, counters) and one .npy entry per named tensor, so archives
stay language-neutral and diffable entry by entry."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor

FORMAT_VERSION = 1


def _tensors_from_module(module: torch.nn.Module, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{name}": val for name, val in module.state_dict().items()}


def optimizer_tensors(opt: torch.optim.Optimizer, names: list[str]) -> dict[str, Tensor]:
    """Flatten AdamW moments keyed by parameter name."""
    out: dict[str, Tensor] = {}
    params = [p for group in opt.param_groups for p in group["params"]]
    if len(params) != len(names):
        raise ValueError("parameter count does not match name list")
    for name, p in zip(names, params):
        state = opt.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in state:
                out[f"opt.{name}.{key}"] = state[key]
        if "step" in state:
            step = state["step"]
            out[f"opt.{name}.step"] = step if torch.is_tensor(step) else torch.tensor(float(step))
    return out


def load_optimizer_tensors(opt: torch.optim.Optimizer, names: list[str],
                           tensors: dict[str, Tensor]):
    params = [p for group in opt.param_groups for p in group["params"]]
    for name, p in zip(names, params):
        state: dict[str, Any] = {}
        for key in ("exp_avg", "exp_avg_sq"):
            full = f"opt.{name}.{key}"
            if full in tensors:
                state[key] = tensors[full].clone()
        full = f"opt.{name}.step"
        if full in tensors:
            state["step"] = tensors[full].clone()
        if state:
            opt.state[p] = state


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, Tensor],
                    meta: dict):
    """Write the archive; tensors are stored as little-endian .npy entries."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "meta": meta,
        "tensors": {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, tensor in sorted(tensors.items()):
            arr = tensor.detach().cpu().numpy()
            manifest["tensors"][name] = {"shape": list(arr.shape), "dtype": str(arr.dtype)}
            buf = io.BytesIO()
            np.save(buf, arr)
            zf.writestr(f"tensors/{name}.npy", buf.getvalue())
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, Tensor], dict]:
    """Returns (config, tensors, meta)."""
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        tensors = {}
        for name, info in manifest["tensors"].items():
            arr = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")))
            if list(arr.shape) != info["shape"]:
                raise ValueError(f"tensor {name}: manifest/payload shape mismatch")
            tensors[name] = torch.from_numpy(arr.copy())
    return manifest["config"], tensors, manifest["meta"]


def rng_state_tensor(rng: torch.Generator) -> Tensor:
    return rng.get_state()


def restore_rng(rng: torch.Generator, state: Tensor):
    rng.set_state(state.to(torch.uint8))


def split_by_prefix(tensors: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    plen = len(prefix) + 1
    return {name[plen:]: val for name, val in tensors.items()
            if name.startswith(prefix + ".")}


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, Tensor]:
    return _tensors_from_module(module, prefix)
