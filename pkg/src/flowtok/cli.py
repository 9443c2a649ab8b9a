"""Command-line shell: train-tokenizer, train-ar, reconstruct, generate,
evaluate.  Owns run directories, metric logs, checkpoints, token caches, and
grid/report artifacts."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import argen, checkpoint as ckpt, metrics, sampling
from .config import RunConfig, load_config, save_config
from .data import (
    Dataset,
    folder_dataset,
    iterate_batches,
    synthetic_dataset,
    to_display,
    to_model_space,
    write_image_grid,
)
from .nets import Tokenizer
from .traintok import (
    EmaTracker,
    LossInputs,
    SwapInEma,
    TokenizerAndProj,
    make_train_state,
    train_step,
)

OUTPUT_ROOT_ENV = "FLOWTOK_OUTPUT_ROOT"


def resolve_out_dir(cfg_dir: str, override: Optional[str]) -> Path:
    out = Path(override) if override else Path(cfg_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_dataset(cfg: RunConfig, split: str = "train") -> Dataset:
    ds = cfg.dataset
    if ds.kind == "folder":
        return folder_dataset(ds.path, ds.labels_file)
    n = ds.n_train if split == "train" else ds.n_val
    seed = cfg.seed if split == "train" else cfg.seed + 1_000_000
    return synthetic_dataset(n, side=ds.image_side, n_classes=ds.n_classes, seed=seed)


class JsonlLogger:
    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = path.open("a")

    def write(self, record: dict):
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


# -- tokenizer checkpoints --------------------------------------------------


def save_tokenizer_checkpoint(path: Path, cfg: RunConfig, state, rng: torch.Generator):
    trainable: TokenizerAndProj = state.trainable
    tensors = ckpt.module_tensors(trainable, "model")
    tensors.update({f"ema.{n}": v for n, v in state.ema.shadow.items()})
    names = [n for n, _ in trainable.named_parameters()]
    tensors.update(ckpt.optimizer_tensors(state.optimizer, names))
    tensors["rng.state"] = ckpt.rng_state_tensor(rng)
    meta = {"kind": "tokenizer", "epoch": state.epoch, "step": state.step,
            "total_steps": state.total_steps, "skipped_steps": state.skipped_steps}
    ckpt.save_checkpoint(path, cfg.to_dict(), tensors, meta)


def load_tokenizer_checkpoint(path: Path):
    """Returns (cfg, inputs, ema, tensors, meta); modules carry saved weights."""
    raw_cfg, tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "tokenizer":
        raise ValueError(f"{path} is not a tokenizer checkpoint")
    cfg = RunConfig.from_dict(raw_cfg)
    torch.manual_seed(cfg.seed)
    tokenizer = cfg.build_tokenizer()
    proj = cfg.build_proj()
    trainable = TokenizerAndProj(tokenizer, proj)
    trainable.load_state_dict(ckpt.split_by_prefix(tensors, "model"))
    inputs = LossInputs(tokenizer=tokenizer, proj=proj, vfm=cfg.build_vfm(),
                        adaptive=cfg.adaptive, schedule=cfg.train,
                        time_dist=cfg.time_dist, w_repa=cfg.loss_weights.repa,
                        w_repa_a=cfg.loss_weights.repa_a)
    ema = EmaTracker(trainable, cfg.train.ema)
    for name in list(ema.shadow):
        ema.shadow[name] = tensors[f"ema.{name}"].clone()
    return cfg, inputs, ema, tensors, meta


def tokenizer_for_inference(path: Path, weights: str = "ema") -> tuple[RunConfig, Tokenizer]:
    cfg, inputs, ema, _, _ = load_tokenizer_checkpoint(path)
    trainable = TokenizerAndProj(inputs.tokenizer, inputs.proj)
    if weights == "ema":
        ema.copy_to(trainable)
    elif weights != "live":
        raise ValueError("weights must be 'ema' or 'live'")
    inputs.tokenizer.eval()
    return cfg, inputs.tokenizer


# -- training loops ----------------------------------------------------------


def write_sample_grid(out_dir: Path, tag: str, tokenizer: Tokenizer, probe: torch.Tensor,
                      rng: torch.Generator):
    x = to_model_space(probe)
    with torch.no_grad():
        tokens = tokenizer.encode(x).tokens
        eps = torch.randn(x.shape, generator=rng, dtype=x.dtype)
        one = sampling.one_step(tokenizer.decoder, tokens, eps)
        multi = sampling.multi_step(tokenizer.decoder, tokens, eps, n_steps=25, cfg_scale=2.0)
    grid = torch.cat([probe, to_display(one), to_display(multi)], dim=0)
    write_image_grid(out_dir / f"samples-{tag}.png", grid, columns=probe.shape[0])


def run_tokenizer_training(cfg: RunConfig, out_dir: Path,
                           resume: Optional[Path] = None) -> Path:
    save_config(cfg, out_dir / "config.yaml")
    log = JsonlLogger(out_dir / "metrics.jsonl")
    dataset = load_dataset(cfg, "train")
    val = load_dataset(cfg, "val")
    steps_per_epoch = max(len(dataset) // cfg.train.batch_size, 1)
    total_steps = steps_per_epoch * cfg.train.total_epochs

    rng = torch.Generator()
    if resume is not None:
        _, inputs, ema, tensors, meta = load_tokenizer_checkpoint(resume)
        state = make_train_state(inputs, total_steps)
        state.ema = ema
        names = [n for n, _ in state.trainable.named_parameters()]
        ckpt.load_optimizer_tensors(state.optimizer, names, tensors)
        state.epoch = meta["epoch"]
        state.step = meta["step"]
        state.skipped_steps = meta["skipped_steps"]
        ckpt.restore_rng(rng, tensors["rng.state"])
    else:
        torch.manual_seed(cfg.seed)
        inputs = LossInputs(tokenizer=cfg.build_tokenizer(), proj=cfg.build_proj(),
                            vfm=cfg.build_vfm(), adaptive=cfg.adaptive,
                            schedule=cfg.train, time_dist=cfg.time_dist,
                            w_repa=cfg.loss_weights.repa,
                            w_repa_a=cfg.loss_weights.repa_a)
        state = make_train_state(inputs, total_steps)
        rng.manual_seed(cfg.seed)

    last_path = out_dir / "tokenizer-last.ckpt"
    probe = val.images[: min(8, len(val))]
    for epoch in range(state.epoch, cfg.train.total_epochs):
        state.epoch = epoch
        for images, _, ids in iterate_batches(dataset, cfg.train.batch_size, rng):
            record = train_step(state, to_model_space(images), rng, ids)
            log.write(record)
        if (epoch + 1) % cfg.logging.ckpt_every_epochs == 0:
            save_tokenizer_checkpoint(out_dir / f"tokenizer-e{epoch + 1:04d}.ckpt",
                                      cfg, state, rng)
        if (epoch + 1) % cfg.logging.sample_every_epochs == 0:
            with SwapInEma(state.ema, state.trainable):
                write_sample_grid(out_dir, f"e{epoch + 1:04d}",
                                  state.inputs.tokenizer, probe, rng)
    state.epoch = cfg.train.total_epochs
    save_tokenizer_checkpoint(last_path, cfg, state, rng)
    log.close()
    return last_path


def _dataset_fingerprint(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.dataset.__dict__, sort_keys=True) + f"|seed={cfg.seed}"
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def extract_tokens(tokenizer: Tokenizer, dataset: Dataset, cache_path: Path,
                   cache_key: dict, log: Optional[JsonlLogger] = None) -> torch.Tensor:
    """Frozen-encoder token extraction with an on-disk cache keyed by image
    id order plus the run/checkpoint fingerprint."""
    if cache_path.exists():
        payload = np.load(cache_path, allow_pickle=False)
        stored = json.loads(bytes(payload["key"]).decode())
        if stored == cache_key and list(payload["ids"]) == dataset.ids:
            if log:
                log.write({"event": "token-cache-hit", "path": str(cache_path)})
            return torch.from_numpy(payload["tokens"])
    tokens = []
    with torch.no_grad():
        for start in range(0, len(dataset), 256):
            x = to_model_space(dataset.images[start : start + 256])
            tokens.append(tokenizer.encode(x).tokens)
    out = torch.cat(tokens, dim=0)
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(cache_path, tokens=out.numpy(),
             ids=np.array(dataset.ids),
             key=np.frombuffer(json.dumps(cache_key).encode(), dtype=np.uint8))
    if log:
        log.write({"event": "token-cache-write", "path": str(cache_path)})
    return out


def save_ar_checkpoint(path: Path, cfg: RunConfig, model, head, ema, opt,
                       meta_extra: dict, rng: torch.Generator):
    bundle = torch.nn.ModuleDict({"ar": model, "head": head})
    tensors = ckpt.module_tensors(bundle, "model")
    tensors.update({f"ema.{n}": v for n, v in ema.shadow.items()})
    names = [n for n, _ in bundle.named_parameters()]
    tensors.update(ckpt.optimizer_tensors(opt, names))
    tensors["rng.state"] = ckpt.rng_state_tensor(rng)
    meta = {"kind": "ar", **meta_extra}
    ckpt.save_checkpoint(path, cfg.to_dict(), tensors, meta)


def load_ar_checkpoint(path: Path, weights: str = "ema"):
    raw_cfg, tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "ar":
        raise ValueError(f"{path} is not an AR checkpoint")
    cfg = RunConfig.from_dict(raw_cfg)
    torch.manual_seed(cfg.seed + 1)
    model = argen.ARModel(cfg.ar)
    head = argen.TokenDistributionHead(cfg.ar)
    bundle = torch.nn.ModuleDict({"ar": model, "head": head})
    bundle.load_state_dict(ckpt.split_by_prefix(tensors, "model"))
    if weights == "ema":
        ema = EmaTracker(bundle, cfg.ar_train.ema)
        for name in list(ema.shadow):
            ema.shadow[name] = tensors[f"ema.{name}"].clone()
        ema.copy_to(bundle)
    model.eval()
    head.eval()
    return cfg, model, head, meta


def run_ar_training(cfg: RunConfig, tokenizer_path: Path, out_dir: Path) -> Path:
    log = JsonlLogger(out_dir / "ar-metrics.jsonl")
    tok_cfg, tokenizer = tokenizer_for_inference(tokenizer_path, weights="ema")
    if tok_cfg.encoder.K != cfg.ar.K or tok_cfg.encoder.d_token != cfg.ar.token_dim:
        raise ValueError("tokenizer checkpoint dims do not match the AR config")
    for p in tokenizer.parameters():
        p.requires_grad_(False)

    dataset = load_dataset(cfg, "train")
    tok_meta = ckpt.load_checkpoint(tokenizer_path)[2]
    cache_key = {"fingerprint": _dataset_fingerprint(cfg),
                 "tokenizer_step": tok_meta.get("step", -1)}
    tokens = extract_tokens(tokenizer, dataset, out_dir / "token-cache.npz",
                            cache_key, log)

    torch.manual_seed(cfg.seed + 1)
    model = argen.ARModel(cfg.ar)
    head = argen.TokenDistributionHead(cfg.ar)
    bundle = torch.nn.ModuleDict({"ar": model, "head": head})
    opt = torch.optim.AdamW(bundle.parameters(), lr=cfg.ar_train.lr,
                            weight_decay=cfg.ar_train.weight_decay)
    ema = EmaTracker(bundle, cfg.ar_train.ema)
    rng = torch.Generator()
    rng.manual_seed(cfg.seed + 1)

    steps_per_epoch = max(len(dataset) // cfg.ar_train.batch_size, 1)
    total_steps = steps_per_epoch * cfg.ar_train.epochs
    step = 0
    for epoch in range(cfg.ar_train.epochs):
        order = torch.randperm(len(dataset), generator=rng)
        for start in range(0, len(dataset) - cfg.ar_train.batch_size + 1,
                           cfg.ar_train.batch_size):
            sel = order[start : start + cfg.ar_train.batch_size]
            loss = argen.ar_train_loss(model, head, tokens[sel],
                                       dataset.labels[sel], rng)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(bundle.parameters(), cfg.ar_train.grad_clip)
            lr = argen.ar_lr_at(cfg.ar_train, step, total_steps)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.step()
            ema.update(bundle)
            log.write({"step": step, "epoch": epoch, "loss": float(loss), "lr": lr})
            step += 1
    path = out_dir / "ar-last.ckpt"
    save_ar_checkpoint(path, cfg, model, head, ema, opt,
                       {"epoch": cfg.ar_train.epochs, "step": step,
                        "tokenizer_checkpoint": str(tokenizer_path)}, rng)
    log.close()
    return path


# -- commands ----------------------------------------------------------------


def parse_mode(mode: str) -> dict:
    parts = mode.split(":")
    if parts[0] == "one-step" and len(parts) == 1:
        return {"kind": "one-step"}
    if parts[0] == "multi-step" and len(parts) == 3:
        return {"kind": "multi-step", "n_steps": int(parts[1]), "cfg_scale": float(parts[2])}
    if parts[0] == "prefix" and len(parts) == 2:
        return {"kind": "prefix", "k": int(parts[1])}
    if parts[0] == "segment" and len(parts) == 3:
        return {"kind": "segment", "a": int(parts[1]), "b": int(parts[2])}
    raise SystemExit(f"unknown reconstruction mode: {mode!r} "
                     "(use one-step | multi-step:N:SCALE | prefix:K | segment:A:B)")


def resolve_images(spec: str, cfg: RunConfig) -> Dataset:
    if spec.startswith("synthetic"):
        n = int(spec.split(":")[1]) if ":" in spec else cfg.dataset.n_val
        return synthetic_dataset(n, side=cfg.dataset.image_side,
                                 n_classes=cfg.dataset.n_classes,
                                 seed=cfg.seed + 1_000_000)
    return folder_dataset(spec)


def cmd_train_tokenizer(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = resolve_out_dir(cfg.output_dir, args.out)
    resume = Path(args.resume) if args.resume else None
    path = run_tokenizer_training(cfg, out_dir, resume)
    print(f"tokenizer checkpoint: {path}")
    return 0


def cmd_train_ar(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = resolve_out_dir(cfg.output_dir, args.out)
    path = run_ar_training(cfg, Path(args.tokenizer), out_dir)
    print(f"ar checkpoint: {path}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg, tokenizer = tokenizer_for_inference(Path(args.checkpoint), args.weights)
    mode = parse_mode(args.mode)
    out_dir = resolve_out_dir(cfg.output_dir, args.out)
    data = resolve_images(args.images, cfg)
    rng = torch.Generator()
    rng.manual_seed(args.seed if args.seed is not None else cfg.seed)

    x = to_model_space(data.images)
    with torch.no_grad():
        tokens = tokenizer.encode(x).tokens
        eps = torch.randn(x.shape, generator=rng, dtype=x.dtype)
        if mode["kind"] == "one-step":
            recon = sampling.one_step(tokenizer.decoder, tokens, eps)
        elif mode["kind"] == "multi-step":
            recon = sampling.multi_step(tokenizer.decoder, tokens, eps,
                                        mode["n_steps"], mode["cfg_scale"])
        elif mode["kind"] == "prefix":
            recon = sampling.prefix_reconstruct(tokenizer.decoder, x, mode["k"], tokens, eps)
        else:
            recon = sampling.segment_reconstruct(tokenizer.decoder, x, mode["a"],
                                                 mode["b"], tokens, eps)
    shown = to_display(recon)
    grid = torch.stack([data.images, shown], dim=1).flatten(0, 1)
    tag = args.mode.replace(":", "-")
    grid_path = out_dir / f"recon-{tag}.png"
    write_image_grid(grid_path, grid, columns=2)

    log = JsonlLogger(out_dir / f"recon-{tag}.jsonl")
    per_image = []
    for i in range(len(data)):
        rec = {"id": data.ids[i],
               "psnr": metrics.psnr(data.images[i], shown[i]),
               "ssim": metrics.ssim(data.images[i], shown[i])}
        per_image.append(rec)
        log.write(rec)
    mean_psnr = float(np.mean([r["psnr"] for r in per_image]))
    mean_ssim = float(np.mean([r["ssim"] for r in per_image]))
    log.write({"mean_psnr": mean_psnr, "mean_ssim": mean_ssim, "mode": args.mode})
    log.close()
    print(f"grid: {grid_path}")
    print(f"mode {args.mode}: mean PSNR {mean_psnr:.2f} dB, mean SSIM {mean_ssim:.3f}")
    return 0


def cmd_generate(args) -> int:
    cfg, model, head, _ = load_ar_checkpoint(Path(args.ar))
    _, tokenizer = tokenizer_for_inference(Path(args.tokenizer), args.weights)
    if not 0 <= args.class_id < cfg.ar.n_classes:
        raise SystemExit(f"class id must lie in [0, {cfg.ar.n_classes})")
    out_dir = resolve_out_dir(cfg.output_dir, args.out)
    rng = torch.Generator()
    rng.manual_seed(args.seed if args.seed is not None else cfg.seed)

    class_ids = torch.full((args.n,), args.class_id, dtype=torch.long)
    side = cfg.decoder.latent_side
    images, tokens = argen.generate_image(
        tokenizer.decoder, tokenizer.codec, model, head, class_ids,
        args.s_max, rng, latent_shape=(cfg.decoder.channels, side, side))
    grid_path = out_dir / f"gen-c{args.class_id}.png"
    write_image_grid(grid_path, to_display(images))
    for i in range(args.n):
        np.save(out_dir / f"gen-c{args.class_id}-{i:03d}-tokens.npy",
                tokens[i].numpy())
    print(f"grid: {grid_path} (s_max={args.s_max}, "
          f"null branch {'unused' if args.s_max == 1.0 else 'active'})")
    return 0


def cmd_evaluate(args) -> int:
    cfg, tokenizer = tokenizer_for_inference(Path(args.checkpoint), args.weights)
    out_dir = resolve_out_dir(cfg.output_dir, args.out)
    data = resolve_images(args.dataset, cfg) if args.dataset else load_dataset(cfg, "val")
    rng = torch.Generator()
    rng.manual_seed(args.seed if args.seed is not None else cfg.seed)
    vfm = cfg.build_vfm()
    report: dict = {"suite": args.suite}

    if args.suite == "recon":
        x = to_model_space(data.images)
        with torch.no_grad():
            tokens = tokenizer.encode(x).tokens
            eps = torch.randn(x.shape, generator=rng, dtype=x.dtype)
            recon = to_display(sampling.one_step(tokenizer.decoder, tokens, eps))
        report["psnr"] = float(np.mean([metrics.psnr(a, b) for a, b in zip(data.images, recon)]))
        report["ssim"] = float(np.mean([metrics.ssim(a, b) for a, b in zip(data.images, recon)]))
        fa = vfm.features(to_model_space(data.images)).mean(dim=1).numpy()
        fb = vfm.features(to_model_space(recon)).mean(dim=1).numpy()
        report["frechet"] = metrics.frechet_distance(fa, fb)
    elif args.suite == "gen":
        if not args.ar:
            raise SystemExit("gen suite needs --ar checkpoint")
        _, model, head, _ = load_ar_checkpoint(Path(args.ar))
        n = len(data)
        class_ids = data.labels[:n]
        side = cfg.decoder.latent_side
        images, _ = argen.generate_image(
            tokenizer.decoder, tokenizer.codec, model, head, class_ids,
            args.s_max, rng, latent_shape=(cfg.decoder.channels, side, side))
        fa = vfm.features(to_model_space(data.images)).mean(dim=1).numpy()
        fb = vfm.features(images).mean(dim=1).numpy()
        report["frechet"] = metrics.frechet_distance(fa, fb)
    elif args.suite == "balance":
        K = cfg.encoder.K
        for selector in ("interval", "all", "first-k"):
            h = metrics.token_usage_histogram(K, 100_000, selector, rng, q=cfg.adaptive.q)
            report[selector] = {"histogram": h.tolist(),
                                "max_min_ratio": float(h.max() / h.min())}
    elif args.suite == "causality":
        K = cfg.encoder.K
        ks = sorted({max(K // 8, 1), max(K // 4, 1), max(K // 2, 1), K})
        curve = metrics.causality_probe(tokenizer, to_model_space(data.images), ks, rng)
        report["curve"] = [{"k": k, "error": e} for k, e in curve]
        report["spearman"] = metrics.spearman([k for k, _ in curve], [e for _, e in curve])
    else:
        raise SystemExit(f"unknown suite {args.suite!r}")

    path = out_dir / f"report-{args.suite}.json"
    path.write_text(json.dumps(report, indent=1))
    print(f"report: {path}")
    for key, val in report.items():
        if isinstance(val, float):
            print(f"  {key}: {val:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowtok",
                                description="causal 1D image tokenizer workbench")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-tokenizer", help="joint tokenizer training")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train_tokenizer)

    a = sub.add_parser("train-ar", help="autoregressive generator training")
    a.add_argument("--config", required=True)
    a.add_argument("--tokenizer", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_train_ar)

    r = sub.add_parser("reconstruct", help="reconstruct images through the tokenizer")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--images", default="synthetic:8")
    r.add_argument("--mode", default="one-step")
    r.add_argument("--weights", choices=("ema", "live"), default="ema")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(fn=cmd_reconstruct)

    g = sub.add_parser("generate", help="class-conditional generation")
    g.add_argument("--tokenizer", required=True)
    g.add_argument("--ar", required=True)
    g.add_argument("--class-id", type=int, default=0)
    g.add_argument("--n", type=int, default=4)
    g.add_argument("--s-max", type=float, default=3.0)
    g.add_argument("--weights", choices=("ema", "live"), default="ema")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default=None)
    g.set_defaults(fn=cmd_generate)

    e = sub.add_parser("evaluate", help="metric suites over checkpoints")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--ar", default=None)
    e.add_argument("--dataset", default=None)
    e.add_argument("--suite", choices=("recon", "gen", "balance", "causality"),
                   required=True)
    e.add_argument("--s-max", type=float, default=3.0)
    e.add_argument("--weights", choices=("ema", "live"), default="ema")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_evaluate)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
