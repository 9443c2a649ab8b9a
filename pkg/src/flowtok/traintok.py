"""Joint tokenizer training: the four-objective loss, the forward-mode
directional derivative of the decoder, the staged curriculum, and the
optimizer/EMA machinery around it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.func
from torch import Tensor

from .flowmath import (
    AdaptiveLossConfig,
    TimeDistribution,
    UNIFORM_TIMES,
    adaptive_l2_per_sample,
    interpolate,
    meanflow_target,
    sample_time_pairs,
)
from .nets import TimePair, TokenCondition, Tokenizer, pad_slices, select_tokens
from .repa import RepaProjection, VfmBackend, repa_a_loss, repa_loss


class TrainingDiverged(RuntimeError):
    """Raised when a loss evaluates to a non-finite value."""


@dataclass
class LossBundle:
    l_mf: Tensor
    l_rf: Tensor
    l_repa: Tensor
    l_repa_a: Tensor
    total: Tensor
    w_repa: float = 1.0
    w_repa_a: float = 0.8
    n_mf: int = 0
    n_rf: int = 0
    interval_active: bool = False

    def floats(self) -> dict:
        return {
            "l_mf": float(self.l_mf.detach()),
            "l_rf": float(self.l_rf.detach()),
            "l_repa": float(self.l_repa.detach()),
            "l_repa_a": float(self.l_repa_a.detach()),
            "total": float(self.total.detach()),
            "n_mf": self.n_mf,
            "n_rf": self.n_rf,
            "interval_active": self.interval_active,
        }


@dataclass
class TrainSchedule:
    total_epochs: int = 16
    mf_start_epoch: int = -1         # -1: derive as total_epochs // 8
    interval_start_epoch: int = -1   # -1: derive as total_epochs // 2
    lr: float = 1e-4
    min_lr: float = 0.0
    lr_schedule: str = "cosine"
    batch_size: int = 64
    weight_decay: float = 0.05
    grad_clip: float = 3.0
    ema: float = 0.999
    p_uncond: float = 0.1

    def __post_init__(self):
        if self.mf_start_epoch < 0:
            self.mf_start_epoch = self.total_epochs // 8
        if self.interval_start_epoch < 0:
            self.interval_start_epoch = self.total_epochs // 2
        if not (self.mf_start_epoch <= self.interval_start_epoch <= self.total_epochs):
            raise ValueError("need mf_start_epoch <= interval_start_epoch <= total_epochs")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


def lr_at(schedule: TrainSchedule, step: int, total_steps: int) -> float:
    if schedule.lr_schedule == "constant" or total_steps <= 1:
        return schedule.lr
    progress = min(max(step / max(total_steps - 1, 1), 0.0), 1.0)
    return schedule.min_lr + 0.5 * (schedule.lr - schedule.min_lr) * (1 + math.cos(math.pi * progress))


def jvp_decoder(
    decoder,
    z_t: Tensor,
    r: Tensor,
    t: Tensor,
    cond: Optional[TokenCondition],
    v: Tensor,
) -> tuple[Tensor, Tensor, Tensor]:
    """Decoder output u(z_t, r, t, cond) plus its forward-mode directional
    derivative along the tangent (v, 0, 1) in (z, r, t).

    The token condition is closed over and held constant under
    differentiation; reverse-mode gradients still flow into it and into the
    decoder parameters through the primal output.  Returns (u, du, repa_hidden).
    """

    def fn(z_, r_, t_):
        return decoder(z_, r_, t_, cond)

    (u, hidden), (du, _) = torch.func.jvp(
        fn, (z_t, r, t), (v, torch.zeros_like(r), torch.ones_like(t)))
    return u, du, hidden


@dataclass
class LossInputs:
    """Everything compute_losses needs besides the batch itself."""

    tokenizer: Tokenizer
    proj: RepaProjection
    vfm: VfmBackend
    adaptive: AdaptiveLossConfig = field(default_factory=AdaptiveLossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    time_dist: TimeDistribution = UNIFORM_TIMES
    w_repa: float = 1.0
    w_repa_a: float = 0.8


def _interval_conditions(tokens: Tensor, r: Tensor, t: Tensor) -> TokenCondition:
    slices = [select_tokens(tokens[i], TimePair(r[i].item(), t[i].item()))
              for i in range(tokens.shape[0])]
    cond = pad_slices(slices, tokens.shape[-1])
    return cond


def compute_losses(
    batch: Tensor,
    inputs: LossInputs,
    rng: torch.Generator,
    epoch: int,
    ids: Optional[list[str]] = None,
) -> LossBundle:
    """One training step's loss bundle over a batch of images.

    Staging: before mf_start_epoch every sample runs in r=t mode (no JVP at
    all); before interval_start_epoch the decoder is conditioned on all
    tokens even for r < t samples.  Each sample contributes with weight 1/B,
    so total = l_mf + l_rf + w_repa*l_repa + w_repa_a*l_repa_a.
    """
    tok = inputs.tokenizer
    sched = inputs.schedule
    B = batch.shape[0]

    enc_out = tok.encode(batch)
    tokens = enc_out.tokens
    x = tok.codec.encode(batch)
    eps = torch.randn(x.shape, generator=rng, dtype=x.dtype)

    mf_active = epoch >= sched.mf_start_epoch
    interval_active = epoch >= sched.interval_start_epoch
    if mf_active:
        r, t = sample_time_pairs(rng, inputs.adaptive, inputs.time_dist, n=B, dtype=x.dtype)
    else:
        t = inputs.time_dist.draw(rng, B, dtype=x.dtype)
        r = t.clone()
    nulls = torch.rand(B, generator=rng) < sched.p_uncond

    z = interpolate(x, eps, t)
    v = eps - x

    is_rf = r == t
    idx_rf = is_rf.nonzero(as_tuple=True)[0]
    idx_mf = (~is_rf).nonzero(as_tuple=True)[0]

    sum_rf = x.new_zeros(())
    sum_mf = x.new_zeros(())
    hidden_parts, order = [], []

    if idx_rf.numel():
        sel = idx_rf
        cond = TokenCondition.full(tokens[sel])
        cond.null = nulls[sel]
        v_pred, hidden = tok.decoder(z[sel], r[sel], t[sel], cond)
        sum_rf = adaptive_l2_per_sample(v_pred - v[sel], inputs.adaptive).sum()
        hidden_parts.append(hidden)
        order.append(sel)

    if idx_mf.numel():
        sel = idx_mf
        if interval_active:
            cond = _interval_conditions(tokens[sel], r[sel], t[sel])
        else:
            cond = TokenCondition.full(tokens[sel])
        cond.null = nulls[sel]
        u, du, hidden = jvp_decoder(tok.decoder, z[sel], r[sel], t[sel], cond, v[sel])
        target = meanflow_target(v[sel], du, t[sel], r[sel])
        sum_mf = adaptive_l2_per_sample(u - target, inputs.adaptive).sum()
        hidden_parts.append(hidden)
        order.append(sel)

    l_rf = sum_rf / B
    l_mf = sum_mf / B

    h_vfm = inputs.vfm.features(batch, ids).detach()
    hidden_all = torch.cat(hidden_parts, dim=0)
    vfm_all = torch.cat([h_vfm[sel] for sel in order], dim=0)
    l_repa = repa_loss(hidden_all, vfm_all, inputs.proj)
    l_repa_a = repa_a_loss(enc_out.image_features, h_vfm)

    total = l_mf + l_rf + inputs.w_repa * l_repa + inputs.w_repa_a * l_repa_a
    if not torch.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss at epoch {epoch}: mf={float(l_mf)} rf={float(l_rf)} "
            f"repa={float(l_repa)} repa_a={float(l_repa_a)}")
    return LossBundle(l_mf=l_mf, l_rf=l_rf, l_repa=l_repa, l_repa_a=l_repa_a,
                      total=total, w_repa=inputs.w_repa, w_repa_a=inputs.w_repa_a,
                      n_mf=int(idx_mf.numel()), n_rf=int(idx_rf.numel()),
                      interval_active=interval_active)


class EmaTracker:
    """Exponential moving average over a module's parameters."""

    def __init__(self, module: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {n: p.detach().clone() for n, p in module.named_parameters()}

    @torch.no_grad()
    def update(self, module: torch.nn.Module):
        d = self.decay
        for n, p in module.named_parameters():
            self.shadow[n].mul_(d).add_(p.detach(), alpha=1 - d)

    @torch.no_grad()
    def copy_to(self, module: torch.nn.Module):
        for n, p in module.named_parameters():
            p.copy_(self.shadow[n])


class SwapInEma:
    """Context manager that temporarily loads EMA weights into a module."""

    def __init__(self, ema: EmaTracker, module: torch.nn.Module):
        self.ema = ema
        self.module = module

    def __enter__(self):
        self.saved = {n: p.detach().clone() for n, p in self.module.named_parameters()}
        self.ema.copy_to(self.module)
        return self.module

    def __exit__(self, *exc):
        with torch.no_grad():
            for n, p in self.module.named_parameters():
                p.copy_(self.saved[n])
        return False


@dataclass
class TrainState:
    inputs: LossInputs
    optimizer: torch.optim.AdamW
    ema: EmaTracker
    trainable: torch.nn.Module
    epoch: int = 0
    step: int = 0
    total_steps: int = 0
    skipped_steps: int = 0


class TokenizerAndProj(torch.nn.Module):
    """Single trainable unit: encoder + decoder + alignment projection."""

    def __init__(self, tokenizer: Tokenizer, proj: RepaProjection):
        super().__init__()
        self.tokenizer = tokenizer
        self.proj = proj


def make_train_state(inputs: LossInputs, total_steps: int) -> TrainState:
    trainable = TokenizerAndProj(inputs.tokenizer, inputs.proj)
    sched = inputs.schedule
    opt = torch.optim.AdamW(trainable.parameters(), lr=sched.lr,
                            weight_decay=sched.weight_decay)
    return TrainState(inputs=inputs, optimizer=opt,
                      ema=EmaTracker(trainable, sched.ema),
                      trainable=trainable, total_steps=total_steps)


def train_step(state: TrainState, batch: Tensor, rng: torch.Generator,
               ids: Optional[list[str]] = None) -> dict:
    """One optimization step; returns the metric record for logging."""
    sched = state.inputs.schedule
    bundle = compute_losses(batch, state.inputs, rng, state.epoch, ids)

    state.optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()

    params = [p for p in state.trainable.parameters() if p.grad is not None]
    finite = all(torch.isfinite(p.grad).all() for p in params)
    record = bundle.floats()
    record.update(step=state.step, epoch=state.epoch)
    if not finite:
        state.skipped_steps += 1
        record.update(skipped=True, grad_norm=float("nan"),
                      lr=lr_at(sched, state.step, state.total_steps))
        state.step += 1
        return record

    grad_norm = torch.nn.utils.clip_grad_norm_(state.trainable.parameters(), sched.grad_clip)
    lr = lr_at(sched, state.step, state.total_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.ema.update(state.trainable)
    state.step += 1
    record.update(skipped=False, grad_norm=float(grad_norm), lr=lr)
    return record
