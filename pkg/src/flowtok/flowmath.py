"""Flow-path numerics: interpolation paths, velocities, time-pair sampling,
the adaptive squared loss, the mean-velocity regression target, and a
quadrature oracle used only by tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import torch
from torch import Tensor

TimeLike = Union[float, Tensor]


@dataclass(frozen=True)
class TimePair:
    """A sampled (r, t) pair with 0 <= r <= t <= 1.

    r == t is legal and selects the instantaneous-velocity mode.
    """

    r: float
    t: float

    def __post_init__(self):
        if not (0.0 <= self.r <= self.t <= 1.0):
            raise ValueError(f"need 0 <= r <= t <= 1, got r={self.r}, t={self.t}")

    @property
    def width(self) -> float:
        return self.t - self.r

    @property
    def is_instantaneous(self) -> bool:
        return self.r == self.t


@dataclass(frozen=True)
class AdaptiveLossConfig:
    """Constants of the adaptive squared loss and the r=t split proportion."""

    c: float = 1e-3
    w: float = 1.0
    q: float = 0.75

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.w < 0:
            raise ValueError(f"w must be >= 0, got {self.w}")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"q must be in [0,1], got {self.q}")


@dataclass(frozen=True)
class TimeDistribution:
    """Marginal distribution of each raw timestep draw.

    "uniform" draws U[0,1]; "logit-normal" draws N(mean, std) and squashes
    through a sigmoid.
    """

    kind: str = "uniform"
    mean: float = -0.4
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "logit-normal"):
            raise ValueError(f"unknown time distribution {self.kind!r}")
        if self.std <= 0:
            raise ValueError(f"std must be positive, got {self.std}")

    def draw(self, rng: torch.Generator, n: int, dtype=torch.float32) -> Tensor:
        u = torch.rand(n, generator=rng, dtype=dtype)
        if self.kind == "uniform":
            return u
        # inverse-CDF keeps the draw count identical across kinds for a
        # given generator state
        normal = torch.erfinv(2 * u - 1) * math.sqrt(2.0)
        return torch.sigmoid(self.mean + self.std * normal)


UNIFORM_TIMES = TimeDistribution("uniform")


@dataclass(frozen=True)
class FlowSample:
    """A point on the straight path between data x and noise eps."""

    x: Tensor
    eps: Tensor
    t: float
    z_t: Tensor
    v: Tensor


def make_flow_sample(x: Tensor, eps: Tensor, t: float) -> FlowSample:
    return FlowSample(x=x, eps=eps, t=t, z_t=interpolate(x, eps, t),
                      v=conditional_velocity(x, eps))


def _check_same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _broadcast_time(t: TimeLike, like: Tensor) -> Tensor:
    """Expand a scalar or (B,)-shaped time to broadcast against `like`."""
    if not torch.is_tensor(t):
        return torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t.to(like.dtype)
    return t.to(like.dtype).reshape(t.shape[0], *([1] * (like.ndim - 1)))


def interpolate(x: Tensor, eps: Tensor, t: TimeLike) -> Tensor:
    """Point on the straight path, (1-t)*x + t*eps.

    t may be a python float or a per-sample (B,) tensor.
    """
    _check_same_shape(x, eps, "interpolate")
    t_vals = torch.as_tensor(t)
    if ((t_vals < 0) | (t_vals > 1)).any():
        raise ValueError(f"t must lie in [0,1], got {t}")
    tb = _broadcast_time(t, x)
    return (1 - tb) * x + tb * eps


def conditional_velocity(x: Tensor, eps: Tensor) -> Tensor:
    """Velocity of the straight path, eps - x (independent of t)."""
    _check_same_shape(x, eps, "conditional_velocity")
    return eps - x


def euler_step(z_t: Tensor, v: Tensor, t: TimeLike, r: TimeLike) -> Tensor:
    """One Euler update from time t back to r: z_t - (t-r)*v."""
    _check_same_shape(z_t, v, "euler_step")
    t_vals, r_vals = torch.as_tensor(t), torch.as_tensor(r)
    if (r_vals > t_vals).any():
        raise ValueError(f"euler_step needs r <= t, got r={r}, t={t}")
    tb = _broadcast_time(t, z_t)
    rb = _broadcast_time(r, z_t)
    return z_t - (tb - rb) * v


def sample_time_pairs(
    rng: torch.Generator,
    cfg: AdaptiveLossConfig,
    dist: TimeDistribution = UNIFORM_TIMES,
    n: int = 1,
    dtype=torch.float32,
) -> tuple[Tensor, Tensor]:
    """Draw n (r, t) pairs: with probability q the pair collapses to
    r = t = max(draw1, draw2), otherwise the two draws are sorted.

    Returns (r, t) tensors of shape (n,) with r <= t elementwise.
    """
    a = dist.draw(rng, n, dtype=dtype)
    b = dist.draw(rng, n, dtype=dtype)
    lo = torch.minimum(a, b)
    hi = torch.maximum(a, b)
    collapse = torch.rand(n, generator=rng, dtype=dtype) < cfg.q
    r = torch.where(collapse, hi, lo)
    return r, hi


def sample_time_pair(
    rng: torch.Generator,
    cfg: AdaptiveLossConfig,
    dist: TimeDistribution = UNIFORM_TIMES,
) -> TimePair:
    """Single-pair convenience wrapper around sample_time_pairs."""
    r, t = sample_time_pairs(rng, cfg, dist, n=1, dtype=torch.float64)
    return TimePair(r=r.item(), t=t.item())


def adaptive_l2_per_sample(delta: Tensor, cfg: AdaptiveLossConfig) -> Tensor:
    """Per-sample adaptive squared loss, shape (B,).

    The leading axis of delta is the batch; the squared error is summed over
    all remaining axes, then divided by the detached (err + c)^w denominator.
    """
    if delta.ndim < 1:
        raise ValueError("delta must have a batch axis")
    if not torch.isfinite(delta).all():
        raise FloatingPointError("non-finite regression error")
    sq = delta.reshape(delta.shape[0], -1).pow(2).sum(dim=1)
    denom = (sq + cfg.c).pow(cfg.w).detach()
    return sq / denom


def adaptive_l2(delta: Tensor, cfg: AdaptiveLossConfig) -> Tensor:
    """Batch mean of the per-sample adaptive squared loss."""
    return adaptive_l2_per_sample(delta, cfg).mean()


def meanflow_target(v: Tensor, jvp_u: Tensor, t: TimeLike, r: TimeLike) -> Tensor:
    """Regression target for the mean-velocity head: v - (t-r)*jvp_u, detached.

    jvp_u must be the directional derivative of the decoder output along the
    tangent (v, 0, 1) in its (z, r, t) arguments.  At r = t the correction
    term vanishes and the target is exactly the conditional velocity.
    """
    _check_same_shape(v, jvp_u, "meanflow_target")
    t_vals, r_vals = torch.as_tensor(t), torch.as_tensor(r)
    if (r_vals > t_vals).any():
        raise ValueError(f"meanflow_target needs r <= t, got r={r}, t={t}")
    tb = _broadcast_time(t, v)
    rb = _broadcast_time(r, v)
    return (v - (tb - rb) * jvp_u).detach()


def average_velocity_oracle(
    v_field: Callable[[Tensor, float], Tensor],
    z_t: Tensor,
    pair: TimePair,
    n_steps: int = 64,
) -> Tensor:
    """Brute-force average velocity over [r, t]: integrate dz/dtau = v(z, tau)
    backward from (z_t, t) to r with fixed-step RK4, return (z_t - z_r)/(t-r).

    Test-only reference; never used in training.
    """
    if pair.r >= pair.t:
        raise ValueError("oracle needs r < t (average over an empty interval is undefined)")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    h = (pair.r - pair.t) / n_steps
    z = z_t
    tau = pair.t
    for _ in range(n_steps):
        k1 = v_field(z, tau)
        k2 = v_field(z + 0.5 * h * k1, tau + 0.5 * h)
        k3 = v_field(z + 0.5 * h * k2, tau + 0.5 * h)
        k4 = v_field(z + h * k3, tau + h)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        tau += h
    return (z_t - z) / (pair.t - pair.r)
