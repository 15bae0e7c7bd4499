"""Noise schedules, the forward diffusion map, prediction-space conversions,
the one-step reverse formula, and classifier-free guidance mixing.

Conventions:
  - ``alpha_bar[t]`` is the *signal* coefficient sqrt(prod_{s<=t}(1 - beta_s)),
    ``beta_bar[t]`` the *noise* coefficient sqrt(1 - prod(1 - beta_s)), so the
    variance-preserving identity alpha_bar**2 + beta_bar**2 == 1 holds exactly.
  - Timesteps are 1-indexed: valid t is 1..T, and the start timestep ``t_s``
    of the one-step restorer lives in the same index space.
  - Every function here is a pure function of its inputs and safe to call
    from any number of concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import torch

Timestep = Union[int, torch.Tensor]


class ShapeMismatchError(ValueError):
    """Two latents that must be shape-identical are not."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients governing forward diffusion.

    ``beta``, ``alpha_bar`` and ``beta_bar`` are float64 arrays of length T,
    indexed 0..T-1 internally for 1-indexed timesteps 1..T.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        for name in ("beta", "alpha_bar", "beta_bar"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},), got {arr.shape}")
        if not (np.all(self.alpha_bar > 0) and np.all(self.alpha_bar < 1)):
            raise ValueError("alpha_bar must lie in (0, 1)")
        if not (np.all(self.beta_bar > 0) and np.all(self.beta_bar < 1)):
            raise ValueError("beta_bar must lie in (0, 1)")
        if self.T > 1 and not np.all(np.diff(self.alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing in t")

    def coeffs(self, t: Timestep) -> tuple:
        """Return (alpha_bar_t, beta_bar_t) for a 1-indexed timestep.

        ``t`` may be a python int or an integer tensor of per-sample
        timesteps; tensors yield float64 coefficient tensors of the same
        shape.
        """
        if isinstance(t, torch.Tensor):
            idx = t.long() - 1
            if idx.min().item() < 0 or idx.max().item() >= self.T:
                raise ValueError(f"timesteps must lie in [1, {self.T}]")
            a = torch.from_numpy(self.alpha_bar)[idx]
            b = torch.from_numpy(self.beta_bar)[idx]
            return a, b
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"t={t} out of range [1, {self.T}]")
        return float(self.alpha_bar[int(t) - 1]), float(self.beta_bar[int(t) - 1])


@dataclass(frozen=True)
class Condition:
    """Fixed positive embedding and the empty-prompt stand-in.

    Both vectors are created once, stored in checkpoints, and never
    recomputed at inference.
    """

    embed: torch.Tensor
    null_embed: torch.Tensor

    def __post_init__(self):
        if self.embed.shape != self.null_embed.shape:
            raise ValueError(
                f"embed dim {tuple(self.embed.shape)} != null dim {tuple(self.null_embed.shape)}"
            )

    @property
    def dim(self) -> int:
        return int(self.embed.shape[-1])


@dataclass(frozen=True)
class FixedStepConfig:
    """Start timestep of the one-step restorer.

    With ``use_fixed_coeffs`` the schedule lookup is bypassed entirely and
    alpha_bar = beta_bar = 0.5 (the scheduler-free deployment convention,
    which deliberately violates the variance-preserving identity and is
    therefore a bypass flag rather than a degenerate NoiseSchedule).
    """

    t_s: int = 500
    use_fixed_coeffs: bool = False
    fixed_alpha_bar: float = field(default=0.5, repr=False)
    fixed_beta_bar: float = field(default=0.5, repr=False)

    def validate(self, T: int) -> None:
        if not 1 <= self.t_s <= T:
            raise ValueError(f"t_s={self.t_s} out of range [1, {T}]")


def build_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Build a linear-beta schedule with T discrete timesteps.

    beta interpolates linearly from beta_min (t=1) to beta_max (t=T).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(
            f"require 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )
    if T == 1:
        beta = np.array([beta_min], dtype=np.float64)
    else:
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    prod = np.cumprod(1.0 - beta)
    if prod[-1] < 1e-14:
        # beta_bar would round to exactly 1, silently breaking the
        # variance-preserving identity at double precision.
        raise ValueError(
            f"schedule underflows: prod(1-beta) = {prod[-1]:.3e}; "
            "reduce T or beta_max")
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha_bar=np.sqrt(prod),
        beta_bar=np.sqrt(1.0 - prod),
    )


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def _expand(coef, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-sample coefficient over a latent's dims."""
    if isinstance(coef, torch.Tensor):
        c = coef.to(like.dtype)
        return c.view(-1, *([1] * (like.ndim - 1)))
    return torch.as_tensor(coef, dtype=like.dtype)


def forward_diffuse(
    z: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward diffusion: z_t = alpha_bar_t * z + beta_bar_t * eps."""
    _check_same_shape(z, eps, "forward_diffuse(z, eps)")
    a, b = sched.coeffs(t)
    return _expand(a, z) * z + _expand(b, z) * eps


def eps_to_x0(
    z_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, sched: NoiseSchedule
) -> torch.Tensor:
    """Recover the clean-latent prediction from a noise prediction:
    x0_hat = (z_t - beta_bar_t * eps_hat) / alpha_bar_t."""
    _check_same_shape(z_t, eps_hat, "eps_to_x0(z_t, eps_hat)")
    a, b = sched.coeffs(t)
    return (z_t - _expand(b, z_t) * eps_hat) / _expand(a, z_t)


def x0_to_eps(
    z_t: torch.Tensor, x0_hat: torch.Tensor, t: Timestep, sched: NoiseSchedule
) -> torch.Tensor:
    """Exact inverse of :func:`eps_to_x0`:
    eps_hat = (z_t - alpha_bar_t * x0_hat) / beta_bar_t."""
    _check_same_shape(z_t, x0_hat, "x0_to_eps(z_t, x0_hat)")
    a, b = sched.coeffs(t)
    return (z_t - _expand(a, z_t) * x0_hat) / _expand(b, z_t)


def one_step_restore(
    z_l: torch.Tensor,
    predictor: Callable,
    cfg: FixedStepConfig,
    sched: NoiseSchedule,
    cond: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Single-evaluation reverse step: z_g = (z_l - beta_bar * eps_hat) / alpha_bar.

    ``predictor(z_l, t_s, cond)`` must return the noise prediction. With
    ``cfg.use_fixed_coeffs`` the result is exactly 2 * z_l - eps_hat.
    """
    cfg.validate(sched.T)
    eps_hat = predictor(z_l, cfg.t_s, cond)
    _check_same_shape(z_l, eps_hat, "one_step_restore(z_l, eps_hat)")
    if cfg.use_fixed_coeffs:
        return 2.0 * z_l - eps_hat
    a, b = sched.coeffs(cfg.t_s)
    return (z_l - b * eps_hat) / a


def cfg_mix(f_cond: torch.Tensor, f_uncond: torch.Tensor, kappa: float) -> torch.Tensor:
    """Classifier-free guidance: f_uncond + kappa * (f_cond - f_uncond)."""
    _check_same_shape(f_cond, f_uncond, "cfg_mix(f_cond, f_uncond)")
    return f_uncond + kappa * (f_cond - f_uncond)
