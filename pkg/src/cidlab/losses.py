"""Every training objective: REPA alignment, regression, the GAN pair,
VSD and SiD surrogates, the CiD system, omega weighting, adversarial
generator loss, and the combined CiDA objective.

Conventions (pinned by the unit tests):
  - Inner products and squared norms in the distillation losses sum over
    all non-batch dims and average over the batch dim.
  - ``loss_mse`` and the two score-matching losses use the element-wise
    mean.
  - GAN losses use the standard minimization forms (disc:
    -[ln D(real) + ln(1 - D(fake))], gen: -ln D(fake)); probabilities are
    clipped at 1e-6 inside every log.
  - omega is a plain float: no gradient ever flows through it.

Stop-gradient contracts are owned by the callers (training alternation):
score parameters are frozen during the generator update, so gradients
reach the generator only through z_t built from z_g.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import math

import torch

from .nets import DiscHead

PROB_EPS = 1e-6
NORM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Distillation configuration bundle.

    ``lambda1`` is the effective distillation weight; it follows a
    two-phase schedule (``lambda1_hi`` for the first ``switch_frac`` of
    stage-2 iterations, then ``lambda1_lo``). ``C`` is the omega numerator,
    calibrated on the first stage-2 batch when left unset.
    """

    lambda1: float = 10.0
    lambda1_hi: float = 10.0
    lambda1_lo: float = 1.0
    switch_frac: float = 0.2
    lambda2: float = 0.01
    lambda3: float = 0.1
    xi: float = 1.2
    kappa: float = 7.5
    C: Optional[float] = None

    def __post_init__(self):
        for name in ("lambda1", "lambda1_hi", "lambda1_lo", "lambda2",
                     "lambda3", "xi", "kappa"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def at_progress(self, frac: float) -> "LossWeights":
        """Resolve the two-phase lambda1 schedule at stage-2 progress
        ``frac`` in [0, 1]."""
        lam = self.lambda1_hi if frac < self.switch_frac else self.lambda1_lo
        return replace(self, lambda1=lam)


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def batch_inner(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """<a, b> summed over non-batch dims, averaged over the batch dim."""
    _check_shapes(a, b, "batch_inner")
    return (a * b).reshape(a.shape[0], -1).sum(dim=1).mean()


def loss_repa(h_ref: torch.Tensor, h_proj: torch.Tensor,
              eps: float = NORM_EPS) -> torch.Tensor:
    """Negative mean cosine similarity over token rows.

    Accepts [N, D] or [B, N, D]; zero-norm rows are guarded with ``eps``.
    Value lies in [-1, 1]; -1 iff every token pair is positively parallel.
    """
    _check_shapes(h_ref, h_proj, "loss_repa")
    dot = (h_ref * h_proj).sum(dim=-1)
    denom = h_ref.norm(dim=-1).clamp_min(eps) * h_proj.norm(dim=-1).clamp_min(eps)
    return -(dot / denom).mean()


def loss_mse(z_g: torch.Tensor, z_h: torch.Tensor) -> torch.Tensor:
    """Element-wise mean squared error."""
    _check_shapes(z_g, z_h, "loss_mse")
    return ((z_g - z_h) ** 2).mean()


def loss_gan_pair(d_fake: torch.Tensor, d_real: torch.Tensor
                  ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Standard minimization GAN pair over probability maps.

    disc_loss = -mean[ln d_real + ln(1 - d_fake)]; gen_loss = -mean ln d_fake.
    """
    pf = d_fake.clamp(PROB_EPS, 1.0 - PROB_EPS)
    pr = d_real.clamp(PROB_EPS, 1.0 - PROB_EPS)
    disc_loss = -(torch.log(pr).mean() + torch.log(1.0 - pf).mean())
    gen_loss = -torch.log(pf).mean()
    return disc_loss, gen_loss


def omega_weight(z_h: torch.Tensor, f_phi_kappa: torch.Tensor, C: float) -> float:
    """Residual-normalizing weight C / ||z_h - f_phi_kappa||.

    The norm is the Euclidean norm of the whole residual tensor; the result
    is a plain float, so it is a constant to autograd by construction.
    """
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    _check_shapes(z_h, f_phi_kappa, "omega_weight")
    with torch.no_grad():
        norm = (z_h - f_phi_kappa).norm().item()
    return C / max(norm, NORM_EPS)


def vsd_generator_loss(eps_phi: torch.Tensor, eps_psi: torch.Tensor,
                       z_g: torch.Tensor, omega: float) -> torch.Tensor:
    """Surrogate omega * <sg(eps_phi - eps_psi), z_g>.

    Its gradient w.r.t. generator parameters equals
    omega * (eps_phi - eps_psi) * dz_g/dtheta; the score difference is
    detached here so only the explicit z_g factor carries gradient.
    """
    _check_shapes(eps_phi, eps_psi, "vsd_generator_loss(eps)")
    return omega * batch_inner((eps_phi - eps_psi).detach(), z_g)


def sid_l1(f_phi: torch.Tensor, f_psi: torch.Tensor) -> torch.Tensor:
    """Squared score-difference norm ||f_phi - f_psi||^2 (sum over features,
    mean over batch)."""
    _check_shapes(f_phi, f_psi, "sid_l1")
    d = f_phi - f_psi
    return batch_inner(d, d)


def cid_fake_score_loss(f_psi_out: torch.Tensor, z_g: torch.Tensor) -> torch.Tensor:
    """Fake-score matching toward the (detached) generated latent."""
    _check_shapes(f_psi_out, z_g, "cid_fake_score_loss")
    return ((f_psi_out - z_g.detach()) ** 2).mean()


def cid_real_score_loss(f_phi_out: torch.Tensor, z_h: torch.Tensor) -> torch.Tensor:
    """Real-score matching toward the clean target latent."""
    _check_shapes(f_phi_out, z_h, "cid_real_score_loss")
    return ((f_phi_out - z_h) ** 2).mean()


def cid_generator_loss(f_phi_k: torch.Tensor, f_psi_k: torch.Tensor,
                       z_h: torch.Tensor, omega: float, xi: float) -> torch.Tensor:
    """Consistent-identity generator objective.

    Factored form omega * (<d, f_phi_k - z_h> - xi * ||d||^2) with
    d = f_phi_k - f_psi_k; identically equal to the expanded single inner
    product omega * <d, (1 - xi) * f_phi_k - z_h + xi * f_psi_k>.

    Both score tensors are evaluated with frozen score parameters; the
    generator gradient enters through z_t built from z_g inside them.
    """
    _check_shapes(f_phi_k, f_psi_k, "cid_generator_loss(scores)")
    _check_shapes(f_phi_k, z_h, "cid_generator_loss(z_h)")
    d = f_phi_k - f_psi_k
    return omega * (batch_inner(d, f_phi_k - z_h) - xi * batch_inner(d, d))


def sid_generator_loss(f_phi_k: torch.Tensor, f_psi_k: torch.Tensor,
                       z_g: torch.Tensor, omega: float) -> torch.Tensor:
    """Ablation arm: the pre-substitution objective with the generated
    latent in place of the clean target (not used in the default path)."""
    _check_shapes(f_phi_k, f_psi_k, "sid_generator_loss(scores)")
    d = f_phi_k - f_psi_k
    return omega * batch_inner(d, f_phi_k - z_g)


def adv_generator_loss(d: DiscHead, feats_of_z_g: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term -mean ln d(feats); decreases as the
    discriminator rates the restored latent more real."""
    probs = d(feats_of_z_g).clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -torch.log(probs).mean()


def cida_total(cid: torch.Tensor, adv: torch.Tensor, repa: torch.Tensor,
               w: LossWeights) -> torch.Tensor:
    """lambda1 * cid + lambda2 * adv + lambda3 * repa."""
    for name, v in (("cid", cid), ("adv", adv), ("repa", repa)):
        val = v.detach() if isinstance(v, torch.Tensor) else torch.tensor(float(v))
        if not torch.isfinite(val).all():
            raise ValueError(f"non-finite {name} component")
    return w.lambda1 * cid + w.lambda2 * adv + w.lambda3 * repa


def edge_l1(z_g: torch.Tensor, z_h: torch.Tensor) -> torch.Tensor:
    """L1 distance between finite-difference edge maps.

    Horizontal + vertical first differences on spatial latents; first
    differences along the feature axis on 2D latents.
    """
    _check_shapes(z_g, z_h, "edge_l1")
    if z_g.ndim == 4:
        dx = (z_g[..., :, 1:] - z_g[..., :, :-1]) - (z_h[..., :, 1:] - z_h[..., :, :-1])
        dy = (z_g[..., 1:, :] - z_g[..., :-1, :]) - (z_h[..., 1:, :] - z_h[..., :-1, :])
        return dx.abs().mean() + dy.abs().mean()
    if z_g.shape[-1] < 2:
        return z_g.new_zeros(())
    dg = z_g[..., 1:] - z_g[..., :-1]
    dh = z_h[..., 1:] - z_h[..., :-1]
    return (dg - dh).abs().mean()


def stage1_loss(z_g: torch.Tensor, z_h: torch.Tensor,
                percep_weight: float = 1.0) -> torch.Tensor:
    """Vanilla restoration objective: mean squared error plus an edge-map
    surrogate of the perceptual term."""
    base = loss_mse(z_g, z_h)
    if percep_weight == 0.0:
        return base
    return base + percep_weight * edge_l1(z_g, z_h)
