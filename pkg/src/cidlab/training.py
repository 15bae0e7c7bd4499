"""The three training procedures and their state.

  - teacher pretraining: denoising loss plus REPA alignment;
  - stage 1: regression-only distillation of the one-step generator;
  - stage 2: the full alternation — discriminator, real/fake score
    adapters, then the generator on the combined objective.

The training loop is single-writer: one logical thread mutates TrainState.
Every random draw derives from (seed, phase, iteration, tag), so resuming
from a checkpoint reproduces the exact continuation.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .datapipe import DivergenceError, PairSet
from .diffusion import (Condition, FixedStepConfig, NoiseSchedule, build_schedule,
                        cfg_mix, eps_to_x0, forward_diffuse)
from .losses import (LossWeights, adv_generator_loss, cid_fake_score_loss,
                     cid_generator_loss, cid_real_score_loss, cida_total,
                     loss_gan_pair, loss_mse, loss_repa, omega_weight,
                     stage1_loss)
from .nets import (DiscHead, GeneratorNet, RefEncoder, RepaHead, ScoreNet,
                   SharedScoreBase, build_backbone, seeded)
from .seeding import derive_seed, make_generator, randn, sample_indices, sample_timesteps


def scale_t_range(T: int, t_min: int = 20, t_max: int = 979) -> Tuple[int, int]:
    """Map the canonical 1000-step sampling range onto a toy T."""
    if T == 1000:
        return t_min, t_max
    lo = max(1, round(t_min * T / 1000))
    hi = min(T, max(lo + 1, round(t_max * T / 1000)))
    return lo, hi


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch: int = 64
    iters_teacher: int = 2000
    iters_stage1: int = 1000
    iters_stage2: int = 1000
    t_min: int = 20
    t_max: int = 979
    t_s: int = 500
    use_fixed_coeffs: bool = True
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: Optional[float] = None
    repa_lambda: float = 0.1
    percep_weight: float = 1.0
    cond_dropout: float = 0.1  # teacher-time null-embedding rate, enables CFG
    disc_feature_t: Optional[int] = None  # defaults to t_s
    # Per-role learning rates for the stage-2 alternation; None falls back
    # to lr_stage2, then lr. The distillation gradient tolerates a much
    # smaller step than plain regression.
    lr_stage2: Optional[float] = None
    lr_adapters: Optional[float] = None
    lr_disc: Optional[float] = None

    def stage2_lr(self, role: str) -> float:
        base = self.lr_stage2 if self.lr_stage2 is not None else self.lr
        if role == "adapters" and self.lr_adapters is not None:
            return self.lr_adapters
        if role == "disc" and self.lr_disc is not None:
            return self.lr_disc
        return base

    def validate(self, T: int) -> None:
        lo, hi = scale_t_range(T, self.t_min, self.t_max)
        if not (1 <= lo < hi <= T):
            raise ValueError(f"invalid t range ({lo}, {hi}) for T={T}")
        if not (1 <= self.t_s <= T):
            raise ValueError(f"t_s={self.t_s} out of range [1, {T}]")
        if min(self.iters_teacher, self.iters_stage1, self.iters_stage2) < 0:
            raise ValueError("iteration counts must be non-negative")

    @property
    def feature_t(self) -> int:
        return self.disc_feature_t if self.disc_feature_t is not None else self.t_s


@dataclass
class TrainState:
    """Everything stage-1/stage-2 mutate, fully serializable."""

    generator: GeneratorNet
    score: SharedScoreBase
    disc: DiscHead
    repa_head: RepaHead
    cond: Condition
    sched: NoiseSchedule
    opt_theta: torch.optim.AdamW
    opt_phi: torch.optim.AdamW
    opt_psi: torch.optim.AdamW
    opt_disc: torch.optim.AdamW
    seed: int
    stage1_iter: int = 0
    stage2_iter: int = 0
    omega_C: Optional[float] = None
    config: dict = field(default_factory=dict)


def make_condition(cond_dim: int, seed: int) -> Condition:
    """Fixed positive embedding plus the zero null embedding; created once
    and stored in checkpoints."""
    g = make_generator(seed, "condition")
    e = randn((cond_dim,), g)
    return Condition(embed=e / e.norm(), null_embed=torch.zeros(cond_dim))


def _adamw(params, lr: float, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(params), lr=lr, weight_decay=weight_decay)


def init_train_state(teacher: ScoreNet, cond: Condition, cfg: TrainConfig,
                     weights: LossWeights, repa_head: Optional[RepaHead] = None,
                     ref_dim: int = 32, lora_rank: int = 4,
                     lora_alpha: float = 8.0, config: Optional[dict] = None
                     ) -> TrainState:
    """Build the distillation state: generator and score base both start
    from the teacher; adapters, discriminator and REPA head are fresh."""
    sched = teacher.sched
    cfg.validate(sched.T)
    arch = teacher.net.arch
    gen_backbone = copy.deepcopy(teacher.net)
    step_cfg = FixedStepConfig(t_s=cfg.t_s, use_fixed_coeffs=cfg.use_fixed_coeffs)
    generator = GeneratorNet(gen_backbone, sched, step_cfg)

    score = seeded(
        lambda: SharedScoreBase(copy.deepcopy(teacher.net), sched,
                                rank=lora_rank, alpha=lora_alpha),
        derive_seed(cfg.seed, "adapters"),
    )
    if arch["kind"] == "conv":
        disc = seeded(lambda: DiscHead(4 * arch["width"], conv=True),
                      derive_seed(cfg.seed, "disc"))
        tap_dim = 2 * arch["width"]
    else:
        disc = seeded(lambda: DiscHead(arch["hidden"], conv=False),
                      derive_seed(cfg.seed, "disc"))
        tap_dim = arch["hidden"]
    if repa_head is None:
        repa_head = seeded(lambda: RepaHead(tap_dim, ref_dim),
                           derive_seed(cfg.seed, "repa"))
    else:
        repa_head = copy.deepcopy(repa_head)

    lr_ad = cfg.lr_adapters if cfg.lr_adapters is not None else cfg.lr
    lr_d = cfg.lr_disc if cfg.lr_disc is not None else cfg.lr
    return TrainState(
        generator=generator,
        score=score,
        disc=disc,
        repa_head=repa_head,
        cond=cond,
        sched=sched,
        opt_theta=_adamw(list(generator.parameters()) + list(repa_head.parameters()),
                         cfg.lr, cfg.weight_decay),
        opt_phi=_adamw(score.adapter("real").parameters(), lr_ad, cfg.weight_decay),
        opt_psi=_adamw(score.adapter("fake").parameters(), lr_ad, cfg.weight_decay),
        opt_disc=_adamw(disc.parameters(), lr_d, cfg.weight_decay),
        seed=cfg.seed,
        config=dict(config or {}),
    )


def _check_finite(value: torch.Tensor, what: str, it: int) -> None:
    if not torch.isfinite(value):
        raise DivergenceError(f"{what} became non-finite at iteration {it}")


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().norm() ** 2)
    return total ** 0.5


# ---------------------------------------------------------------------------
# Teacher
# ---------------------------------------------------------------------------

def train_teacher(z_h: torch.Tensor, h_ref: torch.Tensor, sched: NoiseSchedule,
                  cond: Condition, cfg: TrainConfig, arch: dict,
                  repa_lambda: Optional[float] = None,
                  on_metrics: Optional[Callable[[dict], None]] = None
                  ) -> Tuple[ScoreNet, RepaHead, List[dict]]:
    """REPA-regularized denoiser pretraining.

    Minimizes ||eps_hat - eps||^2 + lambda * loss_repa over uniformly
    sampled timesteps covering the full schedule; the projection head
    trains jointly with the denoiser. With lambda = 0 the alignment term
    is absent from the computation graph entirely.
    """
    cfg.validate(sched.T)
    lam = cfg.repa_lambda if repa_lambda is None else repa_lambda
    backbone = seeded(lambda: build_backbone(arch), derive_seed(cfg.seed, "teacher"))
    teacher = ScoreNet(backbone, sched)
    ref_dim = h_ref.shape[-1]
    tap_dim = 2 * arch["width"] if arch["kind"] == "conv" else arch["hidden"]
    repa_head = seeded(lambda: RepaHead(tap_dim, ref_dim),
                       derive_seed(cfg.seed, "teacher-repa"))
    opt = _adamw(list(backbone.parameters()) + list(repa_head.parameters()),
                 cfg.lr, cfg.weight_decay)
    metrics = []
    for it in range(cfg.iters_teacher):
        g = make_generator(cfg.seed, "teacher", it)
        idx = sample_indices(len(z_h), cfg.batch, g)
        z = z_h[idx]
        t = sample_timesteps(1, sched.T, cfg.batch, g)
        eps = randn(z.shape, g)
        z_t = forward_diffuse(z, t, eps, sched)
        # Null-embedding dropout teaches the unconditional branch that
        # classifier-free guidance mixes at distillation time.
        c_batch = cond.embed.expand(cfg.batch, -1)
        if cfg.cond_dropout > 0:
            drop = torch.rand(cfg.batch, 1, generator=g) < cfg.cond_dropout
            c_batch = torch.where(drop, cond.null_embed.expand(cfg.batch, -1),
                                  c_batch)
        eps_hat, taps = teacher.predict_eps(z_t, t, c_batch)
        mse = loss_mse(eps_hat, eps)
        if lam != 0.0:
            repa = loss_repa(h_ref[idx], repa_head(taps["repa"]))
            loss = mse + lam * repa
        else:
            repa = torch.zeros(())
            loss = mse
        _check_finite(loss, "teacher loss", it)
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(backbone.parameters(), cfg.grad_clip)
        opt.step()
        row = {"phase": "teacher", "iter": it, "loss": float(loss.detach()),
               "mse": float(mse.detach()), "repa": float(repa.detach())}
        metrics.append(row)
        if on_metrics:
            on_metrics(row)
    return teacher, repa_head, metrics


def denoise_validation_loss(teacher: ScoreNet, z: torch.Tensor, cond: Condition,
                            seed: int, n_draws: int = 4) -> float:
    """Fixed-draw denoising MSE, the teacher's convergence yardstick."""
    total = 0.0
    with torch.no_grad():
        for k in range(n_draws):
            g = make_generator(seed, "teacher-val", k)
            t = sample_timesteps(1, teacher.sched.T, len(z), g)
            eps = randn(z.shape, g)
            z_t = forward_diffuse(z, t, eps, teacher.sched)
            eps_hat, _ = teacher.predict_eps(z_t, t, cond.embed)
            total += float(loss_mse(eps_hat, eps))
    return total / n_draws


def sample_teacher(teacher: ScoreNet, steps: int, seed: int, n: int,
                   shape: Tuple[int, ...], cond: Condition) -> torch.Tensor:
    """Ancestral sampling from pure noise, used only for teacher
    evaluation baselines. steps=1 reduces to the one-step reverse formula
    at t = T."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    sched = teacher.sched
    taus = np.unique(np.round(np.linspace(sched.T, 1, steps)).astype(int))[::-1]
    g = make_generator(seed, "sample")
    z = randn((n, *shape), g)
    a2 = sched.alpha_bar.astype(np.float64) ** 2
    with torch.no_grad():
        for i, t in enumerate(taus):
            t = int(t)
            eps_hat, _ = teacher.predict_eps(z, t, cond.embed)
            x0 = eps_to_x0(z, eps_hat, t, sched)
            if i == len(taus) - 1:
                z = x0
                break
            s = int(taus[i + 1])
            at, as_ = a2[t - 1], a2[s - 1]
            alpha_ts = at / as_
            beta_ts = 1.0 - alpha_ts
            mean = (np.sqrt(as_) * beta_ts / (1 - at)) * x0 \
                + (np.sqrt(alpha_ts) * (1 - as_) / (1 - at)) * z
            sigma = float(np.sqrt(beta_ts * (1 - as_) / (1 - at)))
            z = mean + sigma * randn(z.shape, g)
    return z


def train_ref_encoder(data: torch.Tensor, kind: str, seed: int,
                      feat_dim: int = 32, iters: int = 400, batch: int = 64,
                      lr: float = 2e-3) -> RefEncoder:
    """Pretrain the frozen alignment reference as an autoencoder on clean
    data, then freeze it."""
    in_dim = 3 if kind == "conv" else data.shape[-1]
    ref = seeded(lambda: RefEncoder(kind, in_dim=in_dim, feat_dim=feat_dim),
                 derive_seed(seed, "ref"))
    opt = _adamw(ref.parameters(), lr, 0.0)
    for it in range(iters):
        g = make_generator(seed, "ref", it)
        idx = sample_indices(len(data), batch, g)
        x = data[idx]
        loss = ((ref(x) - x) ** 2).mean()
        _check_finite(loss, "reference encoder loss", it)
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref.eval()


# ---------------------------------------------------------------------------
# Stage 1: regression-only distillation
# ---------------------------------------------------------------------------

def distill_stage1(state: TrainState, pairs: PairSet, cfg: TrainConfig,
                   iters: Optional[int] = None,
                   on_metrics: Optional[Callable[[dict], None]] = None
                   ) -> List[dict]:
    """Optimize the generator alone on the vanilla restoration loss."""
    n_iters = cfg.iters_stage1 if iters is None else iters
    metrics = []
    for _ in range(n_iters):
        it = state.stage1_iter
        g = make_generator(state.seed, "stage1", it)
        idx = sample_indices(len(pairs), cfg.batch, g)
        z_g, _ = state.generator(pairs.z_l[idx], state.cond.embed)
        loss = stage1_loss(z_g, pairs.z_h[idx], cfg.percep_weight)
        _check_finite(loss, "stage-1 loss", it)
        state.opt_theta.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(state.generator.parameters(), cfg.grad_clip)
        state.opt_theta.step()
        state.stage1_iter += 1
        row = {"phase": "stage1", "iter": it, "loss": float(loss.detach()),
               "grad_norm": _grad_norm(state.generator.parameters())}
        metrics.append(row)
        if on_metrics:
            on_metrics(row)
    return metrics


# ---------------------------------------------------------------------------
# Stage 2: CiDA alternation
# ---------------------------------------------------------------------------

def _set_requires_grad(modules, flag: bool):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def distill_stage2_step(state: TrainState, batch: Tuple[torch.Tensor, ...],
                        cfg: TrainConfig, weights: LossWeights,
                        total_iters: Optional[int] = None) -> dict:
    """One full alternation:

    (a) discriminator on real/fake score features of z_h vs detached z_g;
    (b) real adapter toward z_h, then fake adapter toward detached z_g,
        on a shared fresh (t, eps) draw;
    (c) fresh (t, eps), omega, then the generator (and REPA head) on the
        combined objective with score and discriminator parameters frozen —
        the generator gradient enters only through z_t built from z_g (and
        through the features of z_g in the adversarial term).
    """
    z_h, z_l, h_ref = batch
    it = state.stage2_iter
    cond, nullc = state.cond.embed, state.cond.null_embed
    feature_t = cfg.feature_t
    t_lo, t_hi = scale_t_range(state.sched.T, cfg.t_min, cfg.t_max)

    for opt, role in ((state.opt_theta, "theta"), (state.opt_phi, "adapters"),
                      (state.opt_psi, "adapters"), (state.opt_disc, "disc")):
        for group in opt.param_groups:
            group["lr"] = cfg.stage2_lr(role)

    with torch.no_grad():
        z_g_const, _ = state.generator(z_l, cond)

    # (a) discriminator
    state.score.switch("real")
    with torch.no_grad():
        feats_fake = state.score.features(z_g_const, feature_t, cond)
        feats_real = state.score.features(z_h, feature_t, cond)
    disc_loss, _ = loss_gan_pair(state.disc(feats_fake), state.disc(feats_real))
    _check_finite(disc_loss, "stage-2 discriminator loss", it)
    state.opt_disc.zero_grad()
    disc_loss.backward()
    state.opt_disc.step()

    # (b) score adapters, one shared (t, eps) draw
    g1 = make_generator(state.seed, "stage2-score", it)
    t1 = sample_timesteps(t_lo, t_hi, len(z_h), g1)
    eps1 = randn(z_h.shape, g1)
    z_ht = forward_diffuse(z_h, t1, eps1, state.sched)
    z_gt = forward_diffuse(z_g_const, t1, eps1, state.sched)

    phi_loss = cid_real_score_loss(state.score(z_ht, t1, cond, which="real"), z_h)
    _check_finite(phi_loss, "stage-2 real-score loss", it)
    state.opt_phi.zero_grad()
    phi_loss.backward()
    state.opt_phi.step()

    psi_loss = cid_fake_score_loss(state.score(z_gt, t1, cond, which="fake"), z_g_const)
    _check_finite(psi_loss, "stage-2 fake-score loss", it)
    state.opt_psi.zero_grad()
    psi_loss.backward()
    state.opt_psi.step()

    # (c) generator + REPA head. One scalar t per step so omega(t) is the
    # per-draw constant the weighting rule defines.
    g2 = make_generator(state.seed, "stage2-gen", it)
    t2 = int(sample_timesteps(t_lo, t_hi, 1, g2)[0])
    eps2 = randn(z_h.shape, g2)

    frozen = [state.score.adapter("real"), state.score.adapter("fake"), state.disc]
    _set_requires_grad(frozen, False)
    try:
        z_g, h_t = state.generator(z_l, cond)
        z_t = forward_diffuse(z_g, t2, eps2, state.sched)
        f_phi_k = cfg_mix(state.score(z_t, t2, cond, which="real"),
                          state.score(z_t, t2, nullc, which="real"), weights.kappa)
        f_psi_k = cfg_mix(state.score(z_t, t2, cond, which="fake"),
                          state.score(z_t, t2, nullc, which="fake"), weights.kappa)
        if state.omega_C is None:
            if weights.C is not None:
                state.omega_C = weights.C
            else:
                with torch.no_grad():
                    state.omega_C = float((z_h - f_phi_k).norm())
        omega = omega_weight(z_h, f_phi_k.detach(), state.omega_C)
        cid = cid_generator_loss(f_phi_k, f_psi_k, z_h, omega, weights.xi)
        adv = adv_generator_loss(
            state.disc, state.score.features(z_g, feature_t, cond, which="real"))
        repa = loss_repa(h_ref, state.repa_head(h_t))
        denom = max(1, cfg.iters_stage2 if total_iters is None else total_iters)
        w_eff = weights.at_progress(it / denom)
        total = cida_total(cid, adv, repa, w_eff)
        _check_finite(total, "stage-2 generator loss", it)
        state.opt_theta.zero_grad()
        total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(state.generator.parameters(), cfg.grad_clip)
        state.opt_theta.step()
    finally:
        _set_requires_grad(frozen, True)

    state.stage2_iter += 1
    return {"phase": "stage2", "iter": it, "disc": float(disc_loss.detach()),
            "phi": float(phi_loss.detach()), "psi": float(psi_loss.detach()),
            "cid": float(cid.detach()), "adv": float(adv.detach()),
            "repa": float(repa.detach()), "total": float(total.detach()),
            "omega": omega, "lambda1": w_eff.lambda1,
            "grad_norm": _grad_norm(state.generator.parameters())}


def distill_stage2(state: TrainState, pairs: PairSet, cfg: TrainConfig,
                   weights: LossWeights, iters: Optional[int] = None,
                   on_metrics: Optional[Callable[[dict], None]] = None
                   ) -> List[dict]:
    """Run the alternation; batches derive from (seed, iteration)."""
    n_iters = cfg.iters_stage2 if iters is None else iters
    metrics = []
    for _ in range(n_iters):
        g = make_generator(state.seed, "stage2-batch", state.stage2_iter)
        idx = sample_indices(len(pairs), cfg.batch, g)
        batch = (pairs.z_h[idx], pairs.z_l[idx], pairs.h_ref[idx])
        row = distill_stage2_step(state, batch, cfg, weights,
                                  total_iters=cfg.iters_stage2)
        metrics.append(row)
        if on_metrics:
            on_metrics(row)
    return metrics


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def _opt_groups(opt: torch.optim.Optimizer) -> "OrderedDict[str, torch.Tensor]":
    out = OrderedDict()
    sd = opt.state_dict()
    for idx, entry in sd["state"].items():
        for key, val in entry.items():
            if isinstance(val, torch.Tensor):
                out[f"{idx}.{key}"] = val.reshape(val.shape if val.ndim else (1,))
    return out


def _load_opt(opt: torch.optim.Optimizer,
              blobs: "OrderedDict[str, torch.Tensor]") -> None:
    state: Dict[int, dict] = {}
    for name, t in blobs.items():
        idx_s, key = name.split(".", 1)
        entry = state.setdefault(int(idx_s), {})
        if key == "step":
            entry[key] = t.reshape(())
        else:
            entry[key] = t
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def _schedule_meta(sched: NoiseSchedule) -> dict:
    return {"T": sched.T, "beta_min": float(sched.beta[0]),
            "beta_max": float(sched.beta[-1])}


def _sched_from_meta(meta: dict) -> NoiseSchedule:
    return build_schedule(meta["T"], meta["beta_min"], meta["beta_max"])


def _condition_meta(cond: Condition) -> dict:
    return {"embed": [float(v) for v in cond.embed],
            "null_embed": [float(v) for v in cond.null_embed]}


def _cond_from_meta(meta: dict) -> Condition:
    return Condition(embed=torch.tensor(meta["embed"], dtype=torch.float32),
                     null_embed=torch.tensor(meta["null_embed"], dtype=torch.float32))


def save_checkpoint(state: TrainState, path) -> None:
    """Serialize the full TrainState (models, adapters, optimizer moments,
    counters) into the manifest+blob container."""
    arch = state.generator.net.arch
    real = state.score.adapter("real")
    groups = {
        "generator": OrderedDict(state.generator.net.state_dict()),
        "score_base": OrderedDict(state.score.base.state_dict()),
        "adapter_real": OrderedDict(real.state_dict()),
        "adapter_fake": OrderedDict(state.score.adapter("fake").state_dict()),
        "disc": OrderedDict(state.disc.state_dict()),
        "repa": OrderedDict(state.repa_head.state_dict()),
        "opt_theta": _opt_groups(state.opt_theta),
        "opt_phi": _opt_groups(state.opt_phi),
        "opt_psi": _opt_groups(state.opt_psi),
        "opt_disc": _opt_groups(state.opt_disc),
    }
    extra = {
        "kind": "train_state",
        "arch": arch,
        "lora": {"rank": real.rank, "alpha": real.alpha},
        "disc_cfg": {"feat_dim": state.disc.feat_dim, "conv": state.disc.conv},
        "repa_cfg": {"tap_dim": state.repa_head.tap_dim,
                     "ref_dim": state.repa_head.ref_dim},
        "step_cfg": {"t_s": state.generator.step_cfg.t_s,
                     "use_fixed_coeffs": state.generator.step_cfg.use_fixed_coeffs},
        "schedule": _schedule_meta(state.sched),
        "condition": _condition_meta(state.cond),
        "counters": {"stage1_iter": state.stage1_iter,
                     "stage2_iter": state.stage2_iter, "seed": state.seed},
        "omega_C": state.omega_C,
        "config": state.config,
        "config_hash": ckpt.config_hash(state.config),
        "train_cfg": state.config.get("train", {}),
    }
    ckpt.save_tensors(Path(path), groups, extra)


def load_checkpoint(path, cfg: TrainConfig, weights: LossWeights,
                    expect_config: Optional[dict] = None) -> TrainState:
    """Rebuild a TrainState; a config-hash mismatch is a hard error."""
    path = Path(path)
    manifest = ckpt.load_manifest(path)
    if manifest.get("kind") != "train_state":
        raise ckpt.CheckpointError(f"not a train_state checkpoint: {manifest.get('kind')}")
    if expect_config is not None:
        ckpt.check_config_hash(manifest, expect_config)
    groups = ckpt.load_tensors(path, manifest)

    sched = _sched_from_meta(manifest["schedule"])
    cond = _cond_from_meta(manifest["condition"])
    arch = manifest["arch"]
    step_meta = manifest["step_cfg"]

    backbone = build_backbone(arch)
    backbone.load_state_dict(groups["generator"])
    generator = GeneratorNet(backbone, sched, FixedStepConfig(
        t_s=step_meta["t_s"], use_fixed_coeffs=step_meta["use_fixed_coeffs"]))

    base = build_backbone(arch)
    base.load_state_dict(groups["score_base"])
    lora = manifest["lora"]
    score = SharedScoreBase(base, sched, rank=lora["rank"], alpha=lora["alpha"])
    score.adapter("real").load_state_dict(groups["adapter_real"])
    score.adapter("fake").load_state_dict(groups["adapter_fake"])
    score.switch("real")

    disc_cfg = manifest["disc_cfg"]
    disc = DiscHead(disc_cfg["feat_dim"], conv=disc_cfg["conv"])
    disc.load_state_dict(groups["disc"])
    repa_cfg = manifest["repa_cfg"]
    repa_head = RepaHead(repa_cfg["tap_dim"], repa_cfg["ref_dim"])
    repa_head.load_state_dict(groups["repa"])

    counters = manifest["counters"]
    lr_ad = cfg.lr_adapters if cfg.lr_adapters is not None else cfg.lr
    lr_d = cfg.lr_disc if cfg.lr_disc is not None else cfg.lr
    state = TrainState(
        generator=generator, score=score, disc=disc, repa_head=repa_head,
        cond=cond, sched=sched,
        opt_theta=_adamw(list(generator.parameters()) + list(repa_head.parameters()),
                         cfg.lr, cfg.weight_decay),
        opt_phi=_adamw(score.adapter("real").parameters(), lr_ad, cfg.weight_decay),
        opt_psi=_adamw(score.adapter("fake").parameters(), lr_ad, cfg.weight_decay),
        opt_disc=_adamw(disc.parameters(), lr_d, cfg.weight_decay),
        seed=counters["seed"],
        stage1_iter=counters["stage1_iter"],
        stage2_iter=counters["stage2_iter"],
        omega_C=manifest["omega_C"],
        config=manifest["config"],
    )
    _load_opt(state.opt_theta, groups.get("opt_theta", OrderedDict()))
    _load_opt(state.opt_phi, groups.get("opt_phi", OrderedDict()))
    _load_opt(state.opt_psi, groups.get("opt_psi", OrderedDict()))
    _load_opt(state.opt_disc, groups.get("opt_disc", OrderedDict()))
    return state


def state_digest(state: TrainState, tmp_dir=None) -> str:
    """Byte-level digest of the serialized state (params + moments +
    counters), via a round trip through the checkpoint container."""
    import tempfile

    with tempfile.TemporaryDirectory(dir=tmp_dir) as d:
        save_checkpoint(state, d)
        return ckpt.directory_digest(Path(d))


def save_score_net(net: ScoreNet, repa_head: Optional[RepaHead], cond: Condition,
                   path, config: Optional[dict] = None) -> None:
    groups = {"score": OrderedDict(net.net.state_dict())}
    extra = {
        "kind": "score_net",
        "arch": net.net.arch,
        "schedule": _schedule_meta(net.sched),
        "condition": _condition_meta(cond),
        "config": dict(config or {}),
        "config_hash": ckpt.config_hash(dict(config or {})),
    }
    if repa_head is not None:
        groups["repa"] = OrderedDict(repa_head.state_dict())
        extra["repa_cfg"] = {"tap_dim": repa_head.tap_dim,
                             "ref_dim": repa_head.ref_dim}
    ckpt.save_tensors(Path(path), groups, extra)


def load_score_net(path, expect_config: Optional[dict] = None
                   ) -> Tuple[ScoreNet, Optional[RepaHead], Condition]:
    manifest = ckpt.load_manifest(Path(path))
    if manifest.get("kind") != "score_net":
        raise ckpt.CheckpointError(f"not a score_net checkpoint: {manifest.get('kind')}")
    if expect_config is not None:
        ckpt.check_config_hash(manifest, expect_config)
    groups = ckpt.load_tensors(Path(path), manifest)
    backbone = build_backbone(manifest["arch"])
    backbone.load_state_dict(groups["score"])
    net = ScoreNet(backbone, _sched_from_meta(manifest["schedule"]))
    repa_head = None
    if "repa" in groups:
        rc = manifest["repa_cfg"]
        repa_head = RepaHead(rc["tap_dim"], rc["ref_dim"])
        repa_head.load_state_dict(groups["repa"])
    return net, repa_head, _cond_from_meta(manifest["condition"])


def save_ref_encoder(ref: RefEncoder, path) -> None:
    ckpt.save_tensors(Path(path), {"ref": OrderedDict(ref.state_dict())},
                      {"kind": "ref_encoder", "arch": ref.arch})


def load_ref_encoder(path) -> RefEncoder:
    manifest = ckpt.load_manifest(Path(path))
    if manifest.get("kind") != "ref_encoder":
        raise ckpt.CheckpointError("not a ref_encoder checkpoint")
    ref = RefEncoder(**manifest["arch"])
    ref.load_state_dict(ckpt.load_tensors(Path(path), manifest)["ref"])
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref.eval()
