"""End-to-end phase orchestration over a working directory.

Artifacts live at fixed names inside the config's workdir: vae.ckpt,
ref.ckpt, teacher.ckpt, stage1.ckpt, stage2.ckpt, bundle.ckpt,
metrics.jsonl, report.json. Each phase is deterministic given the config,
so artifacts are reproducible rather than precious.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Tuple

import torch

from . import config as cfgmod
from . import pipeline, training
from .datapipe import (ImageCorpus, PairSet, PointCorpus, build_image_pairs,
                       build_point_pairs, degrade_corpus, gen_corpus,
                       train_toy_vae)
from .diffusion import FixedStepConfig
from .metrics import EvalReport, mmd_rbf, psnr, ssim
from .seeding import derive_seed
from .training import TrainState


def workdir_of(cfg: dict) -> Path:
    wd = Path(cfg.get("workdir") or "runs/default")
    wd.mkdir(parents=True, exist_ok=True)
    return wd


def _metrics_writer(workdir: Path):
    path = workdir / "metrics.jsonl"

    def write(row: dict) -> None:
        with open(path, "a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    return write


def make_corpus(cfg: dict, eval_split: bool = False):
    """Training corpus, or the held-out evaluation corpus (disjoint seed)."""
    data = cfg["data"]
    seed = derive_seed(data["seed"], "eval") if eval_split else data["seed"]
    n = cfg["eval"]["n_eval"] if eval_split else data["n"]
    if data["kind"] == "textures":
        return gen_corpus("textures", n, seed, size=data.get("size", 32))
    return gen_corpus("gmm2d", n, seed)


def vae_phase(cfg: dict, workdir: Optional[Path] = None) -> Tuple[object, dict]:
    """Train the latent codec on the HQ corpus and persist it."""
    workdir = workdir or workdir_of(cfg)
    corpus = make_corpus(cfg)
    c = cfg["vae"]["latent_channels"]
    vae, report = train_toy_vae(corpus, c, cfgmod.to_vae_config(cfg))
    from collections import OrderedDict

    from . import checkpoint as ckpt
    ckpt.save_tensors(workdir / "vae.ckpt",
                      {"vae": OrderedDict(vae.state_dict())},
                      {"kind": "vae", "arch": vae.arch,
                       "config": cfg, "config_hash": cfgmod.run_config_hash(cfg)})
    slim = {k: v for k, v in report.items() if k != "loss_curve"}
    (workdir / "vae_report.json").write_text(json.dumps(report, sort_keys=True))
    return vae, slim


def load_vae(cfg: dict, workdir: Optional[Path] = None):
    from . import checkpoint as ckpt
    from .datapipe import ToyVAE
    workdir = workdir or workdir_of(cfg)
    path = workdir / "vae.ckpt"
    if not path.exists():
        raise cfgmod.ConfigError(
            f"no VAE checkpoint at {path}; run train-vae first")
    manifest = ckpt.load_manifest(path)
    vae = ToyVAE(**manifest["arch"])
    vae.load_state_dict(ckpt.load_tensors(path, manifest)["vae"])
    return vae.eval()


def ref_phase(cfg: dict, corpus, workdir: Optional[Path] = None):
    """Train (or reload) the frozen alignment reference encoder."""
    workdir = workdir or workdir_of(cfg)
    path = workdir / "ref.ckpt"
    if path.exists():
        return training.load_ref_encoder(path)
    track = cfgmod.track_of(cfg)
    if track == "image":
        ref = training.train_ref_encoder(corpus.images, "conv",
                                         seed=cfg["train"]["seed"],
                                         feat_dim=cfg["net"]["ref_dim"])
    else:
        ref = training.train_ref_encoder(corpus.points, "mlp",
                                         seed=cfg["train"]["seed"],
                                         feat_dim=cfg["net"]["ref_dim"])
    training.save_ref_encoder(ref, path)
    return ref


def build_pairs(cfg: dict, corpus, vae=None, ref=None) -> PairSet:
    if cfgmod.track_of(cfg) == "image":
        return build_image_pairs(corpus, vae, cfgmod.to_degradation(cfg), ref)
    return build_point_pairs(corpus, tuple(cfg["data"]["noise_sigma_range"]),
                             ref, seed=derive_seed(cfg["data"]["seed"], "degrade"))


def teacher_phase(cfg: dict, workdir: Optional[Path] = None):
    """Corpus -> (codec) -> reference encoder -> REPA-regularized teacher."""
    workdir = workdir or workdir_of(cfg)
    corpus = make_corpus(cfg)
    vae = load_vae(cfg, workdir) if cfgmod.track_of(cfg) == "image" else None
    ref = ref_phase(cfg, corpus, workdir)
    pairs = build_pairs(cfg, corpus, vae, ref)
    tcfg = cfgmod.to_train_config(cfg)
    sched = _schedule(cfg)
    cond = training.make_condition(cfg["net"]["cond_dim"], tcfg.seed)
    teacher, repa_head, metrics = training.train_teacher(
        pairs.z_h, pairs.h_ref, sched, cond, tcfg, cfgmod.backbone_arch(cfg),
        on_metrics=_metrics_writer(workdir))
    training.save_score_net(teacher, repa_head, cond, workdir / "teacher.ckpt",
                            config=cfg)
    return teacher, repa_head, cond, metrics


def _schedule(cfg: dict):
    from .diffusion import build_schedule
    s = cfg["schedule"]
    return build_schedule(s["T"], s["beta_min"], s["beta_max"])


def distill_phase(cfg: dict, workdir: Optional[Path] = None) -> TrainState:
    """Stage-1 regression then the stage-2 alternation; persists stage1,
    stage2, and the deployment bundle."""
    workdir = workdir or workdir_of(cfg)
    teacher, repa_head, cond = training.load_score_net(
        workdir / "teacher.ckpt", expect_config=cfg)
    corpus = make_corpus(cfg)
    vae = load_vae(cfg, workdir) if cfgmod.track_of(cfg) == "image" else None
    ref = ref_phase(cfg, corpus, workdir)
    pairs = build_pairs(cfg, corpus, vae, ref)
    tcfg = cfgmod.to_train_config(cfg)
    weights = cfgmod.to_loss_weights(cfg)
    state = training.init_train_state(
        teacher, cond, tcfg, weights, repa_head=repa_head,
        ref_dim=cfg["net"]["ref_dim"], lora_rank=cfg["net"]["lora_rank"],
        lora_alpha=cfg["net"]["lora_alpha"], config=cfg)
    writer = _metrics_writer(workdir)
    training.distill_stage1(state, pairs, tcfg, on_metrics=writer)
    training.save_checkpoint(state, workdir / "stage1.ckpt")
    training.distill_stage2(state, pairs, tcfg, weights, on_metrics=writer)
    training.save_checkpoint(state, workdir / "stage2.ckpt")
    pipeline.save_bundle(workdir / "bundle.ckpt", state.generator, state.cond,
                         vae=vae, config=cfg)
    return state


def eval_phase(cfg: dict, workdir: Optional[Path] = None,
               bundle_path: Optional[Path] = None) -> EvalReport:
    """Held-out evaluation of the deployed bundle."""
    workdir = workdir or workdir_of(cfg)
    bundle = pipeline.load_bundle(bundle_path or workdir / "bundle.ckpt")
    seed = derive_seed(cfg["data"]["seed"], "eval")
    corpus = make_corpus(cfg, eval_split=True)
    if cfgmod.track_of(cfg) == "image":
        report = evaluate_image(bundle, corpus, cfgmod.to_degradation(cfg), seed)
    else:
        report = evaluate_points(bundle, corpus,
                                 tuple(cfg["data"]["noise_sigma_range"]), seed,
                                 bandwidth=cfg["eval"].get("mmd_bandwidth"))
    report.config_hash = cfgmod.run_config_hash(cfg)
    report.seed = cfg["train"]["seed"]
    (workdir / "report.json").write_text(report.to_json())
    return report


def evaluate_image(bundle, corpus: ImageCorpus, deg_cfg, seed: int,
                   step_cfg: Optional[FixedStepConfig] = None) -> EvalReport:
    """Per-sample PSNR/SSIM of restored outputs and of the bilinear LQ
    baseline against HQ."""
    from dataclasses import replace
    deg = replace(deg_cfg, seed=seed)
    lq = degrade_corpus(corpus, deg)
    sr, _ = pipeline.run_inference(bundle, lq, cfg=step_cfg)
    report = EvalReport(track="image", checkpoint_id=bundle.checkpoint_id)
    rows = {"psnr": [], "ssim": [], "psnr_bilinear": [], "ssim_bilinear": []}
    for i in range(len(corpus)):
        hq = corpus.images[i]
        rows["psnr"].append(psnr(sr[i], hq))
        rows["ssim"].append(ssim(sr[i], hq))
        rows["psnr_bilinear"].append(psnr(lq[i], hq))
        rows["ssim_bilinear"].append(ssim(lq[i], hq))
    report.per_sample = rows
    return report.finalize()


def evaluate_points(bundle, corpus: PointCorpus, noise_range, seed: int,
                    bandwidth=None) -> EvalReport:
    """MMD of restored points to the clean distribution plus per-mode mass."""
    from .datapipe import degrade_points, gmm_means
    noisy = degrade_points(corpus.points, noise_range, seed)
    restored, _ = pipeline.run_inference(bundle, noisy)
    means = torch.from_numpy(gmm_means()).float()
    d2 = ((restored[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    nearest = d2.argmin(dim=1)
    report = EvalReport(track="points", checkpoint_id=bundle.checkpoint_id)
    report.per_sample = {
        "sq_dist_to_nearest_mode": d2.min(dim=1).values.tolist(),
    }
    report.extra = {
        "mmd": mmd_rbf(restored.numpy(), corpus.points.numpy(), bandwidth),
        "mmd_degraded": mmd_rbf(noisy.numpy(), corpus.points.numpy(), bandwidth),
        "mode_mass": [float((nearest == k).float().mean())
                      for k in range(len(means))],
    }
    return report.finalize()


def teacher_mmd(cfg: dict, teacher, cond, steps: Optional[int] = None,
                n: Optional[int] = None, seed: int = 123) -> float:
    """MMD between multi-step teacher samples and held-out clean data; the
    teacher-quality yardstick on the 2D track."""
    eval_cfg = cfg["eval"]
    steps = steps or eval_cfg["sampler_steps"]
    n = n or eval_cfg["n_eval"]
    samples = training.sample_teacher(teacher, steps, seed, n, (2,), cond)
    heldout = make_corpus(cfg, eval_split=True)
    return mmd_rbf(samples.numpy(), heldout.points.numpy(),
                   eval_cfg.get("mmd_bandwidth"))
