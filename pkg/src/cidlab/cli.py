"""Command-line surface.

Subcommands: train-teacher, train-vae, distill, infer, eval,
check-identity, gradcheck, plot. Every subcommand takes --config <path>
and --seed <int>. Exit codes: 0 success, 1 validation failure, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import pipeline, plots, training, workflow
from .checkpoint import CheckpointError
from .config import ConfigError
from .datapipe import DivergenceError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None,
                   help="JSON run-config (defaults per track)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cidlab",
        description="One-step diffusion distillation laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    cmds = {
        "train-vae": (cmd_train_vae, "Train the toy latent codec"),
        "train-teacher": (cmd_train_teacher, "Pretrain the diffusion teacher"),
        "distill": (cmd_distill, "Run stage-1 and stage-2 distillation"),
        "infer": (cmd_infer, "One-step restoration from a bundle"),
        "eval": (cmd_eval, "Held-out evaluation report"),
        "check-identity": (cmd_check_identity,
                           "Monte-Carlo check of the score-identity substitution"),
        "gradcheck": (cmd_gradcheck, "Finite-difference gradient suite"),
        "plot": (cmd_plot, "Emit loss curves and result plots"),
    }
    for name, (fn, help_text) in cmds.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "infer":
            p.add_argument("--bundle", type=str, default=None)
            p.add_argument("--inputs", type=str, default=None,
                           help=".npy inputs; defaults to the held-out eval set")
            p.add_argument("--out", type=str, default=None)
        if name == "eval":
            p.add_argument("--bundle", type=str, default=None)
        p.set_defaults(func=fn)
    return parser


def cmd_train_vae(args) -> int:
    cfg = cfgmod.load_config(args.config, args.seed)
    if cfgmod.track_of(cfg) != "image":
        raise ConfigError("train-vae applies to the image track only")
    _, report = workflow.vae_phase(cfg)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_train_teacher(args) -> int:
    cfg = cfgmod.load_config(args.config, args.seed)
    workdir = workflow.workdir_of(cfg)
    (workdir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    teacher, _, cond, metrics = workflow.teacher_phase(cfg, workdir)
    print(f"teacher trained: {len(metrics)} iters, "
          f"final loss {metrics[-1]['loss']:.4f} -> {workdir / 'teacher.ckpt'}")
    return 0


def cmd_distill(args) -> int:
    cfg = cfgmod.load_config(args.config, args.seed)
    workdir = workflow.workdir_of(cfg)
    state = workflow.distill_phase(cfg, workdir)
    print(f"distilled: stage1={state.stage1_iter} stage2={state.stage2_iter} "
          f"iters -> {workdir / 'bundle.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    cfg = cfgmod.load_config(args.config, args.seed)
    workdir = workflow.workdir_of(cfg)
    bundle = pipeline.load_bundle(Path(args.bundle) if args.bundle
                                  else workdir / "bundle.ckpt")
    if args.inputs:
        inputs = torch.from_numpy(np.load(args.inputs)).float()
    else:
        corpus = workflow.make_corpus(cfg, eval_split=True)
        if cfgmod.track_of(cfg) == "image":
            from .datapipe import degrade_corpus
            from .seeding import derive_seed
            from dataclasses import replace
            deg = replace(cfgmod.to_degradation(cfg),
                          seed=derive_seed(cfg["data"]["seed"], "eval"))
            inputs = degrade_corpus(corpus, deg)
        else:
            from .datapipe import degrade_points
            from .seeding import derive_seed
            inputs = degrade_points(corpus.points,
                                    tuple(cfg["data"]["noise_sigma_range"]),
                                    derive_seed(cfg["data"]["seed"], "eval"))
    outputs, info = pipeline.run_inference(bundle, inputs)
    out_dir = Path(args.out) if args.out else workdir / "outputs"
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "outputs.npy", outputs.numpy())
    if bundle.track == "image":
        _write_pngs(outputs, out_dir)
    print(json.dumps({"n": len(outputs),
                      "seconds_per_item": info["seconds_per_item"],
                      "out": str(out_dir)}))
    return 0


def _write_pngs(images: torch.Tensor, out_dir: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    for i, img in enumerate(images):
        arr = (img.clamp(0, 1).permute(1, 2, 0).numpy() * 255).astype(np.uint8)
        plt.imsave(out_dir / f"{i:04d}.png", arr)


def cmd_eval(args) -> int:
    cfg = cfgmod.load_config(args.config, args.seed)
    workdir = workflow.workdir_of(cfg)
    report = workflow.eval_phase(
        cfg, workdir, bundle_path=Path(args.bundle) if args.bundle else None)
    print(json.dumps({"aggregates": report.aggregates, "extra": report.extra},
                     sort_keys=True))
    return 0


def cmd_check_identity(args) -> int:
    from . import oracle
    cfg = cfgmod.load_config(args.config, args.seed)
    dim = cfg["eval"]["identity_dim"]
    n = cfg["eval"]["identity_samples"]
    seed = cfg["train"]["seed"]
    w = oracle.random_world(dim=dim, seed=seed)
    good = oracle.mc_identity_check(
        w, lambda zt: oracle.posterior_mean(w, zt), lambda zt: zt, n, seed=seed)
    bias = np.full(dim, 1.0)
    bad = oracle.mc_identity_check(
        w, lambda zt: oracle.posterior_mean(w, zt) + bias,
        lambda zt: np.ones_like(zt), n, seed=seed)
    out = {"optimal_generator": good.to_dict(),
           "biased_generator": bad.to_dict(),
           "identity_holds": good.sigmas <= 3.0,
           "negative_control_detected": bad.sigmas > 3.0}
    print(json.dumps(out, sort_keys=True))
    return 0 if out["identity_holds"] and out["negative_control_detected"] else 1


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    cfgmod.load_config(args.config, args.seed)  # validate only
    results = run_suite()
    ok = True
    for name, err in sorted(results.items()):
        passed = err < 1e-4
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:28s} max rel err {err:.3e}")
    return 0 if ok else 1


def cmd_plot(args) -> int:
    cfg = cfgmod.load_config(args.config, args.seed)
    workdir = workflow.workdir_of(cfg)
    plot_dir = workdir / "plots"
    plot_dir.mkdir(exist_ok=True)
    made = []
    metrics_path = workdir / "metrics.jsonl"
    if metrics_path.exists():
        rows = plots.read_metrics(metrics_path)
        if rows:
            made.append(plots.plot_loss_curves(rows, plot_dir / "losses.png"))
    bundle_path = workdir / "bundle.ckpt"
    if bundle_path.exists():
        bundle = pipeline.load_bundle(bundle_path)
        corpus = workflow.make_corpus(cfg, eval_split=True)
        from .seeding import derive_seed
        if cfgmod.track_of(cfg) == "points":
            from .datapipe import degrade_points
            noisy = degrade_points(corpus.points,
                                   tuple(cfg["data"]["noise_sigma_range"]),
                                   derive_seed(cfg["data"]["seed"], "eval"))
            restored, _ = pipeline.run_inference(bundle, noisy)
            made.append(plots.plot_scatter_overlay(
                corpus.points, restored, plot_dir / "scatter.png", degraded=noisy))
        else:
            from dataclasses import replace
            from .datapipe import degrade_corpus
            deg = replace(cfgmod.to_degradation(cfg),
                          seed=derive_seed(cfg["data"]["seed"], "eval"))
            lq = degrade_corpus(corpus, deg)
            sr, _ = pipeline.run_inference(bundle, lq)
            made.append(plots.plot_image_grid(lq, sr, corpus.images,
                                              plot_dir / "grid.png"))
    print(json.dumps({"plots": [str(p) for p in made]}))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 0 for --help, 2 for usage errors; usage errors are
        # validation failures here.
        return 0 if e.code == 0 else 1
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DivergenceError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
