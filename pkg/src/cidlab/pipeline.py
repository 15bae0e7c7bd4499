"""The scheduler-free inference pipeline.

A deployment bundle holds the (optionally LoRA-merged) generator, the
latent codec on the image track, the fixed condition embeddings, the
schedule, and the one-step config — nothing else. Inference is fully
deterministic: encode LQ, one restoration evaluation, decode.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import torch

from . import checkpoint as ckpt
from .datapipe import ToyVAE
from .diffusion import Condition, FixedStepConfig
from .nets import GeneratorNet, LoRAAdapter, lora_merge, build_backbone
from .training import (TrainState, _cond_from_meta, _condition_meta,
                       _sched_from_meta, _schedule_meta)


@dataclass
class InferenceBundle:
    generator: GeneratorNet
    cond: Condition
    vae: Optional[ToyVAE] = None
    config_hash: str = ""
    checkpoint_id: str = ""

    @property
    def track(self) -> str:
        return "image" if self.vae is not None else "points"


def save_bundle(path, generator: GeneratorNet, cond: Condition,
                vae: Optional[ToyVAE] = None, adapter: Optional[LoRAAdapter] = None,
                merge_adapter: bool = True, config: Optional[dict] = None) -> None:
    """Export a deployment bundle.

    With ``adapter`` given, ``merge_adapter`` folds the low-rank delta into
    the generator weights; otherwise the adapter ships alongside and is
    bound at load (the two load paths are forward-equivalent).
    """
    backbone = generator.net
    groups = {}
    extra = {
        "kind": "infer_bundle",
        "arch": backbone.arch,
        "schedule": _schedule_meta(generator.sched),
        "condition": _condition_meta(cond),
        "step_cfg": {"t_s": generator.step_cfg.t_s,
                     "use_fixed_coeffs": generator.step_cfg.use_fixed_coeffs},
        "config": dict(config or {}),
        "config_hash": ckpt.config_hash(dict(config or {})),
    }
    if adapter is not None and merge_adapter:
        backbone = lora_merge(backbone, adapter)
    groups["generator"] = OrderedDict(backbone.state_dict())
    if adapter is not None and not merge_adapter:
        groups["adapter"] = OrderedDict(adapter.state_dict())
        extra["lora"] = {"rank": adapter.rank, "alpha": adapter.alpha,
                         "targets": adapter.target_names}
    if vae is not None:
        groups["vae"] = OrderedDict(vae.state_dict())
        extra["vae_arch"] = vae.arch
    ckpt.save_tensors(Path(path), groups, extra)


def bundle_from_state(state: TrainState, vae: Optional[ToyVAE] = None) -> dict:
    return {"generator": state.generator, "cond": state.cond, "vae": vae,
            "config": state.config}


def load_bundle(path, expect_config: Optional[dict] = None) -> InferenceBundle:
    path = Path(path)
    manifest = ckpt.load_manifest(path)
    if manifest.get("kind") != "infer_bundle":
        raise ckpt.CheckpointError(f"not an inference bundle: {manifest.get('kind')}")
    if expect_config is not None:
        ckpt.check_config_hash(manifest, expect_config)
    groups = ckpt.load_tensors(path, manifest)
    backbone = build_backbone(manifest["arch"])
    backbone.load_state_dict(groups["generator"])
    if "adapter" in groups:
        lora = manifest["lora"]
        adapter = LoRAAdapter(backbone, rank=lora["rank"], alpha=lora["alpha"],
                              targets=lora["targets"])
        adapter.load_state_dict(groups["adapter"])
        adapter.bind(backbone)
    sched = _sched_from_meta(manifest["schedule"])
    step = manifest["step_cfg"]
    gen = GeneratorNet(backbone, sched, FixedStepConfig(
        t_s=step["t_s"], use_fixed_coeffs=step["use_fixed_coeffs"]))
    gen.eval()
    vae = None
    if "vae" in groups:
        vae = ToyVAE(**manifest["vae_arch"])
        vae.load_state_dict(groups["vae"])
        vae.eval()
    return InferenceBundle(
        generator=gen, cond=_cond_from_meta(manifest["condition"]), vae=vae,
        config_hash=manifest.get("config_hash", ""),
        checkpoint_id=ckpt.directory_digest(path)[:16],
    )


def run_inference(bundle: Union[InferenceBundle, str, Path], inputs: torch.Tensor,
                  cfg: Optional[FixedStepConfig] = None
                  ) -> Tuple[torch.Tensor, dict]:
    """Restore a batch of inputs through the one-step pipeline.

    Image track: LQ images [N, 3, H, W] in [0, 1] -> encode -> restore ->
    decode; 2D track: points [N, dim] -> restore. No sampling happens, so
    fixed checkpoint + input gives identical bytes across runs. Returns
    (outputs, info) where info carries wall-clock per item (informational
    only).
    """
    if not isinstance(bundle, InferenceBundle):
        bundle = load_bundle(bundle)
    gen = bundle.generator
    if cfg is not None:
        cfg.validate(gen.sched.T)
        gen = GeneratorNet(gen.net, gen.sched, cfg)
    start = time.perf_counter()
    with torch.no_grad():
        if bundle.track == "image":
            if inputs.ndim != 4 or inputs.shape[1] != 3:
                raise ValueError(f"expected LQ images [N,3,H,W], got {tuple(inputs.shape)}")
            z_l = bundle.vae.encode(inputs)
            if z_l.shape[1] != gen.net.channels:
                raise ckpt.CheckpointError(
                    f"latent channels {z_l.shape[1]} != generator channels "
                    f"{gen.net.channels}")
            z_g, _ = gen(z_l, bundle.cond.embed)
            out = bundle.vae.decode(z_g).clamp(0.0, 1.0)
        else:
            z_g, _ = gen(inputs, bundle.cond.embed)
            out = z_g
    elapsed = time.perf_counter() - start
    info = {"seconds_total": elapsed,
            "seconds_per_item": elapsed / max(1, len(inputs)),
            "checkpoint_id": bundle.checkpoint_id}
    return out, info
