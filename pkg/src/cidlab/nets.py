"""Toy network definitions: one-step generator, score network, LoRA adapters
over a shared frozen base, REPA projection head, discriminator heads over
frozen score features, and the reference encoder used as the alignment
target.

Two tracks share every contract:
  - image track: a 3-level conv U-shaped net over ``[B, C, H, W]`` latents
    (C in {4, 16}), roughly 1e5..5e5 parameters;
  - 2D track: a 4-layer MLP over ``[B, dim]`` points.

Both backbones natively predict noise; the clean-latent (x0) view is the
exact algebraic conversion from diffusion.eps_to_x0. Timestep conditioning
is a sinusoidal embedding of t concatenated with the fixed condition
embedding and added to hidden states. All forward passes treat parameters
as immutable; training owns exclusive mutation.

Tap points (fixed, named):
  - "repa": activation after the first downsampling block (conv) or the
    second linear layer (mlp) — feeds the REPA projection head.
  - "deep": the deepest encoder activation — feeds the discriminator head.
"""

from __future__ import annotations

import copy
import math
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import Condition, FixedStepConfig, NoiseSchedule, Timestep, eps_to_x0

ADAPTER_NAMES = ("real", "fake")


def seeded(builder, seed: int):
    """Run a module builder under a forked, seeded global RNG."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return builder()


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


# ---------------------------------------------------------------------------
# LoRA-aware layers and adapters
# ---------------------------------------------------------------------------

class AdaptedLinear(nn.Linear):
    """Linear layer with an optional low-rank delta slot.

    The slot is a plain attribute (A, B, scale); the adapter owns the
    parameters, the layer only consumes them during forward.
    """

    adapter: Optional[tuple] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.linear(x, self.weight, self.bias)
        if self.adapter is not None:
            a, b, scale = self.adapter
            y = y + scale * F.linear(F.linear(x, a), b)
        return y


class AdaptedConv2d(nn.Conv2d):
    """Conv layer with an optional low-rank delta slot.

    A carries the base kernel size/stride/padding with ``rank`` output
    channels; B is a 1x1 conv from rank to the base output channels, so the
    composition equals a conv with kernel (B @ A) and merging is exact.
    """

    adapter: Optional[tuple] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self._conv_forward(x, self.weight, self.bias)
        if self.adapter is not None:
            a, b, scale = self.adapter
            h = F.conv2d(x, a, None, self.stride, self.padding, self.dilation)
            y = y + scale * F.conv2d(h, b)
        return y


def _adaptable_layers(module: nn.Module) -> "Dict[str, nn.Module]":
    return {
        name: m
        for name, m in module.named_modules()
        if isinstance(m, (AdaptedLinear, AdaptedConv2d))
    }


def _matrix_dims(layer: nn.Module) -> Tuple[int, int]:
    w = layer.weight
    return w.shape[0], int(w[0].numel())


class LoRAAdapter(nn.Module):
    """Per-target-layer low-rank pairs (A: rank x in, B: out x rank).

    B is initialized to zero so a freshly created adapter is a no-op;
    scale = alpha / rank. Target layers are a declared subset of the base
    network's adaptable layers (default: all of them).
    """

    def __init__(self, base: nn.Module, rank: int = 4, alpha: float = 8.0,
                 targets: Optional[list] = None):
        super().__init__()
        available = _adaptable_layers(base)
        if targets is None:
            targets = sorted(available)
        unknown = [t for t in targets if t not in available]
        if unknown:
            raise ValueError(f"unknown target layers: {unknown}")
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.target_names = list(targets)
        self._params = nn.ParameterDict()
        for name in targets:
            layer = available[name]
            out_dim, in_dim = _matrix_dims(layer)
            if self.rank > min(out_dim, in_dim):
                raise ValueError(
                    f"rank {self.rank} exceeds min(in={in_dim}, out={out_dim}) "
                    f"for layer {name!r}"
                )
            if isinstance(layer, AdaptedConv2d):
                a = torch.empty(self.rank, *layer.weight.shape[1:])
                b = torch.zeros(layer.out_channels, self.rank, 1, 1)
            else:
                a = torch.empty(self.rank, layer.in_features)
                b = torch.zeros(layer.out_features, self.rank)
            nn.init.normal_(a, std=1.0 / math.sqrt(in_dim))
            key = self._key(name)
            self._params[key + "A"] = nn.Parameter(a)
            self._params[key + "B"] = nn.Parameter(b)

    @staticmethod
    def _key(name: str) -> str:
        return name.replace(".", "__") + ":"

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def entry(self, name: str) -> tuple:
        key = self._key(name)
        return self._params[key + "A"], self._params[key + "B"], self.scale

    def bind(self, base: nn.Module) -> None:
        """Install this adapter's slots on a compatible base network."""
        layers = _adaptable_layers(base)
        for name in self.target_names:
            layers[name].adapter = self.entry(name)

    @staticmethod
    def unbind(base: nn.Module) -> None:
        for layer in _adaptable_layers(base).values():
            layer.adapter = None


def lora_forward(layer: nn.Module, adapter: LoRAAdapter, name: str,
                 x: torch.Tensor) -> torch.Tensor:
    """Single-layer adapter-applied forward: base(x) + scale * B(A(x))."""
    prev = layer.adapter
    layer.adapter = adapter.entry(name)
    try:
        return layer(x)
    finally:
        layer.adapter = prev


def lora_merge(base: nn.Module, adapter: LoRAAdapter) -> nn.Module:
    """Return a deep copy of ``base`` with W += scale * B @ A folded in.

    The merged network is forward-equivalent to the adapter-applied one
    and carries no adapter slots (merge is applied exactly once).
    """
    merged = copy.deepcopy(base)
    LoRAAdapter.unbind(merged)
    layers = _adaptable_layers(merged)
    with torch.no_grad():
        for name in adapter.target_names:
            a, b, scale = adapter.entry(name)
            layer = layers[name]
            out_dim = layer.weight.shape[0]
            delta = b.reshape(out_dim, adapter.rank) @ a.reshape(adapter.rank, -1)
            layer.weight += scale * delta.reshape(layer.weight.shape)
    return merged


# ---------------------------------------------------------------------------
# Backbones (noise predictors with named taps)
# ---------------------------------------------------------------------------

class MlpBackbone(nn.Module):
    """4-layer MLP noise predictor for the 2D track."""

    kind = "mlp"

    def __init__(self, dim: int = 2, hidden: int = 64, cond_dim: int = 8,
                 time_dim: int = 16):
        super().__init__()
        self.dim, self.hidden = dim, hidden
        self.cond_dim, self.time_dim = cond_dim, time_dim
        self.emb_proj = nn.Linear(time_dim + cond_dim, hidden)
        self.fc_in = AdaptedLinear(dim, hidden)
        self.fc2 = AdaptedLinear(hidden, hidden)
        self.fc3 = AdaptedLinear(hidden, hidden)
        self.fc_out = AdaptedLinear(hidden, dim)
        nn.init.zeros_(self.fc_out.weight)
        nn.init.zeros_(self.fc_out.bias)

    @property
    def arch(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "hidden": self.hidden,
                "cond_dim": self.cond_dim, "time_dim": self.time_dim}

    def forward(self, x, t, c):
        t, c = _broadcast_tc(x, t, c)
        emb = torch.cat([timestep_embedding(t, self.time_dim).to(x.dtype), c], dim=-1)
        e = F.silu(self.emb_proj(emb))
        h1 = F.silu(self.fc_in(x) + e)
        h2 = F.silu(self.fc2(h1))
        h3 = F.silu(self.fc3(h2))
        eps = self.fc_out(h3)
        return eps, {"repa": h2, "deep": h3}


class ConvBackbone(nn.Module):
    """3-level conv U-shaped noise predictor for the image track."""

    kind = "conv"

    def __init__(self, channels: int = 16, width: int = 32, cond_dim: int = 8,
                 time_dim: int = 16):
        super().__init__()
        self.channels, self.width = channels, width
        self.cond_dim, self.time_dim = cond_dim, time_dim
        w = width
        self.emb_proj = nn.Linear(time_dim + cond_dim, 4 * w)
        self.enc0 = AdaptedConv2d(channels, w, 3, padding=1)
        self.down1 = AdaptedConv2d(w, 2 * w, 3, stride=2, padding=1)
        self.down2 = AdaptedConv2d(2 * w, 4 * w, 3, stride=2, padding=1)
        self.mid = AdaptedConv2d(4 * w, 4 * w, 3, padding=1)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 4, stride=2, padding=1)
        self.fuse2 = AdaptedConv2d(4 * w, 2 * w, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1)
        self.fuse1 = AdaptedConv2d(2 * w, w, 3, padding=1)
        self.out = AdaptedConv2d(w, channels, 1)
        self.stage_proj = nn.ModuleList(
            [nn.Linear(4 * w, ch) for ch in (w, 2 * w, 4 * w, 4 * w)]
        )
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def arch(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "width": self.width,
                "cond_dim": self.cond_dim, "time_dim": self.time_dim}

    def forward(self, x, t, c):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        t, c = _broadcast_tc(x, t, c)
        emb = F.silu(self.emb_proj(
            torch.cat([timestep_embedding(t, self.time_dim).to(x.dtype), c], dim=-1)
        ))

        def inject(h, i):
            return h + self.stage_proj[i](emb)[:, :, None, None]

        e = F.silu(inject(self.enc0(x), 0))
        d1 = F.silu(inject(self.down1(e), 1))
        d2 = F.silu(inject(self.down2(d1), 2))
        m = F.silu(inject(self.mid(d2), 3))
        u2 = F.silu(self.fuse2(torch.cat([self.up2(m), d1], dim=1)))
        u1 = F.silu(self.fuse1(torch.cat([self.up1(u2), e], dim=1)))
        eps = self.out(u1)
        return eps, {"repa": d1, "deep": m}


def _broadcast_tc(x: torch.Tensor, t: Timestep, c: torch.Tensor):
    batch = x.shape[0]
    if not isinstance(t, torch.Tensor):
        t = torch.full((batch,), int(t), dtype=torch.long)
    if c.ndim == 1:
        c = c.to(x.dtype).expand(batch, -1)
    return t, c


def build_backbone(arch: dict) -> nn.Module:
    kind = arch["kind"]
    spec = {k: v for k, v in arch.items() if k != "kind"}
    if kind == "mlp":
        return MlpBackbone(**spec)
    if kind == "conv":
        return ConvBackbone(**spec)
    raise ValueError(f"unknown backbone kind {kind!r}")


# ---------------------------------------------------------------------------
# Score network, shared base, generator
# ---------------------------------------------------------------------------

class ScoreNet(nn.Module):
    """Denoiser wrapper exposing both prediction spaces.

    The native output is a noise prediction; ``forward`` returns the
    clean-latent prediction f(z_t; t, c) via the exact conversion. The same
    architecture instantiates the teacher and any standalone score model.
    """

    def __init__(self, backbone: nn.Module, sched: NoiseSchedule):
        super().__init__()
        self.net = backbone
        self.sched = sched

    def predict_eps(self, z_t, t, c):
        return self.net(z_t, t, c)

    def forward(self, z_t, t, c):
        eps_hat, _ = self.net(z_t, t, c)
        return eps_to_x0(z_t, eps_hat, t, self.sched)

    def features(self, z, t, c) -> torch.Tensor:
        """Deepest encoder activation, the discriminator's input."""
        _, taps = self.net(z, t, c)
        return taps["deep"]


class SharedScoreBase(nn.Module):
    """One frozen base noise predictor hosting two switchable adapters.

    "real" and "fake" adapters share the base tensors; exactly one adapter
    is active per forward call and base tensors are never updated during
    distillation.
    """

    def __init__(self, base: nn.Module, sched: NoiseSchedule, rank: int = 4,
                 alpha: float = 8.0, targets: Optional[list] = None):
        super().__init__()
        self.base = base
        self.sched = sched
        for p in self.base.parameters():
            p.requires_grad_(False)
        if targets is None:
            # Adapt every layer wide enough to host the rank (the 2D MLP's
            # 2-wide in/out layers cannot).
            targets = sorted(
                name for name, layer in _adaptable_layers(base).items()
                if rank <= min(_matrix_dims(layer))
            )
        self.adapters = nn.ModuleDict(
            {name: LoRAAdapter(base, rank=rank, alpha=alpha, targets=targets)
             for name in ADAPTER_NAMES}
        )
        self.active: Optional[str] = None
        self.switch("real")

    def switch(self, which: str) -> None:
        if which not in self.adapters:
            raise KeyError(f"unknown adapter {which!r}; have {list(self.adapters)}")
        self.adapters[which].bind(self.base)
        self.active = which

    def adapter(self, which: str) -> LoRAAdapter:
        if which not in self.adapters:
            raise KeyError(f"unknown adapter {which!r}")
        return self.adapters[which]

    def predict_eps(self, z_t, t, c, which: Optional[str] = None):
        if which is not None and which != self.active:
            self.switch(which)
        return self.base(z_t, t, c)

    def forward(self, z_t, t, c, which: Optional[str] = None):
        eps_hat, _ = self.predict_eps(z_t, t, c, which)
        return eps_to_x0(z_t, eps_hat, t, self.sched)

    def features(self, z, t, c, which: str = "real") -> torch.Tensor:
        _, taps = self.predict_eps(z, t, c, which)
        return taps["deep"]

    def merged(self, which: str) -> nn.Module:
        return lora_merge(self.base, self.adapters[which])


def adapter_switch(s: SharedScoreBase, which: str) -> None:
    """Select the active adapter ("real" or "fake"); idempotent."""
    s.switch(which)


class GeneratorNet(nn.Module):
    """One-step restorer: noise predictor + the single-evaluation reverse
    formula.

    With a zero-initialized output head the predicted noise is zero and the
    output equals the skip-path value: 2 * z_l under fixed coefficients,
    z_l / alpha_bar(t_s) under schedule coefficients.
    """

    def __init__(self, backbone: nn.Module, sched: NoiseSchedule,
                 step_cfg: FixedStepConfig):
        super().__init__()
        step_cfg.validate(sched.T)
        self.net = backbone
        self.sched = sched
        self.step_cfg = step_cfg

    def forward(self, z_l, c) -> Tuple[torch.Tensor, torch.Tensor]:
        return generator_forward(self, z_l, self.step_cfg.t_s, c)


def generator_forward(g: GeneratorNet, z_l: torch.Tensor, t_s: int,
                      c: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run the generator at start timestep ``t_s``; returns (z_g, h_t)
    where h_t is the REPA tap activation."""
    eps_hat, taps = g.net(z_l, t_s, c)
    if g.step_cfg.use_fixed_coeffs:
        z_g = 2.0 * z_l - eps_hat
    else:
        a, b = g.sched.coeffs(t_s)
        z_g = (z_l - b * eps_hat) / a
    return z_g, taps["repa"]


# ---------------------------------------------------------------------------
# REPA projection head, discriminator head, reference encoder
# ---------------------------------------------------------------------------

def to_tokens(h: torch.Tensor) -> torch.Tensor:
    """Flatten a tap activation to [B, N, C] token form."""
    if h.ndim == 4:
        return h.flatten(2).transpose(1, 2)
    if h.ndim == 2:
        return h[:, None, :]
    raise ValueError(f"unsupported tap shape {tuple(h.shape)}")


class RepaHead(nn.Module):
    """Token-wise MLP projecting tapped activations to the reference
    encoder's feature dimension."""

    def __init__(self, tap_dim: int, ref_dim: int, hidden: int = 64):
        super().__init__()
        self.tap_dim, self.ref_dim = tap_dim, ref_dim
        self.mlp = nn.Sequential(
            nn.Linear(tap_dim, hidden), nn.SiLU(), nn.Linear(hidden, ref_dim)
        )

    def forward(self, h_t: torch.Tensor) -> torch.Tensor:
        tokens = to_tokens(h_t)
        if tokens.shape[-1] != self.tap_dim:
            raise ValueError(f"tap dim {tokens.shape[-1]} != {self.tap_dim}")
        return self.mlp(tokens)


class DiscHead(nn.Module):
    """Small head mapping frozen score features to a probability map.

    Conv variant emits [B, 1, H', W'] over spatial feature maps; the MLP
    variant emits [B, 1] for the 2D track. Outputs are strictly in (0, 1).
    """

    def __init__(self, feat_dim: int, hidden: int = 32, conv: bool = True):
        super().__init__()
        self.feat_dim = feat_dim
        self.conv = conv
        if conv:
            self.h1 = nn.Conv2d(feat_dim, hidden, 3, padding=1)
            self.h2 = nn.Conv2d(hidden, 1, 1)
        else:
            self.h1 = nn.Linear(feat_dim, hidden)
            self.h2 = nn.Linear(hidden, 1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        want_ndim = 4 if self.conv else 2
        if feats.ndim != want_ndim or feats.shape[1] != self.feat_dim:
            raise ValueError(
                f"expected [B, {self.feat_dim}, ...] with ndim {want_ndim}, "
                f"got {tuple(feats.shape)}"
            )
        return torch.sigmoid(self.h2(F.silu(self.h1(feats))))


def disc_forward(d: DiscHead, feats: torch.Tensor) -> torch.Tensor:
    return d(feats)


class RefEncoder(nn.Module):
    """Frozen-reference feature encoder (autoencoder-pretrained).

    Image variant: three stride-2 convs, features [B, D, H/8, W/8]; 2D
    variant: a two-layer MLP. ``encode`` yields the alignment target
    h_E; the paired decoder exists only for pretraining.
    """

    def __init__(self, kind: str, in_dim: int = 3, feat_dim: int = 32,
                 hidden: int = 32):
        super().__init__()
        self.kind, self.in_dim, self.feat_dim, self.hidden = kind, in_dim, feat_dim, hidden
        if kind == "conv":
            self.enc = nn.Sequential(
                nn.Conv2d(in_dim, hidden // 2, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(hidden // 2, hidden, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(hidden, feat_dim, 3, stride=2, padding=1),
            )
            self.dec = nn.Sequential(
                nn.ConvTranspose2d(feat_dim, hidden, 4, stride=2, padding=1), nn.SiLU(),
                nn.ConvTranspose2d(hidden, hidden // 2, 4, stride=2, padding=1), nn.SiLU(),
                nn.ConvTranspose2d(hidden // 2, in_dim, 4, stride=2, padding=1),
                nn.Sigmoid(),
            )
        elif kind == "mlp":
            self.enc = nn.Sequential(
                nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, feat_dim)
            )
            self.dec = nn.Sequential(
                nn.Linear(feat_dim, hidden), nn.SiLU(), nn.Linear(hidden, in_dim)
            )
        else:
            raise ValueError(f"unknown reference encoder kind {kind!r}")

    @property
    def arch(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim,
                "feat_dim": self.feat_dim, "hidden": self.hidden}

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Alignment features in token form [B, N, D]."""
        return to_tokens(self.enc(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dec(self.enc(x))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module
