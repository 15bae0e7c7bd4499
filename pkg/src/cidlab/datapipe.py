"""Synthetic corpora, the degradation chain producing LQ counterparts, and
the toy VAE latent codec with configurable channel count.

The texture corpus deliberately maximizes high-frequency content
(checkerboards, oriented Gabor patches, sharp-edged polygons); the 2D
corpus draws from a fixed 8-mode Gaussian mixture on a circle. Every
sample derives its own RNG stream from (seed, index), so parallel and
serial generation agree.

The degradation chain (Gaussian blur -> subsample -> additive noise ->
intensity quantization -> bilinear upsample back to HQ size) keeps LQ and
HQ the same spatial size, so their latents share shape. Images are
exchanged on the 8-bit intensity grid, which makes the identity
configuration exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.path import Path as MplPath
from scipy import ndimage

from .nets import seeded
from .seeding import derive_seed

GMM_MODES = 8
GMM_RADIUS = 2.0
GMM_STD = 0.15


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class ImageSample:
    """One HQ image [3, H, W] in [0, 1] plus its procedural-generator class."""

    hq: np.ndarray
    condition_id: int


@dataclass
class ImageCorpus:
    images: torch.Tensor          # [N, 3, H, W] float32 in [0, 1]
    condition_ids: torch.Tensor   # [N] long

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, i: int) -> ImageSample:
        return ImageSample(self.images[i].numpy(), int(self.condition_ids[i]))


@dataclass
class PointCorpus:
    points: torch.Tensor          # [N, 2] float32

    def __len__(self) -> int:
        return self.points.shape[0]


def gmm_means() -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(GMM_MODES) / GMM_MODES
    return GMM_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gmm_moments() -> Tuple[np.ndarray, np.ndarray]:
    """Analytic mean and per-coordinate variance of the mixture."""
    means = gmm_means()
    mean = means.mean(axis=0)
    var = GMM_STD ** 2 + (means ** 2).mean(axis=0) - mean ** 2
    return mean, var


def _quantize8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _checkerboard(rng: np.random.Generator, size: int) -> np.ndarray:
    cell = int(rng.choice([2, 4, 8]))
    ox, oy = rng.integers(0, cell, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (((xx + ox) // cell + (yy + oy) // cell) % 2).astype(np.float64)
    c0, c1 = rng.random(3), rng.random(3)
    return c0[:, None, None] * (1 - mask) + c1[:, None, None] * mask


def _gabor(rng: np.random.Generator, size: int) -> np.ndarray:
    theta = rng.random() * np.pi
    freq = rng.uniform(0.08, 0.35)
    phase = rng.random() * 2 * np.pi
    sigma = rng.uniform(size / 8, size / 3)
    cy, cx = rng.uniform(size * 0.25, size * 0.75, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    r2 = (xx - cx) ** 2 + (yy - cy) ** 2
    wave = 0.5 + 0.5 * np.cos(2 * np.pi * freq * u + phase) * np.exp(-r2 / (2 * sigma ** 2))
    c0, c1 = rng.random(3), rng.random(3)
    return c0[:, None, None] + (c1 - c0)[:, None, None] * wave


def _polygons(rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.tile(rng.random(3)[:, None, None] * 0.3, (1, size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
    for _ in range(int(rng.integers(2, 5))):
        k = int(rng.integers(3, 7))
        center = rng.uniform(size * 0.2, size * 0.8, size=2)
        ang = np.sort(rng.random(k) * 2 * np.pi)
        rad = rng.uniform(size * 0.1, size * 0.45, size=k)
        verts = center + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        inside = MplPath(verts).contains_points(grid).reshape(size, size)
        color = rng.uniform(0.4, 1.0, size=3)
        img[:, inside] = color[:, None]
    return img


_TEXTURE_MAKERS = (_checkerboard, _gabor, _polygons)


def gen_corpus(kind: str, n: int, seed: int, size: int = 32
               ) -> Union[ImageCorpus, PointCorpus]:
    """Deterministically generate a synthetic corpus.

    ``textures`` mixes the three high-frequency image classes; ``gmm2d``
    emits points from the fixed 8-mode mixture.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if kind == "textures":
        images = np.empty((n, 3, size, size), dtype=np.float32)
        cond = np.empty(n, dtype=np.int64)
        for i in range(n):
            rng = np.random.default_rng([seed, i])
            cls = int(rng.integers(len(_TEXTURE_MAKERS)))
            images[i] = _quantize8(_TEXTURE_MAKERS[cls](rng, size))
            cond[i] = cls
        return ImageCorpus(torch.from_numpy(images), torch.from_numpy(cond))
    if kind == "gmm2d":
        means = gmm_means()
        pts = np.empty((n, 2), dtype=np.float32)
        for i in range(n):
            rng = np.random.default_rng([seed, i])
            mode = int(rng.integers(GMM_MODES))
            pts[i] = means[mode] + GMM_STD * rng.standard_normal(2)
        return PointCorpus(torch.from_numpy(pts))
    raise ValueError(f"unknown corpus kind {kind!r}")


# ---------------------------------------------------------------------------
# Degradation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma_range: Tuple[float, float] = (0.4, 1.6)
    downscale: int = 4
    noise_sigma_range: Tuple[float, float] = (0.02, 0.10)
    quant_levels: int = 32
    order_shuffle: bool = False
    seed: int = 0

    def validate(self, h: int, w: int) -> None:
        for name in ("blur_sigma_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be 0 <= lo <= hi, got ({lo}, {hi})")
        if self.downscale < 1 or h % self.downscale or w % self.downscale:
            raise ValueError(
                f"downscale {self.downscale} must divide image size ({h}, {w})"
            )
        if self.quant_levels < 2:
            raise ValueError("quant_levels must be >= 2")

    def to_dict(self) -> dict:
        return {
            "blur_sigma_range": list(self.blur_sigma_range),
            "downscale": self.downscale,
            "noise_sigma_range": list(self.noise_sigma_range),
            "quant_levels": self.quant_levels,
            "order_shuffle": self.order_shuffle,
            "seed": self.seed,
        }


def _bilinear_up(img: np.ndarray, h: int, w: int) -> np.ndarray:
    t = torch.from_numpy(img[None].astype(np.float32))
    up = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return up[0].numpy().astype(np.float64)


def degrade(x_h: Union[ImageSample, np.ndarray, torch.Tensor],
            cfg: DegradationConfig, rng: np.random.Generator) -> np.ndarray:
    """Run the mixed degradation chain on one HQ image.

    Returns the LQ image at the original HQ size (bilinear-upsampled), so
    downstream latents of the pair share shape.
    """
    img = x_h.hq if isinstance(x_h, ImageSample) else x_h
    if isinstance(img, torch.Tensor):
        img = img.numpy()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected [C, H, W], got shape {img.shape}")
    _, h, w = img.shape
    cfg.validate(h, w)

    blur_sigma = float(rng.uniform(*cfg.blur_sigma_range))
    noise_sigma = float(rng.uniform(*cfg.noise_sigma_range))

    def blur(x):
        if blur_sigma <= 0:
            return x
        return ndimage.gaussian_filter(x, sigma=(0, blur_sigma, blur_sigma),
                                       mode="reflect")

    def noise(x):
        if noise_sigma <= 0:
            return x
        return x + rng.normal(0.0, noise_sigma, size=x.shape)

    # Base order: blur before the subsample, noise after; the shuffle flag
    # randomly swaps the two (a stand-in for mixed-order pipelines).
    first, second = blur, noise
    if cfg.order_shuffle and rng.random() < 0.5:
        first, second = noise, blur

    x = first(img)
    if cfg.downscale > 1:
        x = x[:, :: cfg.downscale, :: cfg.downscale]
    x = second(x)
    levels = cfg.quant_levels - 1
    x = np.round(np.clip(x, 0.0, 1.0) * levels) / levels
    if cfg.downscale > 1:
        x = _bilinear_up(x, h, w)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def degrade_corpus(corpus: ImageCorpus, cfg: DegradationConfig) -> torch.Tensor:
    """Degrade every image, one RNG stream per (seed, index)."""
    out = torch.empty_like(corpus.images)
    for i in range(len(corpus)):
        rng = np.random.default_rng([cfg.seed, i])
        out[i] = torch.from_numpy(degrade(corpus.images[i].numpy(), cfg, rng))
    return out


def degrade_points(points: torch.Tensor, noise_sigma_range: Tuple[float, float],
                   seed: int) -> torch.Tensor:
    """2D-track degradation: additive Gaussian noise, per-sample streams."""
    out = points.clone()
    lo, hi = noise_sigma_range
    for i in range(points.shape[0]):
        rng = np.random.default_rng([seed, i])
        sigma = float(rng.uniform(lo, hi))
        out[i] = points[i] + sigma * torch.from_numpy(
            rng.standard_normal(points.shape[1])).float()
    return out


# ---------------------------------------------------------------------------
# Toy VAE
# ---------------------------------------------------------------------------

VALID_LATENT_CHANNELS = (4, 16)


class ToyVAE(torch.nn.Module):
    """Conv VAE with 4x spatial compression and c in {4, 16} latent channels.

    ``encode`` is deterministic (posterior mean); sampling happens only in
    the training objective. ``decode`` outputs are in [0, 1] via sigmoid.
    """

    def __init__(self, latent_channels: int = 16, width: int = 48):
        super().__init__()
        if latent_channels not in VALID_LATENT_CHANNELS:
            raise ValueError(
                f"latent_channels must be one of {VALID_LATENT_CHANNELS}"
            )
        self.latent_channels = latent_channels
        self.width = width
        w = width
        self.enc = torch.nn.Sequential(
            torch.nn.Conv2d(3, w, 3, stride=2, padding=1), torch.nn.SiLU(),
            torch.nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), torch.nn.SiLU(),
            torch.nn.Conv2d(2 * w, 2 * w, 3, padding=1), torch.nn.SiLU(),
        )
        self.to_mu = torch.nn.Conv2d(2 * w, latent_channels, 1)
        self.to_logvar = torch.nn.Conv2d(2 * w, latent_channels, 1)
        self.dec = torch.nn.Sequential(
            torch.nn.Conv2d(latent_channels, 2 * w, 3, padding=1), torch.nn.SiLU(),
            torch.nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1), torch.nn.SiLU(),
            torch.nn.ConvTranspose2d(w, w, 4, stride=2, padding=1), torch.nn.SiLU(),
            torch.nn.Conv2d(w, 3, 3, padding=1), torch.nn.Sigmoid(),
        )

    @property
    def arch(self) -> dict:
        return {"latent_channels": self.latent_channels, "width": self.width}

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_mu(self.enc(x))

    def encode_dist(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.enc(x)
        return self.to_mu(h), self.to_logvar(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.latent_channels:
            raise ValueError(
                f"latent has {z.shape[1]} channels, codec expects {self.latent_channels}"
            )
        return self.dec(z)


def _maybe_batch(x: torch.Tensor, ndim: int) -> Tuple[torch.Tensor, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ValueError(f"expected {ndim - 1}D or {ndim}D input, got {x.ndim}D")
    return x, False


def vae_encode(v: ToyVAE, x: torch.Tensor) -> torch.Tensor:
    """Deterministic latent (posterior mean); [3,H,W] or [B,3,H,W] input."""
    x, squeeze = _maybe_batch(x, 4)
    if x.shape[1] != 3:
        raise ValueError(f"expected 3 image channels, got {x.shape[1]}")
    with torch.no_grad():
        z = v.encode(x)
    return z[0] if squeeze else z


def vae_decode(v: ToyVAE, z: torch.Tensor) -> torch.Tensor:
    x, squeeze = _maybe_batch(z, 4)
    with torch.no_grad():
        out = v.decode(x)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class VAETrainConfig:
    iters: int = 500
    batch: int = 32
    lr: float = 2e-3
    kl_weight: float = 1e-4
    holdout_frac: float = 0.2
    width: int = 48
    seed: int = 0


def train_toy_vae(corpus: ImageCorpus, c: int, cfg: VAETrainConfig
                  ) -> Tuple[ToyVAE, dict]:
    """Train a codec at matched budget and report held-out PSNR/SSIM.

    The architecture and iteration budget are identical across channel
    counts, so runs differ only in latent capacity.
    """
    from .metrics import psnr, ssim  # local import to avoid a cycle

    n_hold = max(1, int(len(corpus) * cfg.holdout_frac))
    train_x = corpus.images[:-n_hold]
    hold_x = corpus.images[-n_hold:]

    vae = seeded(lambda: ToyVAE(latent_channels=c, width=cfg.width),
                 derive_seed(cfg.seed, c, 0))
    opt = torch.optim.AdamW(vae.parameters(), lr=cfg.lr)
    losses = []
    for it in range(cfg.iters):
        g = torch.Generator().manual_seed(derive_seed(cfg.seed, c, 1, it))
        idx = torch.randint(len(train_x), (cfg.batch,), generator=g)
        x = train_x[idx]
        mu, logvar = vae.encode_dist(x)
        std = torch.exp(0.5 * logvar)
        z = mu + std * torch.randn(mu.shape, generator=g)
        recon = vae.decode(z)
        kl = 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).mean()
        loss = ((recon - x) ** 2).mean() + cfg.kl_weight * kl
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"toy VAE (c={c}) diverged at iter {it}: loss={loss.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    with torch.no_grad():
        recon = vae.decode(vae.encode(hold_x))
    report = {
        "holdout_psnr": float(np.mean([psnr(recon[i], hold_x[i])
                                       for i in range(len(hold_x))])),
        "holdout_ssim": float(np.mean([ssim(recon[i], hold_x[i])
                                       for i in range(len(hold_x))])),
        "loss_curve": losses,
        "latent_channels": c,
    }
    return vae, report


# ---------------------------------------------------------------------------
# Paired latent datasets for distillation
# ---------------------------------------------------------------------------

@dataclass
class PairSet:
    """Aligned (z_h, z_l, h_ref) tensors feeding teacher training and both
    distillation stages; z_l and z_h always share shape."""

    z_h: torch.Tensor
    z_l: torch.Tensor
    h_ref: torch.Tensor

    def __post_init__(self):
        if self.z_h.shape != self.z_l.shape:
            raise ValueError("z_h and z_l must share shape")
        if len(self.z_h) != len(self.h_ref):
            raise ValueError("h_ref count must match pair count")

    def __len__(self) -> int:
        return self.z_h.shape[0]


def build_image_pairs(corpus: ImageCorpus, vae: ToyVAE, deg: DegradationConfig,
                      ref_encoder) -> PairSet:
    lq = degrade_corpus(corpus, deg)
    with torch.no_grad():
        z_h = vae.encode(corpus.images)
        z_l = vae.encode(lq)
        h_ref = ref_encoder.encode(corpus.images)
    return PairSet(z_h=z_h, z_l=z_l, h_ref=h_ref)


def build_point_pairs(corpus: PointCorpus, noise_sigma_range: Tuple[float, float],
                      ref_encoder, seed: int) -> PairSet:
    z_l = degrade_points(corpus.points, noise_sigma_range, seed)
    with torch.no_grad():
        h_ref = ref_encoder.encode(corpus.points)
    return PairSet(z_h=corpus.points.clone(), z_l=z_l, h_ref=h_ref)
