"""Evaluation metrics and the evaluation report.

PSNR and SSIM follow the standard definitions (SSIM with a 7x7 Gaussian
window, K1=0.01, K2=0.03); MMD is the kernel two-sample distance used as
the 2D-track distribution-quality metric. Everything computes in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from .checkpoint import canonical_json

PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_float64(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical inputs."""
    a, b = _as_float64(a), _as_float64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode weighted window means via a sliding-window view."""
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean structural similarity with a 7x7 Gaussian window (sigma 1.5).

    Accepts [H, W] or [C, H, W]; channels are averaged. Value in [-1, 1];
    1.0 for identical inputs.
    """
    a, b = _as_float64(a), _as_float64(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"expected [H,W] or [C,H,W], got shape {a.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    vals = []
    for x, y in zip(a, b):
        mx = _window_means(x, kernel)
        my = _window_means(y, kernel)
        sxx = _window_means(x * x, kernel) - mx * mx
        syy = _window_means(y * y, kernel) - my * my
        sxy = _window_means(x * y, kernel) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def median_bandwidth(a, b) -> float:
    """Median pairwise Euclidean distance of the pooled sample."""
    pooled = np.concatenate([_as_float64(a), _as_float64(b)], axis=0)
    sq = np.sum(pooled ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    return max(med, 1e-12)


def mmd_rbf(a, b, bandwidth: Optional[float] = None, unbiased: bool = True) -> float:
    """Squared maximum mean discrepancy with an RBF kernel.

    k(x, y) = exp(-||x - y||^2 / (2 bw^2)); bandwidth defaults to the
    median heuristic on the pooled sample. The unbiased U-statistic may go
    slightly negative; the biased V-statistic is exactly zero for a == b.
    """
    x, y = _as_float64(a), _as_float64(b)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("mmd_rbf requires nonempty sample sets")
    if unbiased and (len(x) < 2 or len(y) < 2):
        raise ValueError("unbiased mmd_rbf requires at least 2 points per set")
    bw = median_bandwidth(x, y) if bandwidth is None else float(bandwidth)

    def gram(u, v):
        sq_u = np.sum(u ** 2, axis=1)[:, None]
        sq_v = np.sum(v ** 2, axis=1)[None, :]
        d2 = np.maximum(sq_u + sq_v - 2.0 * u @ v.T, 0.0)
        return np.exp(-d2 / (2.0 * bw * bw))

    kxx, kyy, kxy = gram(x, x), gram(y, y), gram(x, y)
    m, n = len(x), len(y)
    if unbiased:
        term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    else:
        term_x = kxx.mean()
        term_y = kyy.mean()
    return float(term_x + term_y - 2.0 * kxy.mean())


@dataclass
class EvalReport:
    """Per-sample and aggregate metrics; aggregates are always the mean of
    the per-sample values and are recomputable from them. Set-level metrics
    (MMD, per-mode mass) live in ``extra``."""

    track: str
    per_sample: Dict[str, List[float]] = field(default_factory=dict)
    aggregates: Dict[str, float] = field(default_factory=dict)
    extra: Dict[str, object] = field(default_factory=dict)
    config_hash: str = ""
    checkpoint_id: str = ""
    seed: int = 0

    def finalize(self) -> "EvalReport":
        self.aggregates = {k: float(np.mean(v)) for k, v in self.per_sample.items()}
        return self

    def consistent(self, atol: float = 1e-12) -> bool:
        return all(
            abs(self.aggregates[k] - float(np.mean(v))) <= atol
            for k, v in self.per_sample.items()
        )

    def to_json(self) -> str:
        return canonical_json({
            "track": self.track,
            "per_sample": self.per_sample,
            "aggregates": self.aggregates,
            "extra": self.extra,
            "config_hash": self.config_hash,
            "checkpoint_id": self.checkpoint_id,
            "seed": self.seed,
        })

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))
