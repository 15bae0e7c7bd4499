"""Independent ground-truth machinery: an analytic linear-Gaussian world
for the score-identity substitution, brute-force recomputations, and the
central finite-difference gradient checker.

The identity under test: at the MSE-optimal generator (the posterior
mean), E<f(z_t), z_g> equals E<f(z_t), z_h> over the joint (z_h, eps)
distribution, for any fixed map f. It is verified by paired Monte-Carlo
estimation in a world where the posterior mean is closed-form, because no
trained network attains exact optimality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class LinGaussWorld:
    """Gaussian prior z_h ~ N(mu0, Sigma0) diffused by z_t = a*z_h + b*eps.

    The conditional mean E[z_h | z_t] is the affine map
    mu0 + a * Sigma0 (a^2 Sigma0 + b^2 I)^{-1} (z_t - a*mu0).
    """

    mu0: np.ndarray
    Sigma0: np.ndarray
    alpha_bar: float
    beta_bar: float

    def __post_init__(self):
        d = self.mu0.shape[0]
        if self.Sigma0.shape != (d, d):
            raise ValueError("Sigma0 must be d x d")
        if not np.allclose(self.Sigma0, self.Sigma0.T, atol=1e-12):
            raise ValueError("Sigma0 must be symmetric")
        eigvals = np.linalg.eigvalsh(self.Sigma0)
        if eigvals.min() <= 0:
            raise ValueError("Sigma0 must be positive definite")

    @property
    def dim(self) -> int:
        return self.mu0.shape[0]

    def sample_joint(self, n: int, rng: np.random.Generator):
        """Draw paired (z_h, eps, z_t), each [n, d]."""
        chol = np.linalg.cholesky(self.Sigma0)
        z_h = self.mu0 + rng.standard_normal((n, self.dim)) @ chol.T
        eps = rng.standard_normal((n, self.dim))
        z_t = self.alpha_bar * z_h + self.beta_bar * eps
        return z_h, eps, z_t


def random_world(dim: int = 8, seed: int = 0, alpha_bar: float = 0.7,
                 beta_bar: float = 0.6) -> LinGaussWorld:
    """Random SPD world for identity checks (A A^T + I keeps it well
    conditioned)."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    return LinGaussWorld(
        mu0=rng.standard_normal(dim),
        Sigma0=a @ a.T + np.eye(dim),
        alpha_bar=alpha_bar,
        beta_bar=beta_bar,
    )


def posterior_mean(w: LinGaussWorld, z_t: np.ndarray) -> np.ndarray:
    """Analytic MMSE generator m(z_t); accepts [d] or [n, d]."""
    z = np.atleast_2d(z_t)
    a, b = w.alpha_bar, w.beta_bar
    cov_t = a * a * w.Sigma0 + b * b * np.eye(w.dim)
    gain = a * w.Sigma0 @ np.linalg.inv(cov_t)
    m = w.mu0 + (z - a * w.mu0) @ gain.T
    return m[0] if z_t.ndim == 1 else m


@dataclass(frozen=True)
class IdentityReport:
    """Paired Monte-Carlo estimates of the two inner-product expectations."""

    lhs: float       # E<f(z_t), z_g>
    rhs: float       # E<f(z_t), z_h>
    diff: float
    stderr: float    # paired-sample standard error of the difference
    n_samples: int

    @property
    def sigmas(self) -> float:
        return abs(self.diff) / max(self.stderr, 1e-300)

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "diff": self.diff,
                "stderr": self.stderr, "n_samples": self.n_samples,
                "sigmas": self.sigmas}


def mc_identity_check(w: LinGaussWorld, generator: Callable, score_fn: Callable,
                      n_samples: int, seed: int = 0) -> IdentityReport:
    """Estimate E<f(z_t), z_g> and E<f(z_t), z_h> over paired joint draws.

    ``generator`` maps z_t [n, d] -> z_g [n, d]; ``score_fn`` is any fixed
    map z_t -> [n, d]. Paired sampling (same draws in both expectations)
    minimizes the variance of the difference.
    """
    if n_samples < 1000:
        raise ValueError("n_samples < 1000 makes the standard error meaningless")
    rng = np.random.default_rng(seed)
    z_h, _, z_t = w.sample_joint(n_samples, rng)
    z_g = generator(z_t)
    f = score_fn(z_t)
    lhs_terms = np.einsum("nd,nd->n", f, z_g)
    rhs_terms = np.einsum("nd,nd->n", f, z_h)
    d = lhs_terms - rhs_terms
    return IdentityReport(
        lhs=float(lhs_terms.mean()),
        rhs=float(rhs_terms.mean()),
        diff=float(d.mean()),
        stderr=float(d.std(ddof=1) / np.sqrt(n_samples)),
        n_samples=n_samples,
    )


def finite_diff_grad(loss_fn: Callable[[], torch.Tensor],
                     params: Sequence[torch.Tensor],
                     step: float = 1e-5) -> float:
    """Compare autograd gradients against central finite differences.

    ``loss_fn`` must be a scalar-valued closure over ``params`` (double
    precision leaf tensors with requires_grad). Returns the max per
    coordinate of |analytic - fd| / max(|fd|, 1e-6), so a gradient that is
    wrong by a factor of two reports an error near 1.
    """
    params = list(params)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError("non-finite loss at the evaluation point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    max_err = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(loss_fn())
                flat[i] = orig - step
                lo = float(loss_fn())
                flat[i] = orig
                fd = (hi - lo) / (2.0 * step)
                err = abs(analytic.reshape(-1)[i].item() - fd) / max(abs(fd), 1e-6)
                max_err = max(max_err, err)
    return max_err


def brute_force_alpha_bar(beta: Sequence[float], t: int) -> float:
    """Direct running product sqrt(prod_{s<=t}(1 - beta_s)); the oracle for
    schedule construction (no logs, no tricks)."""
    if t > len(beta):
        raise ValueError(f"t={t} exceeds schedule length {len(beta)}")
    prod = 1.0
    for s in range(t):
        prod *= 1.0 - float(beta[s])
    return float(np.sqrt(prod))
