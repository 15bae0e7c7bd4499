"""Deterministic RNG derivation.

All randomness in training derives from (seed, phase, iteration, tag)
through SeedSequence, so there is no mutable RNG state to serialize:
checkpoints store the seed and iteration counters, and a resumed run
replays exactly the draws an unbroken run would make.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _as_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*parts) -> int:
    """Collapse (seed, phase, iter, ...) into one 63-bit seed."""
    ss = np.random.SeedSequence([_as_int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def make_generator(*parts) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts))
    return g


def sample_indices(n: int, batch: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randint(n, (batch,), generator=gen)


def sample_timesteps(t_min: int, t_max: int, batch: int,
                     gen: torch.Generator) -> torch.Tensor:
    """Uniform integer timesteps on {t_min..t_max}, inclusive."""
    return torch.randint(t_min, t_max + 1, (batch,), generator=gen)


def randn(shape, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(shape, generator=gen)
