"""Weak and strong stochastic augmentations for feature-vector inputs.

Vector-space analogs of an image pipeline: global scaling plays the geometric
role, Gaussian jitter the photometric one, coordinate dropping the occlusion
one. The weak branch is jitter only; the strong branch chains all three, so
the weak << strong severity ordering the adaptation relies on is preserved.

Every augmentation draw comes from an RNG stream derived from
(seed, epoch, branch, sample index), which makes the three views of a sample
independent of each other yet exactly reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Branch ids for derived RNG streams.
BRANCH_WEAK = 0
BRANCH_STRONG_QUERY = 1
BRANCH_STRONG_KEY = 2
BRANCH_QUEUE_INIT = 3


@dataclass(frozen=True)
class AugmentConfig:
    weak_jitter_sigma: float = 0.05
    strong_jitter_sigma: float = 0.2
    strong_drop_prob: float = 0.2
    strong_scale_range: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self) -> None:
        if self.weak_jitter_sigma < 0 or self.strong_jitter_sigma < 0:
            raise ValueError("jitter sigmas must be >= 0")
        if not 0.0 <= self.strong_drop_prob < 1.0:
            raise ValueError("strong_drop_prob must be in [0, 1)")
        lo, hi = self.strong_scale_range
        if not 0.0 < lo <= hi:
            raise ValueError("scale range must satisfy 0 < lo <= hi")

    def to_dict(self) -> dict:
        return {
            "weak_jitter_sigma": self.weak_jitter_sigma,
            "strong_jitter_sigma": self.strong_jitter_sigma,
            "strong_drop_prob": self.strong_drop_prob,
            "strong_scale_lo": self.strong_scale_range[0],
            "strong_scale_hi": self.strong_scale_range[1],
        }


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic child generator for a (seed, key...) address."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def sample_rng(seed: int, epoch: int, branch: int, sample_index: int) -> np.random.Generator:
    """RNG stream for one augmentation draw of one sample."""
    return derive_rng(seed, epoch, branch, sample_index)


def weak_augment(x: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """x + Gaussian jitter with the weak sigma."""
    x = np.asarray(x, dtype=np.float64)
    return x + rng.normal(0.0, 1.0, size=x.shape) * config.weak_jitter_sigma


def strong_augment(x: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Scale, then jitter, then independently zero coordinates.

    Draw order (scale, jitter, drop) is part of the reproducibility contract.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = config.strong_scale_range
    out = x * rng.uniform(lo, hi)
    out = out + rng.normal(0.0, 1.0, size=x.shape) * config.strong_jitter_sigma
    keep = rng.uniform(0.0, 1.0, size=x.shape) >= config.strong_drop_prob
    return out * keep


def augment_batch(X: np.ndarray, indices: np.ndarray, config: AugmentConfig,
                  seed: int, epoch: int, branch: int) -> np.ndarray:
    """Augment each row of X with its own derived stream.

    ``indices`` are the dataset-level sample indices of the rows, so a sample
    gets the same draw regardless of how the batch was assembled.
    """
    X = np.asarray(X, dtype=np.float64)
    fn = weak_augment if branch in (BRANCH_WEAK, BRANCH_QUEUE_INIT) else strong_augment
    out = np.empty_like(X)
    for row, idx in enumerate(indices):
        out[row] = fn(X[row], config, sample_rng(seed, epoch, branch, int(idx)))
    return out
