"""On-the-fly training augmentations with per-pipeline firing probabilities.

Each primitive takes an explicit numpy Generator so callers own seeding
and can replay any augmentation stream. apply_policy chains them in a
fixed order (rescale, shift, noise, drop, flip) so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volio import LabelMap, Volume4D


@dataclass(frozen=True)
class AugmentPolicy:
    p_rescale: float = 0.0
    p_shift: float = 0.0
    p_noise: float = 0.0
    p_drop: float = 0.0
    p_flip: float = 0.0
    noise_sigma: float = 0.1

    def __post_init__(self):
        for name in ("p_rescale", "p_shift", "p_noise", "p_drop", "p_flip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


# The two training pipelines fire the same primitives at different rates.
# The noise probability is a project default, not a published number.
POLICY_A = AugmentPolicy(p_rescale=0.8, p_shift=0.0, p_noise=0.2, p_drop=0.16, p_flip=0.8)
POLICY_B = AugmentPolicy(p_rescale=0.2, p_shift=0.2, p_noise=0.2, p_drop=0.0, p_flip=0.5)


def channel_rescale(v: Volume4D, rng: np.random.Generator) -> Volume4D:
    """Multiply each channel by its own factor drawn from U(0.9, 1.1)."""
    factors = rng.uniform(0.9, 1.1, size=v.data.shape[0]).astype(np.float32)
    data = v.data * factors[:, None, None, None]
    return Volume4D.from_array(data, spacing_mm=v.header.spacing_mm)


def channel_shift(v: Volume4D, rng: np.random.Generator) -> Volume4D:
    """Add a per-channel constant drawn from U(-0.1, 0.1)."""
    shifts = rng.uniform(-0.1, 0.1, size=v.data.shape[0]).astype(np.float32)
    data = v.data + shifts[:, None, None, None]
    return Volume4D.from_array(data, spacing_mm=v.header.spacing_mm)


def gaussian_noise(v: Volume4D, rng: np.random.Generator, sigma: float = 0.1) -> Volume4D:
    """Add i.i.d. centered Gaussian noise to every voxel."""
    if sigma == 0:
        return v
    noise = rng.normal(0.0, sigma, size=v.data.shape).astype(np.float32)
    return Volume4D.from_array(v.data + noise, spacing_mm=v.header.spacing_mm)


def channel_drop(v: Volume4D, rng: np.random.Generator) -> Volume4D:
    """Zero out one uniformly chosen channel."""
    n_channels = v.data.shape[0]
    if n_channels < 2:
        raise ValueError("channel_drop needs at least 2 channels")
    victim = int(rng.integers(0, n_channels))
    data = v.data.copy()
    data[victim] = 0.0
    return Volume4D.from_array(data, spacing_mm=v.header.spacing_mm)


def random_flip(
    v: Volume4D, lm: LabelMap | None, rng: np.random.Generator
) -> tuple[Volume4D, LabelMap | None]:
    """Flip each spatial axis independently with probability 1/2.

    Image and labelmap are flipped along exactly the same axes.
    """
    if lm is not None and v.spatial_dims != lm.spatial_dims:
        raise ValueError(f"image dims {v.spatial_dims} != label dims {lm.spatial_dims}")
    axes = tuple(axis for axis in range(3) if rng.random() < 0.5)
    if not axes:
        return v, lm
    data = np.flip(v.data, axis=tuple(a + 1 for a in axes))
    out_v = Volume4D.from_array(data, spacing_mm=v.header.spacing_mm)
    out_lm = None
    if lm is not None:
        out_lm = LabelMap.from_array(
            np.flip(lm.labels, axis=axes), spacing_mm=lm.header.spacing_mm
        )
    return out_v, out_lm


def apply_policy(
    v: Volume4D, lm: LabelMap, policy: AugmentPolicy, rng: np.random.Generator
) -> tuple[Volume4D, LabelMap]:
    """Fire each augmentation independently at its configured probability.

    One gate draw happens per stage regardless of the probability, so the
    RNG stream stays aligned across policies with the same seed.
    """
    if rng.random() < policy.p_rescale:
        v = channel_rescale(v, rng)
    if rng.random() < policy.p_shift:
        v = channel_shift(v, rng)
    if rng.random() < policy.p_noise:
        v = gaussian_noise(v, rng, policy.noise_sigma)
    if rng.random() < policy.p_drop:
        v = channel_drop(v, rng)
    if rng.random() < policy.p_flip:
        v, lm = random_flip(v, lm, rng)
    return v, lm
