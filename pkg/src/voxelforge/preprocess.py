"""Intensity standardization, brain-box cropping, patch extraction, padding.

Two standardization modes exist side by side: percentile clipping with
min-max scaling, and z-scoring of the non-zero voxels. Both operate on
one channel at a time; standardize_volume maps them across channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .ranking import percentile_nearest_rank
from .volio import LabelMap, Volume4D, VolumeHeader


class DegenerateInputError(ValueError):
    """Input has no usable intensity content for the requested transform."""


class PreprocMode(Enum):
    MINMAX_CLIP = "minmax_clip"
    ZSCORE_NONZERO = "zscore_nonzero"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: inclusive min, exclusive max, (z, y, x) order."""

    min: tuple[int, int, int]
    max: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "min", tuple(int(v) for v in self.min))
        object.__setattr__(self, "max", tuple(int(v) for v in self.max))
        if len(self.min) != 3 or len(self.max) != 3:
            raise ValueError("BBox needs 3 coordinates per corner")
        if any(lo < 0 for lo in self.min) or any(lo >= hi for lo, hi in zip(self.min, self.max)):
            raise ValueError(f"degenerate box min={self.min} max={self.max}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(hi - lo for lo, hi in zip(self.min, self.max))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(lo, hi) for lo, hi in zip(self.min, self.max))


@dataclass(frozen=True)
class PreprocConfig:
    mode: PreprocMode
    patch: tuple[int, int, int] = (128, 128, 128)
    pad_multiple: int = 8

    def __post_init__(self):
        object.__setattr__(self, "mode", PreprocMode(self.mode))
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        if len(self.patch) != 3 or any(p < 8 for p in self.patch):
            raise ValueError(f"patch components must be >= 8, got {self.patch}")
        if self.pad_multiple < 1:
            raise ValueError(f"pad_multiple must be >= 1, got {self.pad_multiple}")


@dataclass(frozen=True)
class PadRecord:
    """How a volume was zero-padded, sufficient to undo it exactly."""

    orig_dims: tuple[int, int, int]
    pad_high: tuple[int, int, int]

    def crop(self, arr: np.ndarray) -> np.ndarray:
        """Strip the padding from the last three axes of arr."""
        z, y, x = self.orig_dims
        return arr[..., :z, :y, :x]


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def clip_percentile_minmax(channel: np.ndarray) -> np.ndarray:
    """Clip to the [p1, p99] of non-zero voxels, then min-max scale to [0, 1].

    The percentiles come from non-zero voxels only, but the clip and the
    affine rescale apply to every voxel, zeros included. A channel whose
    clipped range collapses maps to all zeros.
    """
    channel = np.asarray(channel)
    nz = channel[channel != 0]
    if nz.size == 0:
        raise DegenerateInputError("all-zero channel")
    p1 = percentile_nearest_rank(nz, 0.01)
    p99 = percentile_nearest_rank(nz, 0.99)
    clipped = np.clip(channel, p1, p99)
    lo = clipped.min()
    hi = clipped.max()
    if hi == lo:
        return np.zeros_like(channel, dtype=channel.dtype)
    return ((clipped - lo) / (hi - lo)).astype(channel.dtype)


def zscore_nonzero(channel: np.ndarray) -> np.ndarray:
    """Standardize non-zero voxels to zero mean, unit population std.

    Zero voxels pass through untouched, staying exactly 0.
    """
    channel = np.asarray(channel)
    mask = channel != 0
    nz = channel[mask].astype(np.float64)
    if nz.size == 0:
        raise DegenerateInputError("all-zero channel")
    mu = nz.mean()
    sigma = nz.std()  # population divisor n
    if sigma == 0:
        raise DegenerateInputError("constant non-zero intensities")
    out = channel.astype(channel.dtype, copy=True)
    out[mask] = ((nz - mu) / sigma).astype(channel.dtype)
    return out


def standardize_volume(v: Volume4D, mode: PreprocMode) -> Volume4D:
    """Apply the chosen per-channel standardization to every channel."""
    mode = PreprocMode(mode)
    fn = clip_percentile_minmax if mode is PreprocMode.MINMAX_CLIP else zscore_nonzero
    data = np.stack([fn(ch) for ch in v.data])
    return Volume4D.from_array(data, spacing_mm=v.header.spacing_mm)


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


def brain_bounding_box(v: Volume4D) -> BBox:
    """Tight box over voxels that are non-zero in any channel."""
    occupied = (v.data != 0).any(axis=0)
    if not occupied.any():
        raise DegenerateInputError("volume has no non-zero voxels")
    lo, hi = [], []
    for axis in range(3):
        hits = np.where(occupied.any(axis=tuple(a for a in range(3) if a != axis)))[0]
        lo.append(int(hits[0]))
        hi.append(int(hits[-1]) + 1)
    return BBox(tuple(lo), tuple(hi))


def crop_to_bbox(v: Volume4D | LabelMap, b: BBox):
    """Extract the box from a volume or labelmap; dims become box extents."""
    dims = v.spatial_dims
    if any(hi > d for hi, d in zip(b.max, dims)):
        raise ValueError(f"box max {b.max} exceeds volume dims {dims}")
    sl = b.slices()
    if isinstance(v, Volume4D):
        return Volume4D.from_array(v.data[(slice(None), *sl)], spacing_mm=v.header.spacing_mm)
    return LabelMap.from_array(v.labels[sl], spacing_mm=v.header.spacing_mm)


def sample_crop_offset(in_dims, patch, rng: np.random.Generator) -> tuple[int, int, int]:
    """Uniform corner for a patch-sized crop; requires in_dims >= patch."""
    if any(d < p for d, p in zip(in_dims, patch)):
        raise ValueError(f"dims {tuple(in_dims)} smaller than patch {tuple(patch)}")
    return tuple(int(rng.integers(0, d - p + 1)) for d, p in zip(in_dims, patch))


def _pad_pair_to_patch(v: Volume4D, lm: LabelMap, patch):
    """Zero-pad both inputs symmetrically up to at least the patch size."""
    deficits = [max(0, p - d) for p, d in zip(patch, v.spatial_dims)]
    if not any(deficits):
        return v, lm
    pairs = [(d // 2, d - d // 2) for d in deficits]
    data = np.pad(v.data, [(0, 0), *pairs])
    labels = np.pad(lm.labels, pairs)
    return (
        Volume4D.from_array(data, spacing_mm=v.header.spacing_mm),
        LabelMap.from_array(labels, spacing_mm=lm.header.spacing_mm),
    )


def random_crop_patch(
    v: Volume4D, lm: LabelMap, patch, rng: np.random.Generator
) -> tuple[Volume4D, LabelMap]:
    """Crop an aligned image/labelmap pair to a fixed patch at a uniform offset.

    Inputs smaller than the patch are first zero-padded symmetrically.
    """
    patch = tuple(int(p) for p in patch)
    if v.spatial_dims != lm.spatial_dims:
        raise ValueError(f"image dims {v.spatial_dims} != label dims {lm.spatial_dims}")
    v, lm = _pad_pair_to_patch(v, lm, patch)
    off = sample_crop_offset(v.spatial_dims, patch, rng)
    box = BBox(off, tuple(o + p for o, p in zip(off, patch)))
    return crop_to_bbox(v, box), crop_to_bbox(lm, box)


def prepare_case(v: Volume4D, lm: LabelMap | None, mode: PreprocMode):
    """Standardize intensities, then crop image (and labels) to the brain box.

    The box comes from the raw volume, so a standardization that moves
    zeros off zero cannot change it.
    """
    box = brain_bounding_box(v)
    out_v = crop_to_bbox(standardize_volume(v, mode), box)
    out_lm = crop_to_bbox(lm, box) if lm is not None else None
    return out_v, out_lm


# ---------------------------------------------------------------------------
# Divisibility padding
# ---------------------------------------------------------------------------


def pad_to_multiple(v: Volume4D, m: int) -> tuple[Volume4D, PadRecord]:
    """Append high-side zeros so each spatial dim is a multiple of m."""
    if m < 1:
        raise ValueError(f"multiple must be >= 1, got {m}")
    dims = v.spatial_dims
    pad = tuple((-d) % m for d in dims)
    record = PadRecord(dims, pad)
    if not any(pad):
        return v, record
    data = np.pad(v.data, [(0, 0), *[(0, p) for p in pad]])
    return Volume4D.from_array(data, spacing_mm=v.header.spacing_mm), record


def unpad(v: Volume4D, record: PadRecord) -> Volume4D:
    """Exact inverse of pad_to_multiple."""
    if v.spatial_dims != tuple(
        d + p for d, p in zip(record.orig_dims, record.pad_high)
    ):
        raise ValueError(f"dims {v.spatial_dims} do not match pad record {record}")
    return Volume4D.from_array(record.crop(v.data), spacing_mm=v.header.spacing_mm)
