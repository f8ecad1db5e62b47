"""Test-time-augmented ensemble inference and labelmap merging.

Prediction averages sigmoid outputs over every checkpoint and every
member of a 16-element transform group: the four axial quarter-turns,
each with and without an x flip, each with and without a z flip. The
mean probability map is thresholded into region masks, rebuilt into a
labelmap, and two labelmaps from different ensembles can be merged
voxelwise with an edema arbitration rule that never touches the first
map's enhancing or necrotic voxels.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .preprocess import pad_to_multiple
from .tensornet import Tensor, load_params
from .unet3d import ArchConfig, ModelParams, build_model, forward
from .volio import (
    VALID_LABELS,
    LabelMap,
    RegionMasks,
    RegionProbs,
    Volume4D,
    regions_to_labelmap,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TTATransform:
    """One rigid axial-plane augmentation: rotate, then flip.

    The y flip is redundant (it equals a half-turn plus an x flip), so
    canonical transforms always carry flip_y=False; canonical() rewrites
    any combination into that form.
    """

    axial_rotation: int = 0  # quarter-turns in the (y, x) plane
    flip_y: bool = False
    flip_x: bool = False
    flip_z: bool = False

    def __post_init__(self):
        if self.axial_rotation not in (0, 1, 2, 3):
            raise ValueError(f"axial_rotation must be 0..3, got {self.axial_rotation}")

    def canonical(self) -> "TTATransform":
        """Fold the y flip into the rotation and the x flip.

        A y flip equals a half-turn followed by an x flip, so it adds
        two quarter-turns and toggles flip_x.
        """
        if not self.flip_y:
            return TTATransform(self.axial_rotation, False, self.flip_x, self.flip_z)
        return TTATransform((self.axial_rotation + 2) % 4, False, not self.flip_x, self.flip_z)


def enumerate_tta() -> list[TTATransform]:
    """The 16 canonical transforms, identity first."""
    return [
        TTATransform(k, False, fx, fz)
        for k in range(4)
        for fx in (False, True)
        for fz in (False, True)
    ]


def _require_square_axial(shape, k: int) -> None:
    if k % 2 and shape[-2] != shape[-1]:
        raise ValueError(f"quarter-turn needs square axial slices, got (y, x) = {shape[-2:]}")


def _act(arr: np.ndarray, t: TTATransform) -> np.ndarray:
    _require_square_axial(arr.shape, t.axial_rotation)
    out = np.rot90(arr, t.axial_rotation, axes=(-2, -1))
    if t.flip_y:
        out = np.flip(out, axis=-2)
    if t.flip_x:
        out = np.flip(out, axis=-1)
    if t.flip_z:
        out = np.flip(out, axis=-3)
    return np.ascontiguousarray(out)


def _act_inverse(arr: np.ndarray, t: TTATransform) -> np.ndarray:
    _require_square_axial(arr.shape, t.axial_rotation)
    out = arr
    if t.flip_z:
        out = np.flip(out, axis=-3)
    if t.flip_x:
        out = np.flip(out, axis=-1)
    if t.flip_y:
        out = np.flip(out, axis=-2)
    return np.ascontiguousarray(np.rot90(out, -t.axial_rotation, axes=(-2, -1)))


def _spacing_after(spacing, k: int):
    z, y, x = spacing
    return (z, x, y) if k % 2 else (z, y, x)


def apply_tta(t: TTATransform, v):
    """Transform a Volume4D or a plain (..., z, y, x) array."""
    if isinstance(v, Volume4D):
        data = _act(v.data, t)
        return Volume4D.from_array(data, spacing_mm=_spacing_after(v.header.spacing_mm, t.axial_rotation))
    return _act(np.asarray(v), t)


def invert_tta(t: TTATransform, v):
    """Undo apply_tta exactly (flips first, then the reverse rotation)."""
    if isinstance(v, Volume4D):
        data = _act_inverse(v.data, t)
        return Volume4D.from_array(data, spacing_mm=_spacing_after(v.header.spacing_mm, t.axial_rotation))
    return _act_inverse(np.asarray(v), t)


def transform_count(tta: bool, padded_dims) -> int:
    """How many transforms predict_regions will average for these dims."""
    if not tta:
        return 1
    return 16 if padded_dims[-2] == padded_dims[-1] else 8


@dataclass(frozen=True)
class EnsembleSpec:
    """Checkpoints to average, with the augmentation and threshold knobs."""

    models: tuple[ModelParams, ...]
    tta: bool = True
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise ValueError("ensemble needs at least one checkpoint")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        cfg = self.models[0].cfg
        for m in self.models[1:]:
            if m.cfg != cfg:
                raise ValueError(f"checkpoint architectures differ: {m.cfg} != {cfg}")


def load_checkpoint(path, arch: ArchConfig) -> ModelParams:
    """Read TNPK weights into a freshly built model of the given shape."""
    model = build_model(arch, np.random.default_rng(0))
    try:
        model.load_state(load_params(path))
    except ValueError as exc:
        raise ValueError(f"checkpoint {path} does not match architecture: {exc}") from None
    model.eval()
    return model


def predict_regions(spec: EnsembleSpec, v: Volume4D) -> RegionProbs:
    """Mean sigmoid output over every checkpoint and every transform.

    The volume is zero-padded to a multiple of 8 per axis; each prediction
    is made on the transformed input and mapped back through the inverse
    transform before averaging, so all passes align voxelwise. Padding is
    stripped from the mean. When the padded axial slices are non-square
    the quarter-turn transforms are skipped with a warning and the mean
    runs over the remaining ones.
    """
    cfg = spec.models[0].cfg
    if v.data.shape[0] != cfg.input_channels:
        raise ValueError(
            f"volume has {v.data.shape[0]} channels, checkpoints expect {cfg.input_channels}"
        )
    padded, record = pad_to_multiple(v, 8)
    transforms = enumerate_tta() if spec.tta else [TTATransform()]
    if padded.spatial_dims[-2] != padded.spatial_dims[-1]:
        skipped = sum(1 for t in transforms if t.axial_rotation % 2)
        if skipped:
            warnings.warn(
                f"axial slices {padded.spatial_dims[-2:]} are non-square; "
                f"skipping {skipped} quarter-turn transforms"
            )
            transforms = [t for t in transforms if t.axial_rotation % 2 == 0]

    total = np.zeros((cfg.output_channels, *padded.spatial_dims), dtype=np.float64)
    passes = 0
    for ci, model in enumerate(spec.models):
        model.eval()
        for ti, t in enumerate(transforms):
            x = apply_tta(t, padded.data)
            main, _ = forward(model, Tensor(x[None]))
            total += invert_tta(t, main.data[0])
            passes += 1
            logger.debug("prediction %d: checkpoint %d, transform %d", passes, ci, ti)
    logger.info(
        "%d predictions (%d checkpoints x %d transforms)", passes, len(spec.models), len(transforms)
    )
    mean = record.crop(total / passes)
    return RegionProbs(et=mean[0], tc=mean[1], wt=mean[2])


def binarize(p: RegionProbs, threshold: float = 0.5) -> RegionMasks:
    """Threshold probabilities into masks; exactly-at-threshold counts in."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return RegionMasks(et=p.et >= threshold, tc=p.tc >= threshold, wt=p.wt >= threshold)


def reconstruct(m: RegionMasks, spacing_mm=(1.0, 1.0, 1.0)) -> LabelMap:
    """Rebuild a labelmap from region masks (enhancing wins overlaps)."""
    return regions_to_labelmap(m, spacing_mm=spacing_mm)


def _build_merge_table() -> np.ndarray:
    # B arbitrates only A's edema boundary: it can erase A's edema (B
    # background) or add its own where A has background; labels 1 and 4
    # from A always survive
    table = np.zeros((5, 5), dtype=np.uint8)
    for a in VALID_LABELS:
        for b in VALID_LABELS:
            out = a
            if a == 2 and b == 0:
                out = 0
            elif a == 0 and b == 2:
                out = 2
            table[a, b] = out
    return table


MERGE_TABLE = _build_merge_table()  # indexed [label_a, label_b]


def merge_labelmaps(a: LabelMap, b: LabelMap) -> LabelMap:
    """Voxelwise table merge of two predictions on the same grid."""
    if a.spatial_dims != b.spatial_dims:
        raise ValueError(f"labelmap dims differ: {a.spatial_dims} != {b.spatial_dims}")
    merged = MERGE_TABLE[a.labels, b.labels]
    return LabelMap.from_array(merged, spacing_mm=a.header.spacing_mm)
