"""Volume containers, the SEGV binary format, region algebra, and synthetic phantoms.

Axis convention everywhere: (channel, z, y, x) for 4D intensity data,
(z, y, x) for labelmaps and masks. All container types are immutable
after construction (their arrays are frozen); operations return new
objects.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

VALID_LABELS = (0, 1, 2, 4)

# Per-region channel means (T1, T1Gd, T2, FLAIR) for phantom synthesis.
# Enhancing tissue is bright in T1Gd, edema is bright in FLAIR, the
# necrotic core is dark in T1Gd, matching the qualitative MRI contrast
# the labels encode.
PHANTOM_INTENSITY = {
    "brain": (0.50, 0.50, 0.40, 0.35),
    "edema": (0.45, 0.50, 0.70, 0.90),
    "necrotic": (0.35, 0.30, 0.60, 0.55),
    "enhancing": (0.55, 0.95, 0.65, 0.70),
}
PHANTOM_NOISE_SIGMA = 0.05


class DtypeCode(Enum):
    F32 = 0
    U8 = 1


class FormatError(ValueError):
    """A file or object violates the SEGV container contract."""

    def __init__(self, fieldname: str, message: str):
        self.fieldname = fieldname
        super().__init__(f"{fieldname}: {message}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr and arr.base is not None:
        out = arr.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int, int]  # (channels, z, y, x)
    spacing_mm: tuple[float, float, float]  # (z, y, x)
    dtype_code: DtypeCode

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        if len(self.dims) != 4 or any(d < 1 for d in self.dims):
            raise FormatError("dims", f"need 4 positive extents, got {self.dims}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise FormatError("spacing_mm", f"need 3 positive spacings, got {self.spacing_mm}")
        if not isinstance(self.dtype_code, DtypeCode):
            raise FormatError("dtype_code", f"unknown dtype code {self.dtype_code!r}")

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.dims[1:]

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))


@dataclass(eq=False)
class Volume4D:
    """Multi-channel float32 intensity volume."""

    header: VolumeHeader
    data: np.ndarray  # float32, shape == header.dims

    def __post_init__(self):
        if self.header.dtype_code is not DtypeCode.F32:
            raise FormatError("dtype_code", "Volume4D requires F32")
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != self.header.dims:
            raise FormatError("data", f"shape {arr.shape} != header dims {self.header.dims}")
        if not np.isfinite(arr).all():
            raise FormatError("data", "non-finite intensity values")
        self.data = _frozen(arr)

    @classmethod
    def from_array(cls, data, spacing_mm=(1.0, 1.0, 1.0)) -> "Volume4D":
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise FormatError("data", f"expected 4 axes (c,z,y,x), got {arr.ndim}")
        header = VolumeHeader(arr.shape, spacing_mm, DtypeCode.F32)
        return cls(header, arr)

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.header.spatial_dims

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Volume4D)
            and self.header == other.header
            and np.array_equal(self.data, other.data)
        )


@dataclass(eq=False)
class LabelMap:
    """Single-channel uint8 volume with labels in {0, 1, 2, 4}."""

    header: VolumeHeader
    labels: np.ndarray  # uint8, shape == header.spatial_dims

    def __post_init__(self):
        if self.header.dtype_code is not DtypeCode.U8:
            raise FormatError("dtype_code", "LabelMap requires U8")
        if self.header.dims[0] != 1:
            raise FormatError("dims", f"LabelMap requires 1 channel, got {self.header.dims[0]}")
        arr = np.asarray(self.labels, dtype=np.uint8)
        if arr.shape != self.header.spatial_dims:
            raise FormatError(
                "labels", f"shape {arr.shape} != header spatial dims {self.header.spatial_dims}"
            )
        bad = np.setdiff1d(np.unique(arr), np.asarray(VALID_LABELS, dtype=np.uint8))
        if bad.size:
            raise FormatError("labels", f"invalid label values {bad.tolist()}")
        self.labels = _frozen(arr)

    @classmethod
    def from_array(cls, labels, spacing_mm=(1.0, 1.0, 1.0)) -> "LabelMap":
        arr = np.asarray(labels, dtype=np.uint8)
        if arr.ndim != 3:
            raise FormatError("labels", f"expected 3 axes (z,y,x), got {arr.ndim}")
        header = VolumeHeader((1, *arr.shape), spacing_mm, DtypeCode.U8)
        return cls(header, arr)

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.header.spatial_dims

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LabelMap)
            and self.header == other.header
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(eq=False)
class RegionMasks:
    """Binary (enhancing, core, whole) tumor masks on one spatial grid.

    When derived from a labelmap the masks nest: et <= tc <= wt voxelwise.
    Raw masks from thresholded network output need not nest.
    """

    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=bool) for a in (self.et, self.tc, self.wt)]
        if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
            raise ValueError(
                f"mask shape mismatch: {arrs[0].shape}, {arrs[1].shape}, {arrs[2].shape}"
            )
        if arrs[0].ndim != 3:
            raise ValueError(f"masks must be 3D, got {arrs[0].ndim} axes")
        self.et, self.tc, self.wt = (_frozen(a) for a in arrs)

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.et.shape

    def as_stack(self) -> np.ndarray:
        """(3, z, y, x) float32 stack in (et, tc, wt) channel order."""
        return np.stack([self.et, self.tc, self.wt]).astype(np.float32)


@dataclass(eq=False)
class RegionProbs:
    """Per-region probability volumes in [0, 1], channel order (et, tc, wt)."""

    et: np.ndarray
    tc: np.ndarray
    wt: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=np.float64) for a in (self.et, self.tc, self.wt)]
        if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
            raise ValueError(
                f"probability shape mismatch: {arrs[0].shape}, {arrs[1].shape}, {arrs[2].shape}"
            )
        for name, a in zip(("et", "tc", "wt"), arrs):
            if a.size and (a.min() < 0.0 or a.max() > 1.0):
                raise ValueError(f"{name} probabilities outside [0, 1]")
        self.et, self.tc, self.wt = (_frozen(a) for a in arrs)

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.et.shape


# ---------------------------------------------------------------------------
# SEGV container format
# ---------------------------------------------------------------------------

SEGV_MAGIC = b"SEGV"
SEGV_VERSION = 1
_HEADER = struct.Struct("<4sHBB4I3f")  # magic, version, dtype, reserved, dims, spacing


def write_segvol(v: Volume4D | LabelMap, path) -> None:
    """Serialize a volume or labelmap to the SEGV container."""
    if isinstance(v, Volume4D):
        dtype_code, payload = DtypeCode.F32, v.data.astype("<f4").tobytes()
    elif isinstance(v, LabelMap):
        dtype_code, payload = DtypeCode.U8, v.labels.astype(np.uint8).tobytes()
    else:
        raise TypeError(f"cannot serialize {type(v).__name__}")
    head = _HEADER.pack(
        SEGV_MAGIC,
        SEGV_VERSION,
        dtype_code.value,
        0,
        *v.header.dims,
        *(np.float32(s) for s in v.header.spacing_mm),
    )
    Path(path).write_bytes(head + payload)


def read_segvol(path) -> Volume4D | LabelMap:
    """Decode a SEGV file; exact inverse of write_segvol."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("header", f"file too short ({len(raw)} bytes)")
    magic, version, code, reserved, c, z, y, x, sz, sy, sx = _HEADER.unpack_from(raw)
    if magic != SEGV_MAGIC:
        raise FormatError("magic", f"expected {SEGV_MAGIC!r}, got {magic!r}")
    if version != SEGV_VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if reserved != 0:
        raise FormatError("reserved", f"expected 0, got {reserved}")
    try:
        dtype_code = DtypeCode(code)
    except ValueError:
        raise FormatError("dtype_code", f"unknown dtype code {code}") from None
    dims = (c, z, y, x)
    header = VolumeHeader(dims, (sz, sy, sx), dtype_code)
    itemsize = 4 if dtype_code is DtypeCode.F32 else 1
    expected = header.voxel_count * itemsize
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise FormatError("payload", f"expected {expected} bytes, got {len(payload)}")
    if dtype_code is DtypeCode.F32:
        data = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        return Volume4D(header, data)
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(dims[1:]).copy()
    return LabelMap(header, labels)


# ---------------------------------------------------------------------------
# Region algebra
# ---------------------------------------------------------------------------


def labelmap_to_regions(lm: LabelMap) -> RegionMasks:
    """Cluster labels into the nested (enhancing, core, whole) masks."""
    lab = lm.labels
    et = lab == 4
    tc = et | (lab == 1)
    wt = tc | (lab == 2)
    return RegionMasks(et, tc, wt)


def regions_to_labelmap(m: RegionMasks, spacing_mm=(1.0, 1.0, 1.0)) -> LabelMap:
    """Rebuild a labelmap from region masks.

    Enhancing tumor is kept as-is (label 4); the necrotic/non-enhancing
    part is core minus enhancing (label 1) and edema is whole minus core
    (label 2). Where masks fail to nest, the enhancing mask wins, then
    core, then whole.
    """
    labels = np.where(m.et, 4, np.where(m.tc, 1, np.where(m.wt, 2, 0)))
    return LabelMap.from_array(labels.astype(np.uint8), spacing_mm)


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------


def generate_phantom(seed: int, dims) -> tuple[Volume4D, LabelMap]:
    """Deterministic synthetic 4-channel brain with a nested tumor.

    Concentric ellipsoids around a jittered center: healthy brain tissue,
    edema, then a tumor core whose outer shell enhances (label 4) around
    a necrotic center (label 1). Background stays exactly zero so the
    brain bounding box is well defined.

    dims is the spatial (z, y, x) extent; every component must be >= 16.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 16 for d in dims):
        raise ValueError(f"phantom dims must be 3 extents >= 16, got {dims}")
    rng = np.random.default_rng(seed)
    center = np.array(dims) / 2.0 + rng.uniform(-0.03, 0.03, 3) * np.array(dims)
    axis_scale = rng.uniform(0.9, 1.1, 3)
    unit = min(dims) / 2.0

    zz, yy, xx = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    coords = np.stack([zz, yy, xx], axis=-1).astype(np.float64)
    # normalized elliptical radius, same shape for all nested regions
    r = np.sqrt((((coords - center) / axis_scale) ** 2).sum(axis=-1)) / unit

    brain = r <= 0.85
    wt = r <= 0.55
    tc = r <= 0.35
    core = r <= 0.18

    labels = np.zeros(dims, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 4  # enhancing shell ...
    labels[core] = 1  # ... around a necrotic center

    data = np.zeros((4, *dims), dtype=np.float64)
    region_masks = {
        "brain": brain & ~wt,
        "edema": wt & ~tc,
        "enhancing": tc & ~core,
        "necrotic": core,
    }
    for name, mask in region_masks.items():
        for ch, mean in enumerate(PHANTOM_INTENSITY[name]):
            data[ch][mask] = mean
    noise = rng.normal(0.0, PHANTOM_NOISE_SIGMA, data.shape)
    data[:, brain] += noise[:, brain]
    # keep brain voxels strictly positive so background-0 stays meaningful
    data[:, brain] = np.clip(data[:, brain], 0.05, 2.0)

    vol = Volume4D.from_array(data.astype(np.float32))
    lm = LabelMap.from_array(labels)
    return vol, lm
