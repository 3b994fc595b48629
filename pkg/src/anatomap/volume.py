"""Volumes, patches, coordinate conversions and the VOL1 file format.

Axis order is (z, y, x) everywhere; physical points are always in
millimeters. Intensities are 32-bit floats, either raw Hounsfield
units or normalized to [0, 1].
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import errors

RAW_HU = "raw_hu"
NORMALIZED = "normalized"
MASK = "mask"

# segmental linear intensity map: control points in HU and their images
HU_POINTS = np.array([-1000.0, -200.0, 200.0, 1500.0], dtype=np.float64)
NORM_POINTS = np.array([0.0, 0.2, 0.8, 1.0], dtype=np.float64)


@dataclass(frozen=True)
class Spacing:
    """Physical size of one voxel in mm, axis order (z, y, x)."""

    z: float
    y: float
    x: float

    def __post_init__(self):
        for v in (self.z, self.y, self.x):
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"spacing must be positive and finite, got {self}")

    def as_array(self):
        return np.array([self.z, self.y, self.x], dtype=np.float64)

    @classmethod
    def of(cls, value):
        if isinstance(value, Spacing):
            return value
        z, y, x = (float(v) for v in value)
        return cls(z, y, x)


@dataclass
class Volume:
    """A 3D scalar field with physical voxel spacing."""

    data: np.ndarray
    spacing: Spacing
    domain: str = RAW_HU

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.spacing = Spacing.of(self.spacing)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with positive shape, got {self.data.shape}")
        if self.domain not in (RAW_HU, NORMALIZED):
            raise ValueError(f"unknown intensity domain {self.domain!r}")
        if self.domain == NORMALIZED:
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < -1e-6 or hi > 1.0 + 1e-6:
                raise ValueError(f"normalized volume has values outside [0,1]: [{lo}, {hi}]")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Patch:
    """An axis-aligned cube cut from a volume, zero-padded at borders."""

    data: np.ndarray
    centroid: np.ndarray  # voxel index of the patch center in the source volume
    spacing: Spacing

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.centroid = np.asarray(self.centroid, dtype=np.int64)
        self.spacing = Spacing.of(self.spacing)
        if any(s % 4 for s in self.data.shape):
            raise ValueError(f"patch sides must be divisible by 4, got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


def normalize_hu(volume):
    """Map raw HU intensities onto [0, 1] through the segmental linear curve.

    Control points: -1000 -> 0, -200 -> 0.2, 200 -> 0.8, 1500 -> 1;
    values outside the range clamp to the end values.
    """
    if volume.domain != RAW_HU:
        raise ValueError(f"normalize_hu expects a {RAW_HU} volume, got {volume.domain}")
    mapped = np.interp(volume.data.astype(np.float64), HU_POINTS, NORM_POINTS)
    return Volume(mapped.astype(np.float32), volume.spacing, NORMALIZED)


def extract_patch(volume, center, size):
    """Cut the cube of ``size`` voxels centered at ``center``.

    Regions outside the volume are zero-filled. The patch records its
    centroid (= ``center``) in source-volume voxel coordinates.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    spacing = volume.spacing if isinstance(volume, Volume) else Spacing(1, 1, 1)
    center = np.asarray(center, dtype=np.int64)
    size = tuple(int(s) for s in size)
    for i in range(3):
        if size[i] > data.shape[i]:
            raise errors.SizeTooLarge(
                f"patch size {size} exceeds volume shape {data.shape}")
    if any(center[i] < 0 or center[i] >= data.shape[i] for i in range(3)):
        raise ValueError(f"patch center {tuple(center)} outside volume {data.shape}")

    out = np.zeros(size, dtype=np.float32)
    start = [int(center[i]) - size[i] // 2 for i in range(3)]
    src_lo = [max(0, start[i]) for i in range(3)]
    src_hi = [min(data.shape[i], start[i] + size[i]) for i in range(3)]
    dst_lo = [src_lo[i] - start[i] for i in range(3)]
    dst_hi = [dst_lo[i] + (src_hi[i] - src_lo[i]) for i in range(3)]
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
        data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    return Patch(out, center, spacing)


def voxel_to_phys(idx, spacing):
    """Voxel indices -> physical mm (componentwise multiply)."""
    return np.asarray(idx, dtype=np.float64) * Spacing.of(spacing).as_array()


def phys_to_voxel(point, spacing):
    """Physical mm -> voxel index, rounding to nearest with ties toward
    the lower index."""
    t = np.asarray(point, dtype=np.float64) / Spacing.of(spacing).as_array()
    return np.ceil(t - 0.5).astype(np.int64)


# -- VOL1 files ---------------------------------------------------------

def _paths(header_path):
    p = Path(header_path)
    return p, p.with_suffix(".raw")


def save_volume(volume, header_path):
    """Write a VOL1 pair: JSON header + little-endian float32 raw file."""
    hp, rp = _paths(header_path)
    header = {
        "shape": list(volume.data.shape),
        "spacing": [volume.spacing.z, volume.spacing.y, volume.spacing.x],
        "domain": volume.domain,
    }
    hp.write_text(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
    rp.write_bytes(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    return hp


def load_volume(header_path):
    hp, rp = _paths(header_path)
    header = json.loads(hp.read_text())
    shape = tuple(header["shape"])
    raw = rp.read_bytes()
    n = int(np.prod(shape))
    if len(raw) != 4 * n:
        raise ValueError(f"{rp}: raw file holds {len(raw)} bytes, header implies {4 * n}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return Volume(data, Spacing.of(header["spacing"]), header["domain"])


def save_mask(mask, spacing, header_path):
    """Write a binary mask with the VOL1 header convention, bit-packed."""
    hp, rp = _paths(header_path)
    mask = np.asarray(mask, dtype=bool)
    spacing = Spacing.of(spacing)
    header = {
        "shape": list(mask.shape),
        "spacing": [spacing.z, spacing.y, spacing.x],
        "domain": MASK,
    }
    hp.write_text(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
    rp.write_bytes(np.packbits(mask.ravel()).tobytes())
    return hp


def load_mask(header_path):
    hp, rp = _paths(header_path)
    header = json.loads(hp.read_text())
    if header["domain"] != MASK:
        raise ValueError(f"{hp}: expected a mask file, got domain {header['domain']!r}")
    shape = tuple(header["shape"])
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(rp.read_bytes(), dtype=np.uint8), count=n)
    return bits.astype(bool).reshape(shape), Spacing.of(header["spacing"])
