"""Patch augmentation: rotation, elastic warp, additive noise.

Each augmentation carries an invertible-enough point map. The forward
map sends a voxel of the input patch to its location in the augmented
patch; resampling uses the matching backward map, so the two stay
consistent up to the (small, smooth) elastic self-interaction term.
For rotation-only transforms the maps are exact inverses.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .volume import Patch


@dataclass(frozen=True)
class AugmentConfig:
    rot_deg: float = 10.0          # uniform per-axis rotation range, degrees
    elastic_sigma_vox: float = 4.0  # smoothing of the displacement field
    elastic_max_vox: float = 3.0    # max displacement magnitude, voxels
    noise_sigma: float = 0.03       # additive Gaussian noise, intensity units


def rotation_matrix(angles_deg):
    """Rotation acting on (z, y, x) coordinate vectors, composed z*y*x."""
    az, ay, ax = (math.radians(a) for a in angles_deg)
    cz, sz = math.cos(az), math.sin(az)
    cy, sy = math.cos(ay), math.sin(ay)
    cx, sx = math.cos(ax), math.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass
class AugmentTransform:
    """Rotation + elastic displacement field + noise seed, with point maps."""

    shape: tuple
    angles_deg: tuple
    displacement: np.ndarray  # (3, D, H, W) voxel offsets, sampled trilinearly
    noise_seed: int
    noise_sigma: float
    rot: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rot = rotation_matrix(self.angles_deg)
        if self.displacement.shape != (3,) + tuple(self.shape):
            raise ValueError("displacement field shape must be (3,) + patch shape")

    @classmethod
    def identity(cls, shape):
        return cls(tuple(shape), (0.0, 0.0, 0.0),
                   np.zeros((3,) + tuple(shape), np.float32), 0, 0.0)

    @property
    def center(self):
        return (np.asarray(self.shape, dtype=np.float64) - 1.0) / 2.0

    def _field_at(self, pts):
        if not self.displacement.any():
            return np.zeros_like(pts)
        coords = pts.T  # (3, N)
        return np.stack([
            map_coordinates(self.displacement[i], coords, order=1, mode="nearest")
            for i in range(3)
        ], axis=1)

    def map_points(self, pts):
        """Forward point map: input-patch voxel coords -> augmented coords."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        rotated = (pts - self.center) @ self.rot.T + self.center
        return rotated + self._field_at(rotated)

    def inverse_points(self, pts):
        """Backward map; exact inverse when the elastic field is zero."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        shifted = pts - self._field_at(pts)
        return (shifted - self.center) @ self.rot + self.center


def resample_window(data, transform, origin, size):
    """Augmented values over a sub-window, without materializing the rest.

    Returns the window ``[origin, origin+size)`` of the augmented array;
    noise is seeded per absolute voxel window so the values match what a
    full-array resample would produce only in distribution, not bitwise,
    which is all training sampling needs.
    """
    origin = np.asarray(origin, dtype=np.int64)
    grid = np.indices(size, dtype=np.float64).reshape(3, -1).T + origin
    src = transform.inverse_points(grid)
    out = map_coordinates(data, src.T, order=1, mode="constant", cval=0.0)
    out = out.reshape(size).astype(np.float32)
    if transform.noise_sigma > 0:
        rng = np.random.default_rng(transform.noise_seed)
        out = out + rng.normal(0.0, transform.noise_sigma, size).astype(np.float32)
    return out


def apply_transform(patch, transform):
    """Resample a patch under the transform's backward map and add noise."""
    shape = patch.data.shape
    out = resample_window(patch.data, transform, (0, 0, 0), shape)
    return Patch(out, patch.centroid, patch.spacing)


def sample_transform(shape, seed, config=AugmentConfig()):
    """Draw a random transform for a patch of the given shape."""
    rng = np.random.default_rng(seed)
    angles = tuple(rng.uniform(-config.rot_deg, config.rot_deg, 3))
    shape = tuple(shape)
    if config.elastic_max_vox > 0:
        fld = rng.standard_normal((3,) + shape)
        fld = np.stack([gaussian_filter(fld[i], config.elastic_sigma_vox)
                        for i in range(3)])
        mag = np.sqrt((fld * fld).sum(axis=0)).max()
        if mag > 0:
            fld *= config.elastic_max_vox / mag
        fld = fld.astype(np.float32)
    else:
        fld = np.zeros((3,) + shape, np.float32)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    return AugmentTransform(shape, angles, fld, noise_seed, config.noise_sigma)


def augment_patch(patch, seed, config=AugmentConfig()):
    """Randomly augment a patch; returns (augmented patch, transform)."""
    t = sample_transform(patch.data.shape, seed, config)
    return apply_transform(patch, t), t
