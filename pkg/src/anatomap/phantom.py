"""Procedural 3D phantoms with known organ masks and extreme points.

Every subject of a cohort shares the same canonical layout; per-subject
center jitter, radius jitter, a smooth deformation field and intensity
texture make subjects differ while the cross-subject position of each
organ stays tightly distributed. Ground truth (masks, per-axis extreme
points, per-segment extreme points) is computed from the final
post-deformation masks by brute-force scan, so it is consistent with
the stored masks by construction.
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import errors
from .volume import Spacing, Volume

ROLES = ("z_min", "z_max", "y_min", "y_max", "x_min", "x_max")
AIR_HU = -1000.0
FILLER_HU = 20.0
MAX_OVERLAP_FRACTION = 0.2


@dataclass(frozen=True)
class OrganTemplate:
    name: str
    kind: str                 # ellipsoid | box | tube
    center: tuple             # canonical center, normalized (z,y,x) in [0,1]
    radii_mm: tuple           # semi-extent per axis (tube: (half_length, ry, rx))
    hu_range: tuple

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "box", "tube"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if not all(0.0 <= c <= 1.0 for c in self.center):
            raise ValueError(f"{self.name}: canonical center must lie in [0,1]^3")
        lo, hi = self.hu_range
        if not (-1000.0 <= lo <= hi <= 1500.0):
            raise ValueError(f"{self.name}: HU band must lie within [-1000, 1500]")


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (64, 64, 64)
    spacing: tuple = (3.0, 3.0, 3.0)
    organs: tuple = ()
    deform_mm: float = 3.0
    jitter_mm: float = 4.0
    radius_jitter_frac: float = 0.05
    texture_hu: float = 35.0
    filler_center: tuple = (0.5, 0.52, 0.5)
    filler_radii_mm: tuple = (82.0, 76.0, 74.0)

    def extent_mm(self):
        return np.asarray(self.shape, np.float64) * np.asarray(self.spacing, np.float64)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        organs = tuple(OrganTemplate(
            name=o["name"], kind=o["kind"], center=tuple(o["center"]),
            radii_mm=tuple(o["radii_mm"]), hu_range=tuple(o["hu_range"]))
            for o in raw.pop("organs", []))
        for key in ("shape", "spacing", "filler_center", "filler_radii_mm"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(organs=organs, **raw)


def default_spec(**overrides):
    """The standard 8-organ desk-scale layout: 64^3 voxels at 3 mm.

    Canonical centers keep enough pairwise slack that jitter up to
    ~6 mm does not push organs into overlap.
    """
    organs = overrides.pop("organs", (
        OrganTemplate("core", "ellipsoid", (0.42, 0.40, 0.40), (20.0, 17.0, 15.0), (40.0, 90.0)),
        OrganTemplate("sac", "ellipsoid", (0.38, 0.66, 0.66), (11.0, 9.0, 12.0), (-80.0, -30.0)),
        OrganTemplate("pod_l", "ellipsoid", (0.72, 0.36, 0.28), (9.0, 7.0, 7.0), (120.0, 170.0)),
        OrganTemplate("pod_r", "ellipsoid", (0.72, 0.36, 0.62), (9.0, 7.0, 7.0), (120.0, 170.0)),
        OrganTemplate("column", "tube", (0.52, 0.72, 0.42), (18.0, 7.0, 7.0), (250.0, 400.0)),
        OrganTemplate("block", "box", (0.26, 0.56, 0.32), (8.0, 7.0, 9.0), (-400.0, -300.0)),
        OrganTemplate("pearl", "ellipsoid", (0.26, 0.34, 0.62), (5.0, 5.0, 5.0), (500.0, 700.0)),
        OrganTemplate("lens", "ellipsoid", (0.72, 0.62, 0.50), (3.5, 11.0, 10.0), (150.0, 220.0)),
    ))
    return PhantomSpec(organs=organs, **overrides)


def mask_extreme_points(mask):
    """Six per-axis extreme points of a mask, lexicographic tie-break.

    Returns a role -> (z,y,x) dict; raises if the mask is empty.
    """
    idxs = np.argwhere(mask)  # C-order: rows sorted lexicographically
    if idxs.shape[0] == 0:
        raise ValueError("mask is empty")
    out = {}
    for axis, name in enumerate(("z", "y", "x")):
        col = idxs[:, axis]
        for role, val in ((f"{name}_min", col.min()), (f"{name}_max", col.max())):
            cand = idxs[col == val]
            out[role] = tuple(int(v) for v in cand[0])
    return out


@dataclass
class OrganTruth:
    mask: np.ndarray
    extremes: dict
    voxel_count: int


@dataclass
class GroundTruth:
    organs: dict
    spacing: Spacing
    shape: tuple

    def extreme_points(self, name):
        return self.organs[name].extremes

    def span_mm(self, name):
        e = self.organs[name].extremes
        return (e["z_max"][0] - e["z_min"][0]) * self.spacing.z

    def segment_slices(self, name, m):
        """Partition the organ's z-slice range into m near-equal chunks."""
        e = self.organs[name].extremes
        z0, z1 = e["z_min"][0], e["z_max"][0]
        return [c for c in np.array_split(np.arange(z0, z1 + 1), m) if len(c)]

    def segment_extremes(self, name, m):
        """Extreme points of each of m z-segments of the organ mask."""
        mask = self.organs[name].mask
        segs = []
        for chunk in self.segment_slices(name, m):
            sub = np.zeros_like(mask)
            sub[chunk[0]:chunk[-1] + 1] = mask[chunk[0]:chunk[-1] + 1]
            if not sub.any():
                raise errors.GroupingError(
                    f"{name}: z-segment {chunk[0]}..{chunk[-1]} holds no mask voxels")
            segs.append(mask_extreme_points(sub))
        return segs


def segment_count(span_mm, interval_mm):
    """Number of z-segments for a given slicing interval (at least one)."""
    if interval_mm <= 0:
        raise ValueError("slicing interval must be positive")
    return max(1, int(span_mm // interval_mm))


def _primitive_mask(kind, pts_mm, center_mm, radii):
    d = pts_mm - center_mm
    if kind == "ellipsoid":
        return ((d / radii) ** 2).sum(axis=-1) <= 1.0
    if kind == "box":
        return (np.abs(d) <= radii).all(axis=-1)
    # tube: axis along z, elliptical cross-section
    inside_z = np.abs(d[..., 0]) <= radii[0]
    inside_xy = (d[..., 1] / radii[1]) ** 2 + (d[..., 2] / radii[2]) ** 2 <= 1.0
    return inside_z & inside_xy


def _rasterize(spec, kind, center_mm, radii, disp_mm, spacing_arr):
    """Evaluate a warped primitive indicator over its bounding sub-grid."""
    margin = spec.deform_mm + 2.0
    lo = np.floor((center_mm - radii - margin) / spacing_arr).astype(int)
    hi = np.ceil((center_mm + radii + margin) / spacing_arr).astype(int) + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, spec.shape)
    if (hi <= lo).any():
        return None, lo, hi
    grid = np.moveaxis(np.mgrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]], 0, -1)
    pts = grid * spacing_arr
    if disp_mm is not None:
        pts = pts + np.moveaxis(
            disp_mm[:, lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]], 0, -1)
    return _primitive_mask(kind, pts, center_mm, radii), lo, hi


def _smooth_field(rng, shape, sigma, n_components):
    f = rng.standard_normal((n_components,) + tuple(shape))
    return np.stack([gaussian_filter(f[i], sigma) for i in range(n_components)])


def generate_phantom(spec, seed):
    """Build one subject: raw-HU volume plus ground truth.

    Deterministic in (spec, seed). Raises OverlapError when two organ
    masks overlap by more than 20% of the smaller one.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng_jitter, rng_deform, rng_texture = (np.random.default_rng(c) for c in ss.spawn(3))
    spacing_arr = np.asarray(spec.spacing, np.float64)
    extent = spec.extent_mm()

    # smooth per-subject deformation, in mm, capped at deform_mm
    if spec.deform_mm > 0:
        disp = _smooth_field(rng_deform, spec.shape, 6.0, 3)
        mag = np.sqrt((disp * disp).sum(axis=0)).max()
        if mag > 0:
            disp *= spec.deform_mm / mag
    else:
        disp = None

    organ_masks = {}
    for organ in spec.organs:
        center = np.asarray(organ.center, np.float64) * extent
        center = center + rng_jitter.normal(0.0, spec.jitter_mm, 3)
        radii = np.asarray(organ.radii_mm, np.float64)
        radii = radii * (1.0 + rng_jitter.normal(0.0, spec.radius_jitter_frac, 3))
        radii = np.maximum(radii, 1.0)
        sub, lo, hi = _rasterize(spec, organ.kind, center, radii, disp, spacing_arr)
        mask = np.zeros(spec.shape, bool)
        if sub is not None:
            mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = sub
        if not mask.any():
            raise ValueError(f"organ {organ.name!r} produced an empty mask")
        organ_masks[organ.name] = mask

    names = [o.name for o in spec.organs]
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            inter = int((organ_masks[a] & organ_masks[b]).sum())
            if inter == 0:
                continue
            smaller = min(organ_masks[a].sum(), organ_masks[b].sum())
            if inter > MAX_OVERLAP_FRACTION * smaller:
                raise errors.OverlapError(
                    f"organs {a!r} and {b!r} overlap on {inter} voxels "
                    f"(> {MAX_OVERLAP_FRACTION:.0%} of the smaller)")

    # intensities: air everywhere, soft-tissue filler, organs at band
    # midpoints, plus smooth texture inside the body
    data = np.full(spec.shape, AIR_HU, np.float32)
    filler_center = np.asarray(spec.filler_center, np.float64) * extent
    filler_radii = np.asarray(spec.filler_radii_mm, np.float64)
    fsub, flo, fhi = _rasterize(spec, "ellipsoid", filler_center, filler_radii,
                                disp, spacing_arr)
    body = np.zeros(spec.shape, bool)
    if fsub is not None:
        body[flo[0]:fhi[0], flo[1]:fhi[1], flo[2]:fhi[2]] = fsub
    data[body] = FILLER_HU

    if spec.texture_hu > 0:
        tex = _smooth_field(rng_texture, spec.shape, 1.5, 1)[0]
        sd = tex.std()
        if sd > 0:
            tex *= spec.texture_hu / sd
    else:
        tex = np.zeros(spec.shape)

    data[body] += tex[body].astype(np.float32)
    for organ in spec.organs:
        mask = organ_masks[organ.name]
        lo, hi = organ.hu_range
        mid = 0.5 * (lo + hi)
        data[mask] = np.clip(mid + tex[mask], lo, hi).astype(np.float32)
    np.clip(data, -1000.0, 1500.0, out=data)

    spacing = Spacing.of(spec.spacing)
    truth = GroundTruth(
        organs={
            name: OrganTruth(mask, mask_extreme_points(mask), int(mask.sum()))
            for name, mask in organ_masks.items()
        },
        spacing=spacing,
        shape=tuple(spec.shape),
    )
    return Volume(data, spacing, "raw_hu"), truth


def generate_cohort(spec, count, seed):
    """Independent subjects from per-subject seeds spawned off the master."""
    if count < 1:
        raise ValueError(f"cohort count must be >= 1, got {count}")
    children = np.random.SeedSequence(seed).spawn(count)
    return [generate_phantom(spec, child) for child in children]


# -- ground-truth serialization ------------------------------------------

def truth_to_dict(truth, mask_files=None):
    organs = {}
    for name, organ in truth.organs.items():
        entry = {
            "extremes": {role: list(pt) for role, pt in organ.extremes.items()},
            "voxel_count": organ.voxel_count,
        }
        if mask_files is not None:
            entry["mask_file"] = mask_files[name]
        organs[name] = entry
    return {
        "shape": list(truth.shape),
        "spacing": [truth.spacing.z, truth.spacing.y, truth.spacing.x],
        "organs": organs,
    }


def truth_from_dict(d, mask_loader=None):
    """Rebuild ground truth from its JSON dict; masks load lazily via
    ``mask_loader(mask_file)`` when provided."""
    organs = {}
    for name, entry in d["organs"].items():
        mask = mask_loader(entry["mask_file"]) if mask_loader else None
        extremes = {role: tuple(pt) for role, pt in entry["extremes"].items()}
        organs[name] = OrganTruth(mask, extremes, entry["voxel_count"])
    return GroundTruth(organs, Spacing.of(d["spacing"]), tuple(d["shape"]))
