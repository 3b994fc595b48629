"""3D boxes from extreme points and per-slice 2D prompt rectangles.

Boxes use inclusive voxel indices throughout; physical sizes enter only
via spacing in the metrics. Two localization modes feed this module:
one box from the six whole-organ extreme points ("wpl"), or one box
per z-segment from six points each ("spl"), which yields tighter
per-slice rectangles for elongated structures.
"""

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import errors
from .errors import DegenerateBoxWarning
from .volume import Spacing

WPL = "wpl"
SPL = "spl"


@dataclass(frozen=True)
class BBox3D:
    """Inclusive-index axis-aligned box."""

    z_min: int
    z_max: int
    y_min: int
    y_max: int
    x_min: int
    x_max: int
    spacing: Spacing

    def __post_init__(self):
        for lo, hi in self.bounds():
            if lo > hi:
                raise ValueError(f"box has min > max: {self}")

    def bounds(self):
        return ((self.z_min, self.z_max), (self.y_min, self.y_max),
                (self.x_min, self.x_max))

    def voxel_count(self):
        return int(np.prod([hi - lo + 1 for lo, hi in self.bounds()]))

    def clamped(self, shape):
        b = [int(np.clip(v, 0, shape[i // 2] - 1))
             for i, v in enumerate((self.z_min, self.z_max, self.y_min,
                                    self.y_max, self.x_min, self.x_max))]
        return BBox3D(*b, spacing=self.spacing)


def box_from_points(points, spacing):
    """Componentwise min/max box over any point collection."""
    pts = np.asarray(list(points), dtype=np.int64)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    if (lo == hi).any():
        warnings.warn("bounding box has zero extent on some axis",
                      DegenerateBoxWarning, stacklevel=2)
    return BBox3D(int(lo[0]), int(hi[0]), int(lo[1]), int(hi[1]),
                  int(lo[2]), int(hi[2]), Spacing.of(spacing))


def wpl_box(points, spacing):
    """Whole-organ box spanning the six extreme points."""
    pts = list(points)
    if len(pts) != 6:
        raise ValueError(f"whole-organ box needs exactly 6 points, got {len(pts)}")
    return box_from_points(pts, spacing)


def spl_boxes(points, m, spacing):
    """One box per z-segment from 6 points each, ordered by z."""
    pts = list(points)
    if len(pts) != 6 * m:
        raise errors.GroupingError(
            f"expected 6*{m} = {6 * m} points, got {len(pts)}")
    boxes = [box_from_points(pts[6 * i:6 * i + 6], spacing) for i in range(m)]
    return sorted(boxes, key=lambda b: (b.z_min, b.z_max))


@dataclass
class PromptSet:
    """Per-slice 2D prompt rectangles for one organ."""

    organ: str
    mode: str                  # wpl | spl
    n_mm: float | None
    margin_px: int
    slice_shape: tuple         # (Dy, Dx)
    slices: list               # [(z, (x_min, x_max, y_min, y_max)), ...] sorted by z
    meta: dict | None = None


def slice_prompts(boxes, margin_px, slice_shape, organ="organ", mode=WPL, n_mm=None,
                  meta=None):
    """Project boxes onto their slices, expand by the margin, clamp, merge.

    Every slice in a box's z-range gets the box's xy-rectangle grown by
    ``margin_px`` per side and clamped to the slice. Boxes sharing a
    slice are merged into their union rectangle, so each slice carries
    at most one prompt.
    """
    if margin_px < 0:
        raise ValueError("margin must be non-negative")
    dy, dx = slice_shape
    per_slice = {}
    for box in boxes:
        x0 = max(0, box.x_min - margin_px)
        x1 = min(dx - 1, box.x_max + margin_px)
        y0 = max(0, box.y_min - margin_px)
        y1 = min(dy - 1, box.y_max + margin_px)
        for z in range(box.z_min, box.z_max + 1):
            if z in per_slice:
                px0, px1, py0, py1 = per_slice[z]
                per_slice[z] = (min(px0, x0), max(px1, x1), min(py0, y0), max(py1, y1))
            else:
                per_slice[z] = (x0, x1, y0, y1)
    slices = sorted(per_slice.items())
    return PromptSet(organ, mode, n_mm, margin_px, tuple(slice_shape), slices, meta)


def box_clip_segment(gt_mask, prompts):
    """Oracle segmenter stand-in: ground truth clipped to the prompts.

    The predicted mask is the ground-truth mask intersected with the
    union of the per-slice prompt rectangles.
    """
    mask = np.asarray(gt_mask, dtype=bool)
    if mask.ndim != 3 or mask.shape[1:] != tuple(prompts.slice_shape):
        raise errors.GridMismatch(
            f"mask grid {mask.shape} does not match prompt slices "
            f"{prompts.slice_shape}")
    pred = np.zeros_like(mask)
    for z, (x0, x1, y0, y1) in prompts.slices:
        if z < 0 or z >= mask.shape[0]:
            raise errors.GridMismatch(f"prompt slice z={z} outside mask grid")
        pred[z, y0:y1 + 1, x0:x1 + 1] = mask[z, y0:y1 + 1, x0:x1 + 1]
    return pred


def export_prompts(prompts, path):
    """Write a PromptSet as stable-keyed JSON; round-trips losslessly."""
    doc = {
        "organ": prompts.organ,
        "mode": prompts.mode,
        "n_mm": prompts.n_mm,
        "margin_px": prompts.margin_px,
        "slice_shape": list(prompts.slice_shape),
        "slices": [{"z": int(z), "box": [int(v) for v in rect]}
                   for z, rect in prompts.slices],
    }
    if prompts.meta:
        doc["meta"] = prompts.meta
    try:
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    except OSError as e:
        raise IOError(f"cannot write prompts to {path}: {e}") from e
    return Path(path)


def import_prompts(path):
    doc = json.loads(Path(path).read_text())
    slices = [(int(s["z"]), tuple(int(v) for v in s["box"])) for s in doc["slices"]]
    return PromptSet(doc["organ"], doc["mode"], doc.get("n_mm"),
                     doc["margin_px"], tuple(doc["slice_shape"]), slices,
                     doc.get("meta"))
