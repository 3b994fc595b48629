"""Evaluation metrics: localization error, wall distance, IoU, Dice.

All distances are physical (mm); overlaps are voxel-count ratios with
inclusive-index box semantics. Reports aggregate per organ and over
the cohort with population standard deviations.
"""

import io
import csv
from dataclasses import dataclass

import numpy as np

from . import errors
from .volume import Spacing

CSV_FIELDS = ("organ", "n_cases", "ale_mean", "ale_std", "wd_mean", "wd_std",
              "iou_mean", "iou_std", "dsc_mean", "dsc_std")
COHORT_ROW = "__cohort__"


def ale(pred_points, gt_points, spacing):
    """Mean physical distance over the six matched extreme points."""
    if set(pred_points.keys()) != set(gt_points.keys()):
        raise errors.OrderMismatch(
            f"point roles differ: {sorted(pred_points)} vs {sorted(gt_points)}")
    e = Spacing.of(spacing).as_array()
    dists = []
    for role in sorted(pred_points):
        d = (np.asarray(pred_points[role], np.float64) -
             np.asarray(gt_points[role], np.float64)) * e
        dists.append(float(np.sqrt((d * d).sum())))
    return float(np.mean(dists))


def wall_distance(pred_box, gt_box):
    """Mean absolute physical offset of the six box faces."""
    if pred_box.spacing != gt_box.spacing:
        raise errors.SpacingMismatch(
            f"{pred_box.spacing} vs {gt_box.spacing}")
    e = pred_box.spacing.as_array()
    diffs = []
    for axis, (pb, gb) in enumerate(zip(pred_box.bounds(), gt_box.bounds())):
        diffs.append(abs(pb[0] - gb[0]) * e[axis])
        diffs.append(abs(pb[1] - gb[1]) * e[axis])
    return float(np.mean(diffs))


def iou3d(pred_box, gt_box):
    """Voxel-count intersection over union (inclusive indices)."""
    if pred_box.spacing != gt_box.spacing:
        raise errors.GridMismatch(f"{pred_box.spacing} vs {gt_box.spacing}")
    inter = 1
    for (plo, phi), (glo, ghi) in zip(pred_box.bounds(), gt_box.bounds()):
        span = min(phi, ghi) - max(plo, glo) + 1
        if span <= 0:
            return 0.0
        inter *= span
    union = pred_box.voxel_count() + gt_box.voxel_count() - inter
    return inter / union


def dsc(pred_mask, gt_mask):
    """Dice overlap; two empty masks count as a perfect match."""
    a = np.asarray(pred_mask, bool)
    b = np.asarray(gt_mask, bool)
    if a.shape != b.shape:
        raise errors.GridMismatch(f"mask grids differ: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


@dataclass
class EvalReport:
    per_organ: dict   # organ -> {metric: (mean, std), "n_cases": int}
    cohort: dict      # metric -> (mean, std); over all (case, organ) values


def _mean_std(values):
    arr = np.asarray(values, np.float64)
    return float(arr.mean()), float(arr.std())  # population std


def report(cases):
    """Aggregate per-case metric records into an EvalReport plus CSV text.

    ``cases`` is a list of records {"organ", "ale", "wd", "iou", "dsc"}.
    """
    if not cases:
        raise errors.EmptyInput("no cases to report")
    metrics = ("ale", "wd", "iou", "dsc")
    by_organ = {}
    for rec in cases:
        by_organ.setdefault(rec["organ"], []).append(rec)

    per_organ = {}
    for organ in sorted(by_organ):
        recs = by_organ[organ]
        entry = {"n_cases": len(recs)}
        for m in metrics:
            entry[m] = _mean_std([r[m] for r in recs])
        per_organ[organ] = entry
    cohort = {m: _mean_std([r[m] for r in cases]) for m in metrics}
    rep = EvalReport(per_organ, cohort)
    return rep, report_csv(rep, len(cases))


def report_csv(rep, total_cases):
    """Render a report as CSV (population std; stable row order)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    def fmt(v):
        # repr of a float is the shortest exact representation, so the
        # CSV re-parses to bit-identical values
        return repr(float(v))
    for organ, entry in rep.per_organ.items():
        row = [organ, entry["n_cases"]]
        for m in ("ale", "wd", "iou", "dsc"):
            row += [fmt(entry[m][0]), fmt(entry[m][1])]
        writer.writerow(row)
    row = [COHORT_ROW, total_cases]
    for m in ("ale", "wd", "iou", "dsc"):
        row += [fmt(rep.cohort[m][0]), fmt(rep.cohort[m][1])]
    writer.writerow(row)
    return buf.getvalue()


def parse_report_csv(text):
    """Inverse of report_csv (comment lines ignored)."""
    rows = [r for r in csv.reader(io.StringIO(text))
            if r and not r[0].startswith("#")]
    header, body = rows[0], rows[1:]
    assert tuple(header) == CSV_FIELDS
    per_organ = {}
    cohort = None
    for row in body:
        entry = {"n_cases": int(row[1])}
        vals = [float(v) for v in row[2:]]
        for i, m in enumerate(("ale", "wd", "iou", "dsc")):
            entry[m] = (vals[2 * i], vals[2 * i + 1])
        if row[0] == COHORT_ROW:
            cohort = {m: entry[m] for m in ("ale", "wd", "iou", "dsc")}
        else:
            per_organ[row[0]] = entry
    return EvalReport(per_organ, cohort)
