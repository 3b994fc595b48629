"""Metric definitions against hand values and brute-force oracles."""

import numpy as np
import pytest

from anatomap import errors
from anatomap.metrics import (
    ale, dsc, iou3d, parse_report_csv, report, wall_distance,
)
from anatomap.prompt import BBox3D
from anatomap.volume import Spacing

S3 = Spacing(3, 3, 3)
ROLES = ("z_min", "z_max", "y_min", "y_max", "x_min", "x_max")


def points(offset=(0, 0, 0)):
    rng = np.random.default_rng(0)
    base = {r: rng.integers(5, 20, 3) for r in ROLES}
    return base, {r: p + np.asarray(offset) for r, p in base.items()}


def random_box(rng, lo=0, hi=23, spacing=S3):
    a = rng.integers(lo, hi + 1, 3)
    b = rng.integers(lo, hi + 1, 3)
    mn, mx = np.minimum(a, b), np.maximum(a, b)
    return BBox3D(int(mn[0]), int(mx[0]), int(mn[1]), int(mx[1]),
                  int(mn[2]), int(mx[2]), spacing)


def brute_force_box_voxels(box, grid=24):
    vol = np.zeros((grid, grid, grid), bool)
    vol[box.z_min:box.z_max + 1, box.y_min:box.y_max + 1, box.x_min:box.x_max + 1] = True
    return vol


class TestAle:
    def test_zero_for_equal(self):
        gt, pred = points()
        assert ale(pred, gt, S3) == 0.0

    def test_uniform_offset(self):
        gt, pred = points(offset=(3, 0, 0))
        assert ale(pred, gt, S3) == pytest.approx(9.0, abs=1e-9)

    def test_role_keyed_so_order_free(self):
        gt, pred = points(offset=(1, 2, 2))
        shuffled = {r: pred[r] for r in reversed(ROLES)}
        assert ale(pred, gt, S3) == ale(shuffled, gt, S3)

    def test_role_mismatch(self):
        gt, pred = points()
        del pred["z_min"]
        pred["zmin"] = gt["z_min"]
        with pytest.raises(errors.OrderMismatch):
            ale(pred, gt, S3)

    def test_scales_linearly_with_spacing(self):
        gt, pred = points(offset=(2, 1, 5))
        assert ale(pred, gt, Spacing(6, 6, 6)) == pytest.approx(
            2 * ale(pred, gt, S3), rel=1e-12)


class TestWallDistance:
    def test_identical(self):
        b = BBox3D(2, 8, 3, 9, 4, 10, S3)
        assert wall_distance(b, b) == 0.0

    def test_one_voxel_everywhere(self):
        a = BBox3D(2, 8, 3, 9, 4, 10, S3)
        b = BBox3D(3, 9, 4, 10, 5, 11, S3)
        assert wall_distance(a, b) == pytest.approx(3.0, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = random_box(rng), random_box(rng)
            assert wall_distance(a, b) == wall_distance(b, a)

    def test_spacing_mismatch(self):
        a = BBox3D(0, 1, 0, 1, 0, 1, S3)
        b = BBox3D(0, 1, 0, 1, 0, 1, Spacing(1, 1, 1))
        with pytest.raises(errors.SpacingMismatch):
            wall_distance(a, b)

    def test_scales_linearly_with_spacing(self):
        a = BBox3D(2, 8, 3, 9, 4, 10, S3)
        b = BBox3D(4, 9, 1, 9, 6, 12, S3)
        a2 = BBox3D(2, 8, 3, 9, 4, 10, Spacing(6, 6, 6))
        b2 = BBox3D(4, 9, 1, 9, 6, 12, Spacing(6, 6, 6))
        assert wall_distance(a2, b2) == pytest.approx(2 * wall_distance(a, b), rel=1e-12)


class TestIou3d:
    def test_identical(self):
        b = BBox3D(1, 5, 2, 6, 3, 7, S3)
        assert iou3d(b, b) == 1.0

    def test_disjoint(self):
        a = BBox3D(0, 2, 0, 2, 0, 2, S3)
        b = BBox3D(10, 12, 0, 2, 0, 2, S3)
        assert iou3d(a, b) == 0.0

    def test_corner_touching_cubes(self):
        a = BBox3D(0, 1, 0, 1, 0, 1, S3)
        b = BBox3D(1, 2, 1, 2, 1, 2, S3)
        assert iou3d(a, b) == pytest.approx(1.0 / 15.0, abs=1e-12)

    def test_brute_force_oracle_1000_pairs(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            a, b = random_box(rng), random_box(rng)
            va, vb = brute_force_box_voxels(a), brute_force_box_voxels(b)
            inter = int((va & vb).sum())
            union = int((va | vb).sum())
            assert iou3d(a, b) == inter / union


class TestDsc:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4, 4), bool)
        m[1:3, 1:3, 1:3] = True
        assert dsc(m, m) == 1.0

    def test_hand_count(self):
        a = np.zeros((1, 2, 4), bool)
        b = np.zeros((1, 2, 4), bool)
        a[0, 0, :] = True            # 4 voxels
        b[0, 0, 2:] = True           # overlap 2
        b[0, 1, :2] = True           # 4 voxels total
        assert dsc(a, b) == 0.5

    def test_both_empty(self):
        z = np.zeros((3, 3, 3), bool)
        assert dsc(z, z) == 1.0

    def test_one_empty(self):
        z = np.zeros((3, 3, 3), bool)
        m = z.copy()
        m[0, 0, 0] = True
        assert dsc(z, m) == 0.0
        assert dsc(m, z) == 0.0

    def test_symmetry_and_grid_check(self):
        rng = np.random.default_rng(3)
        a = rng.random((5, 5, 5)) > 0.5
        b = rng.random((5, 5, 5)) > 0.5
        assert dsc(a, b) == dsc(b, a)
        with pytest.raises(errors.GridMismatch):
            dsc(a, np.zeros((4, 5, 5), bool))

    def test_hand_count_oracle_100_pairs(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a = rng.random((6, 6, 6)) > 0.6
            b = rng.random((6, 6, 6)) > 0.6
            na = int(a.sum())
            nb = int(b.sum())
            inter = sum(1 for i in range(6) for j in range(6) for k in range(6)
                        if a[i, j, k] and b[i, j, k])
            expected = 1.0 if na + nb == 0 else 2 * inter / (na + nb)
            assert dsc(a, b) == expected


class TestReport:
    def cases(self, values):
        return [{"organ": "core", "ale": v, "wd": v, "iou": v, "dsc": v}
                for v in values]

    def test_single_case(self):
        rep, _ = report(self.cases([0.7]))
        assert rep.per_organ["core"]["ale"] == (0.7, 0.0)
        assert rep.per_organ["core"]["n_cases"] == 1

    def test_two_cases_population_std(self):
        rep, _ = report(self.cases([0.4, 0.6]))
        mean, std = rep.per_organ["core"]["iou"]
        assert mean == pytest.approx(0.5, abs=1e-12)
        assert std == pytest.approx(0.1, abs=1e-12)

    def test_csv_round_trip(self):
        recs = self.cases([0.4, 0.6]) + [
            {"organ": "sac", "ale": 1.25, "wd": 2.5, "iou": 0.125, "dsc": 0.75}]
        rep, text = report(recs)
        back = parse_report_csv(text)
        assert back.per_organ == rep.per_organ
        assert back.cohort == rep.cohort

    def test_empty_rejected(self):
        with pytest.raises(errors.EmptyInput):
            report([])

    def test_deterministic_organ_order(self):
        recs = [{"organ": o, "ale": 1, "wd": 1, "iou": 1, "dsc": 1}
                for o in ("zeta", "alpha", "mid")]
        rep, text = report(recs)
        assert list(rep.per_organ) == ["alpha", "mid", "zeta"]
        lines = text.strip().splitlines()
        assert lines[1].startswith("alpha") and lines[-1].startswith("__cohort__")
