"""Augmentation transforms and their point maps."""

import numpy as np

from anatomap.augment import (
    AugmentConfig, AugmentTransform, apply_transform, augment_patch,
)
from anatomap.volume import Patch


def make_patch(shape=(16, 16, 16), seed=0):
    rng = np.random.default_rng(seed)
    return Patch(rng.random(shape).astype(np.float32), (8, 8, 8), (3, 3, 3))


class TestIdentity:
    def test_identity_preserves_data(self):
        p = make_patch()
        t = AugmentTransform.identity(p.shape)
        out = apply_transform(p, t)
        assert np.abs(out.data - p.data).max() <= 1e-6

    def test_identity_point_map(self):
        t = AugmentTransform.identity((16, 16, 16))
        pts = np.array([[0.0, 0.0, 0.0], [7.5, 8.0, 3.0], [15.0, 15.0, 15.0]])
        np.testing.assert_allclose(t.map_points(pts), pts, atol=1e-9)


class TestRotation:
    def test_rotation_fixes_center(self):
        for angles in [(90, 0, 0), (0, 90, 0), (10, -7, 3)]:
            t = AugmentTransform((16, 16, 16), angles,
                                 np.zeros((3, 16, 16, 16), np.float32), 0, 0.0)
            center = t.center
            np.testing.assert_allclose(t.map_points(center[None])[0], center, atol=1e-9)

    def test_rotation_only_inverse(self):
        rng = np.random.default_rng(1)
        t = AugmentTransform((16, 16, 16), (9.0, -6.0, 4.0),
                             np.zeros((3, 16, 16, 16), np.float32), 0, 0.0)
        pts = rng.uniform(0, 15, size=(50, 3))
        back = t.inverse_points(t.map_points(pts))
        assert np.abs(back - pts).max() < 0.5

    def test_quarter_turn_moves_off_axis_point(self):
        t = AugmentTransform((16, 16, 16), (90.0, 0.0, 0.0),
                             np.zeros((3, 16, 16, 16), np.float32), 0, 0.0)
        moved = t.map_points(np.array([[7.5, 12.5, 7.5]]))[0]
        assert np.abs(moved - np.array([7.5, 12.5, 7.5])).max() > 1.0


class TestRandomAugment:
    def test_deterministic_in_seed(self):
        p = make_patch()
        a1, t1 = augment_patch(p, 1234)
        a2, t2 = augment_patch(p, 1234)
        np.testing.assert_array_equal(a1.data, a2.data)
        np.testing.assert_array_equal(t1.displacement, t2.displacement)
        assert t1.angles_deg == t2.angles_deg
        assert t1.noise_seed == t2.noise_seed

    def test_different_seeds_differ(self):
        p = make_patch()
        a1, _ = augment_patch(p, 1)
        a2, _ = augment_patch(p, 2)
        assert np.abs(a1.data - a2.data).max() > 1e-4

    def test_zero_config_is_identity(self):
        p = make_patch()
        cfg = AugmentConfig(rot_deg=0.0, elastic_max_vox=0.0, noise_sigma=0.0)
        out, t = augment_patch(p, 99, cfg)
        assert np.abs(out.data - p.data).max() <= 1e-6
        np.testing.assert_allclose(t.rot, np.eye(3), atol=1e-12)

    def test_elastic_bounded(self):
        p = make_patch()
        _, t = augment_patch(p, 7)
        mags = np.sqrt((t.displacement.astype(np.float64) ** 2).sum(axis=0))
        assert mags.max() <= AugmentConfig().elastic_max_vox + 1e-5

    def test_point_map_consistent_with_resampling(self):
        # a bright voxel should land (approximately) where the map says
        p = Patch(np.zeros((16, 16, 16), np.float32), (8, 8, 8), (3, 3, 3))
        p.data[8, 10, 6] = 50.0
        cfg = AugmentConfig(noise_sigma=0.0)
        out, t = augment_patch(p, 21, cfg)
        predicted = t.map_points(np.array([[8.0, 10.0, 6.0]]))[0]
        actual = np.unravel_index(np.argmax(out.data), out.data.shape)
        assert np.abs(np.asarray(actual) - predicted).max() <= 1.5
