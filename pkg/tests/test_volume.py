"""Volume representation, intensity normalization and coordinates."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from anatomap import errors
from anatomap.volume import (
    Spacing, Volume, extract_patch, load_mask, load_volume, normalize_hu,
    phys_to_voxel, save_mask, save_volume, voxel_to_phys,
)


def make_volume(data, spacing=(3, 3, 3), domain="raw_hu"):
    return Volume(np.asarray(data, np.float32), spacing, domain)


class TestNormalizeHu:
    def test_control_points(self):
        v = make_volume(np.array([[[-1000.0, 200.0, 1500.0]]]))
        out = normalize_hu(v)
        np.testing.assert_allclose(out.data.ravel(), [0.0, 0.8, 1.0], atol=1e-7)
        assert out.domain == "normalized"

    def test_clamp_below(self):
        v = make_volume(np.array([[[-2000.0]]]))
        assert normalize_hu(v).data.ravel()[0] == 0.0

    def test_clamp_above(self):
        v = make_volume(np.array([[[3000.0]]]))
        assert normalize_hu(v).data.ravel()[0] == 1.0

    def test_interpolated_value(self):
        # midpoint of the (-1000 -> 0, -200 -> 0.2) segment
        v = make_volume(np.array([[[-600.0]]]))
        np.testing.assert_allclose(normalize_hu(v).data.ravel()[0], 0.1, atol=1e-7)

    def test_wrong_domain_rejected(self):
        v = make_volume(np.zeros((2, 2, 2)), domain="normalized")
        with pytest.raises(ValueError):
            normalize_hu(v)

    @given(st.floats(-3000, 4000), st.floats(-3000, 4000))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        v = make_volume(np.array([[[lo, hi]]]))
        out = normalize_hu(v).data.ravel()
        assert out[0] <= out[1]


class TestExtractPatch:
    def test_interior_all_ones(self):
        v = make_volume(np.ones((32, 32, 32)))
        p = extract_patch(v, (16, 16, 16), (8, 8, 8))
        np.testing.assert_array_equal(p.data, 1.0)
        np.testing.assert_array_equal(p.centroid, [16, 16, 16])

    def test_corner_padding_fraction(self):
        v = make_volume(np.ones((32, 32, 32)))
        p = extract_patch(v, (0, 0, 0), (8, 8, 8))
        # center offset 4: only the positive octant (4^3) overlaps the volume
        assert int((p.data == 0).sum()) == 8 ** 3 - 4 ** 3
        assert p.data[4, 4, 4] == 1.0
        assert p.data[0, 0, 0] == 0.0

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        v = make_volume(rng.random((20, 20, 20)))
        a = extract_patch(v, (5, 7, 9), (8, 8, 8))
        b = extract_patch(v, (5, 7, 9), (8, 8, 8))
        np.testing.assert_array_equal(a.data, b.data)

    def test_center_voxel_matches_volume(self):
        rng = np.random.default_rng(4)
        v = make_volume(rng.random((24, 24, 24)))
        for center in [(12, 12, 12), (4, 18, 9), (3, 3, 20)]:
            p = extract_patch(v, center, (8, 8, 8))
            assert p.data[4, 4, 4] == v.data[center]

    def test_size_too_large(self):
        v = make_volume(np.ones((8, 8, 8)))
        with pytest.raises(errors.SizeTooLarge):
            extract_patch(v, (4, 4, 4), (8, 8, 12))

    def test_center_out_of_bounds(self):
        v = make_volume(np.ones((8, 8, 8)))
        with pytest.raises(ValueError):
            extract_patch(v, (8, 4, 4), (4, 4, 4))


class TestCoordinates:
    def test_voxel_to_phys(self):
        np.testing.assert_array_equal(
            voxel_to_phys((10, 20, 30), (3, 3, 3)), [30.0, 60.0, 90.0])

    def test_round_trip_identity(self):
        rng = np.random.default_rng(5)
        spacing = Spacing(1.5, 2.0, 3.25)
        idx = rng.integers(0, 100, size=(200, 3))
        back = phys_to_voxel(voxel_to_phys(idx, spacing), spacing)
        np.testing.assert_array_equal(back, idx)

    def test_tie_rounds_toward_lower(self):
        assert phys_to_voxel((4.5, 0.0, 0.0), (3, 3, 3))[0] == 1
        assert phys_to_voxel((1.5, 7.5, -1.5), (3, 3, 3)).tolist() == [0, 2, -1]

    def test_spacing_must_be_positive(self):
        with pytest.raises(ValueError):
            Spacing(3.0, 0.0, 3.0)
        with pytest.raises(ValueError):
            Spacing(3.0, 3.0, float("nan"))


class TestVolumeInvariants:
    def test_normalized_range_checked(self):
        with pytest.raises(ValueError):
            Volume(np.full((2, 2, 2), 1.5, np.float32), (1, 1, 1), "normalized")

    def test_unknown_domain(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2, 2), np.float32), (1, 1, 1), "percent")


class TestVol1Io:
    def test_volume_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        v = make_volume(rng.random((6, 5, 4)) * 100, spacing=(3, 2, 1))
        hp = save_volume(v, tmp_path / "vol.json")
        w = load_volume(hp)
        np.testing.assert_array_equal(v.data, w.data)
        assert w.spacing == v.spacing
        assert w.domain == v.domain

    def test_header_is_minimal_json(self, tmp_path):
        import json
        v = make_volume(np.zeros((2, 2, 2)))
        hp = save_volume(v, tmp_path / "vol.json")
        header = json.loads(hp.read_text())
        assert set(header) == {"shape", "spacing", "domain"}

    def test_raw_is_little_endian_z_major(self, tmp_path):
        data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        hp = save_volume(make_volume(data, spacing=(1, 1, 1)), tmp_path / "v.json")
        raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
        np.testing.assert_array_equal(raw, np.arange(8))

    def test_truncated_raw_rejected(self, tmp_path):
        v = make_volume(np.zeros((4, 4, 4)))
        hp = save_volume(v, tmp_path / "vol.json")
        raw = tmp_path / "vol.raw"
        raw.write_bytes(raw.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_volume(hp)

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        mask = rng.random((9, 7, 5)) > 0.5
        hp = save_mask(mask, (3, 3, 3), tmp_path / "m.json")
        back, spacing = load_mask(hp)
        np.testing.assert_array_equal(mask, back)
        assert spacing == Spacing(3, 3, 3)
