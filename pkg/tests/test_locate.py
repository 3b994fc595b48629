"""Support models, agent stepping, and similarity refinement mechanics."""

import numpy as np
import pytest

from anatomap import errors
from anatomap.locate import (
    AgentState, _renormalize, build_support_model, build_support_models,
    coarse_localize, coarse_localize_many, localize_landmarks,
    localize_organ_points, mss_refine, SupportModel,
)
from anatomap.nn import network
from anatomap.volume import Volume, extract_patch

R = (192.0, 192.0, 192.0)
PS = (16, 16, 16)


def noise_volume(seed=0, shape=(48, 48, 48)):
    rng = np.random.default_rng(seed)
    return Volume(rng.random(shape).astype(np.float32), (3, 3, 3), "normalized")


@pytest.fixture(scope="module")
def weights():
    return network.NetworkWeights.initialize(seed=7)


class TestSupportModel:
    def test_k1_matches_direct_forward(self, weights):
        vol = noise_volume(1)
        pos = (24, 20, 30)
        model = build_support_model([(vol, pos)], weights, PS)
        patch = extract_patch(vol, pos, PS)
        latent, feats = network.forward(network.patch_batch([patch.data]), weights)
        np.testing.assert_allclose(model.latent, latent.data[0], atol=1e-6)
        centers = [(8, 8, 8), (4, 4, 4), (2, 2, 2)]
        for s in range(3):
            direct = feats[s].data[0][:, centers[s][0], centers[s][1], centers[s][2]]
            np.testing.assert_allclose(
                model.features[s], direct / np.linalg.norm(direct), atol=1e-5)
        assert model.k == 1

    def test_duplicate_supports_idempotent(self, weights):
        vol = noise_volume(2)
        pos = (20, 22, 24)
        m1 = build_support_model([(vol, pos)], weights, PS)
        m2 = build_support_model([(vol, pos), (vol, pos)], weights, PS)
        np.testing.assert_allclose(m1.latent, m2.latent, atol=1e-6)
        for s in range(3):
            np.testing.assert_allclose(m1.features[s], m2.features[s], atol=1e-6)
        assert m2.k == 2

    def test_renormalized_average_of_orthogonal_units(self):
        v = _renormalize(np.mean([[1.0, 0.0], [0.0, 1.0]], axis=0))
        np.testing.assert_allclose(v, [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-12)

    def test_unit_norm_descriptors(self, weights):
        vols = [(noise_volume(i), (24, 24, 24)) for i in range(3)]
        model = build_support_model(vols, weights, PS)
        for s in range(3):
            assert np.linalg.norm(model.features[s]) == pytest.approx(1.0, abs=1e-5)

    def test_landmark_out_of_bounds(self, weights):
        with pytest.raises(errors.LandmarkOutOfBounds):
            build_support_model([(noise_volume(0), (48, 0, 0))], weights, PS)

    def test_k_zero_rejected(self, weights):
        with pytest.raises(ValueError):
            build_support_models([], weights, PS)


class TestCoarseLocalize:
    def test_matching_latent_stays_put(self, weights):
        vol = noise_volume(3)
        start = np.array([24, 24, 24])
        patch = extract_patch(vol, start, PS)
        latent, _ = network.forward(network.patch_batch([patch.data]), weights,
                                    want_features=False)
        model = SupportModel(latent.data[0].copy(), [np.ones(1)] * 3, 1)
        state = coarse_localize(vol, model, weights, R, PS, start=start)
        np.testing.assert_array_equal(state.position, start)
        assert state.steps == 0
        assert state.converged

    def test_max_steps_one_is_single_step(self, weights):
        vol = noise_volume(4)
        model = SupportModel(np.array([2.0, -1.0, 0.5]), [np.ones(1)] * 3, 1)
        s1 = coarse_localize(vol, model, weights, R, PS, max_steps=1)
        s3 = coarse_localize(vol, model, weights, R, PS, max_steps=3)
        assert s1.steps <= 1
        np.testing.assert_allclose(s1.offsets_mm[0], s3.offsets_mm[0], atol=1e-6)

    def test_step_magnitude_bounded_by_r(self, weights):
        vol = noise_volume(5)
        model = SupportModel(np.array([50.0, -50.0, 50.0]), [np.ones(1)] * 3, 1)
        state = coarse_localize(vol, model, weights, R, PS)
        for d in state.offsets_mm:
            assert (np.abs(d) <= np.asarray(R)).all()

    def test_position_always_in_volume(self, weights):
        vol = noise_volume(6)
        model = SupportModel(np.array([50.0, -50.0, 50.0]), [np.ones(1)] * 3, 1)
        for start in [(0, 0, 0), (47, 47, 47), (24, 0, 47)]:
            state = coarse_localize(vol, model, weights, R, PS, start=np.asarray(start))
            assert (state.position >= 0).all() and (state.position <= 47).all()

    def test_batched_matches_individual(self, weights):
        vol = noise_volume(7)
        models = {
            "a": SupportModel(np.array([0.5, 0.0, -0.5]), [np.ones(1)] * 3, 1),
            "b": SupportModel(np.array([-1.0, 1.0, 0.0]), [np.ones(1)] * 3, 1),
        }
        batched = coarse_localize_many(vol, models, weights, R, PS)
        for name, model in models.items():
            solo = coarse_localize(vol, model, weights, R, PS)
            np.testing.assert_array_equal(batched[name].position, solo.position)


class TestMssRefine:
    def test_featureless_maps_break_ties_to_origin(self, weights):
        # zeroed feature heads make every similarity map constant, so the
        # argmax must fall back to the lexicographically smallest index
        wz = weights.astype(np.float32)
        for scale in range(3):
            wz[f"head{scale}.w"].data[:] = 0.0
            wz[f"head{scale}.b"].data[:] = 0.0
        vol = noise_volume(8)
        model = SupportModel(np.zeros(3), [np.full(c, 0.5) for c in (8, 16, 32)], 1)
        coarse = np.array([24, 24, 24])
        refined = mss_refine(vol, coarse, model, wz, PS)
        np.testing.assert_array_equal(refined, coarse - 8)

    def test_refined_within_half_patch_diagonal(self, weights):
        vol = noise_volume(9)
        rng = np.random.default_rng(0)
        model = SupportModel(np.zeros(3), [
            _renormalize(rng.standard_normal(c)) for c in (8, 16, 32)], 1)
        half_diag = np.linalg.norm(np.asarray(PS) / 2)
        for coarse in [(24, 24, 24), (8, 40, 24), (40, 8, 8)]:
            refined = mss_refine(vol, np.asarray(coarse), model, weights, PS)
            assert np.linalg.norm(refined - np.asarray(coarse)) <= half_diag + 1e-9
            assert (refined >= 0).all() and (refined <= 47).all()

    def test_deterministic(self, weights):
        vol = noise_volume(10)
        rng = np.random.default_rng(1)
        model = SupportModel(np.zeros(3), [
            _renormalize(rng.standard_normal(c)) for c in (8, 16, 32)], 1)
        a = mss_refine(vol, np.array([20, 20, 20]), model, weights, PS)
        b = mss_refine(vol, np.array([20, 20, 20]), model, weights, PS)
        np.testing.assert_array_equal(a, b)


class TestOrganPoints:
    def models(self, count):
        rng = np.random.default_rng(2)
        return {
            f"p{i}": SupportModel(rng.standard_normal(3), [
                _renormalize(rng.standard_normal(c)) for c in (8, 16, 32)], 1)
            for i in range(count)
        }

    def test_wpl_returns_six(self, weights):
        vol = noise_volume(11)
        out = localize_organ_points(vol, self.models(6), weights, R, PS)
        assert len(out) == 6
        for res in out.values():
            assert (res.position >= 0).all()

    def test_segment_cardinality_enforced(self, weights):
        vol = noise_volume(12)
        with pytest.raises(errors.GroupingError):
            localize_organ_points(vol, self.models(9), weights, R, PS, segments=2)
        out = localize_organ_points(vol, self.models(12), weights, R, PS, segments=2)
        assert len(out) == 12

    def test_refine_flag_controls_final_position(self, weights):
        vol = noise_volume(13)
        models = self.models(6)
        refined = localize_landmarks(vol, models, weights, R, PS, refine=True)
        coarse = localize_landmarks(vol, models, weights, R, PS, refine=False)
        for n in models:
            np.testing.assert_array_equal(
                refined[n].coarse_position, coarse[n].position)


class TestAgentState:
    def test_steps_counts_offsets(self):
        s = AgentState(np.zeros(3))
        assert s.steps == 0
        s.offsets_mm.append(np.ones(3))
        assert s.steps == 1
