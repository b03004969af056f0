import numpy as np
import pytest
import torch

from conftest import random_geometry
from landmark3d.codec import encode_label_map
from landmark3d.errors import ContractError
from landmark3d.geometry import LandmarkSet, Volume3D, voxel_to_world, world_to_voxel
from landmark3d.heatmap_loss import edt_blob, patch_to_heatmap
from landmark3d.inference import (
    extract_landmarks,
    gaussian_importance,
    sliding_window_predict,
    tile_starts,
)
from landmark3d.planning import Plan


def plan_with_patch(patch):
    return Plan(target_spacing=(1, 1, 1), normalization="zscore",
                patch_size=patch, num_pool_per_axis=(0, 0, 0))


class ConstantModel:
    training = False

    def __init__(self, logit, channels=2, patch=(32, 32, 32)):
        self.logit, self.channels, self.patch = logit, channels, patch

    def __call__(self, x):
        return torch.full((1, self.channels, *self.patch), float(self.logit))


class CornerEchoModel:
    """Fills the whole tile with the logit found at the tile's corner voxel."""

    training = False

    def __call__(self, x):
        return torch.full_like(x, float(x[0, 0, 0, 0, 0])).repeat(1, 1, 1, 1, 1)


class TestTiling:
    def test_half_overlap_starts(self):
        assert tile_starts(96, 32) == [0, 16, 32, 48, 64]

    def test_last_tile_snapped_inside(self):
        assert tile_starts(50, 32) == [0, 16, 18]

    def test_volume_not_larger_than_patch(self):
        assert tile_starts(32, 32) == [0]
        assert tile_starts(20, 32) == [0]

    def test_importance_is_positive_and_centered(self):
        w = gaussian_importance((16, 8, 4))
        assert w.shape == (16, 8, 4)
        assert np.all(w > 0)
        assert w.max() == w[7, 3, 1] or w.max() == w[8, 4, 2]
        assert np.allclose(w, w[::-1, ::-1, ::-1])  # symmetric around the center


class TestSlidingWindow:
    def test_single_tile_equals_direct_output(self, rng):
        patch = (16, 16, 16)
        image = Volume3D(rng.normal(size=patch).astype(np.float32))
        model = ConstantModel(0.3, channels=3, patch=patch)
        out = sliding_window_predict(model, image, plan_with_patch(patch))
        assert out.shape == (3, 16, 16, 16)
        assert np.allclose(out, torch.sigmoid(torch.tensor(0.3)).item(), atol=1e-7)

    def test_partition_of_unity_constant_model(self, rng):
        patch = (32, 32, 32)
        image = Volume3D(rng.normal(size=(96, 96, 96)).astype(np.float32))
        out = sliding_window_predict(ConstantModel(-0.7, patch=patch), image,
                                     plan_with_patch(patch))
        expected = torch.sigmoid(torch.tensor(-0.7)).item()
        assert np.max(np.abs(out - expected)) < 1e-6

    def test_smaller_than_patch_pads_and_crops(self, rng):
        patch = (32, 32, 32)
        image = Volume3D(rng.normal(size=(20, 18, 12)).astype(np.float32))
        out = sliding_window_predict(ConstantModel(1.1, patch=patch), image,
                                     plan_with_patch(patch))
        assert out.shape == (2, 20, 18, 12)
        assert np.allclose(out, torch.sigmoid(torch.tensor(1.1)).item(), atol=1e-6)

    def test_two_tile_blend_matches_hand_formula(self, rng):
        patch = (32, 8, 8)
        data = rng.normal(size=(48, 8, 8)).astype(np.float32)
        image = Volume3D(data)
        out = sliding_window_predict(CornerEchoModel(), image, plan_with_patch(patch))

        # hand-evaluated expectation: tiles start at x=0 and x=16, each filled
        # with sigmoid(corner logit), blended by the separable Gaussian weight
        def w(i, n):
            center, sigma = (n - 1) / 2.0, n / 8.0
            return np.exp(-((i - center) ** 2) / (2 * sigma * sigma))

        s0 = 1.0 / (1.0 + np.exp(-data[0, 0, 0]))
        s1 = 1.0 / (1.0 + np.exp(-data[16, 0, 0]))
        for x in (16, 20, 31, 40, 47):
            w0 = w(x, 32) if x < 32 else 0.0
            w1 = w(x - 16, 32) if x >= 16 else 0.0
            expected = (w0 * s0 + w1 * s1) / (w0 + w1)
            assert out[0, x, 3, 3] == pytest.approx(expected, abs=1e-6)

    def test_values_stay_in_unit_interval(self, rng):
        patch = (16, 16, 16)

        class Wild:
            training = False

            def __call__(self, x):
                return torch.from_numpy(
                    rng.normal(scale=30, size=(1, 2, 16, 16, 16)).astype(np.float32))

        image = Volume3D(rng.normal(size=(24, 24, 24)).astype(np.float32))
        out = sliding_window_predict(Wild(), image, plan_with_patch(patch))
        assert out.min() >= 0.0
        assert out.max() <= 1.0


class TestExtract:
    def test_argmax_plus_affine(self):
        geom = Volume3D(np.zeros((8, 8, 8)), (2, 2, 2))
        hm = np.zeros((1, 8, 8, 8), dtype=np.float32)
        hm[0, 3, 4, 5] = 1.0
        lm = extract_landmarks(hm, geom, ["a"])
        assert np.allclose(lm.positions_mm[0], (6, 8, 10))
        assert lm.confidences[0] == pytest.approx(1.0)

    def test_all_zero_channel_tie_breaks_to_origin_with_zero_confidence(self):
        geom = Volume3D(np.zeros((5, 5, 5)))
        lm = extract_landmarks(np.zeros((1, 5, 5, 5), np.float32), geom, ["a"])
        assert np.allclose(lm.positions_mm[0], (0, 0, 0))
        assert lm.confidences[0] == 0.0

    def test_tie_break_lowest_linear_index_x_fastest(self):
        geom = Volume3D(np.zeros((4, 4, 4)))
        hm = np.zeros((1, 4, 4, 4), np.float32)
        hm[0, 2, 1, 1] = hm[0, 1, 2, 1] = hm[0, 1, 1, 2] = 0.9
        lm = extract_landmarks(hm, geom, ["a"])
        # x-fastest linear order: x + 4y + 16z, so (2,1,1) wins over (1,2,1), (1,1,2)
        assert np.allclose(lm.positions_mm[0], (2, 1, 1))

    def test_always_returns_complete_set(self):
        geom = Volume3D(np.zeros((6, 6, 6)))
        hm = np.zeros((3, 6, 6, 6), np.float32)
        hm[1, 2, 2, 2] = 0.5
        lm = extract_landmarks(hm, geom, ["a", "b", "c"])
        assert lm.names == ("a", "b", "c")
        assert len(lm) == 3

    def test_plant_and_recover_analytic_blobs(self):
        rng = np.random.default_rng(123)
        for _ in range(50):
            geom = random_geometry(rng, shape=(24, 24, 24))
            center = rng.uniform(4, 20, size=3)
            hm = edt_blob((24, 24, 24), center, radius=int(rng.integers(3, 10)))[None]
            lm = extract_landmarks(hm, geom, ["a"])
            recovered = world_to_voxel(geom, lm.positions_mm[0])
            assert np.allclose(np.round(recovered), np.round(center))

    def test_argmax_invariant_under_monotone_rescale(self, rng):
        geom = Volume3D(np.zeros((12, 12, 12)))
        hm = rng.uniform(size=(2, 12, 12, 12)).astype(np.float32)
        base = extract_landmarks(hm, geom, ["a", "b"])
        for transform in (np.sqrt, np.square, lambda x: 0.1 + 0.5 * np.tanh(3 * x)):
            rescaled = extract_landmarks(transform(hm.astype(np.float64)), geom, ["a", "b"])
            assert np.allclose(base.positions_mm, rescaled.positions_mm)

    def test_channel_count_mismatch_raises(self):
        geom = Volume3D(np.zeros((4, 4, 4)))
        with pytest.raises(ContractError):
            extract_landmarks(np.zeros((2, 4, 4, 4), np.float32), geom, ["a"])

    def test_full_codec_round_trip(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            geom = random_geometry(rng, shape=(26, 26, 26))
            voxels = []
            while len(voxels) < 3:
                cand = rng.integers(2, 24, size=3)
                if all(np.max(np.abs(cand - v)) >= 3 for v in voxels):
                    voxels.append(cand)
            positions = [voxel_to_world(geom, v + rng.uniform(-0.4, 0.4, 3)) for v in voxels]
            lm = LandmarkSet("rt", ("a", "b", "c"), np.array(positions))
            lmap = encode_label_map(geom, lm)
            target = patch_to_heatmap(lmap.volume.data, 3, radius=5)
            out = extract_landmarks(target.channels, geom, ["a", "b", "c"])
            for name, voxel in zip(("a", "b", "c"), voxels):
                got = world_to_voxel(geom, out.position_of(name))
                assert np.allclose(np.round(got), voxel)
                assert np.allclose(got, voxel, atol=1e-6)
