import json

import numpy as np
import pytest
import torch
from scipy import ndimage

from landmark3d.augmentation import NO_AUGMENT, AugmentConfig, augment
from landmark3d.codec import encode_label_map
from landmark3d.errors import ConfigError, TrainingError
from landmark3d.geometry import LandmarkSet, Volume3D
from landmark3d.network import build_network, derive_network_spec
from landmark3d.planning import Plan
from landmark3d.preprocessing import PreprocessedCase
from landmark3d.training import (
    load_checkpoint,
    polynomial_lr,
    sample_patch,
    train,
    validate_fold,
)


def make_plan(**kw):
    base = dict(target_spacing=(1, 1, 1), normalization="zscore",
                patch_size=(16, 16, 16), num_pool_per_axis=(1, 1, 1),
                base_channels=4, batch_size=2, epochs=1, iterations_per_epoch=2,
                edt_radius_voxels=5)
    base.update(kw)
    return Plan(**base)


def toy_case(case_id, rng, shape=(24, 24, 24), positions=((8, 8, 8), (16, 16, 16))):
    image = Volume3D(rng.normal(size=shape).astype(np.float32))
    names = tuple(f"c{i}" for i in range(len(positions)))
    lm = LandmarkSet(case_id, names, np.array(positions, dtype=float))
    labels = encode_label_map(image, lm, class_names=list(names))
    return PreprocessedCase(case_id, image, labels, list(names)), lm


class TestNetwork:
    def test_width_doubling_with_cap(self):
        plan = make_plan(patch_size=(96, 96, 48), num_pool_per_axis=(3, 3, 2),
                         base_channels=16, max_channels=128)
        spec = derive_network_spec(plan, 2)
        assert spec.stage_widths == (16, 32, 64, 128)
        assert spec.pool_strides == ((2, 2, 2), (2, 2, 2), (2, 2, 1))

    def test_forward_shape_contract(self):
        plan = make_plan(patch_size=(16, 16, 8), num_pool_per_axis=(2, 2, 1))
        model = build_network(plan, 3, seed=0)
        out = model(torch.zeros(2, 1, 16, 16, 8))
        assert tuple(out.shape) == (2, 3, 16, 16, 8)

    def test_same_seed_same_parameters(self):
        plan = make_plan()
        a = build_network(plan, 2, seed=9)
        b = build_network(plan, 2, seed=9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        c = build_network(plan, 2, seed=10)
        assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))

    def test_patch_pool_mismatch_rejected(self):
        plan = make_plan(patch_size=(16, 16, 16), num_pool_per_axis=(3, 3, 3))
        with pytest.raises(ConfigError, match="bottleneck"):
            derive_network_spec(plan, 2)


class TestSamplePatch:
    def test_full_oversampling_always_hits_foreground(self, rng):
        case, _ = toy_case("a", rng)
        plan = make_plan(oversample_foreground_fraction=1.0)
        for _ in range(25):
            _, lbl = sample_patch(case, plan, rng)
            assert (lbl > 0).any()

    def test_background_patch_is_legal(self, rng):
        case, _ = toy_case("a", rng, shape=(40, 40, 40), positions=((5, 5, 5),))
        plan = make_plan(oversample_foreground_fraction=0.0)
        saw_background = False
        for _ in range(30):
            _, lbl = sample_patch(case, plan, rng)
            if not lbl.any():
                saw_background = True
        assert saw_background

    def test_patch_equal_to_volume(self, rng):
        case, _ = toy_case("a", rng, shape=(16, 16, 16), positions=((8, 8, 8),))
        plan = make_plan(oversample_foreground_fraction=1.0)
        img, lbl = sample_patch(case, plan, rng)
        assert img.shape == (16, 16, 16)
        # center voxel is a foreground voxel of the single cube
        assert lbl.any()

    def test_border_patches_zero_padded(self, rng):
        case, _ = toy_case("a", rng, shape=(20, 20, 20), positions=((0, 0, 0),))
        plan = make_plan(oversample_foreground_fraction=1.0)
        img, lbl = sample_patch(case, plan, rng)
        assert img.shape == (16, 16, 16)


class TestAugment:
    def test_all_probabilities_zero_is_identity(self, rng):
        img = rng.normal(size=(16, 16, 16)).astype(np.float32)
        lbl = rng.integers(0, 3, size=(16, 16, 16)).astype(np.int16)
        out_img, out_lbl = augment(img, lbl, rng, NO_AUGMENT)
        assert np.array_equal(out_img, img)
        assert np.array_equal(out_lbl, lbl)

    def test_mirror_reflects_indices(self, rng):
        lbl = np.zeros((32, 32, 32), dtype=np.int16)
        lbl[2, 5, 7] = 1
        cfg = AugmentConfig(mirror_prob=1.0, rotation_prob=0, scale_prob=0,
                            noise_prob=0, brightness_prob=0)
        _, out = augment(np.zeros((32, 32, 32), np.float32), lbl, rng, cfg)
        assert out[29, 26, 24] == 1  # index i -> L-1-i on every axis
        assert out.sum() == 1

    def test_label_values_subset_of_original(self, rng):
        lbl = np.zeros((24, 24, 24), dtype=np.int16)
        lbl[10:13, 10:13, 10:13] = 2
        cfg = AugmentConfig(mirror_prob=0.5, rotation_prob=1.0, scale_prob=1.0,
                            noise_prob=0, brightness_prob=0)
        for _ in range(10):
            _, out = augment(np.zeros((24, 24, 24), np.float32), lbl, rng, cfg)
            assert set(np.unique(out)) <= {0, 2}

    def test_interior_cube_stays_connected(self, rng):
        lbl = np.zeros((32, 32, 32), dtype=np.int16)
        lbl[14:17, 14:17, 14:17] = 1
        cfg = AugmentConfig(mirror_prob=0.5, rotation_prob=1.0, scale_prob=1.0,
                            scale_range=(0.8, 1.3), noise_prob=0, brightness_prob=0)
        for _ in range(10):
            _, out = augment(np.zeros((32, 32, 32), np.float32), lbl, rng, cfg)
            _, count = ndimage.label(out == 1)
            assert count == 1

    def test_intensity_ops_leave_labels_alone(self, rng):
        lbl = np.zeros((16, 16, 16), dtype=np.int16)
        lbl[8, 8, 8] = 1
        img = np.zeros((16, 16, 16), np.float32)
        cfg = AugmentConfig(mirror_prob=0, rotation_prob=0, scale_prob=0,
                            noise_prob=1.0, brightness_prob=1.0)
        out_img, out_lbl = augment(img, lbl, rng, cfg)
        assert np.array_equal(out_lbl, lbl)
        assert not np.array_equal(out_img, img)


class TestPolyLR:
    def test_schedule_endpoints(self):
        assert polynomial_lr(1e-2, 0, 100, 0.9) == pytest.approx(1e-2)
        assert polynomial_lr(1e-2, 100, 100, 0.9) == 0.0
        assert polynomial_lr(1e-2, 50, 100, 0.9) == pytest.approx(1e-2 * 0.5 ** 0.9)


class TestTrainLoop:
    def test_smoke_run_writes_checkpoints_and_logs(self, tmp_path, rng):
        cases = [toy_case(f"c{i}", rng)[0] for i in range(2)]
        plan = make_plan()
        state = train(plan, cases, tmp_path, seed=0)
        assert state.epochs_run == 1
        assert state.steps_run == 2
        assert (tmp_path / "checkpoint_final").exists()
        assert (tmp_path / "checkpoint_best").exists()
        assert (tmp_path / "progress.csv").read_text().startswith("epoch,")
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["epoch"] == 0

    def test_fixed_seed_reproduces_loss_curve(self, tmp_path, rng):
        cases = [toy_case(f"c{i}", rng)[0] for i in range(3)]
        plan = make_plan(epochs=2, iterations_per_epoch=3)
        s1 = train(plan, cases, tmp_path / "a", seed=7)
        s2 = train(plan, cases, tmp_path / "b", seed=7)
        assert s1.epoch_mean_loss == s2.epoch_mean_loss
        s3 = train(plan, cases, tmp_path / "c", seed=8)
        assert s1.epoch_mean_loss != s3.epoch_mean_loss

    def test_checkpoint_round_trip_bit_identical_forward(self, tmp_path, rng):
        cases = [toy_case(f"c{i}", rng)[0] for i in range(2)]
        plan = make_plan()
        train(plan, cases, tmp_path, seed=0)
        model, loaded_plan, classes = load_checkpoint(tmp_path / "checkpoint_final")
        model2, _, _ = load_checkpoint(tmp_path / "checkpoint_final")
        x = torch.from_numpy(np.random.default_rng(0).normal(size=(1, 1, 16, 16, 16)).astype(np.float32))
        with torch.no_grad():
            assert torch.equal(model(x), model2(x))
        assert classes == ["c0", "c1"]
        assert loaded_plan == plan

    def test_checkpoint_round_trip_same_validation_mre(self, tmp_path, rng):
        cases_and_lms = [toy_case(f"c{i}", rng) for i in range(3)]
        cases = [c for c, _ in cases_and_lms]
        plan = make_plan()
        state = train(plan, cases[:2], tmp_path, seed=0, val_cases=[cases_and_lms[2]])
        assert state.validation_mre is not None
        model, loaded_plan, _ = load_checkpoint(tmp_path / "checkpoint_final")
        mre, _ = validate_fold(model, loaded_plan, [cases_and_lms[2]])
        assert mre == state.validation_mre

    def test_non_finite_loss_aborts_with_diagnostics(self, tmp_path, rng):
        case, _ = toy_case("bad", rng)
        poisoned = PreprocessedCase(
            "bad", case.image.with_data(np.full(case.image.shape, np.nan, np.float32)),
            case.labels, case.classes)
        plan = make_plan()
        with pytest.raises(TrainingError, match="non-finite"):
            train(plan, [poisoned, poisoned], tmp_path, seed=0)
        assert (tmp_path / "diagnostics.json").exists()

    def test_requires_two_cases(self, tmp_path, rng):
        case, _ = toy_case("solo", rng)
        with pytest.raises(ConfigError):
            train(make_plan(), [case], tmp_path, seed=0)

    def test_mse_loss_mode_runs(self, tmp_path, rng):
        cases = [toy_case(f"c{i}", rng)[0] for i in range(2)]
        plan = make_plan(loss="mse")
        state = train(plan, cases, tmp_path, seed=0)
        assert np.isfinite(state.epoch_mean_loss[0])
