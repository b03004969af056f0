import numpy as np
import pytest

from landmark3d.codec import CaseRecord, decode_label_centroids, write_landmarks
from landmark3d.errors import PreprocessingError
from landmark3d.geometry import LandmarkSet, Volume3D
from landmark3d.planning import Plan, compute_fingerprint
from landmark3d.preprocessing import (
    load_preprocessed,
    normalize_intensity,
    preprocess_case,
    preprocess_dataset,
    save_preprocessed,
)
from landmark3d.volume_io import save_volume
from test_planning import fp_for


def plan_for(spacing=(1, 1, 1)):
    return Plan(target_spacing=spacing, normalization="zscore",
                patch_size=(16, 16, 16), num_pool_per_axis=(2, 2, 2))


class TestNormalize:
    def test_constant_zscore_gives_zeros(self):
        v = Volume3D(np.full((6, 6, 6), 9.0))
        with pytest.warns(UserWarning):
            out = normalize_intensity(v, "zscore")
        assert np.all(out.data == 0)

    def test_ct_clip_window(self):
        fp = fp_for([(6, 6, 6)], [(1, 1, 1)], modality="CT")
        fp.percentile_00_5, fp.percentile_99_5 = -100.0, 1000.0
        fp.clipped_mean, fp.clipped_std = 0.0, 1.0
        v = Volume3D(np.array([-1000.0, 0.0, 3000.0] * 72).reshape(6, 6, 6))
        out = normalize_intensity(v, "ct_clip_zscore", fp)
        # with mean 0 / std 1 the output equals the clipped values
        assert set(np.unique(out.data)) == {-100.0, 0.0, 1000.0}

    def test_zscore_standardizes(self, rng):
        v = Volume3D(rng.normal(5.0, 3.0, size=(8, 8, 8)))
        out = normalize_intensity(v, "zscore")
        assert abs(float(out.data.mean())) < 1e-6
        assert float(out.data.std()) == pytest.approx(1.0, abs=1e-5)


def _case_on_disk(tmp_path, spacing=(1, 1, 1), positions=((10.0, 10.0, 10.0),),
                  shape=(20, 20, 20)):
    rng = np.random.default_rng(0)
    image = Volume3D(rng.normal(size=shape).astype(np.float32), spacing)
    save_volume(tmp_path / "case.nii.gz", image)
    names = tuple(f"c{i}" for i in range(len(positions)))
    write_landmarks(tmp_path / "case.json",
                    LandmarkSet("case", names, np.array(positions)))
    return CaseRecord("case", tmp_path / "case.nii.gz", tmp_path / "case.json")


class TestPreprocessCase:
    def test_identity_resample_keeps_shape_and_encoding(self, tmp_path):
        case = _case_on_disk(tmp_path)
        fp = compute_fingerprint([case], "other", 1)
        pc = preprocess_case(case, plan_for(), fp, ["c0"])
        assert pc.image.shape == (20, 20, 20)
        assert int((pc.label_data == 1).sum()) == 27
        assert pc.label_data[10, 10, 10] == 1

    def test_world_coordinate_reencoding_at_new_spacing(self, tmp_path):
        case = _case_on_disk(tmp_path, spacing=(1, 1, 1), positions=((10.0, 10.0, 10.0),))
        fp = compute_fingerprint([case], "other", 1)
        pc = preprocess_case(case, plan_for(spacing=(2, 2, 2)), fp, ["c0"])
        assert pc.image.shape == (10, 10, 10)
        assert pc.label_data[5, 5, 5] == 1
        assert pc.image.shape == pc.labels.volume.shape

    def test_landmark_outside_resampled_grid_raises(self, tmp_path):
        # at the x=19.6 mm edge: rounds into the native grid but outside the
        # coarse 5-voxel grid resampled to spacing 4
        case = _case_on_disk(tmp_path, positions=((19.4, 10.0, 10.0),))
        fp = compute_fingerprint([case], "other", 1)
        with pytest.raises(PreprocessingError, match="c0"):
            preprocess_case(case, plan_for(spacing=(4, 4, 4)), fp, ["c0"])

    def test_decoded_centroids_close_to_original_mm(self, tmp_path):
        positions = ((9.7, 10.2, 10.0), (4.1, 15.9, 5.5))
        case = _case_on_disk(tmp_path, positions=positions)
        fp = compute_fingerprint([case], "other", 2)
        target = (1.5, 1.5, 1.5)
        pc = preprocess_case(case, plan_for(spacing=target), fp, ["c0", "c1"])
        dec = decode_label_centroids(pc.labels)
        half_diagonal = 0.5 * np.linalg.norm(target)
        for name, original in zip(("c0", "c1"), positions):
            assert np.linalg.norm(dec.position_of(name) - original) <= half_diagonal

    def test_deterministic_and_cache_bit_identical(self, tmp_path):
        case = _case_on_disk(tmp_path)
        fp = compute_fingerprint([case], "other", 1)
        plan = plan_for()
        pc1 = preprocess_case(case, plan, fp, ["c0"])
        pc2 = preprocess_case(case, plan, fp, ["c0"])
        assert np.array_equal(pc1.image.data, pc2.image.data)
        assert np.array_equal(pc1.label_data, pc2.label_data)

        save_preprocessed(tmp_path / "cache_a", pc1)
        save_preprocessed(tmp_path / "cache_b", pc2)
        for name in ("case.image.npy.gz", "case.labels.npy.gz", "case.geometry.json"):
            assert ((tmp_path / "cache_a" / name).read_bytes()
                    == (tmp_path / "cache_b" / name).read_bytes())

    def test_cache_round_trip(self, tmp_path):
        case = _case_on_disk(tmp_path)
        fp = compute_fingerprint([case], "other", 1)
        pc = preprocess_case(case, plan_for(), fp, ["c0"])
        save_preprocessed(tmp_path / "cache", pc)
        loaded = load_preprocessed(tmp_path / "cache", "case")
        assert np.array_equal(loaded.image.data, pc.image.data)
        assert np.array_equal(loaded.label_data, pc.label_data)
        assert loaded.classes == ["c0"]
        assert np.allclose(loaded.image.spacing, pc.image.spacing)

    def test_preprocess_dataset_skips_cached(self, tmp_path):
        case = _case_on_disk(tmp_path)
        fp = compute_fingerprint([case], "other", 1)
        plan = plan_for()
        cache = tmp_path / "cache"
        preprocess_dataset([case], plan, fp, ["c0"], cache)
        stamp = (cache / "case.image.npy.gz").stat().st_mtime_ns
        preprocess_dataset([case], plan, fp, ["c0"], cache)
        assert (cache / "case.image.npy.gz").stat().st_mtime_ns == stamp
