import gzip

import numpy as np
import pytest

from conftest import random_geometry
from landmark3d.errors import VolumeIOError
from landmark3d.geometry import Volume3D
from landmark3d.volume_io import load_volume, save_volume, volume_affine


@pytest.mark.parametrize("ext", [".nii", ".nii.gz", ".raw"])
def test_round_trip_identity_geometry(tmp_path, rng, ext):
    data = rng.normal(size=(7, 6, 5)).astype(np.float32)
    v = Volume3D(data, (1.5, 2.0, 0.5), (10.0, -4.0, 3.0))
    path = tmp_path / f"vol{ext}"
    save_volume(path, v)
    loaded = load_volume(path)
    assert np.array_equal(loaded.data, data)
    assert np.allclose(loaded.spacing, v.spacing, atol=1e-5)
    assert np.allclose(loaded.origin, v.origin, atol=1e-4)
    assert np.allclose(loaded.direction, v.direction, atol=1e-5)


def test_nifti_rotated_direction(tmp_path, rng):
    v = random_geometry(rng, shape=(6, 8, 10))
    path = tmp_path / "rot.nii.gz"
    save_volume(path, v)
    loaded = load_volume(path)
    # geometry travels as float32 in the header
    assert np.allclose(loaded.direction, v.direction, atol=1e-5)
    assert np.allclose(loaded.spacing, v.spacing, rtol=1e-5)
    assert np.allclose(volume_affine(loaded), volume_affine(v), atol=1e-3)


def test_nifti_integer_labels_keep_discrete_values(tmp_path, rng):
    data = rng.integers(0, 4, size=(5, 5, 5)).astype(np.int16)
    v = Volume3D(data, (1, 1, 1))
    path = tmp_path / "labels.nii.gz"
    save_volume(path, v)
    loaded = load_volume(path)
    assert np.array_equal(loaded.data, data)
    assert np.issubdtype(loaded.data.dtype, np.integer)


def test_nifti_write_is_deterministic(tmp_path, rng):
    v = random_geometry(rng, shape=(6, 6, 6))
    save_volume(tmp_path / "a.nii.gz", v)
    save_volume(tmp_path / "b" / "a.nii.gz", v)
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b" / "a.nii.gz").read_bytes()


def test_raw_round_trip_is_exact(tmp_path, rng):
    v = random_geometry(rng, shape=(4, 5, 6))
    path = tmp_path / "vol.raw"
    save_volume(path, v)
    loaded = load_volume(path)
    assert np.array_equal(loaded.data, v.data)
    assert np.array_equal(loaded.spacing, v.spacing)
    assert np.array_equal(loaded.origin, v.origin)
    assert np.array_equal(loaded.direction, v.direction)


def test_truncated_nifti_rejected(tmp_path):
    bad = tmp_path / "bad.nii"
    bad.write_bytes(b"\x00" * 100)
    with pytest.raises(VolumeIOError):
        load_volume(bad)


def test_non_nifti_payload_rejected(tmp_path):
    bad = tmp_path / "bad.nii.gz"
    with gzip.open(bad, "wb") as f:
        f.write(b"A" * 400)
    with pytest.raises(VolumeIOError):
        load_volume(bad)


def test_raw_missing_sidecar_rejected(tmp_path):
    path = tmp_path / "orphan.raw"
    np.zeros(8, dtype="<f4").tofile(path)
    with pytest.raises(VolumeIOError):
        load_volume(path)


def test_unsupported_extension_rejected(tmp_path):
    with pytest.raises(VolumeIOError):
        load_volume(tmp_path / "vol.mha")
