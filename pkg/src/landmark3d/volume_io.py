"""Volume file I/O: NIfTI-1 (.nii, .nii.gz) plus a dependency-free raw format.

The raw format is a little-endian float32 ``<stem>.raw`` file (x-fastest
layout) with a ``<stem>.hdr`` sidecar text header carrying shape, spacing,
origin and direction, one ``key: values`` line each.
"""

from pathlib import Path

import numpy as np

from . import nifti
from .errors import VolumeIOError
from .geometry import Volume3D

IMAGE_EXTENSIONS = (".nii.gz", ".nii", ".raw")


def volume_affine(v: Volume3D) -> np.ndarray:
    """4x4 world affine of a volume (voxel index -> mm)."""
    affine = np.eye(4)
    affine[:3, :3] = v.direction @ np.diag(v.spacing)
    affine[:3, 3] = v.origin
    return affine


def _from_affine(data: np.ndarray, affine: np.ndarray) -> Volume3D:
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    if np.any(spacing <= 0):
        raise VolumeIOError(f"degenerate affine, column norms {spacing}")
    direction = affine[:3, :3] / spacing
    return Volume3D(data, spacing, affine[:3, 3], direction)


def find_image(directory, stem: str):
    """Locate ``<stem>`` with any supported extension in ``directory``."""
    directory = Path(directory)
    for ext in IMAGE_EXTENSIONS:
        candidate = directory / f"{stem}{ext}"
        if candidate.exists():
            return candidate
    return None


def image_stem(path) -> str:
    name = Path(path).name
    for ext in IMAGE_EXTENSIONS:
        if name.endswith(ext):
            return name[: -len(ext)]
    return Path(path).stem


def load_volume(path) -> Volume3D:
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        data, affine = nifti.read_nifti(path)
        return _from_affine(data, affine)
    if path.suffix == ".raw":
        return _load_raw(path)
    raise VolumeIOError(f"unsupported volume format: {path}")


def save_volume(path, v: Volume3D) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith((".nii", ".nii.gz")):
        nifti.write_nifti(path, v.data, volume_affine(v))
    elif path.suffix == ".raw":
        _save_raw(path, v)
    else:
        raise VolumeIOError(f"unsupported volume format: {path}")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".hdr")


def _save_raw(path: Path, v: Volume3D) -> None:
    data = np.asarray(v.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(data.ravel(order="F").tobytes())
    lines = [
        "format: raw-volume-v1",
        "shape: " + " ".join(str(int(s)) for s in v.shape),
        "spacing: " + " ".join(repr(float(x)) for x in v.spacing),
        "origin: " + " ".join(repr(float(x)) for x in v.origin),
        "direction: " + " ".join(repr(float(x)) for x in v.direction.reshape(-1)),
    ]
    _sidecar(path).write_text("\n".join(lines) + "\n")


def _load_raw(path: Path) -> Volume3D:
    sidecar = _sidecar(path)
    if not sidecar.exists():
        raise VolumeIOError(f"missing sidecar header {sidecar}")
    fields = {}
    for line in sidecar.read_text().splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, _, value = line.partition(":")
        fields[key.strip()] = value.split()
    try:
        shape = tuple(int(x) for x in fields["shape"])
        spacing = [float(x) for x in fields["spacing"]]
        origin = [float(x) for x in fields["origin"]]
        direction = np.array([float(x) for x in fields["direction"]]).reshape(3, 3)
    except (KeyError, ValueError) as e:
        raise VolumeIOError(f"malformed sidecar header {sidecar}: {e}") from e
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise VolumeIOError(f"{path}: expected {np.prod(shape)} voxels, found {data.size}")
    return Volume3D(data.reshape(shape, order="F"), spacing, origin, direction)
