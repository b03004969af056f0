"""Synthetic phantom datasets for desk-scale end-to-end runs.

Each case is a smooth (rotated, anisotropic) ellipsoidal intensity field with
one bright or dark Gaussian fiducial blob per class, placed at deterministic
template offsets and perturbed by a seeded per-case similarity transform plus
additive noise. Ground-truth landmark files carry the exact blob centers; the
volumes use 1 mm isotropic spacing, so voxel and mm units coincide.
"""

from pathlib import Path

import numpy as np

from .codec import DatasetInfo, save_dataset_info, write_landmarks
from .errors import ConfigError, ValidationError
from .geometry import LandmarkSet, Volume3D
from .seeding import rng_for
from .volume_io import save_volume
from .augmentation import _rotation_matrix

MIN_SHAPE = 32
MIN_SEPARATION = 3          # Chebyshev voxels, matches the cube-overlap limit
BORDER_MARGIN = 8
MAX_TRANSFORM_RETRIES = 25


def _template_offsets(shape: np.ndarray, class_count: int) -> np.ndarray:
    """Deterministic directions on a golden-angle spiral, scaled to the volume."""
    k = np.arange(class_count)
    phi = np.arccos(1.0 - 2.0 * (k + 0.5) / class_count)
    theta = np.pi * (1.0 + np.sqrt(5.0)) * k
    dirs = np.stack([
        np.sin(phi) * np.cos(theta),
        np.sin(phi) * np.sin(theta),
        np.cos(phi),
    ], axis=1)
    radius = 0.8 * (float(min(shape)) / 2.0 - BORDER_MARGIN - 2.0)
    return dirs * radius


def _blob_style(k: int) -> tuple:
    """(amplitude, has_shell, size_scale) per class: sign x structure x size.

    Classes alternate bright/dark; every second pair carries a wide shell
    around the center dot (a bullseye), so identity stays distinguishable at
    coarse feature resolution and survives mirroring; the dot pins the exact
    center. Size grows every four classes.
    """
    amplitude = 1.1 if k % 2 == 0 else -0.9
    has_shell = (k // 2) % 2 == 1
    size_scale = 1.0 + 0.5 * (k // 4)
    return amplitude, has_shell, size_scale


def _check_template(offsets: np.ndarray) -> None:
    # A rotation can shrink Chebyshev distance to Euclidean/sqrt(3); require the
    # worst case (plus minimum scale 0.92) to stay clear of the separation limit.
    n = len(offsets)
    for i in range(n):
        for j in range(i + 1, n):
            euclid = float(np.linalg.norm(offsets[i] - offsets[j]))
            if euclid * 0.92 / np.sqrt(3.0) < MIN_SEPARATION:
                raise ValidationError(
                    f"fiducial template too dense for this shape: offsets {i} and {j} "
                    f"can violate the {MIN_SEPARATION}-voxel separation"
                )


def _case_centers(shape, offsets, rng):
    center = (np.array(shape) - 1) / 2.0
    lo = np.full(3, BORDER_MARGIN, dtype=float)
    hi = np.array(shape) - 1.0 - BORDER_MARGIN
    for _ in range(MAX_TRANSFORM_RETRIES):
        angles = np.deg2rad(rng.uniform(-15.0, 15.0, size=3))
        scale = rng.uniform(0.92, 1.08)
        translation = rng.uniform(-0.03, 0.03, size=3) * np.array(shape)
        rotation = _rotation_matrix(angles)
        centers = center + translation + (scale * offsets) @ rotation.T
        rounded = np.round(centers)
        separation_ok = all(
            np.max(np.abs(rounded[i] - rounded[j])) >= MIN_SEPARATION
            for i in range(len(centers)) for j in range(i + 1, len(centers))
        )
        if separation_ok and np.all(centers >= lo) and np.all(centers <= hi):
            return centers, rotation
    raise ValidationError("could not place fiducials with the required separation")


def _render_case(shape, centers, rotation, noise, rng) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    coords = np.stack(grids)
    center = (np.array(shape, dtype=float) - 1) / 2.0

    # Anisotropic ellipsoid rotated with the case: a global orientation cue.
    semi_axes = np.array([0.46, 0.40, 0.34]) * np.array(shape, dtype=float)
    diff = coords - center[:, None, None, None]
    local = np.einsum("ab,bxyz->axyz", rotation.T, diff)
    q = sum((local[a] / semi_axes[a]) ** 2 for a in range(3))
    image = 0.4 * np.maximum(1.0 - q, 0.0)

    for k, c in enumerate(centers):
        amp, has_shell, size_scale = _blob_style(k)
        sigma = 1.7 * size_scale
        shell_radius = 4.2 * size_scale
        shell_width = 1.2 * size_scale
        reach = int(np.ceil(shell_radius + 3.5 * shell_width if has_shell else 4 * sigma))
        lo = np.maximum(np.floor(c - reach).astype(int), 0)
        hi = np.minimum(np.ceil(c + reach).astype(int) + 1, shape)
        box = [np.arange(l, h, dtype=np.float64) for l, h in zip(lo, hi)]
        bg = np.meshgrid(*box, indexing="ij")
        d2 = sum((g - cc) ** 2 for g, cc in zip(bg, c))
        if has_shell:
            dot = np.exp(-d2 / (2 * (0.9 * size_scale) ** 2))
            shell = np.exp(-((np.sqrt(d2) - shell_radius) ** 2) / (2 * shell_width * shell_width))
            blob = dot + shell
        else:
            blob = np.exp(-d2 / (2 * sigma * sigma))
        image[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += amp * blob

    if noise > 0:
        image = image + rng.normal(0.0, noise, size=shape)
    return image.astype(np.float32)


def synth_generate(output_dir, n_cases: int, shape, class_count: int, seed: int = 0,
                   noise: float = 0.05, test_fraction: float = 0.25) -> DatasetInfo:
    """Write a complete synthetic dataset (images, landmark files, dataset.json).

    The last round(n_cases * test_fraction) cases form the held-out test split.
    Fixed seed -> bit-identical dataset.
    """
    shape = np.array([shape] * 3 if np.isscalar(shape) else shape, dtype=int)
    if shape.shape != (3,) or np.any(shape < MIN_SHAPE):
        raise ConfigError(f"shape must be 3 ints >= {MIN_SHAPE}, got {tuple(shape)}")
    if class_count < 1:
        raise ConfigError("class_count must be >= 1")
    if n_cases < 1:
        raise ConfigError("n_cases must be >= 1")

    offsets = _template_offsets(shape, class_count)
    if class_count > 1:
        _check_template(offsets)

    classes = [f"fiducial_{k:02d}" for k in range(class_count)]
    n_test = int(round(n_cases * test_fraction)) if n_cases > 1 else 0
    n_test = min(n_test, n_cases - 1)

    output_dir = Path(output_dir)
    for case_index in range(n_cases):
        case_id = f"case_{case_index:03d}"
        rng = rng_for(seed, "synth", case_id)
        centers, rotation = _case_centers(shape, offsets, rng)
        image = _render_case(shape, centers, rotation, noise, rng)

        split = "Ts" if case_index >= n_cases - n_test else "Tr"
        volume = Volume3D(image, spacing=(1.0, 1.0, 1.0))
        save_volume(output_dir / f"images{split}" / f"{case_id}.nii.gz", volume)
        lm = LandmarkSet(case_id, tuple(classes), centers.astype(float))
        write_landmarks(output_dir / f"landmarks{split}" / f"{case_id}.json", lm)

    biometry = [(f"span_{k:02d}", classes[k], classes[k + 1])
                for k in range(class_count - 1)] or None
    info = DatasetInfo(output_dir.name, "other", classes, biometry)
    save_dataset_info(output_dir, info)
    return info
