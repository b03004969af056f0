"""Patch augmentation, applied BEFORE heatmap conversion.

Image and label patch always receive the identical spatial transform (linear
vs nearest interpolation); intensity perturbations touch the image only.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class AugmentConfig:
    mirror_prob: float = 0.5        # per axis
    rotation_prob: float = 0.2
    rotation_max_deg: float = 30.0
    scale_prob: float = 0.2
    scale_range: tuple = (0.7, 1.4)
    noise_prob: float = 0.15
    noise_sigma_max: float = 0.1
    brightness_prob: float = 0.15
    brightness_range: tuple = (0.8, 1.2)


DEFAULT_AUGMENT = AugmentConfig()
NO_AUGMENT = AugmentConfig(mirror_prob=0, rotation_prob=0, scale_prob=0,
                           noise_prob=0, brightness_prob=0)


def _rotation_matrix(angles_rad) -> np.ndarray:
    ax, ay, az = angles_rad
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
            config: AugmentConfig = DEFAULT_AUGMENT):
    """Mirror / rotate / scale both patches, then noise and brightness on the
    image. Out-of-frame regions fill with 0 (background / z-scored mean)."""
    image = np.asarray(image)
    labels = np.asarray(labels)

    for axis in range(3):
        if rng.uniform() < config.mirror_prob:
            image = np.flip(image, axis=axis)
            labels = np.flip(labels, axis=axis)

    matrix = np.eye(3)
    transformed = False
    if rng.uniform() < config.rotation_prob:
        angles = np.deg2rad(rng.uniform(-config.rotation_max_deg, config.rotation_max_deg, size=3))
        matrix = _rotation_matrix(angles) @ matrix
        transformed = True
    if rng.uniform() < config.scale_prob:
        matrix = matrix * rng.uniform(*config.scale_range)
        transformed = True

    if transformed:
        center = (np.array(image.shape) - 1) / 2.0
        inverse = np.linalg.inv(matrix)
        offset = center - inverse @ center
        image = ndimage.affine_transform(image.astype(np.float32), inverse, offset=offset,
                                         order=1, mode="constant", cval=0.0)
        labels = ndimage.affine_transform(labels, inverse, offset=offset,
                                          order=0, mode="constant", cval=0)
    else:
        image = np.ascontiguousarray(image, dtype=np.float32)
        labels = np.ascontiguousarray(labels)

    if rng.uniform() < config.noise_prob:
        sigma = rng.uniform(0.0, config.noise_sigma_max)
        image = image + rng.normal(0.0, sigma, size=image.shape).astype(np.float32)
    if rng.uniform() < config.brightness_prob:
        image = image * np.float32(rng.uniform(*config.brightness_range))

    return image.astype(np.float32, copy=False), labels
