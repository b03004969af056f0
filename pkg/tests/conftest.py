import numpy as np
import pytest

from landmark3d.geometry import Volume3D


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_geometry(rng: np.random.Generator, shape=None, data=None) -> Volume3D:
    if shape is None:
        shape = tuple(rng.integers(8, 40, size=3))
    if data is None:
        data = rng.normal(size=shape).astype(np.float32)
    spacing = rng.uniform(0.3, 3.0, size=3)
    origin = rng.uniform(-100, 100, size=3)
    return Volume3D(data, spacing, origin, random_rotation(rng))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
