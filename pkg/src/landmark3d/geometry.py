"""Volumes, landmark sets, world<->voxel transforms, and resampling.

Conventions: volume data is indexed (x, y, z); voxel index (0,0,0) maps
exactly to the origin (corner-center convention); world coordinates are mm
with ``p = origin + direction @ (spacing * idx)``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, ConfigError, GeometryError

ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A scalar 3D grid with voxel spacing (mm), origin (mm) and orientation.

    Carries both images and integer label maps; ``data`` keeps whatever dtype
    it was constructed with.
    """

    data: np.ndarray
    spacing: np.ndarray = field(default=None)
    origin: np.ndarray = field(default=None)
    direction: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GeometryError(f"volume data must be 3D with shape >= 1 per axis, got {data.shape}")
        spacing = np.ones(3) if self.spacing is None else np.asarray(self.spacing, dtype=float)
        origin = np.zeros(3) if self.origin is None else np.asarray(self.origin, dtype=float)
        direction = np.eye(3) if self.direction is None else np.asarray(self.direction, dtype=float)
        if spacing.shape != (3,) or not np.all(spacing > 0):
            raise GeometryError(f"spacing must be 3 strictly positive floats, got {spacing}")
        if origin.shape != (3,) or not np.all(np.isfinite(origin)):
            raise GeometryError(f"origin must be 3 finite floats, got {origin}")
        if direction.shape != (3, 3) or not np.allclose(
            direction.T @ direction, np.eye(3), atol=ORTHONORMAL_TOL
        ):
            raise GeometryError("direction must be a 3x3 orthonormal matrix")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """Same geometry, new voxel data (shapes must match)."""
        if tuple(np.shape(data)) != self.shape:
            raise ContractError(f"data shape {np.shape(data)} != volume shape {self.shape}")
        return Volume3D(data, self.spacing, self.origin, self.direction)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Ordered named world-space points (mm) for one case.

    ``confidences`` is populated on predictions (heatmap value at the argmax)
    and None on ground truth.
    """

    case_id: str
    names: tuple
    positions_mm: np.ndarray
    confidences: np.ndarray = None

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        positions = np.asarray(self.positions_mm, dtype=float).reshape(len(names), 3)
        if len(set(names)) != len(names):
            raise ContractError(f"landmark names must be unique, got {names}")
        if not np.all(np.isfinite(positions)):
            bad = [names[i] for i in np.argwhere(~np.isfinite(positions).all(axis=1)).ravel()]
            raise ContractError(f"non-finite landmark positions: {bad}")
        conf = self.confidences
        if conf is not None:
            conf = np.asarray(conf, dtype=float)
            if conf.shape != (len(names),):
                raise ContractError("confidences must align with names")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "positions_mm", positions)
        object.__setattr__(self, "confidences", conf)

    def __len__(self) -> int:
        return len(self.names)

    def position_of(self, name: str) -> np.ndarray:
        try:
            return self.positions_mm[self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None


def voxel_to_world(v: Volume3D, idx) -> np.ndarray:
    """Map continuous voxel coordinates to world mm."""
    idx = np.asarray(idx, dtype=float)
    return v.origin + v.direction @ (v.spacing * idx)


def world_to_voxel(v: Volume3D, p_mm) -> np.ndarray:
    """Map a world-mm point to continuous voxel coordinates (no clamping)."""
    p_mm = np.asarray(p_mm, dtype=float)
    try:
        local = np.linalg.solve(v.direction, p_mm - v.origin)
    except np.linalg.LinAlgError:
        raise GeometryError("direction matrix is singular") from None
    return local / v.spacing


def resample_volume(v: Volume3D, target_spacing, mode: str = "linear") -> Volume3D:
    """Resample to ``target_spacing``, preserving origin/direction.

    Output shape is round(shape * spacing / target), min 1 per axis. Linear
    mode interpolates; nearest mode preserves the input's discrete value set.
    Out-of-bounds samples clamp to the edge.
    """
    target_spacing = np.asarray(target_spacing, dtype=float)
    if target_spacing.shape != (3,) or not np.all(target_spacing > 0):
        raise ConfigError(f"target spacing must be 3 positive floats, got {target_spacing}")
    if mode not in ("linear", "nearest"):
        raise ConfigError(f"unknown resampling mode {mode!r}")

    out_shape = np.maximum(np.round(np.array(v.shape) * v.spacing / target_spacing), 1).astype(int)
    if tuple(out_shape) == v.shape and np.allclose(target_spacing, v.spacing):
        return Volume3D(v.data.copy(), target_spacing, v.origin, v.direction)

    # Origin and direction are shared, so the world affine cancels and the
    # input coordinate of output voxel i is simply i * target / source.
    scale = target_spacing / v.spacing
    grids = np.meshgrid(*(np.arange(n) * s for n, s in zip(out_shape, scale)), indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grids])
    order = 1 if mode == "linear" else 0
    out = ndimage.map_coordinates(
        v.data.astype(float) if mode == "linear" else v.data,
        coords, order=order, mode="nearest",
    ).reshape(tuple(out_shape))
    if mode == "nearest":
        out = out.astype(v.data.dtype)
    return Volume3D(out, target_spacing, v.origin, v.direction)
