"""Dataset fingerprinting and plan derivation.

The fingerprint summarizes dataset geometry and intensities; the plan derived
from it is the single source of truth for preprocessing, network topology and
training. Defaults are sized for desk-scale CPU runs.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, VolumeIOError
from .seeding import rng_for
from .volume_io import load_volume

INTENSITY_SAMPLES_PER_CASE = 10_000
PATCH_CAP = 128
MIN_POOLED_AXIS = 8
MAX_POOLS = 5


@dataclass
class Fingerprint:
    case_ids: list
    shapes: list
    spacings: list
    mean: float
    std: float
    percentile_00_5: float
    percentile_99_5: float
    clipped_mean: float
    clipped_std: float
    modality: str
    class_count: int
    landmark_counts: list

    def __post_init__(self):
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        if self.percentile_00_5 > self.percentile_99_5:
            raise ConfigError("intensity percentiles out of order")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "Fingerprint":
        return cls(**doc)


def compute_fingerprint(cases, modality: str, class_count: int, seed: int = 0,
                        load_volume_fn=load_volume) -> Fingerprint:
    """Scan the training cases once; deterministic for a fixed seed.

    Intensity statistics are pooled over at most 10^4 voxels per case, drawn
    from a per-case RNG stream so the result is independent of scan order.
    """
    if not cases:
        raise ConfigError("need at least one training case to fingerprint")
    case_ids, shapes, spacings, counts = [], [], [], []
    samples = []
    for case in sorted(cases, key=lambda c: c.case_id):
        try:
            v = load_volume_fn(case.image_path)
        except (OSError, VolumeIOError) as e:
            raise VolumeIOError(f"cannot read case {case.case_id!r}: {e}") from e
        case_ids.append(case.case_id)
        shapes.append([int(s) for s in v.shape])
        spacings.append([float(s) for s in v.spacing])
        lm = case.load_landmarks()
        counts.append(len(lm) if lm is not None else 0)

        flat = np.asarray(v.data, dtype=np.float64).reshape(-1)
        rng = rng_for(seed, "fingerprint", case.case_id)
        n = min(INTENSITY_SAMPLES_PER_CASE, flat.size)
        samples.append(flat[rng.choice(flat.size, size=n, replace=False)])

    pooled = np.concatenate(samples)
    p_lo, p_hi = np.percentile(pooled, [0.5, 99.5])
    clipped = np.clip(pooled, p_lo, p_hi)
    return Fingerprint(
        case_ids=case_ids,
        shapes=shapes,
        spacings=spacings,
        mean=float(pooled.mean()),
        std=float(pooled.std()),
        percentile_00_5=float(p_lo),
        percentile_99_5=float(p_hi),
        clipped_mean=float(clipped.mean()),
        clipped_std=float(clipped.std()),
        modality=modality,
        class_count=int(class_count),
        landmark_counts=counts,
    )


@dataclass
class Plan:
    target_spacing: tuple
    normalization: str
    patch_size: tuple
    num_pool_per_axis: tuple
    batch_size: int = 2
    base_channels: int = 16
    max_channels: int = 128
    edt_radius_voxels: int = 15
    loss: str = "bce_topk"
    topk_percent: float = 20.0
    epochs: int = 50
    iterations_per_epoch: int = 50
    initial_lr: float = 1e-2
    lr_power: float = 0.9
    oversample_foreground_fraction: float = 0.5
    fold_count: int = 5

    def __post_init__(self):
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.num_pool_per_axis = tuple(int(p) for p in self.num_pool_per_axis)
        self.validate()

    def validate(self):
        if len(self.target_spacing) != 3 or any(s <= 0 for s in self.target_spacing):
            raise ConfigError(f"target_spacing must be 3 positive floats, got {self.target_spacing}")
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            raise ConfigError(f"patch_size must be 3 positive ints, got {self.patch_size}")
        if len(self.num_pool_per_axis) != 3 or any(p < 0 for p in self.num_pool_per_axis):
            raise ConfigError(f"num_pool_per_axis must be 3 ints >= 0, got {self.num_pool_per_axis}")
        for patch, pools in zip(self.patch_size, self.num_pool_per_axis):
            if patch % (2 ** pools) != 0:
                raise ConfigError(
                    f"patch axis {patch} not divisible by 2^{pools} pooling steps"
                )
        if self.normalization not in ("ct_clip_zscore", "zscore"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.loss not in ("bce_topk", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not 0 < self.topk_percent <= 100:
            raise ConfigError(f"topk_percent must be in (0, 100], got {self.topk_percent}")
        if self.edt_radius_voxels < 1:
            raise ConfigError("edt_radius_voxels must be >= 1")
        if self.fold_count < 2:
            raise ConfigError("fold_count must be >= 2")
        if self.batch_size < 1 or self.epochs < 1 or self.iterations_per_epoch < 1:
            raise ConfigError("batch_size, epochs and iterations_per_epoch must be >= 1")
        if not 0 <= self.oversample_foreground_fraction <= 1:
            raise ConfigError("oversample_foreground_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["target_spacing"] = list(self.target_spacing)
        doc["patch_size"] = list(self.patch_size)
        doc["num_pool_per_axis"] = list(self.num_pool_per_axis)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Plan":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown plan fields: {sorted(unknown)}")
        return cls(**doc)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:10]


def _pools_for(axis_len: int) -> int:
    pools = 0
    while pools < MAX_POOLS and axis_len // 2 >= MIN_POOLED_AXIS:
        axis_len //= 2
        pools += 1
    return pools


def derive_plan(fp: Fingerprint, overrides: dict = None) -> Plan:
    """Plan heuristics: median spacing, modality-driven normalization, patch =
    median preprocessed shape capped at 128 and floored to pooling divisibility.
    Explicit overrides win; the resulting plan must still satisfy its invariants.
    """
    spacings = np.asarray(fp.spacings, dtype=float)
    shapes = np.asarray(fp.shapes, dtype=float)
    target = np.median(spacings, axis=0)

    preprocessed = np.maximum(np.round(shapes * spacings / target), 1)
    median_shape = np.round(np.median(preprocessed, axis=0)).astype(int)

    patch = np.minimum(median_shape, PATCH_CAP)
    pools = np.array([_pools_for(int(p)) for p in patch])
    patch = (patch // (2 ** pools)) * (2 ** pools)

    doc = {
        "target_spacing": [float(s) for s in target],
        "normalization": "ct_clip_zscore" if fp.modality == "CT" else "zscore",
        "patch_size": [int(p) for p in patch],
        "num_pool_per_axis": [int(p) for p in pools],
    }
    if overrides:
        doc.update(overrides)
    return Plan.from_dict(doc)


def save_json(path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_plan(path) -> Plan:
    return Plan.from_dict(json.loads(Path(path).read_text()))


def load_fingerprint(path) -> Fingerprint:
    return Fingerprint.from_dict(json.loads(Path(path).read_text()))
