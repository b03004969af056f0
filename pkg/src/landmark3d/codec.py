"""Landmark files, label-map encoding/decoding, and dataset validation.

Landmarks are stored per case as JSON::

    {"case_id": str, "landmarks": [{"name": str, "position_mm": [x, y, z]}, ...]}

(predictions additionally carry a "confidence" per landmark). A dataset
directory holds imagesTr/, landmarksTr/, imagesTs/, landmarksTs/ and a
dataset.json declaring the ordered class list and the modality tag.
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EncodingError, ValidationError, VolumeIOError
from .geometry import LandmarkSet, Volume3D, voxel_to_world, world_to_voxel
from .volume_io import find_image, image_stem

# Two landmarks closer than this (Chebyshev, voxels) have overlapping 3x3x3 cubes.
MIN_SEPARATION_VOXELS = 3


@dataclass
class CaseRecord:
    """One dataset case: an image plus (for training cases) its landmark file."""

    case_id: str
    image_path: Path
    landmarks_path: Path = None
    landmarks: LandmarkSet = None

    def __post_init__(self):
        if not self.case_id:
            raise ValidationError("case_id must be nonempty")
        self.image_path = Path(self.image_path)

    def load_landmarks(self) -> LandmarkSet:
        if self.landmarks is None and self.landmarks_path is not None:
            self.landmarks = read_landmarks(self.landmarks_path)
        return self.landmarks


@dataclass
class LabelMap:
    """Integer label volume where value i+1 marks the cube of the i-th class."""

    volume: Volume3D
    label_values: dict

    def __post_init__(self):
        present = set(np.unique(self.volume.data))
        present.discard(0)
        known = set(self.label_values.values())
        if not present <= known:
            raise ValidationError(f"label values {sorted(present - known)} missing from label_values")

    def connected_component_counts(self) -> dict:
        """Foreground components per landmark (1 everywhere when cubes are intact)."""
        counts = {}
        for name, value in self.label_values.items():
            _, n = ndimage.label(self.volume.data == value)
            counts[name] = n
        return counts


def encode_label_map(geometry: Volume3D, lm: LandmarkSet, cube_radius: int = 1,
                     class_names=None) -> LabelMap:
    """Stamp a (2r+1)^3 cube per landmark into a fresh label volume.

    Cube centers are world positions mapped to the grid and rounded
    (ties-to-even). Centers must lie inside the grid and be pairwise separated
    by at least 2r+1 voxels (Chebyshev); cubes clipped at the border emit a
    warning.
    """
    if cube_radius < 0:
        raise ValidationError(f"cube_radius must be >= 0, got {cube_radius}")
    names = list(class_names) if class_names is not None else list(lm.names)
    unknown = set(lm.names) - set(names)
    if unknown:
        raise EncodingError(f"landmarks not in the class list: {sorted(unknown)}")
    label_values = {name: i + 1 for i, name in enumerate(names)}

    shape = np.array(geometry.shape)
    centers = {}
    for name, pos in zip(lm.names, lm.positions_mm):
        center = np.round(world_to_voxel(geometry, pos)).astype(int)
        if np.any(center < 0) or np.any(center >= shape):
            raise EncodingError(
                f"landmark {name!r} at voxel {tuple(center)} is outside grid {tuple(shape)}"
            )
        centers[name] = center

    items = list(centers.items())
    for i, (name_a, a) in enumerate(items):
        for name_b, b in items[i + 1 :]:
            cheb = int(np.max(np.abs(a - b)))
            if cheb < 2 * cube_radius + 1:
                raise ValidationError(
                    f"landmarks {name_a!r} and {name_b!r} are {cheb} voxels apart "
                    f"(Chebyshev); cubes of radius {cube_radius} would overlap"
                )

    data = np.zeros(geometry.shape, dtype=np.int16)
    for name, center in centers.items():
        lo = np.maximum(center - cube_radius, 0)
        hi = np.minimum(center + cube_radius + 1, shape)
        if np.any(center - cube_radius < 0) or np.any(center + cube_radius + 1 > shape):
            warnings.warn(
                f"label cube for {name!r} clipped at the grid border (center {tuple(center)})",
                stacklevel=2,
            )
        data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = label_values[name]
    return LabelMap(Volume3D(data, geometry.spacing, geometry.origin, geometry.direction),
                    label_values)


def decode_label_centroids(lmap: LabelMap, geometry: Volume3D = None,
                           case_id: str = "decoded") -> LandmarkSet:
    """Per-landmark unweighted centroid of foreground voxels, in world mm.

    Landmarks with no foreground voxels are omitted (with a warning), never
    fatal.
    """
    geometry = geometry if geometry is not None else lmap.volume
    names, positions = [], []
    empty = []
    for name, value in lmap.label_values.items():
        idx = np.argwhere(lmap.volume.data == value)
        if len(idx) == 0:
            empty.append(name)
            continue
        names.append(name)
        positions.append(voxel_to_world(geometry, idx.mean(axis=0)))
    if empty:
        warnings.warn(f"labels with no foreground voxels omitted: {empty}", stacklevel=2)
    return LandmarkSet(case_id, tuple(names), np.array(positions).reshape(len(names), 3))


# ---------------------------------------------------------------------------
# Landmark file I/O
# ---------------------------------------------------------------------------

def read_landmark_records(path) -> tuple:
    """Raw (case_id, [(name, position, confidence)]) without invariant checks.

    Used by validation, which must be able to look at broken files.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise VolumeIOError(f"cannot read landmark file {path}: {e}") from e
    case_id = doc.get("case_id", path.stem)
    records = []
    for entry in doc.get("landmarks", []):
        pos = np.asarray(entry["position_mm"], dtype=float)
        records.append((str(entry["name"]), pos, entry.get("confidence")))
    return case_id, records


def read_landmarks(path) -> LandmarkSet:
    case_id, records = read_landmark_records(path)
    names = tuple(name for name, _, _ in records)
    positions = np.array([pos for _, pos, _ in records]).reshape(len(records), 3)
    confs = [c for _, _, c in records]
    confidences = np.array(confs, dtype=float) if all(c is not None for c in confs) and confs else None
    return LandmarkSet(case_id, names, positions, confidences)


def write_landmarks(path, lm: LandmarkSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, pos) in enumerate(zip(lm.names, lm.positions_mm)):
        entry = {"name": name, "position_mm": [float(x) for x in pos]}
        if lm.confidences is not None:
            entry["confidence"] = float(lm.confidences[i])
        entries.append(entry)
    doc = {"case_id": lm.case_id, "landmarks": entries}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Dataset directory
# ---------------------------------------------------------------------------

@dataclass
class DatasetInfo:
    name: str
    modality: str
    classes: list
    biometry: list = None

    def __post_init__(self):
        if self.modality not in ("CT", "other"):
            raise ValidationError(f"modality must be 'CT' or 'other', got {self.modality!r}")
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError("dataset class list contains duplicates")
        if self.biometry:
            known = set(self.classes)
            for measurement, a, b in self.biometry:
                if a not in known or b not in known:
                    raise ValidationError(
                        f"biometry measurement {measurement!r} references unknown landmarks"
                    )


def load_dataset_info(root) -> DatasetInfo:
    root = Path(root)
    doc = json.loads((root / "dataset.json").read_text())
    biometry = [tuple(entry) for entry in doc["biometry"]] if doc.get("biometry") else None
    return DatasetInfo(doc["name"], doc["modality"], list(doc["classes"]), biometry)


def save_dataset_info(root, info: DatasetInfo) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    doc = {"name": info.name, "modality": info.modality, "classes": list(info.classes)}
    if info.biometry:
        doc["biometry"] = [list(entry) for entry in info.biometry]
    (root / "dataset.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_cases(root, split: str = "train") -> list:
    """Cases from imagesTr/landmarksTr (train) or imagesTs/landmarksTs (test)."""
    root = Path(root)
    suffix = {"train": "Tr", "test": "Ts"}[split]
    images_dir = root / f"images{suffix}"
    landmarks_dir = root / f"landmarks{suffix}"
    if not images_dir.is_dir():
        return []
    cases = []
    seen = set()
    for path in sorted(images_dir.iterdir()):
        stem = image_stem(path)
        if stem in seen or not path.is_file():
            continue
        seen.add(stem)
        lm_path = landmarks_dir / f"{stem}.json"
        cases.append(CaseRecord(stem, path, lm_path if lm_path.exists() else None))
    return cases


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class CaseValidation:
    case_id: str
    out_of_grid: list = field(default_factory=list)
    separation_native: list = field(default_factory=list)
    separation_target: list = field(default_factory=list)
    missing_classes: list = field(default_factory=list)
    unexpected_classes: list = field(default_factory=list)
    nonfinite: list = field(default_factory=list)
    clipped: list = field(default_factory=list)

    @property
    def violations(self) -> int:
        return (len(self.out_of_grid) + len(self.separation_native)
                + len(self.separation_target) + len(self.missing_classes)
                + len(self.unexpected_classes) + len(self.nonfinite))


@dataclass
class ValidationReport:
    cases: list

    @property
    def ok(self) -> bool:
        return all(c.violations == 0 for c in self.cases)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "cases": [
                {
                    "case_id": c.case_id,
                    "out_of_grid": c.out_of_grid,
                    "separation_native": [list(v) for v in c.separation_native],
                    "separation_target": [list(v) for v in c.separation_target],
                    "missing_classes": c.missing_classes,
                    "unexpected_classes": c.unexpected_classes,
                    "nonfinite": c.nonfinite,
                    "clipped": c.clipped,
                }
                for c in self.cases
            ],
        }


def _separation_violations(names, voxel_coords, threshold=MIN_SEPARATION_VOXELS):
    out = []
    rounded = [np.round(v) for v in voxel_coords]
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            cheb = float(np.max(np.abs(rounded[i] - rounded[j])))
            if cheb < threshold:
                out.append((names[i], names[j], cheb))
    return out


def validate_dataset(cases, classes=None, target_spacing=None,
                     load_volume_fn=None) -> ValidationReport:
    """Report-only dataset checks: grid bounds, minimum separation (at native
    and, when given, plan target spacing), class completeness, finiteness."""
    from .volume_io import load_volume as _default_load

    load_volume_fn = load_volume_fn or _default_load
    declared = list(classes) if classes is not None else None
    results = []
    for case in cases:
        cv = CaseValidation(case.case_id)
        results.append(cv)

        if case.landmarks_path is not None:
            _, records = read_landmark_records(case.landmarks_path)
        elif case.landmarks is not None:
            records = [(n, p, None) for n, p in zip(case.landmarks.names, case.landmarks.positions_mm)]
        else:
            continue

        finite = []
        for name, pos, _ in records:
            if not np.all(np.isfinite(pos)):
                cv.nonfinite.append(name)
            else:
                finite.append((name, pos))

        names = [n for n, _ in finite]
        if declared is not None:
            cv.missing_classes = sorted(set(declared) - set(names))
            cv.unexpected_classes = sorted(set(names) - set(declared))

        geometry = load_volume_fn(case.image_path)
        shape = np.array(geometry.shape)
        voxels = []
        in_grid_names = []
        for name, pos in finite:
            vox = world_to_voxel(geometry, pos)
            rounded = np.round(vox)
            if np.any(rounded < 0) or np.any(rounded >= shape):
                cv.out_of_grid.append(name)
                continue
            if np.any(rounded - 1 < 0) or np.any(rounded + 2 > shape):
                cv.clipped.append(name)
            voxels.append(vox)
            in_grid_names.append(name)

        cv.separation_native = _separation_violations(in_grid_names, voxels)
        if target_spacing is not None:
            factor = geometry.spacing / np.asarray(target_spacing, dtype=float)
            cv.separation_target = _separation_violations(
                in_grid_names, [v * factor for v in voxels]
            )
    return ValidationReport(results)
