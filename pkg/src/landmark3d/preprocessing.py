"""Raw cases -> plan-conformant tensors: resample, normalize, re-encode labels.

Label maps are never resampled as images; they are re-encoded from the
original world-mm landmark positions on the resampled grid, which keeps cube
geometry exact at training resolution.

The on-disk cache stores gzip-wrapped .npy arrays (mtime pinned to 0) plus a
geometry sidecar, so re-running preprocessing is bit-identical.
"""

import gzip
import json
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import CaseRecord, LabelMap, encode_label_map
from .errors import ConfigError, PreprocessingError, EncodingError
from .geometry import Volume3D, resample_volume
from .planning import Fingerprint, Plan
from .volume_io import load_volume


def normalize_intensity(v: Volume3D, scheme: str, fp: Fingerprint = None) -> Volume3D:
    """ct_clip_zscore clips to the fingerprint's global percentile window and
    z-scores with the clipped pooled stats; zscore standardizes per case."""
    data = np.asarray(v.data, dtype=np.float32)
    if scheme == "ct_clip_zscore":
        if fp is None:
            raise ConfigError("ct_clip_zscore requires a fingerprint")
        data = np.clip(data, fp.percentile_00_5, fp.percentile_99_5)
        sigma = fp.clipped_std
        if sigma == 0:
            warnings.warn("pooled intensity std is 0; skipping scale", stacklevel=2)
            sigma = 1.0
        data = (data - fp.clipped_mean) / sigma
    elif scheme == "zscore":
        mean = float(data.mean())
        sigma = float(data.std())
        if sigma == 0:
            warnings.warn("case intensity std is 0; skipping scale", stacklevel=2)
            sigma = 1.0
        data = (data - mean) / sigma
    else:
        raise ConfigError(f"unknown normalization scheme {scheme!r}")
    return v.with_data(data.astype(np.float32))


@dataclass
class PreprocessedCase:
    case_id: str
    image: Volume3D
    labels: LabelMap = None
    classes: list = None

    @property
    def label_data(self) -> np.ndarray:
        return self.labels.volume.data if self.labels is not None else None


def preprocess_case(case: CaseRecord, plan: Plan, fp: Fingerprint, classes,
                    load_volume_fn=load_volume) -> PreprocessedCase:
    """Resample (linear) to plan spacing, normalize, and re-encode the label
    cubes on the resampled geometry. Image and labels share shape/geometry."""
    v = load_volume_fn(case.image_path)
    resampled = resample_volume(v, plan.target_spacing, mode="linear")
    image = normalize_intensity(resampled, plan.normalization, fp)

    labels = None
    lm = case.load_landmarks()
    if lm is not None:
        try:
            labels = encode_label_map(image, lm, cube_radius=1, class_names=classes)
        except EncodingError as e:
            raise PreprocessingError(f"case {case.case_id!r}: {e}") from e
    return PreprocessedCase(case.case_id, image, labels, list(classes))


# ---------------------------------------------------------------------------
# Cache (keyed by dataset + plan hash at the directory level)
# ---------------------------------------------------------------------------

def _write_array_gz(path: Path, arr: np.ndarray) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as gz:
            np.save(gz, arr)
    os.replace(tmp, path)


def _read_array_gz(path: Path) -> np.ndarray:
    with gzip.open(path, "rb") as gz:
        return np.load(gz)


def cache_paths(cache_dir, case_id: str) -> dict:
    cache_dir = Path(cache_dir)
    return {
        "image": cache_dir / f"{case_id}.image.npy.gz",
        "labels": cache_dir / f"{case_id}.labels.npy.gz",
        "geometry": cache_dir / f"{case_id}.geometry.json",
    }


def save_preprocessed(cache_dir, pc: PreprocessedCase) -> None:
    paths = cache_paths(cache_dir, pc.case_id)
    paths["image"].parent.mkdir(parents=True, exist_ok=True)
    _write_array_gz(paths["image"], np.asarray(pc.image.data, dtype=np.float32))
    geom = {
        "case_id": pc.case_id,
        "spacing": [float(x) for x in pc.image.spacing],
        "origin": [float(x) for x in pc.image.origin],
        "direction": [[float(x) for x in row] for row in pc.image.direction],
        "classes": list(pc.classes or []),
        "has_labels": pc.labels is not None,
    }
    if pc.labels is not None:
        _write_array_gz(paths["labels"], np.asarray(pc.labels.volume.data, dtype=np.int16))
    tmp = paths["geometry"].with_name(paths["geometry"].name + ".tmp")
    tmp.write_text(json.dumps(geom, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, paths["geometry"])


def load_preprocessed(cache_dir, case_id: str) -> PreprocessedCase:
    paths = cache_paths(cache_dir, case_id)
    geom = json.loads(paths["geometry"].read_text())
    image = Volume3D(
        _read_array_gz(paths["image"]),
        geom["spacing"], geom["origin"], np.array(geom["direction"]),
    )
    labels = None
    classes = geom.get("classes") or []
    if geom.get("has_labels"):
        label_volume = image.with_data(_read_array_gz(paths["labels"]))
        labels = LabelMap(label_volume, {name: i + 1 for i, name in enumerate(classes)})
    return PreprocessedCase(case_id, image, labels, classes)


def is_cached(cache_dir, case_id: str) -> bool:
    paths = cache_paths(cache_dir, case_id)
    return paths["geometry"].exists() and paths["image"].exists()


def preprocess_dataset(cases, plan: Plan, fp: Fingerprint, classes, cache_dir,
                       load_volume_fn=load_volume) -> list:
    """Preprocess every case into the cache (skipping fresh entries); returns
    the case ids in processing order."""
    done = []
    for case in cases:
        if not is_cached(cache_dir, case.case_id):
            pc = preprocess_case(case, plan, fp, classes, load_volume_fn)
            save_preprocessed(cache_dir, pc)
        done.append(case.case_id)
    return done
