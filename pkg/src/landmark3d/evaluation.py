"""Radial errors, SDR, biometry errors, and report aggregation.

All metrics are in world mm (the synthetic suite may rescale to voxel units
via an explicit voxel size). Aggregation is micro: pooled over every landmark
instance across cases, with population standard deviation.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import read_landmarks
from .errors import EvaluationError
from .geometry import LandmarkSet


@dataclass
class BiometrySpec:
    """Named measurements, each the distance between two landmark classes."""

    measurements: list  # of (measurement_name, landmark_a, landmark_b)

    def __post_init__(self):
        names = [m[0] for m in self.measurements]
        if len(set(names)) != len(names):
            raise EvaluationError("duplicate biometry measurement names")


def radial_errors(gt: LandmarkSet, pred: LandmarkSet) -> np.ndarray:
    """Per-landmark Euclidean distance (mm), matched by name, in gt order."""
    gt_names, pred_names = set(gt.names), set(pred.names)
    if gt_names != pred_names:
        missing = sorted(gt_names - pred_names)
        extra = sorted(pred_names - gt_names)
        raise EvaluationError(
            f"landmark name sets differ; missing from prediction: {missing}, "
            f"unexpected in prediction: {extra}"
        )
    return np.array([
        float(np.linalg.norm(pred.position_of(name) - gt.position_of(name)))
        for name in gt.names
    ])


def sdr(errors, thresholds) -> dict:
    """Success detection rate per threshold: % of errors <= t (inclusive)."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise EvaluationError("cannot compute SDR of an empty error list")
    out = {}
    for t in thresholds:
        t = float(t)
        if t <= 0:
            raise EvaluationError(f"thresholds must be positive, got {t}")
        out[t] = float((errors <= t).mean() * 100.0)
    return out


def biometry_error(gt: LandmarkSet, pred: LandmarkSet, spec: BiometrySpec) -> dict:
    """Absolute difference of measurement lengths, |‖pA−pB‖ − ‖gA−gB‖|, per
    measurement."""
    out = {}
    for measurement, a, b in spec.measurements:
        try:
            gt_len = np.linalg.norm(gt.position_of(a) - gt.position_of(b))
            pred_len = np.linalg.norm(pred.position_of(a) - pred.position_of(b))
        except KeyError as e:
            raise EvaluationError(
                f"biometry measurement {measurement!r} references unknown landmark {e.args[0]!r}"
            ) from None
        out[measurement] = float(abs(pred_len - gt_len))
    return out


@dataclass
class CaseEval:
    case_id: str
    names: tuple
    errors_mm: np.ndarray
    biometry: dict = None


@dataclass
class EvalReport:
    mre: float
    std: float
    sdr: dict
    per_class: dict       # name -> {"mre", "std", "count"}
    cases: list           # of CaseEval
    thresholds: list
    biometry_per_measurement: dict = None
    biometry_mean: float = None
    biometry_std: float = None
    unit: str = "mm"

    def to_dict(self) -> dict:
        doc = {
            "unit": self.unit,
            "num_cases": len(self.cases),
            "num_landmarks": int(sum(len(c.errors_mm) for c in self.cases)),
            "mre": self.mre,
            "std": self.std,
            "thresholds": [float(t) for t in self.thresholds],
            "sdr": {f"{float(t):g}": v for t, v in self.sdr.items()},
            "per_class": self.per_class,
            "per_case": {
                c.case_id: {
                    "mean_error": float(np.mean(c.errors_mm)),
                    "errors": {n: float(e) for n, e in zip(c.names, c.errors_mm)},
                    **({"biometry": c.biometry} if c.biometry else {}),
                }
                for c in self.cases
            },
        }
        if self.biometry_per_measurement is not None:
            doc["biometry"] = {
                "per_measurement": self.biometry_per_measurement,
                "mean": self.biometry_mean,
                "std": self.biometry_std,
            }
        return doc


def aggregate_report(case_evals, thresholds=(2.0, 3.0, 4.0), unit: str = "mm") -> EvalReport:
    """Pool all landmark instances across cases (micro aggregation)."""
    if not case_evals:
        raise EvaluationError("no evaluated cases to aggregate")
    pooled = np.concatenate([np.asarray(c.errors_mm, dtype=float) for c in case_evals])
    by_class = {}
    for c in case_evals:
        for name, err in zip(c.names, c.errors_mm):
            by_class.setdefault(name, []).append(float(err))
    per_class = {
        name: {
            "mre": float(np.mean(v)),
            "std": float(np.std(v)),
            "count": len(v),
        }
        for name, v in by_class.items()
    }

    biometry_per, bio_mean, bio_std = None, None, None
    bio_cases = [c for c in case_evals if c.biometry]
    if bio_cases:
        by_measurement = {}
        for c in bio_cases:
            for name, err in c.biometry.items():
                by_measurement.setdefault(name, []).append(err)
        biometry_per = {
            name: {"mean": float(np.mean(v)), "std": float(np.std(v)), "count": len(v)}
            for name, v in by_measurement.items()
        }
        all_bio = np.concatenate([list(c.biometry.values()) for c in bio_cases])
        bio_mean, bio_std = float(all_bio.mean()), float(all_bio.std())

    return EvalReport(
        mre=float(pooled.mean()),
        std=float(pooled.std()),
        sdr=sdr(pooled, thresholds),
        per_class=per_class,
        cases=list(case_evals),
        thresholds=list(thresholds),
        biometry_per_measurement=biometry_per,
        biometry_mean=bio_mean,
        biometry_std=bio_std,
        unit=unit,
    )


def evaluate_directories(gt_dir, pred_dir, thresholds=(2.0, 3.0, 4.0),
                         biometry_spec: BiometrySpec = None,
                         voxel_size: float = None) -> EvalReport:
    """Match landmark files by stem across two directories and aggregate.

    ``voxel_size`` rescales errors and thresholds from mm to voxel units
    (synthetic-suite escape hatch; mm is the reporting default).
    """
    gt_dir, pred_dir = Path(gt_dir), Path(pred_dir)
    gt_files = sorted(gt_dir.glob("*.json"))
    if not gt_files:
        raise EvaluationError(f"no ground-truth landmark files in {gt_dir}")
    case_evals = []
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise EvaluationError(f"no prediction for case {gt_path.stem!r} in {pred_dir}")
        gt = read_landmarks(gt_path)
        pred = read_landmarks(pred_path)
        errors = radial_errors(gt, pred)
        if voxel_size is not None:
            errors = errors / float(voxel_size)
        bio = biometry_error(gt, pred, biometry_spec) if biometry_spec else None
        if bio is not None and voxel_size is not None:
            bio = {k: v / float(voxel_size) for k, v in bio.items()}
        case_evals.append(CaseEval(gt.case_id, gt.names, errors, bio))
    unit = "voxel" if voxel_size is not None else "mm"
    return aggregate_report(case_evals, thresholds, unit=unit)
