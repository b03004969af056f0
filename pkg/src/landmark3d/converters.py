"""Converters from common landmark file layouts to the internal dataset format.

Supported source layouts, one coordinate file per image (matched by stem):

* csv_points: ``name,x,y,z`` rows (header line tolerated);
* fcsv_points: 3D Slicer fiducial files (``#``-comment header, the label
  column carries the name);
* coordinate_json: a JSON object mapping landmark name -> [x, y, z].

Positions are world mm. The internal convention is LPS-like; sources in RAS
must say so via the explicit ``coordinates="ras"`` flag, which negates x and y.
"""

import csv
import json
import shutil
from pathlib import Path

import numpy as np

from .codec import DatasetInfo, save_dataset_info, write_landmarks
from .errors import ConversionError
from .geometry import LandmarkSet
from .volume_io import IMAGE_EXTENSIONS, find_image

FORMAT_EXTENSIONS = {
    "csv_points": ".csv",
    "fcsv_points": ".fcsv",
    "coordinate_json": ".json",
}


def _parse_csv_points(path: Path):
    records = []
    with open(path, newline="") as f:
        for row_num, row in enumerate(csv.reader(f)):
            if not row or row[0].lstrip().startswith("#"):
                continue
            fields = [c.strip() for c in row]
            if len(fields) < 4:
                raise ConversionError(f"{path}:{row_num + 1}: expected name,x,y,z")
            try:
                xyz = [float(v) for v in fields[1:4]]
            except ValueError:
                if row_num == 0:  # header line
                    continue
                raise ConversionError(f"{path}:{row_num + 1}: non-numeric coordinates") from None
            records.append((fields[0], xyz))
    return records


def _parse_fcsv_points(path: Path):
    records = []
    with open(path, newline="") as f:
        for row_num, line in enumerate(f):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = [c.strip() for c in line.split(",")]
            if len(fields) < 4:
                raise ConversionError(f"{path}:{row_num + 1}: expected Slicer fiducial columns")
            try:
                xyz = [float(v) for v in fields[1:4]]
            except ValueError:
                raise ConversionError(f"{path}:{row_num + 1}: non-numeric coordinates") from None
            name = fields[11] if len(fields) > 11 and fields[11] else fields[0]
            records.append((name, xyz))
    return records


def _parse_coordinate_json(path: Path):
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict):
        raise ConversionError(f"{path}: expected an object mapping name -> [x, y, z]")
    return [(str(name), [float(v) for v in pos]) for name, pos in doc.items()]


_PARSERS = {
    "csv_points": _parse_csv_points,
    "fcsv_points": _parse_fcsv_points,
    "coordinate_json": _parse_coordinate_json,
}


def _copy_image(src: Path, images_dir: Path, case_id: str) -> None:
    for ext in IMAGE_EXTENSIONS:
        if src.name.endswith(ext):
            shutil.copy2(src, images_dir / f"{case_id}{ext}")
            if ext == ".raw":
                sidecar = src.with_suffix(".hdr")
                if sidecar.exists():
                    shutil.copy2(sidecar, images_dir / f"{case_id}.hdr")
            return
    raise ConversionError(f"unsupported image format: {src}")


def convert_dataset(input_dir, fmt: str, output_dir, dataset_name: str = None,
                    modality: str = "other", coordinates: str = "lps") -> DatasetInfo:
    """Convert one directory of (image, coordinate-file) pairs into the
    internal layout. All converted cases land in the training split."""
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    if fmt not in _PARSERS:
        raise ConversionError(f"unknown format {fmt!r}; know {sorted(_PARSERS)}")
    if coordinates not in ("lps", "ras"):
        raise ConversionError(f"coordinates must be 'lps' or 'ras', got {coordinates!r}")
    coord_files = sorted(input_dir.glob(f"*{FORMAT_EXTENSIONS[fmt]}"))
    if not coord_files:
        raise ConversionError(
            f"no {FORMAT_EXTENSIONS[fmt]} coordinate files found in {input_dir}"
        )

    images_dir = output_dir / "imagesTr"
    landmarks_dir = output_dir / "landmarksTr"
    images_dir.mkdir(parents=True, exist_ok=True)
    landmarks_dir.mkdir(parents=True, exist_ok=True)

    classes = None
    log = {"cases": [], "dropped": [], "renamed": []}
    for coord_path in coord_files:
        case_id = coord_path.stem
        image = find_image(input_dir, case_id)
        if image is None:
            raise ConversionError(f"no image next to coordinate file {coord_path.name}")

        records = _PARSERS[fmt](coord_path)
        names, positions = [], []
        for raw_name, xyz in records:
            name = raw_name.strip()
            if name != raw_name:
                log["renamed"].append({"case": case_id, "from": raw_name, "to": name})
            if not np.all(np.isfinite(xyz)):
                log["dropped"].append({"case": case_id, "name": name, "reason": "non-finite"})
                continue
            if coordinates == "ras":
                xyz = [-xyz[0], -xyz[1], xyz[2]]
            names.append(name)
            positions.append(xyz)

        if classes is None:
            classes = list(names)
        elif set(names) != set(classes):
            missing = sorted(set(classes) - set(names))
            extra = sorted(set(names) - set(classes))
            raise ConversionError(
                f"case {case_id!r} has an inconsistent class list; "
                f"missing: {missing}, unexpected: {extra}"
            )

        lm = LandmarkSet(case_id, tuple(names), np.array(positions).reshape(len(names), 3))
        write_landmarks(landmarks_dir / f"{case_id}.json", lm)
        _copy_image(image, images_dir, case_id)
        log["cases"].append(case_id)

    info = DatasetInfo(dataset_name or output_dir.name, modality, classes)
    save_dataset_info(output_dir, info)
    (output_dir / "conversion_log.json").write_text(
        json.dumps(log, indent=2, sort_keys=True) + "\n")
    return info
