"""Static rendering of evaluation outputs: markdown tables and slice overlays.

Overlays draw, per ground-truth landmark, the axial slice through the GT
point with a blue GT cross and a yellow prediction cross (in-plane
projection). Output is plain PNG via Pillow; re-rendering is byte-stable.
"""

import re
import warnings
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .evaluation import EvalReport
from .geometry import LandmarkSet, Volume3D, world_to_voxel

GT_COLOR = (40, 90, 255)
PRED_COLOR = (255, 220, 0)
MARKER_ARM = 3


def _fmt_pm(mean: float, std: float) -> str:
    return f"{mean:.2f}±{std:.2f}"


def render_tables(report: EvalReport) -> str:
    """Markdown summary: MRE±Std plus SDR columns, then the per-class table."""
    unit = report.unit
    lines = ["# Evaluation report", ""]
    lines.append(f"Cases: {len(report.cases)}; landmark instances: "
                 f"{sum(len(c.errors_mm) for c in report.cases)}")
    lines.append("")

    sdr_headers = " | ".join(f"SDR@{t:g}{unit} [%]" for t in report.thresholds)
    sdr_values = " | ".join(f"{report.sdr[float(t)]:.2f}" for t in report.thresholds)
    lines.append(f"| MRE±Std [{unit}] | {sdr_headers} |")
    lines.append("|---" * (1 + len(report.thresholds)) + "|")
    lines.append(f"| {_fmt_pm(report.mre, report.std)} | {sdr_values} |")
    lines.append("")

    lines.append("## Per-class results")
    lines.append("")
    lines.append(f"| Landmark class | MRE±Std [{unit}] | n |")
    lines.append("|---|---|---|")
    for name in sorted(report.per_class):
        row = report.per_class[name]
        lines.append(f"| {name} | {_fmt_pm(row['mre'], row['std'])} | {row['count']} |")
    lines.append("")

    if report.biometry_per_measurement is not None:
        lines.append("## Biometry measurements")
        lines.append("")
        lines.append(f"| Measurement | Error±Std [{unit}] | n |")
        lines.append("|---|---|---|")
        for name in sorted(report.biometry_per_measurement):
            row = report.biometry_per_measurement[name]
            lines.append(f"| {name} | {_fmt_pm(row['mean'], row['std'])} | {row['count']} |")
        lines.append(f"| all | {_fmt_pm(report.biometry_mean, report.biometry_std)} | |")
        lines.append("")
    return "\n".join(lines)


def landmark_pixel(geometry: Volume3D, position_mm) -> tuple:
    """Rounded voxel index of a world point (drawing helper)."""
    return tuple(int(v) for v in np.round(world_to_voxel(geometry, position_mm)))


def _slice_to_rgb(slab: np.ndarray, scale: int) -> Image.Image:
    lo, hi = float(slab.min()), float(slab.max())
    norm = (slab - lo) / (hi - lo) if hi > lo else np.zeros_like(slab)
    gray = (norm * 255).astype(np.uint8)
    # Array axis 0 is x; render x horizontally, y vertically.
    img = Image.fromarray(gray.T, mode="L").convert("RGB")
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    return img


def _draw_cross(draw: ImageDraw.ImageDraw, x: int, y: int, color, scale: int) -> None:
    arm = MARKER_ARM * scale
    draw.line([(x - arm, y), (x + arm, y)], fill=color, width=scale)
    draw.line([(x, y - arm), (x, y + arm)], fill=color, width=scale)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def render_overlays(image: Volume3D, gt: LandmarkSet, pred: LandmarkSet, out_dir,
                    prefix: str = "overlay") -> list:
    """One axial PNG per GT landmark; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shape = np.array(image.shape)
    scale = max(1, 256 // int(max(shape[0], shape[1])))
    written = []
    for i, name in enumerate(gt.names):
        gx, gy, gz = landmark_pixel(image, gt.positions_mm[i])
        if not (0 <= gx < shape[0] and 0 <= gy < shape[1] and 0 <= gz < shape[2]):
            warnings.warn(f"landmark {name!r} outside the volume; overlay skipped", stacklevel=2)
            continue
        img = _slice_to_rgb(np.asarray(image.data[:, :, gz], dtype=float), scale)
        draw = ImageDraw.Draw(img)
        _draw_cross(draw, gx * scale, gy * scale, GT_COLOR, scale)
        if name in pred.names:
            px, py, _ = landmark_pixel(image, pred.position_of(name))
            _draw_cross(draw, px * scale, py * scale, PRED_COLOR, scale)
        path = out_dir / f"{prefix}_{i:02d}_{_safe(name)}.png"
        img.save(path, format="PNG")
        written.append(path)
    return written


def write_report_bundle(report: EvalReport, out_dir, overlay_paths=None) -> None:
    """tables.md + results.json + an index.md linking everything."""
    import json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "tables.md").write_text(render_tables(report))
    (out_dir / "results.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    lines = ["# Results", "", "- [Tables](tables.md)", "- [Raw metrics](results.json)"]
    if overlay_paths:
        lines.append("")
        lines.append("## Overlays")
        lines.append("")
        for p in overlay_paths:
            p = Path(p)
            lines.append(f"- ![{p.stem}]({p.name})")
    (out_dir / "index.md").write_text("\n".join(lines) + "\n")
