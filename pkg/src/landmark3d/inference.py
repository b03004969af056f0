"""Whole-volume prediction: Gaussian-blended sliding window + channel argmax.

Tiles of plan patch size cover the volume with 50% overlap (the final tile per
axis snaps inside the bounds); per-tile sigmoid outputs are blended with a
centered Gaussian importance weight (sigma = patch/8 per axis). Blending is a
convex combination, so a constant model stays constant. Tiles are visited in a
fixed lexicographic order, making accumulation deterministic.
"""

import numpy as np
import torch

from .errors import ContractError
from .geometry import LandmarkSet, Volume3D, voxel_to_world
from .planning import Fingerprint, Plan
from .preprocessing import normalize_intensity
from .geometry import resample_volume


def gaussian_importance(patch_size) -> np.ndarray:
    """Separable Gaussian weight over a patch, sigma = size/8 per axis."""
    axes = []
    for n in patch_size:
        center = (n - 1) / 2.0
        sigma = n / 8.0
        i = np.arange(n)
        axes.append(np.exp(-((i - center) ** 2) / (2.0 * sigma * sigma)))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return w.astype(np.float64)


def tile_starts(length: int, patch: int) -> list:
    """Start offsets with 50% overlap; the last tile is snapped inside."""
    if length <= patch:
        return [0]
    step = max(patch // 2, 1)
    starts = list(range(0, length - patch + 1, step))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def sliding_window_predict(model, image: Volume3D, plan: Plan) -> np.ndarray:
    """Blended per-class probability volume, shape (C, X, Y, Z), values in [0,1].

    ``image`` must already be at plan spacing/normalization. Volumes smaller
    than the patch are zero-padded, predicted in one tile, and cropped back.
    """
    patch = np.array(plan.patch_size, dtype=int)
    data = np.asarray(image.data, dtype=np.float32)
    orig_shape = np.array(data.shape)

    pad = np.maximum(patch - orig_shape, 0)
    if np.any(pad > 0):
        data = np.pad(data, [(0, int(p)) for p in pad])
    shape = np.array(data.shape)

    starts = [tile_starts(int(shape[a]), int(patch[a])) for a in range(3)]
    weight = gaussian_importance(patch)

    was_training = bool(getattr(model, "training", False))
    if hasattr(model, "eval"):
        model.eval()

    accumulated = None
    weight_sum = np.zeros(tuple(shape), dtype=np.float64)
    with torch.no_grad():
        for sx in starts[0]:
            for sy in starts[1]:
                for sz in starts[2]:
                    tile = data[sx:sx + patch[0], sy:sy + patch[1], sz:sz + patch[2]]
                    logits = model(torch.from_numpy(tile[None, None].copy()))
                    probs = torch.sigmoid(logits)[0].cpu().numpy().astype(np.float64)
                    if probs.shape[1:] != tuple(patch):
                        raise ContractError(
                            f"model returned spatial shape {probs.shape[1:]}, expected {tuple(patch)}"
                        )
                    if accumulated is None:
                        accumulated = np.zeros((probs.shape[0], *shape), dtype=np.float64)
                    accumulated[:, sx:sx + patch[0], sy:sy + patch[1], sz:sz + patch[2]] += probs * weight
                    weight_sum[sx:sx + patch[0], sy:sy + patch[1], sz:sz + patch[2]] += weight

    if was_training and hasattr(model, "train"):
        model.train()

    heatmap = accumulated / weight_sum
    heatmap = heatmap[:, : orig_shape[0], : orig_shape[1], : orig_shape[2]]
    return heatmap.astype(np.float32)


def extract_landmarks(heatmap: np.ndarray, geometry: Volume3D, class_names,
                      case_id: str = "prediction") -> LandmarkSet:
    """Channel-wise argmax -> world mm. Always returns every class (complete-set
    contract); ties break to the lowest linear index in x-fastest order. The
    heatmap value at the argmax is reported as the landmark's confidence."""
    heatmap = np.asarray(heatmap)
    class_names = list(class_names)
    if heatmap.ndim != 4 or heatmap.shape[0] != len(class_names):
        raise ContractError(
            f"heatmap shape {heatmap.shape} does not match {len(class_names)} classes"
        )
    if heatmap.shape[1:] != geometry.shape:
        raise ContractError(
            f"heatmap spatial shape {heatmap.shape[1:]} != geometry shape {geometry.shape}"
        )
    positions, confidences = [], []
    for channel in heatmap:
        flat = channel.ravel(order="F")
        best = int(np.argmax(flat))
        idx = np.array(np.unravel_index(best, channel.shape, order="F"))
        positions.append(voxel_to_world(geometry, idx))
        confidences.append(float(flat[best]))
    return LandmarkSet(case_id, tuple(class_names), np.array(positions),
                       np.array(confidences))


def predict_case(model, plan: Plan, fp: Fingerprint, class_names, volume: Volume3D,
                 case_id: str):
    """Preprocess a raw volume to plan space, predict, and decode.

    Returns (landmarks, heatmap, plan-space geometry); landmark positions are
    world mm, valid in the original image's frame.
    """
    resampled = resample_volume(volume, plan.target_spacing, mode="linear")
    prepared = normalize_intensity(resampled, plan.normalization, fp)
    heatmap = sliding_window_predict(model, prepared, plan)
    landmarks = extract_landmarks(heatmap, prepared, class_names, case_id=case_id)
    return landmarks, heatmap, prepared
