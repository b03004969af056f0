"""Label patches -> distance-profile heatmap targets, and the training losses.

The conversion happens on the fly in the loss path (after augmentation), so
heatmaps are never stored. Each present class contributes a channel holding
max(0, (radius - d)/radius) around the centroid of its label region: 1 at the
center, linear falloff, 0 at Euclidean distance >= radius.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError

EPSILON = 1e-7


@dataclass
class HeatmapTarget:
    """Per-class regression target in [0,1].

    channels: (C, X, Y, Z) float32; centers: per-channel continuous voxel
    coordinate of the profile peak, or None for classes absent from the patch
    (their channel is all zeros).
    """

    channels: np.ndarray
    centers: list
    radius_voxels: int


def _profile_box(shape, center, radius):
    """Bounding box around ``center`` and the profile values inside it."""
    lo = np.maximum(np.ceil(center - radius).astype(int), 0)
    hi = np.minimum(np.floor(center + radius).astype(int) + 1, shape)
    grids = np.meshgrid(*(np.arange(l, h) for l, h in zip(lo, hi)), indexing="ij")
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    profile = np.clip((radius - np.sqrt(d2)) / radius, 0.0, None)
    return lo, hi, profile.astype(np.float32)


def edt_blob(shape, center, radius) -> np.ndarray:
    """Full-volume analytic profile for a single center (test/debug utility)."""
    out = np.zeros(tuple(shape), dtype=np.float32)
    lo, hi, profile = _profile_box(np.array(shape), np.asarray(center, dtype=float), radius)
    out[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = profile
    return out


def patch_to_heatmap(label_patch: np.ndarray, class_count: int, radius: int) -> HeatmapTarget:
    """Convert a multi-label patch to per-class heatmap channels.

    Absent classes are legal (random patches miss landmarks) and yield zero
    channels; a partially cropped label region keeps its in-patch centroid.
    """
    label_patch = np.asarray(label_patch)
    if radius < 1:
        raise ContractError(f"radius must be >= 1, got {radius}")
    if label_patch.size and (label_patch.min() < 0 or label_patch.max() > class_count):
        raise ContractError(
            f"label values must lie in 0..{class_count}, got "
            f"[{label_patch.min()}, {label_patch.max()}]"
        )
    shape = np.array(label_patch.shape)
    channels = np.zeros((class_count, *label_patch.shape), dtype=np.float32)
    centers = [None] * class_count
    for c in range(1, class_count + 1):
        idx = np.argwhere(label_patch == c)
        if idx.size == 0:
            continue
        center = idx.mean(axis=0)
        centers[c - 1] = center
        lo, hi, profile = _profile_box(shape, center, radius)
        channels[c - 1, lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = profile
    return HeatmapTarget(channels, centers, radius)


def _target_tensor(target, like: torch.Tensor) -> torch.Tensor:
    if isinstance(target, HeatmapTarget):
        target = target.channels
    return torch.as_tensor(target, dtype=like.dtype, device=like.device)


def _flatten_per_patch(x: torch.Tensor) -> torch.Tensor:
    # (C, X, Y, Z) is one patch; (B, C, X, Y, Z) ranks within each batch element.
    if x.dim() == 5:
        return x.reshape(x.shape[0], -1)
    return x.reshape(1, -1)


def bce_topk_loss(logits: torch.Tensor, target, topk_percent: float) -> torch.Tensor:
    """Mean of the hardest ``topk_percent`` voxel-wise BCE values per patch.

    BCE is taken on sigmoid(logits) clamped to [1e-7, 1 - 1e-7], ranked
    jointly over all channels and voxels of the patch. topk_percent = 100 is
    exactly mean BCE.
    """
    if not 0 < topk_percent <= 100:
        raise ContractError(f"topk_percent must be in (0, 100], got {topk_percent}")
    t = _target_tensor(target, logits)
    if logits.shape != t.shape:
        raise ContractError(f"logits shape {tuple(logits.shape)} != target shape {tuple(t.shape)}")
    p = torch.sigmoid(logits).clamp(EPSILON, 1.0 - EPSILON)
    ell = -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))
    flat = _flatten_per_patch(ell)
    k = math.ceil(topk_percent / 100.0 * flat.shape[1])
    hardest, _ = torch.topk(flat, k, dim=1)
    return hardest.mean()


def mse_loss(logits: torch.Tensor, target) -> torch.Tensor:
    """Mean squared error between sigmoid(logits) and the target heatmap."""
    t = _target_tensor(target, logits)
    if logits.shape != t.shape:
        raise ContractError(f"logits shape {tuple(logits.shape)} != target shape {tuple(t.shape)}")
    return ((torch.sigmoid(logits) - t) ** 2).mean()


def training_loss(logits: torch.Tensor, target, loss_kind: str, topk_percent: float) -> torch.Tensor:
    if loss_kind == "bce_topk":
        return bce_topk_loss(logits, target, topk_percent)
    if loss_kind == "mse":
        return mse_loss(logits, target)
    raise ContractError(f"unknown loss {loss_kind!r}")
