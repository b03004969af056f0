"""Self-configuring 3D landmark detection via heatmap regression.

Landmarks live in multi-label segmentation maps (one 3x3x3 cube per class),
are converted on the fly to distance-profile heatmap targets inside the loss,
trained with a BCE-TopK objective on a plan-derived 3D U-Net, and decoded by
channel-wise argmax under Gaussian-blended sliding-window inference.
"""

from .geometry import LandmarkSet, Volume3D, resample_volume, voxel_to_world, world_to_voxel
from .codec import LabelMap, decode_label_centroids, encode_label_map, validate_dataset
from .heatmap_loss import HeatmapTarget, bce_topk_loss, mse_loss, patch_to_heatmap
from .planning import Fingerprint, Plan, compute_fingerprint, derive_plan
from .inference import extract_landmarks, sliding_window_predict
from .evaluation import aggregate_report, biometry_error, radial_errors, sdr

__version__ = "0.1.0"

__all__ = [
    "LandmarkSet", "Volume3D", "resample_volume", "voxel_to_world", "world_to_voxel",
    "LabelMap", "decode_label_centroids", "encode_label_map", "validate_dataset",
    "HeatmapTarget", "bce_topk_loss", "mse_loss", "patch_to_heatmap",
    "Fingerprint", "Plan", "compute_fingerprint", "derive_plan",
    "extract_landmarks", "sliding_window_predict",
    "aggregate_report", "biometry_error", "radial_errors", "sdr",
]
