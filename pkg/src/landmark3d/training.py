"""Patch sampling, the training loop, and checkpointing.

One logical thread owns the parameters. All sampling/augmentation randomness
comes from named numpy sub-streams of the run seed; torch is seeded only for
parameter init, and deterministic algorithms are enforced, so a fixed seed
reproduces the loss curve bit for bit.

checkpoint_best tracks the lowest epoch-mean training loss (validation
inference runs once, at end of training); checkpoint_final is the last epoch.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import DEFAULT_AUGMENT, augment
from .errors import ConfigError, TrainingError
from .heatmap_loss import patch_to_heatmap, training_loss
from .network import build_network
from .planning import Plan
from .preprocessing import PreprocessedCase
from .seeding import child_seed, rng_for

MOMENTUM = 0.99


def polynomial_lr(initial_lr: float, step: int, total_steps: int, power: float) -> float:
    return initial_lr * (1.0 - step / total_steps) ** power


def _extract_window(data: np.ndarray, start: np.ndarray, size, fill=0):
    out = np.full(tuple(size), fill, dtype=data.dtype)
    in_lo = np.maximum(start, 0)
    in_hi = np.minimum(start + size, data.shape)
    if np.any(in_hi <= in_lo):
        return out
    out_lo = in_lo - start
    out_hi = out_lo + (in_hi - in_lo)
    out[out_lo[0]:out_hi[0], out_lo[1]:out_hi[1], out_lo[2]:out_hi[2]] = \
        data[in_lo[0]:in_hi[0], in_lo[1]:in_hi[1], in_lo[2]:in_hi[2]]
    return out


def sample_patch(case: PreprocessedCase, plan: Plan, rng: np.random.Generator,
                 fg_voxels: np.ndarray = None):
    """One (image, label) patch pair of plan patch size, zero-padded at borders.

    With probability oversample_foreground_fraction the patch is centered on a
    uniformly chosen landmark-cube voxel, otherwise on a uniform voxel.
    """
    image = case.image.data
    labels = case.label_data
    if labels is None:
        raise ConfigError(f"case {case.case_id!r} has no labels; cannot sample training patches")
    patch = np.array(plan.patch_size)
    if fg_voxels is None:
        fg_voxels = np.argwhere(labels > 0)

    oversample = rng.uniform() < plan.oversample_foreground_fraction
    if oversample and len(fg_voxels) > 0:
        center = fg_voxels[rng.integers(len(fg_voxels))]
    else:
        center = np.array([rng.integers(n) for n in image.shape])
    start = center - patch // 2
    return (
        _extract_window(image, start, patch, fill=np.float32(0)),
        _extract_window(labels, start, patch, fill=labels.dtype.type(0)),
    )


@dataclass
class TrainState:
    epochs_run: int = 0
    steps_run: int = 0
    epoch_mean_loss: list = field(default_factory=list)
    epoch_median_loss: list = field(default_factory=list)
    best_epoch: int = -1
    validation_mre: float = None
    validation_per_case: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "steps_run": self.steps_run,
            "epoch_mean_loss": self.epoch_mean_loss,
            "epoch_median_loss": self.epoch_median_loss,
            "best_epoch": self.best_epoch,
            "validation_mre": self.validation_mre,
            "validation_per_case": self.validation_per_case,
        }


def save_checkpoint(path, model, plan: Plan, classes, epoch: int, seed: int) -> None:
    torch.save(
        {
            "model": model.state_dict(),
            "plan": plan.to_dict(),
            "classes": list(classes),
            "epoch": epoch,
            "seed": seed,
        },
        str(path),
    )


def load_checkpoint(path):
    """Rebuild the network from a checkpoint; forward outputs are bit-identical
    to the saved model's."""
    doc = torch.load(str(path), map_location="cpu", weights_only=False)
    plan = Plan.from_dict(doc["plan"])
    model = build_network(plan, len(doc["classes"]))
    model.load_state_dict(doc["model"])
    model.eval()
    return model, plan, doc["classes"]


def _batch_tensors(cases, plan, rng, fg_cache, augment_config):
    images, targets = [], []
    class_count = len(cases[0].classes)
    for _ in range(plan.batch_size):
        case = cases[rng.integers(len(cases))]
        if case.case_id not in fg_cache:
            fg_cache[case.case_id] = np.argwhere(case.label_data > 0)
        img, lbl = sample_patch(case, plan, rng, fg_cache[case.case_id])
        img, lbl = augment(img, lbl, rng, augment_config)
        images.append(img)
        targets.append(patch_to_heatmap(lbl, class_count, plan.edt_radius_voxels).channels)
    x = torch.from_numpy(np.stack(images)[:, None])  # (B, 1, X, Y, Z)
    t = torch.from_numpy(np.stack(targets))          # (B, C, X, Y, Z)
    return x, t


def train(plan: Plan, train_cases, out_dir, seed: int = 0, val_cases=None,
          augment_config=DEFAULT_AUGMENT) -> TrainState:
    """Run the full training loop and write checkpoints/logs into ``out_dir``.

    train_cases: preprocessed cases with labels. val_cases: optional list of
    (PreprocessedCase, ground-truth LandmarkSet) evaluated once at the end by
    sliding-window inference; the fold MRE lands in the log and TrainState.
    """
    if len(train_cases) < 2:
        raise ConfigError(f"need >= 2 training cases, got {len(train_cases)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.use_deterministic_algorithms(True)
    classes = train_cases[0].classes
    model = build_network(plan, len(classes), seed=child_seed(seed, "init"))
    model.train()
    optimizer = torch.optim.SGD(model.parameters(), lr=plan.initial_lr,
                                momentum=MOMENTUM, nesterov=True)
    rng = rng_for(seed, "sampling")
    fg_cache = {}
    total_steps = plan.epochs * plan.iterations_per_epoch

    state = TrainState()
    best_loss = float("inf")
    log_path = out_dir / "log.jsonl"
    csv_path = out_dir / "progress.csv"
    with open(log_path, "w") as log, open(csv_path, "w") as csv:
        csv.write("epoch,mean_loss,median_loss,lr\n")
        step = 0
        for epoch in range(plan.epochs):
            losses = []
            for _ in range(plan.iterations_per_epoch):
                lr = polynomial_lr(plan.initial_lr, step, total_steps, plan.lr_power)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                x, t = _batch_tensors(train_cases, plan, rng, fg_cache, augment_config)
                optimizer.zero_grad()
                loss = training_loss(model(x), t, plan.loss, plan.topk_percent)
                if not torch.isfinite(loss):
                    dump = out_dir / "diagnostics.json"
                    dump.write_text(json.dumps({
                        "epoch": epoch, "step": step, "lr": lr,
                        "loss": float(loss.detach()),
                        "input_range": [float(x.min()), float(x.max())],
                        "target_range": [float(t.min()), float(t.max())],
                    }, indent=2))
                    raise TrainingError(f"non-finite loss at step {step}; diagnostics in {dump}")
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))
                step += 1

            mean_loss = float(np.mean(losses))
            median_loss = float(np.median(losses))
            state.epoch_mean_loss.append(mean_loss)
            state.epoch_median_loss.append(median_loss)
            state.epochs_run = epoch + 1
            state.steps_run = step
            log.write(json.dumps({"epoch": epoch, "mean_loss": mean_loss,
                                  "median_loss": median_loss, "lr": lr}) + "\n")
            csv.write(f"{epoch},{mean_loss},{median_loss},{lr}\n")
            log.flush()
            csv.flush()
            if mean_loss < best_loss:
                best_loss = mean_loss
                state.best_epoch = epoch
                save_checkpoint(out_dir / "checkpoint_best", model, plan, classes, epoch, seed)

        save_checkpoint(out_dir / "checkpoint_final", model, plan, classes,
                        plan.epochs - 1, seed)

        if val_cases:
            state.validation_mre, state.validation_per_case = validate_fold(
                model, plan, val_cases
            )
            log.write(json.dumps({"validation_mre": state.validation_mre,
                                  "validation_per_case": state.validation_per_case}) + "\n")

    (out_dir / "train_state.json").write_text(
        json.dumps(state.to_dict(), indent=2, sort_keys=True) + "\n")
    return state


def validate_fold(model, plan: Plan, val_cases):
    """Sliding-window inference on held-out preprocessed cases; mean radial
    error against their ground-truth landmark sets."""
    from .evaluation import radial_errors
    from .inference import extract_landmarks, sliding_window_predict

    model.eval()
    per_case = {}
    pooled = []
    for pc, gt in val_cases:
        heatmap = sliding_window_predict(model, pc.image, plan)
        pred = extract_landmarks(heatmap, pc.image, pc.classes, case_id=pc.case_id)
        errors = radial_errors(gt, pred)
        per_case[pc.case_id] = float(np.mean(errors))
        pooled.extend(errors)
    model.train()
    return float(np.mean(pooled)), per_case
