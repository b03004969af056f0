"""Deterministic cross-validation fold management."""

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .seeding import rng_for


def split_folds(case_ids, fold_count: int, seed: int = 0) -> dict:
    """Shuffle case ids by seed and deal them round-robin; fold sizes differ by
    at most one."""
    ids = sorted(str(c) for c in case_ids)
    if fold_count < 2:
        raise ConfigError(f"fold_count must be >= 2, got {fold_count}")
    if fold_count > len(ids):
        raise ConfigError(f"fold_count {fold_count} exceeds case count {len(ids)}")
    order = rng_for(seed, "folds").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return {f"fold_{k}": shuffled[k::fold_count] for k in range(fold_count)}


def save_splits(path, splits: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(splits, indent=2, sort_keys=True) + "\n")


def load_splits(path) -> dict:
    return json.loads(Path(path).read_text())


def fold_partition(splits: dict, fold: int):
    """(train_ids, val_ids) for one fold: the fold is held out, the rest train."""
    key = f"fold_{fold}"
    if key not in splits:
        raise ConfigError(f"{key} not present in splits (have {sorted(splits)})")
    val = list(splits[key])
    train = [c for k in sorted(splits) if k != key for c in splits[k]]
    return train, val
