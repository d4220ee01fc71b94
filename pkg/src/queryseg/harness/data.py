"""Dataset access for the training loop and evaluator."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from ..errors import DataError
from ..synthdata import (
    DatasetManifest,
    LabeledVolume,
    PhantomSpec,
    generate_split,
    load_volume,
    materialize_dataset,
    read_manifest,
)
from .config import ExperimentConfig

__all__ = [
    "ensure_dataset",
    "image_to_tensor",
    "volume_target",
    "load_partition",
    "epoch_order",
    "augment_pair",
]


def ensure_dataset(config: ExperimentConfig, run_dir: Path) -> tuple[DatasetManifest, Path]:
    """Generate the dataset under `<run_dir>/dataset` unless already present."""
    dataset_dir = run_dir / "dataset"
    manifest_path = dataset_dir / "manifest.json"
    if manifest_path.exists():
        manifest = read_manifest(manifest_path)
        if manifest.spec != config.phantom:
            raise DataError(
                f"dataset at {dataset_dir} was generated from a different phantom spec"
            )
    else:
        manifest = generate_split(
            config.phantom,
            config.split.n_train,
            config.split.n_val,
            config.split.n_test_inlier,
            config.split.n_test_ood,
        )
        materialize_dataset(manifest, dataset_dir)
    return manifest, dataset_dir / "cases"


def image_to_tensor(image: np.ndarray) -> Tensor:
    """(H, W, D) voxels to a (1, H, W) or (1, H, W, D) channel-first tensor."""
    if image.ndim != 3:
        raise DataError(f"expected (H, W, D) image, got shape {image.shape}")
    arr = image[:, :, 0] if image.shape[2] == 1 else image
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).unsqueeze(0)


def volume_target(volume: LabeledVolume, num_classes_train: int) -> Tensor:
    """Training target: the first K one-hot planes, flattened to (K, voxels)."""
    planes = volume.masks[:num_classes_train]
    return torch.from_numpy(planes.reshape(num_classes_train, -1).astype(np.float32))


def load_partition(
    spec: PhantomSpec, manifest: DatasetManifest, partition: str, cases_dir: Path
) -> list[LabeledVolume]:
    return [load_volume(spec, rec, cases_dir) for rec in manifest.cases(partition)]


def epoch_order(n: int, epoch: int, seed: int) -> np.ndarray:
    """Deterministic shuffle of sample indices for one epoch."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch]))
    return rng.permutation(n)


def augment_pair(
    image: np.ndarray, masks: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Random flips (and square-grid right-angle rotations) in the H-W plane,
    applied identically to image and mask stack."""
    if rng.integers(2):
        image, masks = image[::-1], masks[:, ::-1]
    if rng.integers(2):
        image, masks = image[:, ::-1], masks[:, :, ::-1]
    if image.shape[0] == image.shape[1]:
        k = int(rng.integers(4))
        if k:
            image = np.rot90(image, k, axes=(0, 1))
            masks = np.rot90(masks, k, axes=(1, 2))
    return np.ascontiguousarray(image), np.ascontiguousarray(masks)
