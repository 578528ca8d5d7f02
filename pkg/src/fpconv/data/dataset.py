"""Train/test containers and their assembly from generators or manifests."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from fpconv.data.io import load_cloud, load_manifest, save_cloud, save_manifest
from fpconv.data.scenes import CLASS_NAMES, generate_rooms
from fpconv.data.shapes import SHAPE_NAMES, generate_shape_dataset
from fpconv.errors import LabelOutOfRange
from fpconv.geometry import PointCloud, estimate_normals

NORMAL_RADIUS = 0.15


@dataclass
class Dataset:
    """Clouds split into train and test.

    For classification the per-cloud class lives in ``train_labels`` /
    ``test_labels``; for segmentation every cloud carries per-point labels.
    """

    task: str
    train: List[PointCloud]
    test: List[PointCloud]
    num_classes: int
    class_names: Sequence[str] = ()
    train_labels: Optional[np.ndarray] = None
    test_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.task not in ("segmentation", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        check_labels(self, self.num_classes)


def check_labels(ds: Dataset, num_classes: int) -> None:
    """Reject any label at or above ``num_classes`` (``-1`` marks unlabeled points)."""
    arrays = [c.labels for c in ds.train + ds.test if c.labels is not None]
    arrays += [a for a in (ds.train_labels, ds.test_labels) if a is not None]
    for arr in arrays:
        if arr.size and (arr.max() >= num_classes or arr.min() < -1):
            raise LabelOutOfRange(f"label {int(arr.max())} outside [0, {num_classes})")


def shape_features(cloud: PointCloud) -> np.ndarray:
    """Classification input: coordinates and unit normals (6 channels)."""
    normals = cloud.normals if cloud.normals is not None else estimate_normals(cloud.positions, NORMAL_RADIUS)
    return np.concatenate([cloud.positions, normals], axis=1)


def make_shape_dataset(n_per_class: int = 100, n_points: int = 1024, seed: int = 0, test_fraction: float = 0.2):
    clouds, labels = generate_shape_dataset(n_per_class, n_points, seed)
    n_test = int(round(n_per_class * test_fraction))
    is_test = np.zeros(len(clouds), dtype=bool)
    for c in range(len(SHAPE_NAMES)):
        is_test[c * n_per_class : c * n_per_class + n_test] = True
    return Dataset(
        "classification",
        [c for c, t in zip(clouds, is_test) if not t],
        [c for c, t in zip(clouds, is_test) if t],
        len(SHAPE_NAMES),
        SHAPE_NAMES,
        labels[~is_test],
        labels[is_test],
    )


def make_room_dataset(n_train: int = 16, n_test: int = 4, seed: int = 0, n_points: int = 40000) -> Dataset:
    rooms = generate_rooms(n_train + n_test, seed, n_points)
    return Dataset("segmentation", rooms[:n_train], rooms[n_train:], len(CLASS_NAMES), CLASS_NAMES)


def _majority(labels: np.ndarray) -> int:
    valid = labels[labels >= 0]
    if valid.size == 0:
        raise LabelOutOfRange("cloud has no labeled points")
    return int(np.bincount(valid).argmax())


def load_dataset(manifest_path, task: str, num_classes: int) -> Dataset:
    manifest = load_manifest(manifest_path)
    train = [load_cloud(p) for p in manifest.train]
    test = [load_cloud(p) for p in manifest.test]
    names = CLASS_NAMES if task == "segmentation" else SHAPE_NAMES
    names = tuple(names) if len(names) == num_classes else tuple(str(i) for i in range(num_classes))
    if task == "segmentation":
        return Dataset(task, train, test, num_classes, names)
    return Dataset(
        task,
        train,
        test,
        num_classes,
        names,
        np.array([_majority(c.labels) for c in train], dtype=np.int64),
        np.array([_majority(c.labels) for c in test], dtype=np.int64),
    )


def write_dataset(ds: Dataset, directory) -> Path:
    """Save every cloud as ASCII and write ``manifest.txt``; returns the manifest path."""
    directory = Path(directory)
    paths = {"train": [], "test": []}
    for split in ("train", "test"):
        clouds = getattr(ds, split)
        labels = getattr(ds, f"{split}_labels")
        for i, cloud in enumerate(clouds):
            if labels is not None:
                cloud = PointCloud(cloud.positions, cloud.colors, cloud.normals, np.full(len(cloud), labels[i]))
            path = directory / f"{split}_{i:04d}.txt"
            save_cloud(cloud, path)
            paths[split].append(path)
    manifest = directory / "manifest.txt"
    save_manifest(manifest, paths["train"], paths["test"])
    return manifest
