"""Rotation about the vertical axis and clipped Gaussian jitter."""

from __future__ import annotations

import numpy as np

from fpconv.data.shapes import rotation_z
from fpconv.geometry import PointCloud


def augment(cloud: PointCloud, seed, jitter_sigma: float = 0.01, jitter_clip: float = 0.05, rotate: bool = True):
    """Return a rotated, jittered copy; normals rotate but are not jittered.

    When the cloud carries ``features`` whose first three channels are its
    coordinates (as in block samples), those channels follow the positions.
    """
    if jitter_sigma <= 0 or jitter_clip <= 0:
        raise ValueError("jitter sigma and clip must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rot = rotation_z(rng.uniform(0, 2 * np.pi)) if rotate else np.eye(3)
    jitter = np.clip(rng.normal(scale=jitter_sigma, size=cloud.positions.shape), -jitter_clip, jitter_clip)
    positions = cloud.positions @ rot.T + jitter
    normals = None if cloud.normals is None else cloud.normals @ rot.T
    features = None
    if cloud.features is not None:
        features = cloud.features.copy()
        if np.array_equal(features[:, :3], cloud.positions):
            features[:, :3] = positions
    return PointCloud(positions, cloud.colors, normals, cloud.labels, features)
