"""Block sampling and tiling of room-scale clouds.

Block features have 9 channels: xyz relative to the block (x, y centered on
the block, z above the room floor), rgb, and the position normalized by the
room's bounding box.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from fpconv.errors import EmptyCloud
from fpconv.geometry import PointCloud

DEFAULT_BLOCK_POINTS = 4096
N_FEATURES = 9


@dataclass
class BlockSample:
    origin: np.ndarray
    extent: float
    indices: np.ndarray
    repeated: np.ndarray
    positions: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray]

    @property
    def n_points(self) -> int:
        return len(self.indices)

    def as_cloud(self) -> PointCloud:
        return PointCloud(self.positions, labels=self.labels, features=self.features)


def room_bounds(cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    return cloud.positions.min(axis=0), cloud.positions.max(axis=0)


def block_features(cloud: PointCloud, idx: np.ndarray, origin, extent: float, bounds=None) -> np.ndarray:
    lo, hi = bounds if bounds is not None else room_bounds(cloud)
    p = cloud.positions[idx]
    local = p - [origin[0] + extent / 2, origin[1] + extent / 2, lo[2]]
    colors = cloud.colors[idx] if cloud.colors is not None else np.zeros((len(idx), 3))
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    normed = np.clip((p - lo) / span, 0.0, 1.0)
    return np.concatenate([local, colors, normed], axis=1)


def _make_block(cloud, idx, repeated, origin, extent, bounds) -> BlockSample:
    feats = block_features(cloud, idx, origin, extent, bounds)
    labels = cloud.labels[idx] if cloud.labels is not None else None
    return BlockSample(np.asarray(origin, float), float(extent), idx, repeated, feats[:, :3].copy(), feats, labels)


def draw_points(members: np.ndarray, n_points: int, rng) -> Tuple[np.ndarray, np.ndarray]:
    """``n_points`` of ``members``: a random subset, or all of them plus random repeats."""
    if len(members) >= n_points:
        return rng.choice(members, n_points, replace=False), np.zeros(n_points, dtype=bool)
    extra = rng.choice(members, n_points - len(members), replace=True)
    idx = np.concatenate([rng.permutation(members), extra])
    repeated = np.zeros(n_points, dtype=bool)
    repeated[len(members) :] = True
    return idx, repeated


def sample_block(
    cloud: PointCloud, block_extent: float = 2.0, n_points: int = DEFAULT_BLOCK_POINTS, seed=None, bounds=None
) -> BlockSample:
    """A block centered on a random point of the cloud, with ``n_points`` rows."""
    if len(cloud) == 0:
        raise EmptyCloud("cannot sample a block from an empty cloud")
    if block_extent <= 0 or n_points < 1:
        raise ValueError("block extent and n_points must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    center = cloud.positions[rng.integers(len(cloud)), :2]
    origin = center - block_extent / 2
    xy = cloud.positions[:, :2]
    inside = np.all((xy >= origin) & (xy <= origin + block_extent), axis=1)
    members = np.flatnonzero(inside)
    idx, repeated = draw_points(members, n_points, rng)
    return _make_block(cloud, idx, repeated, origin, block_extent, bounds)


def tile_origins(lo: np.ndarray, hi: np.ndarray, extent: float, stride: float) -> List[np.ndarray]:
    axes = []
    for d in range(2):
        n = max(1, int(np.ceil(max(hi[d] - lo[d] - extent, 0.0) / stride)) + 1)
        axes.append(lo[d] + stride * np.arange(n))
    return [np.array([x, y]) for x in axes[0] for y in axes[1]]


def tile_scene(cloud: PointCloud, extent: float = 2.0, stride: Optional[float] = None):
    """Overlapping square tiles covering every point; returns [(origin, indices)]."""
    stride = extent / 2 if stride is None else stride
    if stride <= 0 or stride > extent:
        raise ValueError("tile stride must lie in (0, extent]")
    lo, hi = room_bounds(cloud)
    xy = cloud.positions[:, :2]
    tiles = []
    for origin in tile_origins(lo, hi, extent, stride):
        inside = np.all((xy >= origin) & (xy <= origin + extent), axis=1)
        if inside.any():
            tiles.append((origin, np.flatnonzero(inside)))
    return tiles


def tile_blocks(cloud: PointCloud, extent: float, n_points: int, seed: int = 0, stride=None, bounds=None):
    """Split each tile into ``n_points`` chunks that together contain every tile point.

    The chunking of a tile is seeded from ``seed`` and the tile's position in
    the scene's tiling only, so it does not depend on which other scenes are
    evaluated alongside.
    """
    bounds = bounds if bounds is not None else room_bounds(cloud)
    blocks = []
    for t, (origin, members) in enumerate(tile_scene(cloud, extent, stride)):
        rng = np.random.default_rng([seed, t])
        perm = rng.permutation(members)
        for start in range(0, len(perm), n_points):
            chunk = perm[start : start + n_points]
            idx, repeated = draw_points(chunk, n_points, rng) if len(chunk) < n_points else (chunk, np.zeros(len(chunk), bool))
            blocks.append(_make_block(cloud, idx, repeated, origin, extent, bounds))
    return blocks
