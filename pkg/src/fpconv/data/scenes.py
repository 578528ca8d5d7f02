"""Synthetic indoor rooms with six semantic classes.

Every surface is sampled uniformly by area with no positional noise, so planar
parts are exactly planar. Colors come from a per-class palette plus Gaussian
noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from fpconv.geometry import PointCloud

CLASS_NAMES = ("ceiling", "floor", "wall", "table", "board", "clutter")
CEILING, FLOOR, WALL, TABLE, BOARD, CLUTTER = range(6)

DEFAULT_PALETTE = {
    CEILING: (0.85, 0.85, 0.80),
    FLOOR: (0.45, 0.35, 0.25),
    WALL: (0.75, 0.70, 0.55),
    TABLE: (0.55, 0.30, 0.15),
    BOARD: (0.95, 0.95, 0.98),
    CLUTTER: (0.20, 0.45, 0.70),
}


@dataclass
class SceneSpec:
    extent: Tuple[float, float, float] = (6.0, 5.0, 3.0)
    floor: bool = True
    ceiling: bool = True
    walls: bool = True
    n_tables: int = 2
    n_boards: int = 1
    n_clutter: int = 3
    palette: Dict[int, Tuple[float, float, float]] = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    color_sigma: float = 0.04
    n_points: int = 40000
    seed: int = 0

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError("room extent must be positive")
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if min(self.n_tables, self.n_boards, self.n_clutter) < 0:
            raise ValueError("object counts must be non-negative")


@dataclass
class _Rect:
    """Parallelogram ``origin + s*u + t*v`` for s, t in [0, 1]."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    label: int

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    def sample(self, rng, n: int) -> np.ndarray:
        st = rng.random((n, 2))
        return self.origin + st[:, :1] * self.u + st[:, 1:] * self.v


@dataclass
class _Sphere:
    center: np.ndarray
    radius: float
    label: int

    @property
    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def sample(self, rng, n: int) -> np.ndarray:
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d


def _box_faces(lo, hi, label, bottom=False) -> List[_Rect]:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    dx, dy, dz = np.diag(hi - lo)
    faces = [
        _Rect(lo + dz, dx, dy, label),
        _Rect(lo, dx, dz, label),
        _Rect(lo + dy, dx, dz, label),
        _Rect(lo, dy, dz, label),
        _Rect(lo + dx, dy, dz, label),
    ]
    if bottom:
        faces.append(_Rect(lo, dx, dy, label))
    return faces


def _layout(spec: SceneSpec, rng) -> list:
    X, Y, Z = spec.extent
    ex, ey, ez = np.eye(3)
    surfaces: list = []
    if spec.floor:
        surfaces.append(_Rect(np.zeros(3), X * ex, Y * ey, FLOOR))
    if spec.ceiling:
        surfaces.append(_Rect(Z * ez, X * ex, Y * ey, CEILING))
    if spec.walls:
        surfaces += [
            _Rect(np.zeros(3), X * ex, Z * ez, WALL),
            _Rect(Y * ey, X * ex, Z * ez, WALL),
            _Rect(np.zeros(3), Y * ey, Z * ez, WALL),
            _Rect(X * ex, Y * ey, Z * ez, WALL),
        ]
    tops = []
    for _ in range(spec.n_tables):
        w, d, h = rng.uniform(0.8, 1.6), rng.uniform(0.6, 1.0), rng.uniform(0.65, 0.8)
        x0, y0 = rng.uniform(0.4, max(0.41, X - w - 0.4)), rng.uniform(0.4, max(0.41, Y - d - 0.4))
        surfaces += _box_faces((x0, y0, 0.0), (x0 + w, y0 + d, h), TABLE)
        tops.append((x0, y0, w, d, h))
    for _ in range(spec.n_boards):
        w, h, t = rng.uniform(1.0, 2.0), rng.uniform(0.8, 1.2), 0.03
        z0 = rng.uniform(0.8, max(0.81, Z - h - 0.3))
        if rng.random() < 0.5:
            x0 = rng.uniform(0.2, max(0.21, X - w - 0.2))
            y0 = 0.0 if rng.random() < 0.5 else Y - t
            surfaces += _box_faces((x0, y0, z0), (x0 + w, y0 + t, z0 + h), BOARD, bottom=True)
        else:
            y0 = rng.uniform(0.2, max(0.21, Y - w - 0.2))
            x0 = 0.0 if rng.random() < 0.5 else X - t
            surfaces += _box_faces((x0, y0, z0), (x0 + t, y0 + w, z0 + h), BOARD, bottom=True)
    for _ in range(spec.n_clutter):
        r = rng.uniform(0.12, 0.3)
        if tops and rng.random() < 0.5:
            x0, y0, w, d, h = tops[rng.integers(len(tops))]
            c = (x0 + rng.uniform(0, w), y0 + rng.uniform(0, d), h + r)
        else:
            c = (rng.uniform(r + 0.1, X - r - 0.1), rng.uniform(r + 0.1, Y - r - 0.1), r)
        surfaces.append(_Sphere(np.asarray(c, float), r, CLUTTER))
    return surfaces


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample a labeled, colored room; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    surfaces = _layout(spec, rng)
    if not surfaces:
        raise ValueError("scene spec contains no surfaces")
    areas = np.array([s.area for s in surfaces])
    counts = rng.multinomial(spec.n_points, areas / areas.sum())
    pos, lab = [], []
    for s, n in zip(surfaces, counts):
        pos.append(s.sample(rng, n))
        lab.append(np.full(n, s.label, dtype=np.int64))
    positions = np.concatenate(pos)
    labels = np.concatenate(lab)
    base = np.array([spec.palette[int(c)] for c in range(len(CLASS_NAMES))])
    colors = np.clip(base[labels] + rng.normal(scale=spec.color_sigma, size=(len(labels), 3)), 0.0, 1.0)
    return PointCloud(positions, colors=colors, labels=labels)


def generate_rooms(n: int, seed: int, n_points: int = 40000) -> List[PointCloud]:
    """``n`` rooms with varied extents and inventories, all derived from ``seed``."""
    rng = np.random.default_rng(seed)
    rooms = []
    for _ in range(n):
        spec = SceneSpec(
            extent=(rng.uniform(4.0, 7.0), rng.uniform(4.0, 6.0), rng.uniform(2.6, 3.2)),
            n_tables=int(rng.integers(1, 4)),
            n_boards=int(rng.integers(1, 3)),
            n_clutter=int(rng.integers(2, 6)),
            n_points=n_points,
            seed=int(rng.integers(2**31)),
        )
        rooms.append(generate_scene(spec))
    return rooms
