"""Six primitive surface classes with analytic normals, for toy classification."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from fpconv.geometry import PointCloud

SHAPE_NAMES = ("plane", "sphere", "cylinder", "corner", "saddle", "torus")


def _plane(rng, n):
    a, b = rng.uniform(0.7, 1.0, size=2)
    p = np.column_stack([rng.uniform(-a, a, n), rng.uniform(-b, b, n), np.zeros(n)])
    return p, np.tile([0.0, 0.0, 1.0], (n, 1))


def _sphere(rng, n):
    r = rng.uniform(0.6, 1.0)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return r * d, d


def _cylinder(rng, n):
    r, h = rng.uniform(0.4, 0.7), rng.uniform(1.2, 2.0)
    t = rng.uniform(0, 2 * np.pi, n)
    nrm = np.column_stack([np.cos(t), np.sin(t), np.zeros(n)])
    p = np.column_stack([r * nrm[:, 0], r * nrm[:, 1], rng.uniform(-h / 2, h / 2, n)])
    return p, nrm


def _corner(rng, n):
    a = rng.uniform(0.8, 1.0)
    side = rng.random(n) < 0.5
    s, t = rng.uniform(0, a, n), rng.uniform(-a / 2, a / 2, n)
    p = np.where(side[:, None], np.column_stack([s, t, np.zeros(n)]), np.column_stack([np.zeros(n), t, s]))
    nrm = np.where(side[:, None], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
    return p - [a / 2, 0.0, a / 2], nrm


def _rejection(rng, n, propose, accept_prob):
    out = []
    while sum(len(o[0]) for o in out) < n:
        cand = propose(2 * n)
        keep = rng.random(len(cand[0])) < accept_prob(*cand)
        out.append(tuple(c[keep] for c in cand))
    return tuple(np.concatenate([o[i] for o in out])[:n] for i in range(len(out[0])))


def _saddle(rng, n):
    k = rng.uniform(0.4, 0.8)

    def propose(m):
        return (rng.uniform(-1, 1, m), rng.uniform(-1, 1, m))

    def density(x, y):
        # area element of z = k(x^2 - y^2) relative to its maximum on the square
        return np.sqrt(1 + 4 * k * k * (x * x + y * y)) / np.sqrt(1 + 8 * k * k)

    x, y = _rejection(rng, n, propose, density)
    p = np.column_stack([x, y, k * (x * x - y * y)])
    nrm = np.column_stack([-2 * k * x, 2 * k * y, np.ones(n)])
    return p, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)


def _torus(rng, n):
    R, r = rng.uniform(0.6, 0.75), rng.uniform(0.2, 0.3)

    def propose(m):
        return (rng.uniform(0, 2 * np.pi, m), rng.uniform(0, 2 * np.pi, m))

    u, v = _rejection(rng, n, propose, lambda u, v: (R + r * np.cos(v)) / (R + r))
    nrm = np.column_stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)])
    p = np.column_stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)])
    return p, nrm


_GENERATORS = (_plane, _sphere, _cylinder, _corner, _saddle, _torus)


def rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_shape(label: int, n_points: int, rng) -> PointCloud:
    p, nrm = _GENERATORS[label](rng, n_points)
    rot = rotation_z(rng.uniform(0, 2 * np.pi))
    return PointCloud(p @ rot.T, normals=nrm @ rot.T, labels=np.full(n_points, label))


def generate_shape_dataset(n_per_class: int, n_points: int, seed: int) -> Tuple[List[PointCloud], np.ndarray]:
    """Balanced primitive shapes; returns (clouds, labels) in class-major order."""
    if n_per_class < 1 or n_points < 1:
        raise ValueError("n_per_class and n_points must be positive")
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for label in range(len(SHAPE_NAMES)):
        for _ in range(n_per_class):
            clouds.append(generate_shape(label, n_points, rng))
            labels.append(label)
    return clouds, np.asarray(labels, dtype=np.int64)
