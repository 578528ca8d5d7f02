"""Spatial primitives on point clouds.

Radius search uses a uniform grid hash with cell size equal to the radius, so
each query only inspects its own and the 26 adjacent cells. Everything is
vectorized over queries; the hash is built once per call and read-only after.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from fpconv.errors import EmptyCloud, TooFewSources, TooManySamples


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        for name in ("colors", "normals", "labels", "features"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.int64 if name == "labels" else np.float64)
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} rows, expected {n}")
            setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx) -> "PointCloud":
        def take(a):
            return None if a is None else a[idx]

        return PointCloud(
            self.positions[idx], take(self.colors), take(self.normals), take(self.labels), take(self.features)
        )


@dataclass
class Neighborhood:
    center_index: int
    neighbor_indices: np.ndarray
    relative_coords: np.ndarray
    radius: float
    padded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def count(self) -> int:
        """Number of distinct (non-padding) neighbors."""
        return int((~self.padded).sum())


@dataclass
class NeighborhoodBatch:
    """Fixed-shape neighborhoods for many queries.

    ``indices`` and ``padded`` are (Q, n_max); ``relative`` is (Q, n_max, 3);
    ``counts`` holds the number of genuine neighbors per query (before padding).
    Rows with zero genuine neighbors hold index -1.
    """

    indices: np.ndarray
    relative: np.ndarray
    counts: np.ndarray
    padded: np.ndarray
    radius: float

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, q: int) -> Neighborhood:
        return Neighborhood(-1, self.indices[q], self.relative[q], self.radius, self.padded[q])


@dataclass
class CurvatureField:
    sigma: np.ndarray
    radius: float


# ---------------------------------------------------------------------------
# grid hash
# ---------------------------------------------------------------------------


class GridHash:
    def __init__(self, points: np.ndarray, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.points = points
        self.cell = float(cell)
        cells = np.floor(points / self.cell).astype(np.int64)
        self.lo = cells.min(axis=0) - 1
        self.dims = cells.max(axis=0) - self.lo + 2
        keys = self._key(cells)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]

    def _key(self, cells: np.ndarray) -> np.ndarray:
        c = cells - self.lo
        return (c[..., 0] * self.dims[1] + c[..., 1]) * self.dims[2] + c[..., 2]

    def candidate_pairs(self, queries: np.ndarray):
        """All (query, point) pairs whose cells are adjacent. Returns two index arrays."""
        qcells = np.floor(queries / self.cell).astype(np.int64)
        offsets = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), -1).reshape(-1, 3)
        nb = qcells[:, None, :] + offsets[None, :, :]  # Q, 27, 3
        rel = nb - self.lo
        inside = np.all((rel >= 0) & (rel < self.dims), axis=-1)
        keys = np.where(inside, self._key(np.clip(nb, self.lo, self.lo + self.dims - 1)), -1)
        starts = np.searchsorted(self.sorted_keys, keys, side="left")
        ends = np.searchsorted(self.sorted_keys, keys, side="right")
        counts = np.where(inside, ends - starts, 0).ravel()
        total = int(counts.sum())
        qid = np.repeat(np.repeat(np.arange(len(queries)), offsets.shape[0]), counts)
        first = np.repeat(np.cumsum(counts) - counts, counts)
        pos = np.arange(total) - first + np.repeat(starts.ravel(), counts)
        return qid, self.order[pos]


def _pairs_within(points: np.ndarray, queries: np.ndarray, radius: float):
    grid = GridHash(points, radius)
    qid, pid = grid.candidate_pairs(queries)
    rel = points[pid] - queries[qid]
    dist = np.sqrt((rel * rel).sum(axis=1))
    keep = dist < radius
    return qid[keep], pid[keep], rel[keep], dist[keep]


def radius_search_batch(
    points: np.ndarray,
    queries: np.ndarray,
    radius: float,
    n_max: int,
    rng: Optional[np.random.Generator] = None,
) -> NeighborhoodBatch:
    """Fixed-size radius neighborhoods for every query.

    Without ``rng`` the ``n_max`` nearest points in the ball are kept (ties by
    lowest index). With ``rng`` a uniform random subset is kept instead, except
    that points coinciding with the query (distance 0) always survive. Balls
    holding fewer than ``n_max`` points are padded by cycling through the kept
    neighbors; padding slots are flagged in ``padded``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyCloud("radius search over an empty cloud")
    if radius <= 0 or n_max < 1:
        raise ValueError("radius must be > 0 and n_max >= 1")
    Q = len(queries)
    qid, pid, _, dist = _pairs_within(points, queries, radius)
    if rng is None:
        key = dist
    else:
        key = np.where(dist == 0.0, -1.0, rng.random(len(dist)))
    order = np.lexsort((pid, key, qid))
    qid, pid = qid[order], pid[order]
    counts_all = np.bincount(qid, minlength=Q)
    group_start = np.cumsum(counts_all) - counts_all
    rank = np.arange(len(qid)) - group_start[qid]
    sel = rank < n_max
    table = np.full((Q, n_max), -1, dtype=np.int64)
    table[qid[sel], rank[sel]] = pid[sel]
    counts = np.minimum(counts_all, n_max)
    cols = np.arange(n_max)
    src = cols[None, :] % np.maximum(counts, 1)[:, None]
    indices = np.take_along_axis(table, src, axis=1)
    padded = cols[None, :] >= counts[:, None]
    relative = np.where(indices[..., None] >= 0, points[indices] - queries[:, None, :], 0.0)
    return NeighborhoodBatch(indices, relative, counts, padded, float(radius))


def radius_search(
    cloud: PointCloud,
    queries: np.ndarray,
    radius: float,
    n_max: int,
    seed: Optional[int] = None,
    query_indices: Optional[np.ndarray] = None,
) -> List[Neighborhood]:
    """List-of-neighborhoods view of :func:`radius_search_batch`."""
    if len(cloud) == 0:
        raise EmptyCloud("radius search over an empty cloud")
    rng = None if seed is None else np.random.default_rng(seed)
    batch = radius_search_batch(cloud.positions, queries, radius, n_max, rng)
    out = []
    for q in range(len(batch)):
        nb = batch[q]
        if query_indices is not None:
            nb.center_index = int(query_indices[q])
        out.append(nb)
    return out


# ---------------------------------------------------------------------------
# sampling and nearest neighbors
# ---------------------------------------------------------------------------


def farthest_point_sample(points, m: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Each step picks the not-yet-selected point whose squared distance to the
    selected set is largest; ties go to the lowest index.
    """
    pts = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        raise EmptyCloud("farthest point sampling on an empty cloud")
    if not 1 <= m <= n:
        raise TooManySamples(f"cannot sample {m} of {n} points")
    if not 0 <= start_index < n:
        raise IndexError(f"start_index {start_index} out of range")
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start_index
    for k in range(m):
        out[k] = cur
        diff = pts - pts[cur]
        d = (diff * diff).sum(axis=1)
        np.minimum(mind, d, out=mind)
        mind[cur] = -1.0
        if k + 1 < m:
            cur = int(np.argmax(mind))
    return out


def knn_search(sources, queries, k: int, chunk: int = 2048):
    """``k`` nearest sources per query, ascending by Euclidean distance, ties by lowest index."""
    src = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
    qry = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if k < 1 or k > len(src):
        raise TooFewSources(f"k={k} but only {len(src)} sources")
    idx_out = np.empty((len(qry), k), dtype=np.int64)
    dist_out = np.empty((len(qry), k))
    for lo in range(0, len(qry), chunk):
        q = qry[lo : lo + chunk]
        diff = q[:, None, :] - src[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        if k < len(src):
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
            n_le = (d2 <= kth[:, None]).sum(axis=1)
            tied = np.nonzero(n_le > k)[0]
        else:
            part = np.broadcast_to(np.arange(k), (len(q), k)).copy()
            tied = np.zeros(0, dtype=np.int64)
        pd = np.take_along_axis(d2, part, axis=1)
        o = np.lexsort((part, pd), axis=1)
        part = np.take_along_axis(part, o, axis=1)
        for r in tied:
            part[r] = np.argsort(d2[r], kind="stable")[:k]
        idx_out[lo : lo + len(q)] = part
        dist_out[lo : lo + len(q)] = np.sqrt(np.take_along_axis(d2, part, axis=1))
    return idx_out, dist_out


# ---------------------------------------------------------------------------
# local covariance analysis
# ---------------------------------------------------------------------------


def _local_covariances(points: np.ndarray, radius: float):
    qid, pid, _, _ = _pairs_within(points, points, radius)
    n = len(points)
    counts = np.bincount(qid, minlength=n)
    nb = points[pid]
    mean = np.stack([np.bincount(qid, weights=nb[:, a], minlength=n) for a in range(3)], axis=1)
    mean /= np.maximum(counts, 1)[:, None]
    c = nb - mean[qid]
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(qid, weights=c[:, a] * c[:, b], minlength=n)
            cov[:, a, b] = s
            cov[:, b, a] = s
    cov /= np.maximum(counts, 1)[:, None, None]
    return cov, counts


def estimate_curvature(cloud, radius: float) -> CurvatureField:
    """Surface variation ``l1 / (l1 + l2 + l3)`` of each point's radius ball.

    Points with fewer than four neighbors (self included) or a vanishing
    eigenvalue sum get 0.
    """
    if radius <= 0:
        raise ValueError("curvature radius must be positive")
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        return CurvatureField(np.zeros(0), float(radius))
    cov, counts = _local_covariances(pts, radius)
    lam = np.linalg.eigvalsh(cov)
    total = lam.sum(axis=1)
    ok = (counts >= 4) & (total >= 1e-12)
    sigma = np.zeros(len(pts))
    sigma[ok] = lam[ok, 0] / total[ok]
    return CurvatureField(np.clip(sigma, 0.0, 1.0 / 3.0), float(radius))


def estimate_normals(points: np.ndarray, radius: float) -> np.ndarray:
    """Unit normals from the smallest-eigenvalue eigenvector, oriented away from the centroid."""
    pts = np.asarray(points, dtype=np.float64)
    cov, counts = _local_covariances(pts, radius)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = ((pts - pts.mean(axis=0)) * normals).sum(axis=1) < 0
    normals[flip] *= -1
    normals[counts < 3] = np.array([0.0, 0.0, 1.0])
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)
