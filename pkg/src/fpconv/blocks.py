"""Network building blocks.

Blocks operate on *packed* batches: the points of several clouds are stacked
into one (P, 3) array and features into one (P, C) tensor, with ``offsets``
marking cloud boundaries. All neighbor indices are global row indices into the
packed arrays, so a whole batch is processed with a handful of large ops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from fpconv import geometry
from fpconv.errors import ShapeMismatch
from fpconv.flatten import FPConv
from fpconv.nn import functional as F
from fpconv.nn.layers import BatchNorm, Linear, Module, SharedMLP, zero_
from fpconv.nn.tensor import Tensor, as_tensor

CONV_KINDS = ("fpconv", "pointmlp", "parallel")


@dataclass
class BlockSpec:
    in_channels: int
    mid_channels: int
    out_channels: int
    radius: float
    n_max: int = 16
    downsample: bool = False
    ratio: float = 0.25
    conv: str = "fpconv"
    plane: int = 6
    normalization: str = "sparse"
    dist_widths: Tuple[int, ...] = (32, 64)
    predictor_hidden: int = 64

    def __post_init__(self):
        if min(self.in_channels, self.mid_channels, self.out_channels) < 1:
            raise ValueError("channel widths must be positive")
        if self.downsample and not 0.0 < self.ratio <= 1.0:
            raise ValueError("downsample ratio must lie in (0, 1]")
        if self.conv not in CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.conv!r}")
        if self.radius <= 0 or self.n_max < 1:
            raise ValueError("radius must be positive and n_max >= 1")


@dataclass
class Grouping:
    """Centers of one level and their fixed-size neighborhoods in the level below.

    ``centers`` index rows of the finer packed cloud; ``offsets`` delimit the
    centers of each cloud; ``neighbors.indices`` are global rows of the finer cloud.
    """

    centers: np.ndarray
    offsets: np.ndarray
    neighbors: geometry.NeighborhoodBatch

    @property
    def relative(self) -> np.ndarray:
        return self.neighbors.relative

    @property
    def indices(self) -> np.ndarray:
        return self.neighbors.indices


def n_samples(n: int, ratio: float) -> int:
    return max(1, int(np.ceil(n * ratio)))


def sample_and_group(
    positions: np.ndarray,
    offsets: Sequence[int],
    radius: float,
    n_max: int,
    ratio: Optional[float] = None,
    rng=None,
) -> Grouping:
    """FPS (when ``ratio`` is given) and radius grouping, cloud by cloud.

    ``rng`` is None (nearest ``n_max`` neighbors), one shared Generator, or a
    callable mapping the cloud index to its own Generator, which makes each
    cloud's grouping independent of its batch mates.
    """
    centers, nb_idx, nb_rel, counts, padded, new_offsets = [], [], [], [], [], [0]
    for b in range(len(offsets) - 1):
        lo, hi = int(offsets[b]), int(offsets[b + 1])
        pts = positions[lo:hi]
        if ratio is None:
            local = np.arange(hi - lo)
        else:
            local = geometry.farthest_point_sample(pts, n_samples(hi - lo, ratio), 0)
        gen = rng(b) if callable(rng) else rng
        nb = geometry.radius_search_batch(pts, pts[local], radius, n_max, gen)
        centers.append(local + lo)
        nb_idx.append(nb.indices + lo)
        nb_rel.append(nb.relative)
        counts.append(nb.counts)
        padded.append(nb.padded)
        new_offsets.append(new_offsets[-1] + len(local))
    batch = geometry.NeighborhoodBatch(
        np.concatenate(nb_idx), np.concatenate(nb_rel), np.concatenate(counts), np.concatenate(padded), float(radius)
    )
    return Grouping(np.concatenate(centers), np.asarray(new_offsets), batch)


@dataclass
class Interpolation:
    indices: np.ndarray
    weights: np.ndarray


def inverse_distance_weights(dist: np.ndarray) -> np.ndarray:
    """Rows of normalized ``1/d`` weights; a (near-)zero distance copies that source exactly."""
    exact = dist < 1e-10
    hit = exact.any(axis=1)
    w = np.empty_like(dist)
    inv = 1.0 / dist[~hit]
    w[~hit] = inv / inv.sum(axis=1, keepdims=True)
    if hit.any():
        first = np.argmax(exact[hit], axis=1)
        onehot = np.zeros((hit.sum(), dist.shape[1]))
        onehot[np.arange(len(first)), first] = 1.0
        w[hit] = onehot
    return w


def plan_interpolation(src_pos, src_offsets, dst_pos, dst_offsets, k: int = 3) -> Interpolation:
    idx_parts, w_parts = [], []
    for b in range(len(src_offsets) - 1):
        s0, s1 = int(src_offsets[b]), int(src_offsets[b + 1])
        d0, d1 = int(dst_offsets[b]), int(dst_offsets[b + 1])
        kk = min(k, s1 - s0)
        idx, dist = geometry.knn_search(src_pos[s0:s1], dst_pos[d0:d1], kk)
        w = inverse_distance_weights(dist)
        if kk < k:
            idx = np.pad(idx, ((0, 0), (0, k - kk)), mode="edge")
            w = np.pad(w, ((0, 0), (0, k - kk)))
        idx_parts.append(idx + s0)
        w_parts.append(w)
    return Interpolation(np.concatenate(idx_parts), np.concatenate(w_parts))


# ---------------------------------------------------------------------------
# convolution kernels over neighborhoods
# ---------------------------------------------------------------------------


class PointMLPConv(Module):
    """Baseline volumetric-style point convolution: shared MLP on ``[rel || feature]`` then max."""

    def __init__(self, in_channels: int, out_channels: int, rng, hidden: Optional[int] = None, bias: bool = True):
        hidden = hidden or out_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.mlp = SharedMLP(3 + in_channels, hidden, rng)
        self.out = Linear(hidden, out_channels, rng, bias=bias)

    def forward(self, rel, feats) -> Tensor:
        rel = as_tensor(rel, self.dtype)
        feats = as_tensor(feats)
        if feats.shape[:-1] != rel.shape[:-1] or feats.shape[-1] != self.in_channels:
            raise ShapeMismatch(f"point-MLP conv: coords {rel.shape}, features {feats.shape}")
        h = self.out(self.mlp(F.concat([rel, feats], axis=-1)))
        return F.max_reduce(h, axis=-2)[0]

    def zero_output(self) -> None:
        zero_(self.out.weight)
        zero_(self.out.bias)


class FPConvUnit(Module):
    """FPConv followed by batch norm and leaky ReLU."""

    def __init__(self, channels_in: int, channels_out: int, rng, plane: int, normalization: str, **fpconv_kw):
        self.conv = FPConv(
            channels_in, channels_out, rng, plane=plane, normalization=normalization, bias=False, **fpconv_kw
        )
        self.bn = BatchNorm(channels_out)
        self.out_channels = channels_out

    def forward(self, rel, feats) -> Tensor:
        return F.leaky_relu(self.bn(self.conv(rel, feats)))


class PointMLPUnit(Module):
    def __init__(self, channels_in: int, channels_out: int, rng):
        self.conv = PointMLPConv(channels_in, channels_out, rng, bias=False)
        self.bn = BatchNorm(channels_out)
        self.out_channels = channels_out

    def forward(self, rel, feats) -> Tensor:
        return F.leaky_relu(self.bn(self.conv(rel, feats)))


def make_conv_unit(kind: str, channels: int, rng, plane: int = 6, normalization: str = "sparse", **fpconv_kw) -> Module:
    if kind == "fpconv":
        return FPConvUnit(channels, channels, rng, plane, normalization, **fpconv_kw)
    if kind == "pointmlp":
        return PointMLPUnit(channels, channels, rng)
    raise ValueError(f"no single conv unit of kind {kind!r}")


class Branch(Module):
    """Shared MLP ``D_in -> D_mid`` followed by one neighborhood convolution."""

    def __init__(self, spec: BlockSpec, kind: str, rng):
        self.mlp_in = SharedMLP(spec.in_channels, spec.mid_channels, rng)
        self.conv = make_conv_unit(
            kind,
            spec.mid_channels,
            rng,
            spec.plane,
            spec.normalization,
            dist_widths=tuple(spec.dist_widths),
            predictor_hidden=spec.predictor_hidden,
        )
        self.out_channels = spec.mid_channels

    def forward(self, feats: Tensor, grouping: Grouping) -> Tensor:
        return self.conv(grouping.relative, F.gather(self.mlp_in(feats), grouping.indices))


# ---------------------------------------------------------------------------
# residual block
# ---------------------------------------------------------------------------


class ResidualBlock(Module):
    """Bottleneck residual block: shared MLP down, neighborhood conv, shared MLP up.

    With ``conv="parallel"`` (or an explicit ``spec_b``) two branches run on the
    same neighborhoods and their outputs are concatenated before the closing MLP.
    The shortcut is the identity unless widths differ (then a shared MLP) and,
    when downsampling, max-pools the input features over each center's
    neighborhood. No activation follows the addition, so zeroing the closing
    batch norm makes a channel-preserving block exactly the identity.
    """

    def __init__(self, spec: BlockSpec, rng, spec_b: Optional[BlockSpec] = None):
        self.spec = spec
        if spec_b is not None:
            for field in ("in_channels", "out_channels", "radius", "n_max", "downsample", "ratio"):
                if getattr(spec, field) != getattr(spec_b, field):
                    raise ValueError(f"parallel branches disagree on {field}")
            kinds = [(spec, spec.conv), (spec_b, spec_b.conv)]
        elif spec.conv == "parallel":
            kinds = [(spec, "fpconv"), (spec, "pointmlp")]
        else:
            kinds = [(spec, spec.conv)]
        self.branches = [Branch(s, "fpconv" if k == "parallel" else k, rng) for s, k in kinds]
        self.fused_channels = sum(b.out_channels for b in self.branches)
        self.mlp_out = SharedMLP(self.fused_channels, spec.out_channels, rng, activation=False)
        self.shortcut = (
            SharedMLP(spec.in_channels, spec.out_channels, rng, activation=False)
            if spec.in_channels != spec.out_channels
            else None
        )

    def group(self, positions, offsets=None, rng=None) -> Grouping:
        offsets = [0, len(positions)] if offsets is None else offsets
        ratio = self.spec.ratio if self.spec.downsample else None
        return sample_and_group(positions, offsets, self.spec.radius, self.spec.n_max, ratio, rng)

    def fused(self, feats: Tensor, grouping: Grouping) -> Tensor:
        """Branch outputs concatenated channel-wise, before the closing MLP."""
        outs = [b(feats, grouping) for b in self.branches]
        return outs[0] if len(outs) == 1 else F.concat(outs, axis=-1)

    def forward_grouped(self, feats: Tensor, grouping: Grouping) -> Tensor:
        if feats.shape[-1] != self.spec.in_channels:
            raise ShapeMismatch(f"block expects {self.spec.in_channels} channels, got {feats.shape[-1]}")
        y = self.mlp_out(self.fused(feats, grouping))
        if self.spec.downsample:
            sc = F.max_reduce(F.gather(feats, grouping.indices), axis=1)[0]
        else:
            sc = feats
        if self.shortcut is not None:
            sc = self.shortcut(sc)
        return F.add(y, sc)

    def forward(self, positions, feats, rng=None):
        """Single cloud: returns ``(positions', features')``."""
        positions = np.asarray(positions, dtype=np.float64)
        feats = as_tensor(feats, self.dtype)
        grouping = self.group(positions, rng=rng)
        return positions[grouping.centers], self.forward_grouped(feats, grouping)

    def zero_residual(self) -> None:
        zero_(self.mlp_out.bn.gamma)
        zero_(self.mlp_out.bn.beta)


def residual_fpconv_block(points, features, spec: BlockSpec, rng=None, block: Optional[ResidualBlock] = None):
    """Apply a residual block; a fresh one is built from ``spec`` if none is given."""
    block = block or ResidualBlock(spec, np.random.default_rng(0 if rng is None else rng))
    return block(points, features)


def parallel_fusion_block(points, features, spec_a: BlockSpec, spec_b: BlockSpec, rng=None, block=None):
    block = block or ResidualBlock(spec_a, np.random.default_rng(0 if rng is None else rng), spec_b=spec_b)
    return block(points, features)


# ---------------------------------------------------------------------------
# functional forms over a single cloud
# ---------------------------------------------------------------------------


def fpconv_with_fps(full_points, full_features, centers, params: FPConv, radius: float, n_max: int, rng=None) -> Tensor:
    """FPConv at each sampled center with neighbors searched over the full cloud."""
    full_points = np.asarray(full_points, dtype=np.float64)
    centers = np.asarray(centers)
    nb = geometry.radius_search_batch(full_points, full_points[centers], radius, n_max, rng)
    feats = as_tensor(full_features, params.dtype)
    return params(nb.relative, F.gather(feats, nb.indices))


def local_max_pool(full_points, full_features, centers, r: float, n_max: Optional[int] = None) -> Tensor:
    """Channel-wise max of features over each center's radius-``r`` ball.

    Without ``n_max`` every point of the ball takes part.
    """
    full_points = np.asarray(full_points, dtype=np.float64)
    queries = full_points[np.asarray(centers)]
    if n_max is None:
        n_max = max(1, int(geometry.radius_search_batch(full_points, queries, r, len(full_points)).counts.max()))
    nb = geometry.radius_search_batch(full_points, queries, r, n_max)
    if np.any(nb.counts == 0):
        raise ShapeMismatch("a pooling center has no points within the radius")
    return F.max_reduce(F.gather(as_tensor(full_features), nb.indices), axis=1)[0]


def knn_upsample(source_points, source_features, target_points, k: int = 3) -> Tensor:
    """Inverse-distance interpolation of source features at the target points."""
    src = np.asarray(source_points, dtype=np.float64)
    dst = np.asarray(target_points, dtype=np.float64)
    interp = plan_interpolation(src, [0, len(src)], dst, [0, len(dst)], k)
    return F.weighted_gather(as_tensor(source_features), interp.indices, interp.weights)


def pointmlp_conv(nbhd, features, params: PointMLPConv) -> Tensor:
    rel = nbhd.relative_coords if hasattr(nbhd, "relative_coords") else np.asarray(nbhd)
    return params(rel, features)
