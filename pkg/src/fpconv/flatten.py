"""Learned local flattening and the FPConv operator.

For a neighborhood of N points with center-relative coordinates ``rel`` and
features ``F`` (N x C), FPConv predicts an N x L projection matrix ``W`` from
coordinates alone (L = M_w * M_h grid pixels), normalizes it, scatters the
features onto the grid as ``S = W^T F`` and runs a small 2-D CNN whose last
layer is a convolution spanning the whole plane, producing one feature vector
for the center point.

All functions accept an optional leading batch axis over neighborhoods:
``rel`` is (M, N, 3), ``F`` is (M, N, C), ``W`` is (M, N, L).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from fpconv.errors import AlreadyNormalized, ShapeMismatch, UnnormalizedWeights
from fpconv.nn import functional as F
from fpconv.nn.layers import BatchNorm, Conv2d, Linear, Module, SharedMLP
from fpconv.nn.tensor import Tensor, as_tensor, make_result

NORMALIZATIONS = ("none", "dense", "sparse")
SPARSE_EPS = 1e-5


@dataclass
class ProjWeights:
    matrix: Tensor
    plane: Tuple[int, int]
    norm: str = "none"

    def __post_init__(self):
        mw, mh = self.plane
        if mw < 1 or mh < 1:
            raise ValueError(f"plane extents must be positive, got {self.plane}")
        if self.matrix.shape[-1] != mw * mh:
            raise ShapeMismatch(f"weight matrix has {self.matrix.shape[-1]} columns, plane needs {mw * mh}")
        if self.norm not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.norm!r}")

    @property
    def L(self) -> int:
        return self.plane[0] * self.plane[1]


@dataclass
class GridPlane:
    tensor: Tensor  # (..., M_w, M_h, C)

    @property
    def plane(self) -> Tuple[int, int]:
        return self.tensor.shape[-3], self.tensor.shape[-2]


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------


def _row_normalize(w: Tensor, eps: float) -> Tensor:
    # w / (||row||_2 + eps); rows live on the last axis
    wd = w.data
    n = np.sqrt((wd * wd).sum(axis=-1, keepdims=True))
    denom = n + eps
    out = wd / denom

    def backward(g):
        # w / ||w|| stays bounded even for tiny rows, so form it before dividing by denom
        dot = (g * wd).sum(axis=-1, keepdims=True)
        unit = np.where(n > 0, wd / np.where(n > 0, n, 1.0), 0.0)
        return (g / denom - unit * (dot / (denom * denom)),)

    return make_result(out, (w,), backward)


def _column_cap(w: Tensor) -> Tensor:
    # w / max(||col||_2, 1); columns run over the point axis (-2)
    wd = w.data
    m = np.sqrt((wd * wd).sum(axis=-2, keepdims=True))
    big = m > 1.0
    s = np.where(big, m, 1.0)
    out = wd / s

    def backward(g):
        dot = (g * wd).sum(axis=-2, keepdims=True)
        corr = np.where(big, dot / (s * s * s), 0.0)
        return (g / s - wd * corr,)

    return make_result(out, (w,), backward)


def normalize_dense(weights: ProjWeights) -> ProjWeights:
    """Per-pixel softmax over the contributing points: every column sums to 1."""
    if weights.norm != "none":
        raise AlreadyNormalized(f"weights already carry {weights.norm!r} normalization")
    return ProjWeights(F.softmax(weights.matrix, axis=-2), weights.plane, "dense")


def normalize_sparse(weights: ProjWeights, eps: float = SPARSE_EPS) -> ProjWeights:
    """Two-step normalization that keeps the projection sparse.

    Each point's row is first scaled to (almost) unit L2 norm, balancing how much
    intensity a point gives out. Each pixel's column is then divided by
    ``max(||column||, 1)``, so only over-saturated pixels are rescaled and
    intensities stay continuous in [0, 1].
    """
    if weights.norm != "none":
        raise AlreadyNormalized(f"weights already carry {weights.norm!r} normalization")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return ProjWeights(_column_cap(_row_normalize(weights.matrix, eps)), weights.plane, "sparse")


def apply_normalization(weights: ProjWeights, kind: str, eps: float = SPARSE_EPS) -> ProjWeights:
    if kind == "dense":
        return normalize_dense(weights)
    if kind == "sparse":
        return normalize_sparse(weights, eps)
    if kind == "none":
        return weights
    raise ValueError(f"unknown normalization {kind!r}")


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def project_to_grid(weights: ProjWeights, features, require_normalized: bool = True) -> GridPlane:
    """``S(v_j) = sum_i w_ji F(q_i)`` for every pixel, reshaped to (..., M_w, M_h, C).

    Raw weights are rejected unless ``require_normalized`` is False (the
    unnormalized ablation variant).
    """
    if require_normalized and weights.norm == "none":
        raise UnnormalizedWeights("project_to_grid expects normalized weights")
    feats = as_tensor(features)
    W = weights.matrix
    if W.shape[:-1] != feats.shape[:-1]:
        raise ShapeMismatch(f"weights {W.shape} vs features {feats.shape}")
    S = F.matmul(F.swap_last(W), feats)
    mw, mh = weights.plane
    return GridPlane(F.reshape(S, S.shape[:-2] + (mw, mh, feats.shape[-1])))


# ---------------------------------------------------------------------------
# learned components
# ---------------------------------------------------------------------------


class DistributionFeature(Module):
    """Shared per-point MLP on relative coordinates followed by a channel-wise max."""

    def __init__(self, rng, widths=(32, 64)):
        dims = (3,) + tuple(widths)
        self.layers = [SharedMLP(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.out_features = dims[-1]

    def forward(self, rel: Tensor) -> Tensor:
        h = rel
        for layer in self.layers:
            h = layer(h)
        return F.max_reduce(h, axis=-2)[0]


class WeightPredictor(Module):
    """Shared MLP on ``[rel_coord || distribution_feature]`` emitting one L-row per point.

    The first layer acting on the concatenation is split into a coordinate
    part and a distribution-feature part; the latter is computed once per
    neighborhood and broadcast over its points. Batch norm sees only the
    coordinate part: normalizing the sum would subtract the per-neighborhood
    constant and erase the distribution feature whenever a batch holds a
    single neighborhood.
    """

    def __init__(self, rng, dist_features: int, L: int, hidden: int = 64):
        fan_in = 3 + dist_features
        self.coord = Linear(3, hidden, rng, bias=False)
        self.context = Linear(dist_features, hidden, rng, bias=True)
        rescale = np.sqrt(3 / fan_in), np.sqrt(dist_features / fan_in)
        self.coord.weight.data *= rescale[0]
        self.context.weight.data *= rescale[1]
        self.bn = BatchNorm(hidden)
        self.out = Linear(hidden, L, rng, bias=True)

    def forward(self, rel: Tensor, dist_feat: Tensor) -> Tensor:
        n = rel.shape[-2]
        single = rel.ndim == 2
        if single:
            rel = F.reshape(rel, (1,) + rel.shape)
            dist_feat = F.reshape(dist_feat, (1,) + dist_feat.shape)
        h = F.add(self.bn(self.coord(rel)), F.expand(self.context(dist_feat), n))
        out = self.out(F.leaky_relu(h))
        return F.reshape(out, out.shape[1:]) if single else out


class FPConv(Module):
    """Learned flattening followed by a 2-D CNN on the grid plane.

    ``conv_layers`` 3x3 convolutions (padding 1, each followed by batch norm
    and leaky ReLU) precede a final convolution whose kernel spans the whole
    plane and collapses it to a single C_out vector.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng,
        plane: int = 6,
        normalization: str = "sparse",
        eps: float = SPARSE_EPS,
        conv_layers: int = 2,
        dist_widths=(32, 64),
        predictor_hidden: int = 64,
        bias: bool = True,
    ):
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {normalization!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.plane = (plane, plane)
        self.normalization = normalization
        self.eps = eps
        self.dist = DistributionFeature(rng, dist_widths)
        self.predictor = WeightPredictor(rng, self.dist.out_features, plane * plane, predictor_hidden)
        self.convs = [Conv2d(3, in_channels, in_channels, rng, padding=1, bias=False) for _ in range(conv_layers)]
        self.conv_bns = [BatchNorm(in_channels) for _ in range(conv_layers)]
        self.global_conv = Conv2d(plane, in_channels, out_channels, rng, padding=0, bias=bias)

    def flatten(self, rel: Tensor) -> ProjWeights:
        g = distribution_feature(rel, self)
        return apply_normalization(predict_weights(rel, g, self), self.normalization, self.eps)

    def forward(self, rel, feats) -> Tensor:
        rel = as_tensor(rel, self.dtype)
        feats = as_tensor(feats)
        batched = rel.ndim == 3
        if not batched:
            rel = F.reshape(rel, (1,) + rel.shape)
            feats = F.reshape(feats, (1,) + feats.shape)
        if feats.shape[:2] != rel.shape[:2] or feats.shape[2] != self.in_channels:
            raise ShapeMismatch(
                f"FPConv expects features (M, N, {self.in_channels}) aligned with coords {rel.shape}, got {feats.shape}"
            )
        W = self.flatten(rel)
        h = project_to_grid(W, feats, require_normalized=False).tensor
        for conv, bn in zip(self.convs, self.conv_bns):
            h = F.leaky_relu(bn(conv(h)))
        out = self.global_conv(h)
        out = F.reshape(out, (out.shape[0], self.out_channels))
        return out if batched else F.reshape(out, (self.out_channels,))


FPConvParams = FPConv


def distribution_feature(rel_coords, params: FPConv) -> Tensor:
    rel = as_tensor(rel_coords, params.dtype)
    if rel.shape[-2] < 1:
        raise ShapeMismatch("distribution feature of an empty neighborhood")
    return params.dist(rel)


def predict_weights(rel_coords, dist_feat: Tensor, params: FPConv) -> ProjWeights:
    rel = as_tensor(rel_coords, params.dtype)
    if dist_feat.shape[:-1] != rel.shape[:-2]:
        raise ShapeMismatch(f"distribution feature {dist_feat.shape} vs coords {rel.shape}")
    return ProjWeights(params.predictor(rel, dist_feat), params.plane, "none")


def fpconv_forward(nbhd, features, params: FPConv) -> Tensor:
    """FPConv output (C_out,) at the center of one neighborhood."""
    rel = nbhd.relative_coords if hasattr(nbhd, "relative_coords") else np.asarray(nbhd)
    feats = as_tensor(features)
    if feats.ndim != 2 or feats.shape[0] != len(rel):
        raise ShapeMismatch(f"neighborhood has {len(rel)} points, features {feats.shape}")
    return params(rel, feats)


# ---------------------------------------------------------------------------
# loop-based reference (no autograd), used as an oracle and by the benchmark
# ---------------------------------------------------------------------------


def _ref_bn(x: np.ndarray, bn: BatchNorm, training: bool) -> np.ndarray:
    flat = x.reshape(-1, x.shape[-1])
    if training:
        mu = flat.mean(axis=0)
        var = ((flat - mu) ** 2).mean(axis=0)
    else:
        mu, var = bn.stats.mean, bn.stats.var
    return ((flat - mu) / np.sqrt(var + F.BN_EPS) * bn.gamma.data + bn.beta.data).reshape(x.shape)


def _ref_lrelu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, F.LEAKY_SLOPE * x)


def _ref_conv3x3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    H, W, C = x.shape
    k = kernel.shape[0]
    p = k // 2
    out = np.zeros((H, W, kernel.shape[3]))
    for r in range(H):
        for c in range(W):
            for a in range(k):
                for b in range(k):
                    rr, cc = r + a - p, c + b - p
                    if 0 <= rr < H and 0 <= cc < W:
                        out[r, c] += x[rr, cc] @ kernel[a, b]
    return out


def fpconv_reference(rel: np.ndarray, feats: np.ndarray, params: FPConv, training: Optional[bool] = None) -> np.ndarray:
    """Evaluate one neighborhood with explicit loops.

    The projection and the plane-spanning convolution are computed as the
    double sum ``sum_j c_j sum_i w_ji F(q_i)`` pixel by pixel. Batch norm uses
    statistics of this single neighborhood in training mode.
    """
    training = params.training if training is None else training
    rel = np.asarray(rel, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    N = len(rel)

    h = rel
    for layer in params.dist.layers:
        h = _ref_lrelu(_ref_bn(h @ layer.linear.weight.data, layer.bn, training))
    g = np.array([max(h[i, c] for i in range(N)) for c in range(h.shape[1])])

    pred = params.predictor
    hidden = _ref_bn(rel @ pred.coord.weight.data, pred.bn, training)
    hidden = _ref_lrelu(hidden + g @ pred.context.weight.data + pred.context.bias.data)
    W = hidden @ pred.out.weight.data + pred.out.bias.data

    if params.normalization == "dense":
        W = np.exp(W - W.max(axis=0))
        W = W / W.sum(axis=0)
    elif params.normalization == "sparse":
        for i in range(N):
            W[i] = W[i] / (np.sqrt(sum(v * v for v in W[i])) + params.eps)
        for j in range(W.shape[1]):
            W[:, j] = W[:, j] / max(np.sqrt(sum(v * v for v in W[:, j])), 1.0)

    mw, mh = params.plane
    C = feats.shape[1]
    S = np.zeros((mw * mh, C))
    for j in range(mw * mh):
        for i in range(N):
            S[j] += W[i, j] * feats[i]
    S = S.reshape(mw, mh, C)

    for conv, bn in zip(params.convs, params.conv_bns):
        S = _ref_lrelu(_ref_bn(_ref_conv3x3(S, conv.kernel.data), bn, training))

    kernel = params.global_conv.kernel.data
    out = np.zeros(params.out_channels)
    for u in range(mw):
        for v in range(mh):
            out += S[u, v] @ kernel[u, v]
    if params.global_conv.bias is not None:
        out = out + params.global_conv.bias.data
    return out
