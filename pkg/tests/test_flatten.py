import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpconv.errors import AlreadyNormalized, ShapeMismatch, UnnormalizedWeights
from fpconv.flatten import (
    FPConv,
    ProjWeights,
    distribution_feature,
    fpconv_forward,
    fpconv_reference,
    normalize_dense,
    normalize_sparse,
    predict_weights,
    project_to_grid,
)
from fpconv.geometry import PointCloud, radius_search
from fpconv.nn.layers import zero_
from fpconv.nn.tensor import Tensor


def pw(matrix, plane=(2, 1), norm="none"):
    return ProjWeights(Tensor(np.asarray(matrix, dtype=np.float64)), plane, norm)


def make_conv(seed=0, cin=4, cout=5, plane=4, norm="sparse", **kw):
    return FPConv(cin, cout, np.random.default_rng(seed), plane=plane, normalization=norm, **kw)


def shake_params(conv, rng):
    # nonzero BN affine terms and running stats so the oracle exercises every path
    for name, p in conv.named_parameters().items():
        if "bn" in name:
            p.data += 0.3 * rng.standard_normal(p.shape)
    for m in (m for _, m in conv.named_modules() if hasattr(m, "stats")):
        m.stats.mean[:] = 0.1 * rng.standard_normal(m.stats.mean.shape)
        m.stats.var[:] = rng.uniform(0.5, 1.5, m.stats.var.shape)


# -- distribution feature ------------------------------------------------------


@given(st.integers(0, 10_000))
def test_distribution_feature_permutation(seed):
    r = np.random.default_rng(seed)
    conv = make_conv(seed % 7)
    rel = r.standard_normal((9, 3))
    perm = r.permutation(9)
    a = distribution_feature(rel, conv).data
    b = distribution_feature(rel[perm], conv).data
    assert np.abs(a - b).max() <= 1e-12


def test_distribution_feature_single_point_and_duplicates(rng):
    conv = make_conv().eval()
    q = rng.standard_normal((1, 3))
    h = q
    for layer in conv.dist.layers:
        h = layer(Tensor(h)).data
    np.testing.assert_allclose(distribution_feature(q, conv).data, h[0], atol=1e-14)
    rel = rng.standard_normal((5, 3))
    for mode in (True, False):
        conv.train(mode)
        single = distribution_feature(rel, conv).data
        np.testing.assert_allclose(distribution_feature(np.vstack([rel, rel]), conv).data, single, atol=1e-12)


# -- predict weights ---------------------------------------------------------------


def test_predict_weights_shape_and_coordinate_only(rng):
    conv = make_conv(plane=3)
    rel = rng.standard_normal((7, 3))
    W = predict_weights(rel, distribution_feature(rel, conv), conv)
    assert W.matrix.shape == (7, 9) and W.norm == "none"
    # features never enter the flattening path
    a = conv.flatten(Tensor(rel)).matrix.data
    fpconv_forward(rel, rng.standard_normal((7, 4)), conv)
    fpconv_forward(rel, rng.standard_normal((7, 4)), conv)
    np.testing.assert_array_equal(conv.flatten(Tensor(rel)).matrix.data, a)


def test_predict_weights_permutes_rows(rng):
    conv = make_conv()
    rel = rng.standard_normal((8, 3))
    perm = rng.permutation(8)
    a = predict_weights(rel, distribution_feature(rel, conv), conv).matrix.data
    b = predict_weights(rel[perm], distribution_feature(rel[perm], conv), conv).matrix.data
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


# -- normalizations ------------------------------------------------------------


def test_dense_examples():
    np.testing.assert_array_equal(normalize_dense(pw(np.zeros((2, 2)))).matrix.data, 0.5)
    np.testing.assert_array_equal(normalize_dense(pw([[7.0, -3.0]])).matrix.data, 1.0)
    col = normalize_dense(pw([[1.0], [0.0]], plane=(1, 1))).matrix.data.ravel()
    e = math.e
    np.testing.assert_allclose(col, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    assert abs(col[0] - 0.7311) < 1e-4


def test_sparse_examples():
    W = normalize_sparse(pw([[0.0, 0.0], [1.0, 2.0]]), 1e-5).matrix.data
    assert not W[0].any()
    out = normalize_sparse(pw([[3.0, 4.0]]), 1e-6).matrix.data
    np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-6)
    # one point per row means column norms stay below one and step 2 is a no-op
    np.testing.assert_array_equal(out, np.array([[3.0, 4.0]]) / (5.0 + 1e-6))


def test_sparse_column_under_one_is_untouched():
    # rows are unit after step 1; the first column then has norm 0.5
    raw = np.array([[0.3, 0.4 * 0 + math.sqrt(1 - 0.09)], [0.4, math.sqrt(1 - 0.16)]])
    raw[:, 0] = [0.3, 0.4]
    step1 = raw / (np.linalg.norm(raw, axis=1, keepdims=True) + 1e-5)
    out = normalize_sparse(pw(raw), 1e-5).matrix.data
    np.testing.assert_array_equal(out[:, 0], step1[:, 0])
    assert np.linalg.norm(out[:, 1]) <= 1 + 1e-9


def test_already_normalized_rejected():
    W = normalize_dense(pw(np.zeros((2, 2))))
    with pytest.raises(AlreadyNormalized):
        normalize_dense(W)
    with pytest.raises(AlreadyNormalized):
        normalize_sparse(W)


@given(st.integers(0, 10_000), st.integers(1, 20), st.sampled_from([1, 4, 9, 36]), st.floats(0.01, 100))
def test_normalization_invariants(seed, n, L, scale):
    r = np.random.default_rng(seed)
    raw = r.standard_normal((n, L)) * scale
    zero_row = int(r.integers(0, n))
    raw[zero_row] = 0.0
    side = int(round(math.sqrt(L)))
    d = normalize_dense(pw(raw, (side, side))).matrix.data
    assert np.all(d > 0) and np.abs(d.sum(0) - 1).max() <= 1e-9
    s = normalize_sparse(pw(raw, (side, side))).matrix.data
    assert np.linalg.norm(s, axis=1).max() <= 1 + 1e-9
    assert np.linalg.norm(s, axis=0).max() <= 1 + 1e-9
    assert not s[zero_row].any()


def test_sparse_step_one_scale_equivariance(rng):
    raw = rng.standard_normal((1, 9)) * 50
    a = normalize_sparse(pw(raw, (3, 3))).matrix.data
    b = normalize_sparse(pw(raw * 7.0, (3, 3))).matrix.data
    assert np.abs(a - b).max() <= 10 * 1e-5 / np.linalg.norm(raw)


# -- projection -----------------------------------------------------------------


def test_project_zero_and_one_hot(rng):
    feats = rng.standard_normal((3, 2))
    zero = project_to_grid(pw(np.zeros((3, 4)), (2, 2), "sparse"), feats)
    assert zero.plane == (2, 2) and not zero.tensor.data.any()
    W = np.zeros((3, 4))
    W[1, 2] = 1.0
    grid = project_to_grid(pw(W, (2, 2), "sparse"), feats).tensor.data.reshape(4, 2)
    np.testing.assert_array_equal(grid[2], feats[1])
    assert not np.delete(grid, 2, axis=0).any()


@pytest.mark.parametrize("seed", range(10))
def test_project_matches_double_sum(seed):
    r = np.random.default_rng(seed)
    n, L, C = (3, 4, 2) if seed == 0 else (int(r.integers(1, 20)), 9, int(r.integers(1, 6)))
    side = int(math.sqrt(L))
    W, feats = r.random((n, L)), r.standard_normal((n, C))
    grid = project_to_grid(pw(W, (side, side), "dense"), feats).tensor.data
    for j in range(L):
        expected = sum(W[i, j] * feats[i] for i in range(n))
        np.testing.assert_allclose(grid[j // side, j % side], expected, rtol=1e-12, atol=1e-12)


def test_project_rejects_raw_weights(rng):
    with pytest.raises(UnnormalizedWeights):
        project_to_grid(pw(np.zeros((3, 4)), (2, 2)), rng.standard_normal((3, 2)))
    with pytest.raises(ShapeMismatch):
        project_to_grid(pw(np.zeros((3, 4)), (2, 2), "dense"), rng.standard_normal((4, 2)))


# -- fused forward ---------------------------------------------------------------


def test_zero_convs_give_zero_output(rng):
    conv = make_conv()
    for c in conv.convs + [conv.global_conv]:
        zero_(c.kernel)
        zero_(c.bias)
    out = fpconv_forward(rng.standard_normal((10, 3)), rng.standard_normal((10, 4)), conv)
    assert out.shape == (5,) and not out.data.any()


def test_permutation_invariance_100_trials():
    r = np.random.default_rng(11)
    for trial in range(100):
        conv = make_conv(trial, norm=("none", "dense", "sparse")[trial % 3], plane=int(r.integers(2, 7)))
        if trial % 2:
            conv.eval()
        n = int(r.integers(1, 20))
        rel, feats = r.standard_normal((n, 3)) * 0.2, r.standard_normal((n, 4))
        perm = r.permutation(n)
        a = fpconv_forward(rel, feats, conv).data
        b = fpconv_forward(rel[perm], feats[perm], conv).data
        assert np.abs(a - b).max() < 1e-9


@pytest.mark.parametrize("norm", ["none", "dense", "sparse"])
@pytest.mark.parametrize("training", [True, False])
def test_fused_matches_loop_reference(norm, training, rng):
    conv = make_conv(3, norm=norm, plane=5)
    shake_params(conv, rng)
    conv.train(training)
    rel, feats = rng.standard_normal((12, 3)) * 0.3, rng.standard_normal((12, 4))
    fused = fpconv_forward(rel, feats, conv).data
    np.testing.assert_allclose(fused, fpconv_reference(rel, feats, conv), rtol=1e-9, atol=1e-9)


def test_forward_from_neighborhood(rng):
    pts = rng.random((50, 3))
    nb = radius_search(PointCloud(pts), pts[:1], 0.4, 16, seed=0)[0]
    conv = make_conv()
    out = fpconv_forward(nb, rng.standard_normal((16, 4)), conv)
    assert out.shape == (5,) and np.all(np.isfinite(out.data))
    with pytest.raises(ShapeMismatch):
        fpconv_forward(nb, rng.standard_normal((15, 4)), conv)


def test_batched_forward_equals_per_neighborhood_in_eval(rng):
    conv = make_conv().eval()
    shake_params(conv, rng)
    rel, feats = rng.standard_normal((6, 10, 3)) * 0.3, rng.standard_normal((6, 10, 4))
    batched = conv(rel, feats).data
    for m in range(6):
        np.testing.assert_allclose(batched[m], conv(rel[m], feats[m]).data, atol=1e-12)


def test_global_conv_spans_plane():
    conv = make_conv(plane=6)
    assert conv.global_conv.kernel.shape[:2] == (6, 6)
    assert conv.predictor.out.weight.shape[-1] == 36
