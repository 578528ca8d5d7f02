import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpconv.data import (
    CLASS_NAMES,

    SHAPE_NAMES,
    Dataset,
    SceneSpec,
    augment,
    generate_scene,
    generate_shape_dataset,
    load_cloud,
    load_dataset,
    load_manifest,
    make_room_dataset,
    make_shape_dataset,
    sample_block,
    save_cloud,
    tile_blocks,
    write_dataset,
)
from fpconv.data.sampling import DEFAULT_BLOCK_POINTS
from fpconv.errors import EmptyCloud, LabelOutOfRange, ParseError
from fpconv.geometry import PointCloud, estimate_curvature

FLOOR = CLASS_NAMES.index("floor")
WALL = CLASS_NAMES.index("wall")


@pytest.fixture(scope="module")
def room():
    return generate_scene(SceneSpec(n_points=20000, seed=3))


# -- scenes --------------------------------------------------------------------------


def test_scene_is_pure_function_of_spec():
    a, b = generate_scene(SceneSpec(n_points=3000, seed=5)), generate_scene(SceneSpec(n_points=3000, seed=5))
    for name in ("positions", "colors", "labels"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = generate_scene(SceneSpec(n_points=3000, seed=6))
    assert not np.array_equal(a.positions, c.positions)


def test_floor_only_scene():
    spec = SceneSpec(ceiling=False, walls=False, n_tables=0, n_boards=0, n_clutter=0, n_points=2000)
    cloud = generate_scene(spec)
    assert np.all(cloud.labels == FLOOR)
    assert np.abs(cloud.positions[:, 2]).max() <= 1e-9


def test_plane_regions_are_flat(room):
    sigma = estimate_curvature(room, 0.15).sigma
    floor_only = generate_scene(SceneSpec(ceiling=False, walls=False, n_tables=0, n_boards=0, n_clutter=0, n_points=4000))
    assert estimate_curvature(floor_only, 0.3).sigma.max() < 1e-6
    # wall points well away from every edge and object see a single plane
    p = room.positions
    hi = p.max(0)
    interior = (room.labels == WALL) & np.all((p > 0.5) | (p < hi - 0.5), axis=1)
    interior &= (p[:, 2] > 2.0) & (p[:, 2] < hi[2] - 0.3)
    interior &= np.minimum(np.minimum(p[:, 0], hi[0] - p[:, 0]), np.minimum(p[:, 1], hi[1] - p[:, 1])) < 1e-9
    interior &= np.minimum(p[:, 0], hi[0] - p[:, 0]) > 0.3
    assert interior.sum() > 20
    assert sigma[interior].max() < 1e-6


def test_every_point_labeled_and_colors_valid(room):
    assert room.labels.shape == (len(room),)
    assert set(np.unique(room.labels)) <= set(range(len(CLASS_NAMES)))
    assert room.colors.min() >= 0 and room.colors.max() <= 1


# -- block sampling ------------------------------------------------------------------


def test_block_bounds_and_default_size(room):
    block = sample_block(room, seed=0)
    assert block.n_points == DEFAULT_BLOCK_POINTS == 4096
    xy = block.positions[:, :2] + block.origin + block.extent / 2
    np.testing.assert_allclose(xy, room.positions[block.indices, :2])
    raw = room.positions[block.indices, :2]
    assert np.all(raw >= block.origin) and np.all(raw <= block.origin + block.extent)


@given(st.integers(0, 10_000))
def test_normalized_room_coordinates_in_unit_cube(seed):
    cloud = generate_scene(SceneSpec(n_points=3000, seed=seed % 50))
    block = sample_block(cloud, 1.5, 256, seed)
    assert block.features.shape == (256, 9)
    assert block.features[:, 6:].min() >= 0 and block.features[:, 6:].max() <= 1


def test_thin_block_is_padded_with_flagged_repeats():
    pts = np.zeros((10, 3))
    pts[:, 0] = np.linspace(0, 0.5, 10)
    block = sample_block(PointCloud(pts, labels=np.zeros(10, int)), 2.0, 16, seed=1)
    assert block.n_points == 16 and block.repeated.sum() >= 6
    assert sorted(set(block.indices.tolist())) == list(range(10))
    assert sorted(block.indices[~block.repeated].tolist()) == list(range(10))


def test_block_sampling_is_seeded(room):
    a, b = sample_block(room, seed=4), sample_block(room, seed=4)
    np.testing.assert_array_equal(a.indices, b.indices)


def test_empty_cloud_block():
    with pytest.raises(EmptyCloud):
        sample_block(PointCloud(np.zeros((0, 3))), seed=0)


def test_tile_blocks_cover_every_point(room):
    blocks = tile_blocks(room, 2.0, 2048, seed=0)
    covered = np.zeros(len(room), dtype=int)
    for b in blocks:
        assert b.n_points == 2048
        np.add.at(covered, b.indices[~b.repeated], 1)
    assert covered.min() >= 1


# -- augmentation --------------------------------------------------------------------


def test_rotation_only_preserves_geometry(rng):
    pts = rng.standard_normal((100, 3))
    nrm = rng.standard_normal((100, 3))
    out = augment(PointCloud(pts, normals=nrm), seed=2, jitter_sigma=1e-300, jitter_clip=1e-300)
    np.testing.assert_allclose(out.positions[:, 2], pts[:, 2], atol=1e-12)
    d_before = np.linalg.norm(pts[:, None, :2] - pts[None, :, :2], axis=-1)
    d_after = np.linalg.norm(out.positions[:, None, :2] - out.positions[None, :, :2], axis=-1)
    assert np.abs(d_before - d_after).max() <= 1e-9
    np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), np.linalg.norm(nrm, axis=1))


@given(st.integers(0, 10_000), st.floats(1e-3, 0.5), st.floats(1e-3, 0.2))
def test_jitter_is_clipped(seed, sigma, clip):
    r = np.random.default_rng(seed)
    pts = r.standard_normal((200, 3))
    out = augment(PointCloud(pts), seed, sigma, clip, rotate=False)
    assert np.abs(out.positions - pts).max() <= clip * (1 + 1e-12) + 1e-15


def test_augment_is_seeded_and_validates(rng):
    cloud = PointCloud(rng.standard_normal((20, 3)))
    np.testing.assert_array_equal(augment(cloud, 3).positions, augment(cloud, 3).positions)
    with pytest.raises(ValueError):
        augment(cloud, 0, jitter_sigma=0.0)


# -- ascii io ---------------------------------------------------------------------


def test_cloud_round_trip(tmp_path, rng):
    cloud = PointCloud(rng.standard_normal((50, 3)) * 10, colors=rng.random((50, 3)), labels=rng.integers(-1, 6, 50))
    save_cloud(cloud, tmp_path / "c.txt")
    back = load_cloud(tmp_path / "c.txt")
    assert np.abs(back.positions - cloud.positions).max() <= 1e-6
    np.testing.assert_array_equal(back.labels, cloud.labels)


def test_single_gray_point(tmp_path):
    (tmp_path / "p.txt").write_text("# header\n\n0 0 0 0.5 0.5 0.5 2\n")
    c = load_cloud(tmp_path / "p.txt")
    assert len(c) == 1 and c.labels.tolist() == [2]
    np.testing.assert_array_equal(c.colors, [[0.5, 0.5, 0.5]])


@pytest.mark.parametrize("bad", ["0 0 0 0.5 0.5", "0 0 x 0.5 0.5 0.5 1", "0 0 0 0.5 0.5 0.5 1.5", "0 0 0 1 1 1 -3"])
def test_malformed_line_names_the_line(tmp_path, bad):
    path = tmp_path / "bad.txt"
    path.write_text("# ok\n1 2 3 0 0 0 0\n" + bad + "\n")
    with pytest.raises(ParseError) as info:
        load_cloud(path)
    assert ":3" in str(info.value) or "line 3" in str(info.value)


def test_manifest_round_trip(tmp_path):
    ds = make_room_dataset(2, 1, seed=1, n_points=500)
    manifest = write_dataset(ds, tmp_path)
    m = load_manifest(manifest)
    assert len(m.train) == 2 and len(m.test) == 1
    assert "train train_0000.txt" in manifest.read_text()
    back = load_dataset(manifest, "segmentation", 6)
    np.testing.assert_array_equal(back.test[0].labels, ds.test[0].labels)


def test_manifest_rejects_unknown_split(tmp_path):
    (tmp_path / "m.txt").write_text("validation a.txt\n")
    with pytest.raises(ParseError):
        load_manifest(tmp_path / "m.txt")


def test_loader_rejects_labels_beyond_class_count(tmp_path):
    ds = make_room_dataset(1, 1, seed=1, n_points=400)
    manifest = write_dataset(ds, tmp_path)
    with pytest.raises(LabelOutOfRange):
        load_dataset(manifest, "segmentation", 3)


# -- shapes -------------------------------------------------------------------------


def test_shape_dataset_balance_and_sphere_radius():
    clouds, labels = generate_shape_dataset(4, 256, seed=0)
    assert np.bincount(labels).tolist() == [4] * len(SHAPE_NAMES)
    for cloud in (c for c, lab in zip(clouds, labels) if SHAPE_NAMES[lab] == "sphere"):
        r = np.linalg.norm(cloud.positions, axis=1)
        assert np.abs(r - r.mean()).max() <= 1e-9
        np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)


def test_plane_shapes_are_flat():
    clouds, labels = generate_shape_dataset(3, 512, seed=1)
    for cloud in (c for c, lab in zip(clouds, labels) if SHAPE_NAMES[lab] == "plane"):
        assert estimate_curvature(cloud, 0.3).sigma.max() < 1e-6


def test_shape_generation_is_seeded():
    a, _ = generate_shape_dataset(2, 64, seed=9)
    b, _ = generate_shape_dataset(2, 64, seed=9)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.positions, y.positions)


def test_shape_dataset_split():
    ds = make_shape_dataset(10, 128, seed=0)
    assert len(ds.train) == 48 and len(ds.test) == 12
    assert np.bincount(ds.test_labels).tolist() == [2] * 6


def test_dataset_rejects_out_of_range_labels(rng):
    cloud = PointCloud(rng.random((5, 3)), labels=[0, 1, 2, 7, 0])
    with pytest.raises(LabelOutOfRange):
        Dataset("segmentation", [cloud], [], 6)
