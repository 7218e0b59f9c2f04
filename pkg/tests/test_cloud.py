import numpy as np
import pytest

from conftest import make_cloud
from find3d.cloud import (
    AugmentConfig,
    PointCloud,
    augment,
    nn_upsample,
    normalize,
    random_rotation,
    voxel_sample,
)


def test_normalize_fixed_point():
    pos = np.array([[-0.5, -0.2, -0.1], [0.5, 0.2, 0.1]])
    cloud = PointCloud(pos, np.zeros((2, 3)), np.full((2, 3), 0.5))
    out, t = normalize(cloud)
    assert np.allclose(out.positions, pos)
    assert np.allclose(t.rotation, np.eye(3))
    assert np.allclose(t.translation, 0)
    assert t.scale == pytest.approx(1.0)


def test_normalize_two_points():
    cloud = PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]]), None, None)
    out, t = normalize(cloud)
    assert np.allclose(out.positions, [[-0.5, 0, 0], [0.5, 0, 0]])
    assert t.scale == pytest.approx(0.5)


def test_normalize_degenerate_errors():
    cloud = PointCloud(np.ones((4, 3)), None, None)
    with pytest.raises(ValueError, match="zero extent"):
        normalize(cloud)


def test_normalize_is_idempotent():
    cloud = make_cloud(100, seed=1)
    once, _ = normalize(cloud)
    twice, t = normalize(once)
    assert np.allclose(once.positions, twice.positions, atol=1e-12)
    assert t.scale == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(t.translation, 0, atol=1e-6)


def test_normalize_transform_maps_original():
    cloud = make_cloud(64, seed=2)
    out, t = normalize(cloud)
    assert np.allclose(t.apply(cloud.positions), out.positions)


def test_voxel_sample_coincident_points_keep_lowest_index():
    pos = np.zeros((8, 3))
    pos[3] = [0.005, 0.005, 0.005]
    pos[7] = [0.004, 0.006, 0.002]
    pos[0] = [1, 1, 1]
    pos[1] = [1, 1, 1.5]
    cloud = PointCloud(pos, None, None)
    sample = voxel_sample(cloud, 0.02)
    # indices 2..7 (minus 3,7 overlap) share the origin voxel; lowest kept
    kept = set(sample.kept.tolist())
    assert 2 in kept and 3 not in kept and 7 not in kept


def test_voxel_sample_distinct_voxels_both_kept():
    cloud = PointCloud(np.array([[0.001, 0, 0], [0.5, 0, 0]]), None, None)
    sample = voxel_sample(cloud, 0.02)
    assert sample.kept.tolist() == [0, 1]
    assert len(sample.dropped) == 0


def test_voxel_sample_small_cube_collapses():
    corners = np.array(list(np.ndindex(2, 2, 2)), dtype=float) * 0.01
    cloud = PointCloud(corners, None, None)
    sample = voxel_sample(cloud, 0.02)
    assert len(sample.kept) == 1
    assert sample.kept[0] == 0
    assert set(sample.parent.tolist()) == {0}


def test_voxel_sample_partition_and_parent_validity():
    cloud = make_cloud(400, seed=4)
    sample = voxel_sample(cloud, 0.05)
    all_idx = np.sort(np.concatenate([sample.kept, sample.dropped]))
    assert np.array_equal(all_idx, np.arange(len(cloud)))
    assert set(sample.parent.tolist()) <= set(sample.kept.tolist())
    # parent map exposes every dropped index
    assert set(sample.parent_of_dropped) == set(sample.dropped.tolist())


def test_voxel_sample_parents_are_exact_nearest():
    from scipy.spatial import cKDTree

    cloud = make_cloud(500, seed=5)
    sample = voxel_sample(cloud, 0.08)
    tree = cKDTree(cloud.positions[sample.kept])
    _, nearest_rows = tree.query(cloud.positions[sample.dropped])
    expected = sample.kept[nearest_rows]
    # allow either on exact ties; compare distances instead of indices
    d_mine = np.linalg.norm(
        cloud.positions[sample.dropped] - cloud.positions[sample.parent], axis=1
    )
    d_tree = np.linalg.norm(
        cloud.positions[sample.dropped] - cloud.positions[expected], axis=1
    )
    assert np.allclose(d_mine, d_tree, atol=1e-12)


def test_voxel_sample_idempotent_on_kept_subset():
    cloud = make_cloud(300, seed=6)
    sample = voxel_sample(cloud, 0.05)
    sub = cloud.subset(sample.kept)
    sample2 = voxel_sample(sub, 0.05)
    assert len(sample2.kept) == len(sub)
    assert len(sample2.dropped) == 0


def test_voxel_sample_order_independent_when_one_point_per_voxel():
    cloud = make_cloud(250, seed=7)
    sample = voxel_sample(cloud, 0.05)
    sub = cloud.subset(sample.kept)
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(sub))
    shuffled = sub.subset(perm)
    s1 = voxel_sample(sub, 0.05)
    s2 = voxel_sample(shuffled, 0.05)
    assert len(s1.kept) == len(sub) and len(s2.kept) == len(sub)
    # the surviving voxel set matches point for point under the permutation
    assert {tuple(v) for v in s1.grid} == {tuple(v) for v in s2.grid}
    assert np.array_equal(sub.positions, shuffled.positions[np.argsort(perm)])


def test_voxel_sample_rejects_bad_voxel_size():
    with pytest.raises(ValueError):
        voxel_sample(make_cloud(10), 0.0)


def test_nn_upsample_identity_when_nothing_dropped():
    cloud = make_cloud(50, seed=8)
    sample = voxel_sample(cloud, 1e-6)
    feats = np.random.default_rng(0).standard_normal((len(sample.kept), 4))
    out = nn_upsample(feats, sample)
    assert np.array_equal(out, feats)


def test_nn_upsample_copies_parent_rows_bit_identical():
    # two points in one voxel force a drop
    pos2 = np.array([[0.0, 0, 0], [0.30, 0, 0], [0.61, 0, 0], [0.301, 0, 0]])
    sample = voxel_sample(PointCloud(pos2, None, None), 0.02)
    assert sample.dropped.tolist() == [3]
    feats = np.array([[1.1, 2.2], [3.3, 4.4], [5.5, 6.6]], dtype=np.float32)
    out = nn_upsample(feats, sample)
    assert out.shape == (4, 2)
    parent_row = sample.kept_row_of(sample.parent)[0]
    assert np.array_equal(out[3], feats[parent_row])
    # nearest kept to 0.301 is the point at 0.30
    assert sample.parent[0] == 1


def test_nn_upsample_nearest_by_brute_force():
    cloud = make_cloud(200, seed=9)
    sample = voxel_sample(cloud, 0.1)
    feats = np.arange(len(sample.kept), dtype=np.float64)[:, None]
    out = nn_upsample(feats, sample)
    for d in sample.dropped[:20]:
        dists = np.linalg.norm(cloud.positions[sample.kept] - cloud.positions[d], axis=1)
        assert out[d, 0] == np.argmin(dists)


def test_nn_upsample_row_mismatch_errors():
    cloud = make_cloud(60, seed=10)
    sample = voxel_sample(cloud, 0.05)
    with pytest.raises(ValueError):
        nn_upsample(np.zeros((len(sample.kept) + 1, 3)), sample)


def test_nn_upsample_restriction_to_kept_is_identity():
    cloud = make_cloud(150, seed=11)
    sample = voxel_sample(cloud, 0.07)
    feats = np.random.default_rng(1).standard_normal((len(sample.kept), 6))
    out = nn_upsample(feats, sample)
    assert np.array_equal(out[sample.kept], feats)


def test_random_rotation_properties():
    t = random_rotation(42)
    assert np.allclose(t.rotation @ t.rotation.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(t.rotation) == pytest.approx(1.0)
    t2 = random_rotation(42)
    assert np.array_equal(t.rotation, t2.rotation)
    assert not np.allclose(random_rotation(43).rotation, t.rotation)


def test_rotation_zero_angles_identity():
    from find3d.cloud import rotation_xyz

    assert np.allclose(rotation_xyz((0, 0, 0)), np.eye(3))


def test_augment_disabled_is_identity():
    cloud = make_cloud(80, seed=12)
    out = augment(cloud, AugmentConfig.none(), seed=0)
    assert np.array_equal(out.positions, cloud.positions)
    assert np.array_equal(out.normals, cloud.normals)
    assert np.array_equal(out.colors, cloud.colors)


def test_augment_flip_negates_axis():
    cloud = make_cloud(40, seed=13)
    config = AugmentConfig.none()
    config.flip = True
    config.flip_axes = (0,)
    config.flip_prob = 1.0
    out = augment(cloud, config, seed=0)
    assert np.allclose(out.positions[:, 0], -cloud.positions[:, 0])
    assert np.allclose(out.positions[:, 1:], cloud.positions[:, 1:])
    assert np.allclose(out.normals[:, 0], -cloud.normals[:, 0])


def test_augment_zero_jitter_unchanged():
    cloud = make_cloud(40, seed=14)
    config = AugmentConfig.none()
    config.jitter = True
    config.jitter_sigma = 0.0
    out = augment(cloud, config, seed=0)
    assert np.allclose(out.positions, cloud.positions)


def test_augment_pure_rotation_preserves_distances():
    cloud = make_cloud(60, seed=15)
    config = AugmentConfig.none()
    config.rotate = True
    out = augment(cloud, config, seed=3)
    d0 = np.linalg.norm(cloud.positions[:30] - cloud.positions[30:60], axis=1)
    d1 = np.linalg.norm(out.positions[:30] - out.positions[30:60], axis=1)
    assert np.allclose(d0, d1, atol=1e-5)
    lens = np.linalg.norm(out.normals, axis=1)
    assert np.allclose(lens, 1.0, atol=1e-9)


def test_augment_chromatic_clamped_and_deterministic():
    cloud = make_cloud(80, seed=16)
    config = AugmentConfig()  # everything on
    a = augment(cloud, config, seed=9)
    b = augment(cloud, config, seed=9)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.colors, b.colors)
    assert a.colors.min() >= 0 and a.colors.max() <= 1
    c = augment(cloud, config, seed=10)
    assert not np.array_equal(a.positions, c.positions)


def test_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)), None, None).validate()
    bad = make_cloud(10)
    bad.positions[0, 0] = np.nan
    with pytest.raises(ValueError):
        bad.validate()
    bad2 = make_cloud(10)
    bad2.normals[0] = [2.0, 0, 0]
    with pytest.raises(ValueError):
        bad2.validate()
