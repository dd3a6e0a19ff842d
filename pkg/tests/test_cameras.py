import numpy as np
import pytest

from scene_oracles import make_plane_pair, random_rotation, unproject_homogeneous_oracle
from streetnvs import cameras
from streetnvs.cameras import DepthMap, Intrinsics, PoseSE3


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def random_setup(rng):
    intr = Intrinsics(fx=rng.uniform(40, 120), fy=rng.uniform(40, 120),
                      cx=rng.uniform(20, 60), cy=rng.uniform(15, 45),
                      width=80, height=60)
    pose = PoseSE3(random_rotation(rng), rng.normal(size=3) * 4)
    return intr, pose


def test_unproject_identity_camera():
    intr = Intrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
    pose = PoseSE3(np.eye(3), np.zeros(3))
    x = cameras.unproject_pixel((0.0, 0.0), 1.0, intr, pose)
    np.testing.assert_allclose(x, [0, 0, 1], atol=1e-12)


def test_unproject_translated_camera():
    intr = Intrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
    pose = PoseSE3(np.eye(3), np.array([5.0, 0, 0]))
    x = cameras.unproject_pixel((0.0, 0.0), 1.0, intr, pose)
    np.testing.assert_allclose(x, [5, 0, 1], atol=1e-12)


def test_unproject_rejects_nonpositive_depth():
    intr = Intrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
    pose = PoseSE3(np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        cameras.unproject_pixel((0.0, 0.0), 0.0, intr, pose)


def test_unproject_matches_homogeneous_oracle(rng):
    for _ in range(50):
        intr, pose = random_setup(rng)
        u = (rng.uniform(0, intr.width), rng.uniform(0, intr.height))
        d = rng.uniform(0.5, 30)
        got = cameras.unproject_pixel(u, d, intr, pose)
        want = unproject_homogeneous_oracle(u, d, intr, pose)
        assert np.abs(got - want).max() < 1e-9


def test_project_point_on_axis():
    intr = Intrinsics(50.0, 50.0, 32.0, 24.0, 64, 48)
    pose = PoseSE3(np.eye(3), np.zeros(3))
    uv, z, valid = cameras.project_point(np.array([0, 0, 2.0]), intr, pose)
    assert valid
    assert z == pytest.approx(2.0)
    np.testing.assert_allclose(uv, [32.0, 24.0], atol=1e-12)


def test_project_point_behind_camera_flagged():
    intr = Intrinsics(50.0, 50.0, 32.0, 24.0, 64, 48)
    pose = PoseSE3(np.eye(3), np.zeros(3))
    _, _, valid = cameras.project_point(np.array([0, 0, -1.0]), intr, pose)
    assert not valid


def test_project_unproject_roundtrip(rng):
    intr, pose = random_setup(rng)
    uv = np.stack([rng.uniform(0, intr.width, 1000),
                   rng.uniform(0, intr.height, 1000)], axis=1)
    d = rng.uniform(0.3, 50, 1000)
    world = cameras.unproject_pixels(uv, d, intr, pose)
    uv2, z2, valid = cameras.project_points(world, intr, pose)
    assert valid.all()
    assert np.abs(uv2 - uv).max() < 1e-6
    assert np.abs(z2 - d).max() < 1e-6


def test_unproject_project_roundtrip_world_points(rng):
    intr, pose = random_setup(rng)
    # sample in-frustum world points, then check the inverse composition
    pts = cameras.unproject_pixels(
        np.stack([rng.uniform(0, intr.width, 200),
                  rng.uniform(0, intr.height, 200)], axis=1),
        rng.uniform(1, 20, 200), intr, pose)
    uv, z, _ = cameras.project_points(pts, intr, pose)
    back = cameras.unproject_pixels(uv, z, intr, pose)
    assert np.abs(back - pts).max() < 1e-6


def test_pose_orthonormality_enforced():
    bad = np.eye(3)
    bad[0, 1] = 1e-3
    with pytest.raises(ValueError):
        PoseSE3(bad, np.zeros(3))
    with pytest.raises(ValueError):
        PoseSE3(-np.eye(3), np.zeros(3))  # det = -1


def test_reproject_identity_pose(rng):
    intr, pose = random_setup(rng)
    vals = rng.uniform(2, 10, size=(intr.height, intr.width)).astype(np.float32)
    vals[5, 5] = 0.0  # one invalid pixel
    d = DepthMap(vals)
    out = cameras.reproject_depth(d, pose, pose, intr)
    assert np.abs(out.values[d.valid] - vals[d.valid]).max() < 1e-5
    assert not out.valid[5, 5]


def test_reproject_forward_translation_plane():
    intr = Intrinsics(60.0, 60.0, 40.0, 30.0, 80, 60)
    pose_i = PoseSE3(np.eye(3), np.zeros(3))
    pose_j = PoseSE3(np.eye(3), np.array([0, 0, 1.5]))
    z = 8.0
    d = DepthMap(np.full((60, 80), z, dtype=np.float32))
    out = cameras.reproject_depth(d, pose_i, pose_j, intr)
    got = out.values[out.valid]
    assert got.size > 0
    np.testing.assert_allclose(got, z - 1.5, atol=1e-5)


def test_reproject_matches_plane_oracle(rng):
    # identity rotations, random translation: plane z-depth in view j is
    # exactly plane_z - t_jz wherever a splat lands
    intr = Intrinsics(70.0, 70.0, 48.0, 32.0, 96, 64)
    pose_i = PoseSE3(np.eye(3), np.zeros(3))
    t = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3),
                  rng.uniform(-1, 1)])
    pose_j = PoseSE3(np.eye(3), t)
    z = rng.uniform(5, 10)
    d = DepthMap(np.full((64, 96), z, dtype=np.float32))
    out = cameras.reproject_depth(d, pose_i, pose_j, intr)
    got = out.values[out.valid]
    assert got.size > 0
    assert np.abs(got - (z - t[2])).max() < 1e-4


def test_consistency_mask_paper_threshold():
    a = DepthMap(np.full((4, 4), 5.00, dtype=np.float32))
    b = DepthMap(np.full((4, 4), 5.25, dtype=np.float32))
    assert not cameras.consistency_mask(a, b, sigma=0.2).any()
    assert cameras.consistency_mask(a, a, sigma=0.2).all()


def test_consistency_mask_requires_same_resolution():
    a = DepthMap(np.ones((4, 4), dtype=np.float32))
    b = DepthMap(np.ones((4, 5), dtype=np.float32))
    with pytest.raises(ValueError):
        cameras.consistency_mask(a, b, 0.2)


def test_consistency_filter_removes_constructed_outliers(rng):
    intr, pose_i, pose_j, depth_i, depth_j, outliers = make_plane_pair(rng)
    keep = cameras.filter_depth_by_consistency(
        depth_i, pose_i, depth_j, pose_j, intr, sigma=0.2)
    assert not keep[outliers].any(), "every outlier must be rejected"
    inliers = depth_i.valid & ~outliers
    retained = keep[inliers].mean()
    assert retained >= 0.99


def test_consistency_filter_is_nearly_symmetric(rng):
    # kept i->j implies the j->i difference stays within sigma plus the
    # discretization slack (one pixel of depth gradient; zero on this plane)
    intr, pose_i, pose_j, depth_i, depth_j, _ = make_plane_pair(
        rng, outlier_fraction=0.0)
    dij = cameras.reproject_depth(depth_i, pose_i, pose_j, intr)
    kept_ij = cameras.consistency_mask(dij, depth_j, 0.2)
    dji = cameras.reproject_depth(depth_j, pose_j, pose_i, intr)
    kept_ji = cameras.consistency_mask(dji, depth_i, 0.2)
    both_observed = dij.valid & dji.valid[:, :]
    check = kept_ij & both_observed
    diff_back = np.abs(dji.values - depth_i.values)
    assert np.all(diff_back[check & dji.valid] <= 0.2 + 0.01)


def test_pose_and_intrinsics_roundtrip(tmp_path, rng):
    poses = [PoseSE3(random_rotation(rng), rng.normal(size=3)) for _ in range(5)]
    cameras.save_poses(tmp_path / "poses.txt", poses)
    loaded = cameras.load_poses(tmp_path / "poses.txt")
    for a, b in zip(poses, loaded):
        assert np.abs(a.matrix34() - b.matrix34()).max() < 1e-12
    intr = Intrinsics(61.5, 62.5, 40.25, 30.75, 80, 60)
    cameras.save_intrinsics(tmp_path / "intrinsics.txt", intr)
    assert cameras.load_intrinsics(tmp_path / "intrinsics.txt") == intr


def test_depth_file_roundtrip(tmp_path, rng):
    vals = rng.uniform(0, 10, size=(12, 7)).astype(np.float32)
    vals[0, 0] = -1.0  # invalid marker survives the roundtrip
    cameras.save_depth(tmp_path / "d.bin", DepthMap(vals))
    loaded = cameras.load_depth(tmp_path / "d.bin")
    np.testing.assert_array_equal(loaded.values, vals)
    assert not loaded.valid[0, 0]
