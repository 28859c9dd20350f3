import numpy as np
import pytest

from mvmae.errors import ConfigError, ContractViolation
from mvmae.geometry import rotate_z
from mvmae.projection import (
    CameraPose,
    group_by_image_token,
    make_pose_pool,
    project_points,
    rasterize_depth,
    read_pgm,
    token_index,
    write_pgm,
)

from oracles import project_point_by_hand

POSE = CameraPose(0.0, 30.0, 2.2, 50.0)


def ball_cloud(seed, n=256):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True) * rng.uniform(
        0.2, 1.0, (n, 1)
    )


def test_pose_pool_twelve():
    pool = make_pose_pool(12)
    assert [p.azimuth_deg for p in pool] == [30.0 * i for i in range(12)]
    for p in pool:
        assert p.elevation_deg == 30.0
        assert p.radius == 2.2
        assert p.fov_deg == 50.0
        assert p.radius > 1.0


def test_pose_pool_three():
    assert [p.azimuth_deg for p in make_pose_pool(3)] == [0.0, 120.0, 240.0]


def test_pose_pool_empty_rejected():
    with pytest.raises(ContractViolation):
        make_pose_pool(0)


def test_pose_pool_distinct():
    pool = make_pose_pool(24)
    assert len({p.azimuth_deg for p in pool}) == 24


def test_pose_invariants():
    with pytest.raises(ContractViolation):
        CameraPose(0.0, 30.0, 0.9, 50.0)
    with pytest.raises(ContractViolation):
        CameraPose(0.0, 30.0, 2.2, 0.0)
    with pytest.raises(ContractViolation):
        CameraPose(0.0, 30.0, 2.2, 180.0)


def test_origin_projects_to_center():
    proj = project_points(np.zeros((1, 3)), POSE, 224, 224)
    assert proj.rows[0] == 112 and proj.cols[0] == 112
    assert proj.in_frustum[0]
    assert abs(proj.depth[0] - 2.2) < 1e-12


def test_point_behind_camera_flagged():
    behind = POSE.eye() * 1.5
    proj = project_points(behind[None, :], POSE, 224, 224)
    assert not proj.in_frustum[0]
    assert proj.depth[0] < 0


def test_projection_matches_hand_oracle_reference_point():
    point = np.array([0.5, 0.0, 0.0])
    row, col, depth = project_point_by_hand(point, 0.0, 30.0, 2.2, 50.0, 224, 224)
    proj = project_points(point[None, :], POSE, 224, 224)
    assert proj.rows[0] == row
    assert proj.cols[0] == col
    assert abs(proj.depth[0] - depth) < 1e-12


@pytest.mark.parametrize("azimuth", [0.0, 45.0, 137.0, 300.0])
def test_projection_matches_hand_oracle_fuzz(azimuth):
    pose = CameraPose(azimuth, 30.0, 2.2, 50.0)
    for i, point in enumerate(ball_cloud(17, 50)):
        row, col, depth = project_point_by_hand(
            point, azimuth, 30.0, 2.2, 50.0, 128, 128
        )
        proj = project_points(point[None, :], pose, 128, 128)
        assert abs(proj.depth[0] - depth) < 1e-12, f"point {i}"
        if proj.in_frustum[0]:
            assert (proj.rows[0], proj.cols[0]) == (row, col), f"point {i}"


def test_token_index_reference_cases():
    assert token_index(0, 0, 224, 224, 14, 14) == 0
    assert token_index(16, 0, 224, 224, 14, 14) == 14
    assert token_index(223, 223, 224, 224, 14, 14) == 195


def test_token_index_exhaustive_range():
    rows, cols = np.meshgrid(np.arange(224), np.arange(224), indexing="ij")
    idx = token_index(rows, cols, 224, 224, 14, 14)
    assert idx.min() == 0 and idx.max() == 195
    counts = np.bincount(idx.reshape(-1), minlength=196)
    assert np.all(counts == 256)  # every token covers a full 16x16 cell


def test_token_index_rectangular_grid():
    # row stride is the token-grid width, exercised where h_t != w_t
    assert token_index(31, 63, 32, 64, 4, 8) == 31
    assert token_index(8, 0, 32, 64, 4, 8) == 8
    rows, cols = np.meshgrid(np.arange(32), np.arange(64), indexing="ij")
    idx = token_index(rows, cols, 32, 64, 4, 8)
    assert idx.min() == 0 and idx.max() == 31


def test_token_index_divisibility_contract():
    with pytest.raises(ConfigError):
        token_index(0, 0, 224, 224, 15, 14)
    with pytest.raises(ConfigError):
        token_index(0, 0, 224, 224, 14, 13)


def test_rasterize_empty_frustum_all_zero():
    far_away = np.full((10, 3), 50.0)
    depth_map = rasterize_depth(far_away, POSE, 64, 64)
    assert not depth_map.values.any()


def test_rasterize_single_origin_point_golden():
    depth_map = rasterize_depth(np.zeros((1, 3)), POSE, 224, 224)
    nonzero = np.argwhere(depth_map.values > 0)
    assert nonzero.tolist() == [[112, 112]]
    assert abs(depth_map.values[112, 112] - 0.5) < 1e-12


def test_rasterize_nearer_point_wins():
    eye = POSE.eye()
    fwd = -eye / np.linalg.norm(eye)
    near_pt = eye + 1.7 * fwd  # depth 1.7
    far_pt = eye + 2.2 * fwd  # origin, depth 2.2
    depth_map = rasterize_depth(np.vstack([far_pt, near_pt]), POSE, 64, 64)
    value = depth_map.values[32, 32]
    want = (POSE.radius + 1.05 - 1.7) / 2.1
    assert abs(value - want) < 1e-12


def test_rasterize_values_bounded_and_deterministic():
    cloud = ball_cloud(3)
    a = rasterize_depth(cloud, POSE, 64, 64)
    b = rasterize_depth(cloud, POSE, 64, 64)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.min() >= 0.0 and a.values.max() <= 1.0
    assert (a.values > 0).any()


def test_rasterize_azimuth_equivariance():
    # rotating the cloud with the camera leaves the image unchanged
    cloud = ball_cloud(4)
    for theta_deg in (33.0, 90.0, 211.5):
        rotated = rotate_z(cloud, np.radians(theta_deg))
        moved = CameraPose(theta_deg, 30.0, 2.2, 50.0)
        base = rasterize_depth(cloud, POSE, 64, 64).values
        swung = rasterize_depth(rotated, moved, 64, 64).values
        np.testing.assert_allclose(swung, base, atol=1e-9)


def test_grouping_all_behind_camera_is_empty():
    behind = POSE.eye() * 1.5 + np.random.default_rng(5).normal(0, 0.01, (8, 3))
    grouping = group_by_image_token(behind, POSE, 64, 64, 8, 8)
    assert grouping.g == 0
    assert grouping.member_union().size == 0


def test_grouping_same_cell_merges():
    pts = np.array([[0.0, 0.0, 0.0], [1e-4, 1e-4, 0.0]])
    grouping = group_by_image_token(pts, POSE, 64, 64, 8, 8)
    assert grouping.g == 1
    (members,) = grouping.groups.values()
    assert members.tolist() == [0, 1]


def test_grouping_union_matches_in_frustum_set():
    centers = ball_cloud(6, 64)
    grouping = group_by_image_token(centers, POSE, 64, 64, 8, 8)
    proj = project_points(centers, POSE, 64, 64)
    want = np.flatnonzero(proj.in_frustum)
    np.testing.assert_array_equal(grouping.member_union(), want)
    assert grouping.g <= min(len(want), 64)
    for token, members in grouping.groups.items():
        assert 0 <= token < 64
        got = token_index(proj.rows[members], proj.cols[members], 64, 64, 8, 8)
        assert np.all(got == token)


def test_grouping_keys_sorted():
    grouping = group_by_image_token(ball_cloud(7, 32), POSE, 64, 64, 8, 8)
    keys = list(grouping.groups)
    assert keys == sorted(keys)


def test_pgm_round_trip(tmp_path):
    values = np.random.default_rng(8).uniform(0, 1, (16, 24))
    quantized = np.rint(values * 65535.0) / 65535.0
    path = tmp_path / "d.pgm"
    write_pgm(path, values)
    np.testing.assert_allclose(read_pgm(path), quantized, atol=1e-12)


def test_pgm_golden_header_and_layout(tmp_path):
    values = np.zeros((2, 3))
    values[0, 2] = 0.5
    path = tmp_path / "d.pgm"
    write_pgm(path, values)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n3 2\n65535\n")
    raster = blob[len(b"P5\n3 2\n65535\n") :]
    assert len(raster) == 12
    # top row first, big endian: pixel (0,2) is the third u16
    assert raster[4:6] == (32768).to_bytes(2, "big")


def test_pgm_comment_tolerated(tmp_path):
    values = np.full((2, 2), 0.25)
    path = tmp_path / "d.pgm"
    write_pgm(path, values)
    blob = path.read_bytes()
    patched = b"P5\n# a comment\n2 2\n65535\n" + blob.split(b"65535\n", 1)[1]
    path.write_bytes(patched)
    np.testing.assert_allclose(read_pgm(path), np.rint(values * 65535) / 65535)


def test_pgm_rejects_bad_inputs(tmp_path):
    path = tmp_path / "bad.pgm"
    with pytest.raises(ContractViolation):
        write_pgm(path, np.full((2, 2), 1.5))
    write_pgm(path, np.zeros((4, 4)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(ContractViolation):
        read_pgm(path)
    path.write_bytes(b"P6" + blob[2:])
    with pytest.raises(ContractViolation):
        read_pgm(path)
    eight_bit = b"P5\n2 2\n255\n" + bytes(4)
    path.write_bytes(eight_bit)
    with pytest.raises(ContractViolation):
        read_pgm(path)
