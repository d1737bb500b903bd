import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from erlhead.geometry import (Intrinsics, Ray, generate_rays, pose_to_camera, project_points, rodrigues,
                              sample_along_ray, sample_depths)
from oracles import pinhole_direction, rotation_expm


def test_zero_pose_is_identity():
    cam = pose_to_camera(np.zeros(6))
    assert np.array_equal(cam.rotation, np.eye(3))
    assert np.array_equal(cam.center, np.zeros(3))


def test_quarter_turn_about_z():
    cam = pose_to_camera([0, 0, np.pi / 2, 0, 0, 0])
    assert np.allclose(cam.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-6)


def test_pure_translation():
    cam = pose_to_camera([0, 0, 0, 1, 2, 3])
    assert np.array_equal(cam.rotation, np.eye(3))
    assert np.array_equal(cam.extrinsic[:3, 3], [1, 2, 3])


def test_rodrigues_matches_series_expansion(rng):
    for _ in range(50):
        w = rng.uniform(-np.pi, np.pi, 3)
        assert np.allclose(rodrigues(w), rotation_expm(w), atol=1e-10)


def test_rotations_orthonormal_for_1000_poses(rng):
    for pose in rng.uniform(-4, 4, (1000, 6)):
        r = pose_to_camera(pose).rotation
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-5)


def test_bad_pose_rejected():
    with pytest.raises(ValueError):
        pose_to_camera(np.zeros(5))
    with pytest.raises(ValueError):
        pose_to_camera([0, 0, np.nan, 0, 0, 0])


def test_ray_count_and_row_major_order():
    rays = generate_rays(pose_to_camera(np.zeros(6)))
    assert len(rays) == 64 * 64
    assert np.allclose(rays.directions[1], pinhole_direction(0, 1, 64, 32, 32))


def test_center_pixel_looks_down_minus_z():
    intr = Intrinsics(focal=10, cx=1.5, cy=1.5, height=3, width=3)
    rays = generate_rays(pose_to_camera(np.zeros(6), intr))
    assert np.allclose(rays.directions[4], [0, 0, -1], atol=1e-6)


def test_corner_pixel_direction():
    rays = generate_rays(pose_to_camera(np.zeros(6)))
    want = np.array([-31.5 / 64, 31.5 / 64, -1.0])
    assert np.allclose(rays.directions[0], want / np.linalg.norm(want), atol=1e-12)


def test_rotated_camera_directions_match_oracle(rng):
    intr = Intrinsics(focal=7.0, cx=3.0, cy=2.5, height=5, width=6)
    pose = rng.uniform(-1, 1, 6)
    cam = pose_to_camera(pose, intr)
    rays = generate_rays(cam)
    r = rotation_expm(pose[:3])
    for i in range(5):
        for j in range(6):
            assert np.allclose(rays.directions[i * 6 + j], pinhole_direction(i, j, 7.0, 3.0, 2.5, r), atol=1e-9)
    assert np.allclose(rays.origins, pose[3:])


@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_directions_unit_length(pose):
    intr = Intrinsics(focal=5, cx=2, cy=2, height=4, width=4)
    rays = generate_rays(pose_to_camera(pose, intr))
    assert np.allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-6)


def test_projection_inverts_ray_construction(rng):
    cam = pose_to_camera(rng.uniform(-0.3, 0.3, 6))
    rays = generate_rays(cam)
    pts = rays.origins + 1.7 * rays.directions
    uv = project_points(pts, cam)
    j, i = np.meshgrid(np.arange(64) + 0.5, np.arange(64) + 0.5)
    assert np.allclose(uv[:, 0], j.reshape(-1)) and np.allclose(uv[:, 1], i.reshape(-1))


def test_nonpositive_focal_rejected():
    with pytest.raises(ValueError):
        generate_rays(pose_to_camera(np.zeros(6), Intrinsics(focal=0.0)))


def test_midpoint_samples():
    ray = Ray(np.zeros(3), np.array([0, 0, -1.0]), 0.0, 1.0)
    assert np.allclose(sample_along_ray(ray, 2), [0.25, 0.75])


def test_64_samples_ascending_inside_bounds():
    t = sample_along_ray(Ray(np.zeros(3), np.array([0, 0, -1.0]), 0.5, 2.5), 64)
    assert t.shape == (64,) and np.all(np.diff(t) > 0) and t[0] > 0.5 and t[-1] < 2.5


def test_stratified_is_seeded():
    a = sample_depths(3, 0.5, 2.5, 16, stratified=True, seed=5)
    b = sample_depths(3, 0.5, 2.5, 16, stratified=True, seed=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_depths(3, 0.5, 2.5, 16, stratified=True, seed=6))


@given(st.integers(1, 64), st.integers(0, 2 ** 31 - 1))
def test_stratified_samples_stay_in_their_bins(n, seed):
    t = sample_depths(4, 0.5, 2.5, n, stratified=True, seed=seed)
    edges = 0.5 + np.arange(n + 1) / n * 2.0
    assert np.all(t >= edges[:-1] - 1e-12) and np.all(t <= edges[1:] + 1e-12)


def test_zero_samples_rejected():
    with pytest.raises(ValueError):
        sample_depths(1, 0, 1, 0)
