"""Projection / back-projection math, hand-computed or oracle-checked.

Backprojection contract:  x_cam = d * K^-1 (u, v, 1)^T  with d a z-depth.
Plane contract:           x on plane A  <=>  x . A = 1.
"""

import json

import numpy as np
import pytest

from planesdf.geometry import (
    Camera,
    ConfigurationError,
    DegenerateRayError,
    PlaneParams,
    back_project,
    camera_to_world,
    load_camera,
    normalize_camera,
    pixel_ray,
    pixel_rays,
    plane_depth,
    ray_scale,
    save_camera,
    world_to_camera,
)


def _cam(K=None, E=None, w=64, h=48):
    return Camera(
        K=np.eye(3) if K is None else np.asarray(K, dtype=float),
        E=np.eye(4) if E is None else np.asarray(E, dtype=float),
        width=w,
        height=h,
    )


def _rot_z(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])


def _random_rigid(rng):
    # QR of a random matrix gives a uniform-ish rotation; fix the sign.
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    E = np.eye(4)
    E[:3, :3] = Q
    E[:3, 3] = rng.standard_normal(3)
    return E


class TestBackProject:
    def test_identity_intrinsics(self):
        out = back_project(np.array([0.0, 0.0, 1.0]), 2.0, _cam())
        np.testing.assert_allclose(out, [0.0, 0.0, 2.0])

    def test_focal_scaling(self):
        cam = _cam(K=np.diag([2.0, 2.0, 1.0]))
        out = back_project(np.array([2.0, 0.0, 1.0]), 1.0, cam)
        np.testing.assert_allclose(out, [1.0, 0.0, 1.0])

    def test_principal_ray_matches_inverse_oracle(self):
        K = np.array([[577.87, 0, 320.0], [0, 577.87, 240.0], [0, 0, 1.0]])
        cam = _cam(K=K, w=640, h=480)
        p = np.array([320.0, 240.0, 1.0])
        out = back_project(p, 3.0, cam)
        np.testing.assert_allclose(out, [0.0, 0.0, 3.0], atol=1e-12)
        # independent oracle: explicit matrix inverse
        np.testing.assert_allclose(out, 3.0 * np.linalg.inv(K) @ p, atol=1e-12)

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(0)
        K = np.array([[100.0, 0, 32.0], [0, 120.0, 24.0], [0, 0, 1.0]])
        cam = _cam(K=K)
        pixels = np.concatenate([rng.uniform(0, 60, (10, 2)), np.ones((10, 1))], axis=1)
        depths = rng.uniform(0.5, 5.0, 10)
        batch = back_project(pixels, depths, cam)
        for i in range(10):
            np.testing.assert_allclose(batch[i], back_project(pixels[i], depths[i], cam))

    def test_singular_intrinsics_rejected(self):
        with pytest.raises(ConfigurationError):
            _cam(K=np.diag([0.0, 1.0, 1.0]))


class TestPlaneDepth:
    def test_fronto_parallel_plane(self):
        plane = PlaneParams(np.array([0.0, 0.0, 0.5]))  # plane z = 2
        assert plane_depth(np.array([0.0, 0.0, 1.0]), plane, _cam()) == pytest.approx(2.0)
        assert plane_depth(np.array([1.0, 1.0, 1.0]), plane, _cam()) == pytest.approx(2.0)

    def test_tilted_plane_hand_oracle(self):
        # x = d*(1,0,1); x.A = 0.25 d + 0.25 d = 1  =>  d = 2
        plane = PlaneParams(np.array([0.25, 0.0, 0.25]))
        d = plane_depth(np.array([1.0, 0.0, 1.0]), plane, _cam())
        assert d == pytest.approx(2.0)

    def test_backprojection_lies_on_plane(self):
        rng = np.random.default_rng(1)
        cam = _cam(K=np.array([[80.0, 0, 32.0], [0, 80.0, 24.0], [0, 0, 1.0]]))
        for _ in range(100):
            A = rng.standard_normal(3)
            A *= rng.uniform(0.1, 10.0) / np.linalg.norm(A)
            plane = PlaneParams(A)
            p = np.array([rng.uniform(0, 64), rng.uniform(0, 48), 1.0])
            try:
                d = plane_depth(p, plane, cam)
            except DegenerateRayError:
                continue
            x = back_project(p, d, cam)
            assert abs(x @ A - 1.0) < 1e-9

    def test_parallel_ray_raises(self):
        plane = PlaneParams(np.array([1.0, 0.0, 0.0]))  # plane x = 1
        with pytest.raises(DegenerateRayError):
            plane_depth(np.array([0.0, 0.0, 1.0]), plane, _cam())

    def test_batched_parallel_gives_nan(self):
        plane = PlaneParams(np.array([1.0, 0.0, 0.0]))
        p = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
        d = plane_depth(p, plane, _cam())
        assert np.isnan(d[0]) and d[1] == pytest.approx(1.0)


class TestCameraToWorld:
    def test_identity_pose(self):
        np.testing.assert_allclose(camera_to_world(np.array([1.0, 2.0, 3.0]), _cam()), [1, 2, 3])

    def test_pure_translation(self):
        E = np.eye(4)
        E[2, 3] = -1.0
        out = camera_to_world(np.array([0.0, 0.0, 2.0]), _cam(E=E))
        np.testing.assert_allclose(out, [0.0, 0.0, 3.0])

    def test_rotation_round_trip(self):
        E = np.eye(4)
        E[:3, :3] = _rot_z(90.0)
        E[:3, 3] = [0.5, -0.2, 1.0]
        cam = _cam(E=E)
        x = np.array([0.3, 0.7, -0.1])
        np.testing.assert_allclose(camera_to_world(world_to_camera(x, cam), cam), x, atol=1e-12)

    def test_random_rigid_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            cam = _cam(E=_random_rigid(rng))
            x = rng.standard_normal(3)
            np.testing.assert_allclose(
                camera_to_world(world_to_camera(x, cam), cam), x, atol=1e-12
            )

    def test_non_rigid_rejected(self):
        E = np.eye(4)
        E[0, 0] = 2.0
        with pytest.raises(ConfigurationError):
            _cam(E=E)


class TestPixelRay:
    def test_identity_camera(self):
        ray = pixel_ray(np.array([0.0, 0.0]), _cam())
        np.testing.assert_allclose(ray.origin, [0, 0, 0])
        np.testing.assert_allclose(ray.direction, [0, 0, 1])

    def test_principal_pixel_is_optical_axis(self):
        K = np.array([[100.0, 0, 32.0], [0, 100.0, 24.0], [0, 0, 1.0]])
        rng = np.random.default_rng(3)
        cam = _cam(K=K, E=_random_rigid(rng))
        ray = pixel_ray(np.array([32.0, 24.0]), cam)
        axis = cam.E_inv[:3, :3] @ np.array([0.0, 0.0, 1.0])
        np.testing.assert_allclose(ray.direction, axis, atol=1e-12)
        np.testing.assert_allclose(ray.origin, cam.center, atol=1e-12)

    def test_back_projection_on_ray(self):
        rng = np.random.default_rng(4)
        K = np.array([[90.0, 0, 30.0], [0, 85.0, 20.0], [0, 0, 1.0]])
        for _ in range(20):
            cam = _cam(E=_random_rigid(rng), K=K)
            pix = np.array([rng.uniform(0, 64), rng.uniform(0, 48)])
            d = rng.uniform(0.5, 4.0)
            ray = pixel_ray(pix, cam)
            p_h = np.array([pix[0], pix[1], 1.0])
            x_world = camera_to_world(back_project(p_h, d, cam), cam)
            t = (x_world - ray.origin) @ ray.direction
            expected_t = d * np.linalg.norm(cam.K_inv @ p_h)
            assert abs(t - expected_t) < 1e-9
            np.testing.assert_allclose(ray.origin + t * ray.direction, x_world, atol=1e-9)

    def test_directions_unit_norm(self):
        rng = np.random.default_rng(5)
        cam = _cam(E=_random_rigid(rng), K=np.diag([50.0, 50.0, 1.0]))
        pix = rng.uniform(0, 48, (200, 2))
        _, dirs = pixel_rays(pix, cam)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-9)

    def test_ray_scale_matches_norm(self):
        K = np.array([[90.0, 0, 30.0], [0, 85.0, 20.0], [0, 0, 1.0]])
        cam = _cam(K=K)
        pix = np.array([[10.0, 5.0], [30.0, 20.0]])
        s = ray_scale(pix, cam)
        for i in range(2):
            p_h = np.array([pix[i, 0], pix[i, 1], 1.0])
            assert s[i] == pytest.approx(np.linalg.norm(cam.K_inv @ p_h))


class TestCameraIO:
    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        K = np.array([[123.0, 0, 31.5], [0, 119.0, 23.5], [0, 0, 1.0]])
        cam = _cam(K=K, E=_random_rigid(rng), w=64, h=48)
        path = tmp_path / "cam.json"
        save_camera(cam, path)
        loaded = load_camera(path)
        np.testing.assert_allclose(loaded.K, cam.K)
        np.testing.assert_allclose(loaded.E, cam.E)
        assert (loaded.width, loaded.height) == (64, 48)

    def test_json_schema_fields(self, tmp_path):
        path = tmp_path / "cam.json"
        save_camera(_cam(), path)
        d = json.loads(path.read_text())
        assert set(d) == {"K", "E", "width", "height"}
        assert len(d["K"]) == 9 and len(d["E"]) == 16


class TestNormalization:
    def test_normalized_depth_is_scaled(self):
        rng = np.random.default_rng(7)
        cam = _cam(E=_random_rigid(rng))
        center = np.array([0.3, -0.5, 1.0])
        scale = 0.25
        ncam = normalize_camera(cam, center, scale)
        x = rng.standard_normal(3) + 2.0
        x_n = scale * (x - center)
        np.testing.assert_allclose(
            world_to_camera(x_n, ncam), scale * world_to_camera(x, cam), atol=1e-12
        )

    def test_normalized_camera_center(self):
        rng = np.random.default_rng(8)
        cam = _cam(E=_random_rigid(rng))
        center = np.array([1.0, 2.0, 3.0])
        ncam = normalize_camera(cam, center, 0.5)
        np.testing.assert_allclose(ncam.center, 0.5 * (cam.center - center), atol=1e-12)
