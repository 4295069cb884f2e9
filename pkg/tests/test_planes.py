"""Two-step plane estimation, pseudo targets, matching and fusion weights."""

import itertools
import math

import numpy as np
import pytest
import torch

from conftest import FunctionField, plane_field
from planesdf.field import DTYPE
from planesdf.geometry import Camera, PlaneParams, look_at_extrinsics
from planesdf.planes import (
    DegeneratePlaneError,
    fit_plane,
    fit_residual,
    fusion_weights,
    hungarian_match,
    march_to_surface,
    match_cost_matrix,
    min_cost_assignment,
    plane_loss,
    pseudo_sdf,
    rectified_estimate,
    rough_estimate,
    segmentation_losses,
)
from planesdf.renderer import QuadratureConfig


def _identity_cam(w=32, h=24, f=20.0):
    K = np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])
    return Camera(K=K, E=np.eye(4), width=w, height=h)


def _svd_tls_plane(X):
    """Total-least-squares oracle: centroid + smallest right singular vector."""
    c = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - c)
    n = vt[-1]
    d = n @ c
    return n / d  # A with x.A = 1


class TestFitPlane:
    def test_exact_plane_z2(self):
        X = np.array([[0, 0, 2.0], [1, 0, 2.0], [0, 1, 2.0], [1, 1, 2.0]])
        A = fit_plane(X, eps=1e-6).A
        np.testing.assert_allclose(A, [0, 0, 0.5], atol=1e-4)

    def test_zero_weight_outlier_ignored(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, (20, 3))
        X[:, 2] = 1.5 + 0.3 * X[:, 0] - 0.2 * X[:, 1]
        clean = fit_plane(X).A
        X_out = np.concatenate([X, [[5.0, -3.0, 40.0]]], axis=0)
        w = np.concatenate([np.ones(20), [0.0]])
        dirty = fit_plane(X_out, weights=w).A
        np.testing.assert_allclose(dirty, clean, atol=1e-10)

    def test_noisy_fit_vs_svd_oracle(self):
        rng = np.random.default_rng(1)
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        d = 2.0  # plane n.x = d, away from origin
        A_true = n / d
        basis = np.linalg.svd(n[None, :])[2][1:]
        uv = rng.uniform(-1, 1, (200, 2))
        X = d * n + uv @ basis + 0.005 * rng.standard_normal((200, 3))
        A = fit_plane(X).A
        cos = abs(A @ A_true) / (np.linalg.norm(A) * np.linalg.norm(A_true))
        assert math.degrees(math.acos(min(cos, 1.0))) < 1.0
        # and agrees with the total-least-squares oracle to the same tolerance
        A_svd = _svd_tls_plane(X)
        cos2 = abs(A @ A_svd) / (np.linalg.norm(A) * np.linalg.norm(A_svd))
        assert math.degrees(math.acos(min(cos2, 1.0))) < 0.5

    def test_uniform_weights_match_closed_form(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(-1, 1, (50, 3)) + [0, 0, 3.0]
        eps = 1e-12
        A = fit_plane(X, eps=eps).A
        A_closed = np.linalg.solve(X.T @ X + eps * np.eye(3), X.T @ np.ones(50))
        np.testing.assert_allclose(A, A_closed, atol=1e-10)

    def test_collinear_points_degenerate(self):
        t = np.linspace(0, 1, 8)
        X = np.stack([t, np.zeros(8), np.ones(8)], axis=1)
        with pytest.raises(DegeneratePlaneError):
            fit_plane(X)

    def test_plane_through_origin_degenerate(self):
        rng = np.random.default_rng(3)
        uv = rng.uniform(-1, 1, (30, 2))
        X = np.stack([uv[:, 0], uv[:, 1], np.zeros(30)], axis=1)  # plane z = 0
        X += 1e-9 * rng.standard_normal(X.shape)
        with pytest.raises(DegeneratePlaneError):
            fit_plane(X)


class TestRoughEstimate:
    def test_fronto_parallel_plane_field(self):
        cam = _identity_cam()
        net = plane_field([0, 0, 1.0], 2.0, beta=0.01)
        cfg = QuadratureConfig(n_uniform=96, n_importance=48, scene_radius=4.0)
        rng = np.random.default_rng(4)
        mask = np.ones((cam.height, cam.width), dtype=bool)
        rough = rough_estimate(mask, net, cam, cfg, rng)
        np.testing.assert_allclose(rough.plane.A, [0, 0, 0.5], atol=2e-2)

    def test_exact_depths_interpolate(self):
        cam = _identity_cam()
        mask = np.ones((cam.height, cam.width), dtype=bool)
        rng = np.random.default_rng(5)

        def exact_depth(pixels):
            # depth of the plane z = 2 along each pixel's z axis is constant
            return np.full(len(pixels), 2.0), np.ones(len(pixels), dtype=bool)

        rough = rough_estimate(mask, None, cam, None, rng, n1=3, depth_fn=exact_depth)
        assert rough.residual < 1e-9

    def test_collinear_samples_degenerate(self):
        cam = _identity_cam()
        mask = np.zeros((cam.height, cam.width), dtype=bool)
        mask[10, :] = True  # single row: back-projections are collinear

        def exact_depth(pixels):
            return np.full(len(pixels), 2.0), np.ones(len(pixels), dtype=bool)

        with pytest.raises(DegeneratePlaneError):
            rough_estimate(mask, None, cam, None, np.random.default_rng(6),
                           depth_fn=exact_depth)

    def test_invalid_depths_resampled_then_skip(self):
        cam = _identity_cam()
        mask = np.ones((cam.height, cam.width), dtype=bool)

        def never_valid(pixels):
            return np.zeros(len(pixels)), np.zeros(len(pixels), dtype=bool)

        with pytest.raises(DegeneratePlaneError):
            rough_estimate(mask, None, cam, None, np.random.default_rng(7),
                           depth_fn=never_valid)


class TestMarchToSurface:
    def test_zero_sdf_is_fixed_point(self):
        net = plane_field([0, 0, 1.0], 0.0)
        x = torch.tensor([[1.0, -2.0, 0.0]], dtype=DTYPE)
        x_bar, valid = march_to_surface(x, net)
        assert bool(valid[0])
        np.testing.assert_allclose(x_bar[0].numpy(), [1.0, -2.0, 0.0], atol=1e-12)

    def test_plane_march(self):
        # matter below z = 0: s = -z, so s(0,0,0.5) = -0.5 and the march
        # descends to the surface
        net = FunctionField(lambda x: -x[:, 2])
        x = torch.tensor([[0.0, 0.0, 0.5]], dtype=DTYPE)
        x_bar, _ = march_to_surface(x, net)
        np.testing.assert_allclose(x_bar[0].numpy(), [0.0, 0.0, 0.0], atol=1e-12)

    def test_exact_plane_sdf_lands_on_plane(self):
        rng = np.random.default_rng(8)
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        c = 0.8
        net = FunctionField(lambda x, n=torch.tensor(n, dtype=DTYPE), c=c: x @ n - c)
        x = torch.from_numpy(rng.uniform(-1, 1, (50, 3))).to(DTYPE)
        x_bar, valid = march_to_surface(x, net)
        assert bool(valid.all())
        resid = (x_bar.numpy() @ n) - c
        assert np.abs(resid).max() < 1e-9

    def test_flat_gradient_flagged(self):
        net = FunctionField(lambda x: torch.full((x.shape[0],), 0.3, dtype=DTYPE))
        x = torch.zeros(1, 3, dtype=DTYPE)
        x_bar, valid = march_to_surface(x, net)
        assert not bool(valid[0])
        np.testing.assert_allclose(x_bar[0].numpy(), [0, 0, 0])


def _plane_scene(rng, f=24.0, w=32, h=24):
    """Random world plane (away from origin) plus a camera looking at it."""
    n = rng.standard_normal(3)
    n /= np.linalg.norm(n)
    dist = rng.uniform(1.2, 2.5)  # plane n.x = dist
    A_world = n / dist
    eye = n * dist + n * rng.uniform(0.8, 1.5) + 0.3 * rng.standard_normal(3)
    target = n * dist + 0.2 * rng.standard_normal(3)
    E = look_at_extrinsics(eye, target)
    K = np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])
    cam = Camera(K=K, E=E, width=w, height=h)
    # matter on the far side of the plane from the camera
    sign = -np.sign(eye @ n - dist)
    nt = torch.tensor(sign * n, dtype=DTYPE)
    net = FunctionField(lambda x, nt=nt, c=sign * dist: x @ nt - c, beta=0.01)
    return A_world, cam, net


def _cam_frame_plane(A_world, cam):
    R = cam.E[:3, :3]
    t = cam.E[:3, 3]
    denom = 1.0 + t @ (R @ A_world)
    return R @ A_world / denom


class TestRectifiedEstimate:
    def test_recovers_plane_from_perturbed_rough(self):
        rng = np.random.default_rng(9)
        A_world, cam, net = _plane_scene(rng)
        A_cam = _cam_frame_plane(A_world, cam)
        rough = rough_estimate(
            np.ones((cam.height, cam.width), dtype=bool), None, cam, None, rng,
            depth_fn=lambda px: _exact_plane_depth(px, A_cam, cam),
        )
        # perturb the rough plane by 5 percent
        rough.plane = PlaneParams(rough.plane.A * (1 + 0.05 * rng.standard_normal(3)))
        mask = np.ones((cam.height, cam.width), dtype=bool)
        rect = rectified_estimate(rough, net, cam, n2=512, rng=rng, mask=mask)
        rel = np.linalg.norm(rect.plane.A - A_world) / np.linalg.norm(A_world)
        assert rel < 1e-3

    def test_uniform_weights_equal_unweighted(self):
        rng = np.random.default_rng(10)
        A_world, cam, net = _plane_scene(rng)
        A_cam = _cam_frame_plane(A_world, cam)
        mask = np.ones((cam.height, cam.width), dtype=bool)

        def make_rough(seed):
            r = np.random.default_rng(seed)
            return rough_estimate(mask, None, cam, None, r,
                                  depth_fn=lambda px: _exact_plane_depth(px, A_cam, cam))

        r1 = rectified_estimate(make_rough(3), net, cam, 256, np.random.default_rng(11),
                                mask=mask, weight_fn=None)
        r2 = rectified_estimate(make_rough(3), net, cam, 256, np.random.default_rng(11),
                                mask=mask, weight_fn=lambda pts: np.full(len(pts), 0.7))
        np.testing.assert_allclose(r1.plane.A, r2.plane.A, atol=1e-12)

    def test_accepts_paper_sample_counts(self):
        rng = np.random.default_rng(12)
        A_world, cam, net = _plane_scene(rng)
        A_cam = _cam_frame_plane(A_world, cam)
        mask = np.ones((cam.height, cam.width), dtype=bool)
        rough = rough_estimate(mask, None, cam, None, rng,
                               depth_fn=lambda px: _exact_plane_depth(px, A_cam, cam))
        for n2 in (1024, 8192):
            rect = rectified_estimate(rough, net, cam, n2, rng, mask=mask)
            assert len(rect.points) + rect.n_skipped == n2

    def test_two_step_error_reduction_10x(self):
        """Frozen exact plane field: one rough->rectified pass gains >= 10x."""
        rng = np.random.default_rng(13)
        cfg = QuadratureConfig(n_uniform=128, n_importance=64, scene_radius=8.0)
        for draw in range(20):
            A_world, cam, net = _plane_scene(rng)
            A_cam = _cam_frame_plane(A_world, cam)
            mask = np.ones((cam.height, cam.width), dtype=bool)
            try:
                rough = rough_estimate(mask, net, cam, cfg, rng)
            except DegeneratePlaneError:
                pytest.fail(f"draw {draw}: rough estimate degenerate")
            err_rough = np.linalg.norm(rough.plane.A - A_cam) / np.linalg.norm(A_cam)
            rect = rectified_estimate(rough, net, cam, n2=1024, rng=rng, mask=mask)
            err_rect = np.linalg.norm(rect.plane.A - A_world) / np.linalg.norm(A_world)
            assert err_rect <= err_rough / 10.0, (
                f"draw {draw}: rough {err_rough:.2e} rect {err_rect:.2e}"
            )


def _exact_plane_depth(pixels, A_cam, cam):
    ph = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    d = 1.0 / ((ph @ cam.K_inv.T) @ A_cam)
    return d, np.isfinite(d) & (d > 0)


class TestPseudoSdf:
    def test_on_plane_zero(self):
        plane = PlaneParams([0, 0, 0.5])
        x = np.array([0.3, -0.7, 2.0])
        assert pseudo_sdf(x, x, np.zeros(3), plane) == pytest.approx(0.0, abs=1e-12)

    def test_sample_in_front_positive(self):
        plane = PlaneParams([0, 0, 0.5])
        s = pseudo_sdf(np.array([0, 0, 1.0]), np.array([0, 0, 2.0]), np.zeros(3), plane)
        assert s == pytest.approx(1.0)

    def test_sample_behind_negative(self):
        plane = PlaneParams([0, 0, 0.5])
        s = pseudo_sdf(np.array([0, 0, 3.0]), np.array([0, 0, 2.0]), np.zeros(3), plane)
        assert s == pytest.approx(-1.0)

    def test_magnitude_matches_projection_oracle(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            A = rng.standard_normal(3)
            A *= rng.uniform(0.2, 5.0) / np.linalg.norm(A)
            plane = PlaneParams(A)
            x = rng.uniform(-3, 3, 3)
            proj = x - ((x @ A - 1.0) / (A @ A)) * A  # closest point on plane
            dist = np.linalg.norm(x - proj)
            got = pseudo_sdf(x, proj, rng.uniform(-3, 3, 3), plane)
            assert abs(abs(got) - dist) < 1e-10


class TestPlaneLoss:
    def test_zero_when_prediction_matches(self):
        net = FunctionField(lambda x: 0.25 * torch.ones(x.shape[0], dtype=DTYPE))
        pts = np.random.default_rng(16).uniform(-1, 1, (10, 3))
        loss = plane_loss(net, pts, np.full(10, 0.25))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_single_point_l1(self):
        net = FunctionField(lambda x: 0.5 * torch.ones(x.shape[0], dtype=DTYPE))
        loss = plane_loss(net, np.zeros((1, 3)), np.array([0.2]), np.array([1.0]))
        assert loss.item() == pytest.approx(0.3)

    def test_gradients_reach_only_prediction(self):
        from planesdf.field import FieldConfig, FieldNetwork

        torch.manual_seed(0)
        net = FieldNetwork(FieldConfig(trunk_layers=2, trunk_width=16, color_layers=2,
                                       color_width=8, seg_layers=2, seg_width=8,
                                       n_slots=2, pe_position=2, pe_view=0,
                                       color_uses_normal=False))
        pts = np.random.default_rng(17).uniform(-1, 1, (6, 3))
        loss = plane_loss(net, pts, np.full(6, 0.1), np.ones(6))
        loss.backward()
        trunk_grads = [p.grad for n, p in net.named_parameters() if n.startswith("trunk")]
        assert any(g is not None and g.abs().sum() > 0 for g in trunk_grads)

    def test_empty_points(self):
        assert plane_loss(None, np.zeros((0, 3)), np.zeros(0)).item() == 0.0


class TestFusionWeights:
    def test_equal_probs_unit_weights(self):
        np.testing.assert_allclose(fusion_weights(np.full(7, 0.42)), np.ones(7), atol=1e-12)

    def test_arithmetic(self):
        np.testing.assert_allclose(fusion_weights(np.array([0.9, 0.1])), [1.8, 0.2], atol=1e-12)

    def test_mean_exactly_one(self):
        rng = np.random.default_rng(18)
        h = rng.uniform(0.01, 0.99, 33)
        assert fusion_weights(h).mean() == pytest.approx(1.0, abs=1e-12)

    def test_near_zero_sum_falls_back_uniform(self):
        np.testing.assert_allclose(fusion_weights(np.full(5, 1e-12)), np.ones(5))


class TestHungarian:
    def test_two_by_two(self):
        cost = np.array([[1.0, 2.0], [2.0, 1.0]])
        alpha = min_cost_assignment(cost)
        np.testing.assert_array_equal(alpha, [0, 1])
        assert cost[np.arange(2), alpha].sum() == 2.0

    def _brute_force(self, cost):
        n, m = cost.shape
        best, best_cost = None, np.inf
        for perm in itertools.permutations(range(m), n):
            c = cost[np.arange(n), list(perm)].sum()
            if c < best_cost:
                best, best_cost = perm, c
        return best_cost

    def test_rectangular_matches_brute_force(self):
        rng = np.random.default_rng(19)
        cost = rng.uniform(0, 10, (5, 7))
        alpha = min_cost_assignment(cost)
        assert len(set(alpha)) == 5  # injective
        assert cost[np.arange(5), alpha].sum() == pytest.approx(self._brute_force(cost))

    @pytest.mark.parametrize("trial", range(10))
    def test_random_instances_match_brute_force(self, trial):
        rng = np.random.default_rng(100 + trial)
        n = rng.integers(2, 8)
        m = rng.integers(n, 8)
        cost = rng.uniform(-5, 5, (n, m))
        alpha = min_cost_assignment(cost)
        assert len(set(alpha)) == n
        assert cost[np.arange(n), alpha].sum() == pytest.approx(self._brute_force(cost))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(20)
        gt = (rng.uniform(size=(64, 3)) > 0.5).astype(float)
        pred = rng.uniform(0.05, 0.95, (64, 5))
        g = torch.from_numpy(gt).to(DTYPE)
        p = torch.from_numpy(pred).to(DTYPE)
        alpha = hungarian_match(g, p)
        perm = np.array([3, 0, 4, 1, 2])
        p_perm = p[:, torch.from_numpy(np.argsort(perm))]
        alpha_perm = hungarian_match(g, p_perm)
        cost = match_cost_matrix(g, p)
        cost_perm = match_cost_matrix(g, p_perm)
        total = cost[np.arange(3), alpha].sum()
        total_perm = cost_perm[np.arange(3), alpha_perm].sum()
        assert total == pytest.approx(total_perm, abs=1e-9)


class TestSegmentationLosses:
    def test_perfect_prediction_zero(self):
        gt = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=DTYPE)
        pred = gt.clone()
        alpha = np.array([0, 1])
        l_acc, l_point = segmentation_losses(gt, pred, alpha)
        assert l_acc.item() == pytest.approx(0.0, abs=1e-5)  # clamped logs
        assert l_point.item() == 0.0

    def test_half_probability_is_ln2(self):
        gt = torch.ones(4, 1, dtype=DTYPE)
        pred = torch.full((4, 1), 0.5, dtype=DTYPE)
        l_acc, _ = segmentation_losses(gt, pred, np.array([0]))
        assert l_acc.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_point_targets_detached(self):
        gt = torch.tensor([[1.0], [0.0]], dtype=DTYPE)
        pred = torch.tensor([[0.7], [0.4]], dtype=DTYPE, requires_grad=True)
        point_h = torch.tensor([[0.6], [float("nan")]], dtype=DTYPE, requires_grad=True)
        _, l_point = segmentation_losses(gt, pred, np.array([0]), point_h)
        l_point.backward()
        assert pred.grad is not None
        assert point_h.grad is None or point_h.grad.abs().sum() == 0
