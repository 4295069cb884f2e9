"""Two-step plane estimation and pseudo-plane regularization.

The rough step renders a handful of depths inside a segment mask,
back-projects them and fits a plane in the *camera* frame (that is the
frame in which the plane-depth formula d = 1 / (A . K^-1 p) applies).  The
rectified step re-samples many pixels on that rough plane, lifts them to
world space, marches them onto the SDF zero set along the field gradient
and re-fits in the *world* frame, optionally weighted by the segmentation
head's fused per-point probabilities.

The signed pseudo ground truth for a sample x is its euclidean distance to
the rectified plane, positive when the marched point is farther from the
camera than the sample (i.e. the sample sits on the camera side of the
surface).  All pseudo targets, plane parameters and fusion weights are
treated as constants by the losses; only the predicted SDF receives
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .field import DTYPE
from .geometry import Camera, PlaneParams, back_project, camera_to_world, pixel_rays, plane_depth, ray_scale
from .renderer import QuadratureConfig, render_rays


class DegeneratePlaneError(ValueError):
    """Plane fit is unusable: near the origin, rank-deficient, or starved."""


@dataclass
class RoughPlaneEstimate:
    plane: PlaneParams  # camera frame
    segment_id: int
    pixels: np.ndarray  # (n1, 2) sampled (u, v)
    depths: np.ndarray  # (n1,) z-depths
    residual: float


@dataclass
class RectifiedPlaneEstimate:
    plane: PlaneParams  # world frame
    segment_id: int
    points: np.ndarray  # (n2, 3) world samples on the rough plane
    marched: np.ndarray  # (n2, 3) points marched onto the SDF zero set
    weights: np.ndarray  # (n2,) fusion weights, mean 1
    n_skipped: int


def fit_plane(X: np.ndarray, weights: np.ndarray | None = None, eps: float = 1e-6,
              max_norm: float = 1e4) -> PlaneParams:
    """Weighted ridge fit of x . A = 1:  A = (X^T W X + eps I)^-1 X^T W 1.

    Raises DegeneratePlaneError for rank-deficient point sets (collinear
    samples) and for planes passing too close to the origin (|A| > max_norm).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3 or X.shape[0] < 3:
        raise ValueError("need an (n, 3) array with n >= 3")
    if not np.isfinite(X).all():
        raise ValueError("points must be finite")
    if weights is None:
        Xw = X
        ones_w = np.ones(len(X))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if (weights < 0).any():
            raise ValueError("weights must be nonnegative")
        Xw = X * weights[:, None]
        ones_w = weights
    gram = X.T @ Xw
    sv = np.linalg.svd(gram, compute_uv=False)
    if sv[-1] < 1e-8 * max(sv[0], 1.0):
        raise DegeneratePlaneError("points are (weighted-)rank deficient")
    rhs = X.T @ ones_w
    A = np.linalg.solve(gram + eps * np.eye(3), rhs)
    # one step of iterative refinement removes the ridge bias whenever the
    # rank screen above passed, so exact point sets are interpolated exactly
    A = A + np.linalg.solve(gram + eps * np.eye(3), rhs - gram @ A)
    if np.linalg.norm(A) > max_norm:
        raise DegeneratePlaneError("plane passes too close to the world origin")
    return PlaneParams(A)


def fit_residual(X: np.ndarray, plane: PlaneParams) -> float:
    return float(np.sqrt(np.mean((np.asarray(X) @ plane.A - 1.0) ** 2)))


def _sample_mask_pixels(mask: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    rows, cols = np.where(mask)
    if len(rows) == 0:
        raise ValueError("segment mask is empty")
    idx = rng.choice(len(rows), size=n, replace=len(rows) < n)
    return np.stack([cols[idx], rows[idx]], axis=1).astype(np.float64)  # (u, v)


def _render_depth_fn(net, cam: Camera, quad_cfg: QuadratureConfig, rng: np.random.Generator):
    def depth_fn(pixels: np.ndarray):
        origins, dirs = pixel_rays(pixels, cam)
        with torch.no_grad():
            bundle = render_rays(net, origins, dirs, quad_cfg, rng)
        t = bundle.depth.numpy()
        valid = bundle.valid_depth.numpy()
        return t / ray_scale(pixels, cam), valid  # ray length -> z-depth

    return depth_fn


def rough_estimate(mask: np.ndarray, net, cam: Camera, quad_cfg: QuadratureConfig,
                   rng: np.random.Generator, n1: int = 4, segment_id: int = -1,
                   depth_fn=None, max_retries: int = 3) -> RoughPlaneEstimate:
    """First estimation step: fit a camera-frame plane to n1 rendered depths.

    Pixels whose rendered depth is invalid (opacity below the floor) are
    resampled up to max_retries times; a segment that cannot produce n1
    valid depths is skipped by raising DegeneratePlaneError.
    """
    if depth_fn is None:
        depth_fn = _render_depth_fn(net, cam, quad_cfg, rng)
    pixels = _sample_mask_pixels(mask, n1, rng)
    depths, valid = depth_fn(pixels)
    for _ in range(max_retries):
        if valid.all():
            break
        retry = ~valid
        pixels[retry] = _sample_mask_pixels(mask, int(retry.sum()), rng)
        depths[retry], valid[retry] = depth_fn(pixels[retry])
    if not valid.all():
        raise DegeneratePlaneError("segment produced no valid rendered depths")
    ph = np.concatenate([pixels, np.ones((n1, 1))], axis=1)
    x_cam = back_project(ph, depths, cam)
    plane = fit_plane(x_cam)
    return RoughPlaneEstimate(
        plane=plane, segment_id=segment_id, pixels=pixels, depths=depths,
        residual=fit_residual(x_cam, plane),
    )


def march_to_surface(x: torch.Tensor, net) -> tuple[torch.Tensor, torch.Tensor]:
    """x_bar = x - s(x) * grad s(x) / |grad s(x)|; flat-gradient points flagged.

    Returns (marched points, valid mask); runs without building a graph.
    """
    from .field import sdf_with_gradient

    s, grad = sdf_with_gradient(net, x, create_graph=False)
    norm = grad.norm(dim=-1)
    valid = norm > 1e-6
    direction = grad / norm.clamp_min(1e-12)[:, None]
    x_bar = x - s[:, None] * direction
    return torch.where(valid[:, None], x_bar, x), valid


def rectified_estimate(rough: RoughPlaneEstimate, net, cam: Camera, n2: int,
                       rng: np.random.Generator, mask: np.ndarray | None = None,
                       weight_fn=None, bound_radius: float | None = None) -> RectifiedPlaneEstimate:
    """Second estimation step: world-frame fit of marched SDF points.

    Pixels are resampled inside the segment mask (or reused rough pixels
    when no mask is given), given the rough plane's depth, lifted to world
    space, marched along the SDF gradient and fitted with the fusion
    weights from weight_fn (uniform when absent).  Raises
    DegeneratePlaneError when more than half the samples are unusable.
    """
    if n2 < 3:
        raise ValueError("n2 must be at least 3")
    pixels = _sample_mask_pixels(mask, n2, rng) if mask is not None else rough.pixels
    ph = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    d = plane_depth(ph, rough.plane, cam)
    ok = np.isfinite(d) & (d > 0)
    x_world = np.full((len(pixels), 3), np.nan)
    x_world[ok] = camera_to_world(back_project(ph[ok], d[ok], cam), cam)
    if bound_radius is not None:
        inside = np.linalg.norm(np.nan_to_num(x_world, nan=np.inf), axis=1) <= bound_radius
        ok &= inside
    if ok.sum() < max(3, n2 // 2):
        raise DegeneratePlaneError("more than half the rectification samples are unusable")

    x_t = torch.from_numpy(x_world[ok]).to(DTYPE)
    marched_t, grad_ok = march_to_surface(x_t, net)
    keep_local = grad_ok.numpy()
    if keep_local.sum() < max(3, n2 // 2):
        raise DegeneratePlaneError("flat SDF gradients on most rectification samples")

    kept_idx = np.where(ok)[0][keep_local]
    marched = marched_t.numpy()[keep_local]
    points = x_world[kept_idx]
    if weight_fn is not None:
        weights = fusion_weights(np.asarray(weight_fn(points), dtype=np.float64))
    else:
        weights = np.ones(len(points))
    plane = fit_plane(marched, weights=weights)
    return RectifiedPlaneEstimate(
        plane=plane, segment_id=rough.segment_id, points=points, marched=marched,
        weights=weights, n_skipped=int(n2 - len(points)),
    )


def pseudo_sdf(x: np.ndarray, x_bar: np.ndarray, x_c: np.ndarray, plane: PlaneParams) -> np.ndarray:
    """Signed pseudo ground-truth distance of sample(s) x to the plane.

    Magnitude is the euclidean point-plane distance |x.A - 1| / |A|; the
    sign is +1 when the marched point lies at least as far from the camera
    as the sample, else -1.
    """
    x = np.asarray(x, dtype=np.float64)
    x_bar = np.asarray(x_bar, dtype=np.float64)
    x_c = np.asarray(x_c, dtype=np.float64)
    mag = np.abs(x @ plane.A - 1.0) / np.linalg.norm(plane.A)
    d_marched = np.linalg.norm(x_bar - x_c, axis=-1)
    d_sample = np.linalg.norm(x - x_c, axis=-1)
    sign = np.where(d_marched >= d_sample, 1.0, -1.0)
    return sign * mag


def plane_loss(net, points: np.ndarray, targets: np.ndarray,
               weights: np.ndarray | None = None) -> torch.Tensor:
    """Weighted L1 between predicted SDF and pseudo targets, mean per batch.

    Targets and weights are constants; gradients reach only the predicted
    signed distances.
    """
    if len(points) == 0:
        return torch.zeros((), dtype=DTYPE)
    x = torch.from_numpy(np.asarray(points, dtype=np.float64)).to(DTYPE)
    t = torch.from_numpy(np.asarray(targets, dtype=np.float64)).to(DTYPE)
    w = (torch.ones(len(x), dtype=DTYPE) if weights is None
         else torch.from_numpy(np.asarray(weights, dtype=np.float64)).to(DTYPE))
    s_hat = net.sdf(x)
    return (w * (t - s_hat).abs()).mean()


def fusion_weights(h: np.ndarray) -> np.ndarray:
    """Normalize sigmoid probabilities to weights with mean exactly 1."""
    h = np.asarray(h, dtype=np.float64)
    total = h.sum()
    if total < 1e-9:
        return np.ones_like(h)
    return h * (len(h) / total)


def min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimal-cost injective assignment of rows to columns (rows <= cols).

    O(n^2 m) shortest augmenting path implementation with potentials;
    returns an int array mapping each row to its column.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError("need rows <= cols")
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # match[j] = row occupying col j (1-based)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    out = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if match[j]:
            out[match[j] - 1] = j - 1
    return out


def _bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = pred.clamp(1e-6, 1.0 - 1e-6)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def match_cost_matrix(gt_masks: torch.Tensor, pred: torch.Tensor) -> np.ndarray:
    """(1 - soft IoU) + mean BCE between every GT mask and predicted map.

    gt_masks: (R, M1) binary per-ray indicators; pred: (R, M) accumulated
    probabilities.
    """
    g = gt_masks.detach().to(DTYPE)
    p = pred.detach().to(DTYPE)
    inter = g.T @ p  # (M1, M)
    union = g.sum(dim=0)[:, None] + p.sum(dim=0)[None, :] - inter
    siou = inter / union.clamp_min(1e-9)
    pc = p.clamp(1e-6, 1.0 - 1e-6)
    bce = -(g.T @ torch.log(pc) + (1.0 - g).T @ torch.log(1.0 - pc)) / len(g)
    return ((1.0 - siou) + bce).numpy()


def hungarian_match(gt_masks: torch.Tensor, pred: torch.Tensor) -> np.ndarray:
    """Injective assignment alpha: GT segment i -> prediction slot alpha[i]."""
    if gt_masks.shape[1] > pred.shape[1]:
        raise ValueError("more GT masks than prediction slots")
    return min_cost_assignment(match_cost_matrix(gt_masks, pred))


def segmentation_losses(gt_masks: torch.Tensor, seg_acc: torch.Tensor, alpha: np.ndarray,
                        point_h: torch.Tensor | None = None):
    """(accumulated, per-point) BCE losses for the matched slots.

    gt_masks: (R, M1) binary targets; seg_acc: (R, M) accumulated slot
    probabilities; point_h: optional (R, M1) per-point probabilities at the
    rough-plane samples (NaN where no valid sample), used as *detached*
    targets against the accumulated maps.
    """
    matched = seg_acc[:, torch.from_numpy(np.asarray(alpha))]
    l_acc = _bce(matched, gt_masks.to(DTYPE).detach()).mean()
    if point_h is None:
        return l_acc, torch.zeros((), dtype=DTYPE)
    target = point_h.detach()
    ok = torch.isfinite(target)
    if not ok.any():
        return l_acc, torch.zeros((), dtype=DTYPE)
    l_point = _bce(matched[ok], target[ok]).mean()
    return l_acc, l_point
