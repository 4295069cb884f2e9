"""Keypoint extraction and the keypoint-guided ray sampling distribution.

Keypoints follow the gradient-based selection heuristic of direct sparse
odometry: the gradient-magnitude map is tiled into blocks and pixels must
beat their block's median gradient plus a fixed offset, strongest first.
Sampling weights start at 1 everywhere; pixels inside a 3x3 patch centered
on their nearest keypoint are boosted by a Gaussian kernel of the distance
to it (or by the patch-mean of those kernel values in 'uniform' mode), and
the whole map normalizes into a categorical distribution over pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class SamplingWeightMap:
    G: np.ndarray  # (H, W) unnormalized weights, >= 1
    prob: np.ndarray  # (H, W) normalized, sums to 1
    keypoints: np.ndarray  # (n, 2) as (u, v)

    def __post_init__(self):
        self._cdf = np.cumsum(self.prob.ravel())


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.max() > 1.5:
            img = img / 255.0
        img = img @ LUMA
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy)


def extract_keypoints(image: np.ndarray, target_count: int = 2000, block: int = 32,
                      offset: float = 7.0 / 255.0) -> np.ndarray:
    """Strongest-gradient pixels above per-block adaptive thresholds.

    Returns (n, 2) integer pixel coordinates (u, v), n <= target_count,
    ordered by decreasing gradient magnitude (ties by row-major index).
    Flat images yield an empty list.
    """
    mag = gradient_magnitude(image)
    h, w = mag.shape
    keep = np.zeros((h, w), dtype=bool)
    for r0 in range(0, h, block):
        for c0 in range(0, w, block):
            tile = mag[r0 : r0 + block, c0 : c0 + block]
            thr = np.median(tile) + offset
            keep[r0 : r0 + block, c0 : c0 + block] = tile > thr
    rows, cols = np.where(keep)
    if len(rows) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    strengths = mag[rows, cols]
    order = np.lexsort((rows * w + cols, -strengths))
    order = order[:target_count]
    return np.stack([cols[order], rows[order]], axis=1).astype(np.int64)


def build_weight_map(keypoints: np.ndarray, image_size: tuple, k: float = 1.5,
                     gamma: float = 1.0, patch: int = 3,
                     mode: str = "gaussian") -> SamplingWeightMap:
    """Per-pixel sampling weights from keypoint proximity.

    image_size is (width, height).  Every pixel inside a patch centered on
    its nearest keypoint (ties to the lower keypoint index) receives
    G = 1 + k * exp(-d^2 / (2 gamma^2)) in 'gaussian' mode, or the patch
    mean of those kernel values in 'uniform' mode; all others keep G = 1.
    """
    if k < 0 or gamma <= 0:
        raise ValueError("need k >= 0 and gamma > 0")
    if mode not in ("gaussian", "uniform"):
        raise ValueError(f"unknown weight mode: {mode}")
    w, h = image_size
    G = np.ones((h, w), dtype=np.float64)
    keypoints = np.asarray(keypoints, dtype=np.int64).reshape(-1, 2)
    half = patch // 2
    offs = np.arange(-half, half + 1)
    du, dv = np.meshgrid(offs, offs)
    d2_patch = (du**2 + dv**2).astype(np.float64)
    kernel_patch = np.exp(-d2_patch / (2.0 * gamma**2))
    uniform_boost = 1.0 + k * kernel_patch.mean()
    if k > 0 and len(keypoints) > 0:
        best_d2 = np.full((h, w), np.inf)
        for q in keypoints:  # index order resolves ties toward earlier keypoints
            u0, v0 = int(q[0]), int(q[1])
            us = u0 + du
            vs = v0 + dv
            ok = (us >= 0) & (us < w) & (vs >= 0) & (vs < h)
            uu, vv, dd = us[ok], vs[ok], d2_patch[ok]
            closer = dd < best_d2[vv, uu]
            uu, vv, dd = uu[closer], vv[closer], dd[closer]
            best_d2[vv, uu] = dd
            if mode == "gaussian":
                G[vv, uu] = 1.0 + k * np.exp(-dd / (2.0 * gamma**2))
            else:
                G[vv, uu] = uniform_boost
    prob = G / G.sum()
    return SamplingWeightMap(G=G, prob=prob, keypoints=keypoints)


def sample_rays(weight_map: SamplingWeightMap, batch: int,
                rng: np.random.Generator) -> np.ndarray:
    """batch i.i.d. categorical pixel draws from the normalized map, as (u, v)."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    h, w = weight_map.prob.shape
    u = rng.random(batch)
    flat = np.searchsorted(weight_map._cdf, u, side="right")
    flat = np.minimum(flat, h * w - 1)
    return np.stack([flat % w, flat // w], axis=1).astype(np.int64)
