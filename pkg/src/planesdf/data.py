"""On-disk dataset access and world normalization for training.

A dataset directory follows the layout written by scenegen.write_dataset
(or by any converter producing the same contract).  Training happens in a
normalized world: x_n = norm_scale * (x - norm_center), chosen so the
scene sits inside the unit sphere; the transform comes from meta.json or,
failing that, from the camera centers and sparse depth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, back_project, camera_to_world, load_camera, normalize_camera
from .raysampler import SamplingWeightMap, build_weight_map, extract_keypoints
from .scenegen import load_pfm
from .superpixel import PlaneSegmentSet, load_segment_cache

SEGMENT_CACHE_DIR = "cache/segments"
WEIGHT_CACHE_DIR = "cache/keypoints"


@dataclass
class ViewData:
    index: int
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    camera: Camera  # metric
    ncam: Camera  # normalized world
    sparse_depth: np.ndarray  # (H, W) z-depth in meters, NaN invalid
    segments: PlaneSegmentSet | None = None
    weight_map: SamplingWeightMap | None = None


@dataclass
class SceneDataset:
    root: Path
    views: list
    norm_center: np.ndarray
    norm_scale: float
    scene_radius: float
    meta: dict

    @property
    def n_views(self) -> int:
        return len(self.views)


def _derive_normalization(cameras, sparse_depths) -> tuple[np.ndarray, float]:
    """Fallback transform from camera centers and valid sparse depth points."""
    pts = [cam.center for cam in cameras]
    for cam, depth in zip(cameras, sparse_depths):
        v, u = np.nonzero(np.isfinite(depth))
        if len(v) == 0:
            continue
        take = slice(0, None, max(1, len(v) // 200))
        ph = np.stack([u[take], v[take], np.ones(len(u[take]))], axis=1).astype(np.float64)
        pts.append(camera_to_world(back_project(ph, depth[v[take], u[take]], cam), cam))
    pts = np.concatenate([np.atleast_2d(p) for p in pts], axis=0)
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    radius = np.linalg.norm(pts - center, axis=1).max()
    return center, 0.95 / max(radius, 1e-6)


def load_dataset(root, load_caches: bool = True) -> SceneDataset:
    root = Path(root)
    cam_paths = sorted((root / "cameras").glob("*.json"))
    if not cam_paths:
        raise FileNotFoundError(f"no cameras found under {root / 'cameras'}")
    cameras = [load_camera(p) for p in cam_paths]
    images = []
    depths = []
    for i, _ in enumerate(cam_paths):
        img = np.asarray(Image.open(root / "images" / f"{i:04d}.png"), dtype=np.float64) / 255.0
        images.append(img[..., :3])
        pfm = root / "sparse_depth" / f"{i:04d}.pfm"
        depths.append(load_pfm(pfm) if pfm.exists() else np.full(img.shape[:2], np.nan))

    meta_path = root / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        center = np.asarray(meta["norm_center"], dtype=np.float64)
        scale = float(meta["norm_scale"])
        scene_radius = float(meta.get("scene_radius", 0.95))
    else:
        meta = {}
        center, scale = _derive_normalization(cameras, depths)
        scene_radius = 0.95

    views = []
    for i, cam in enumerate(cameras):
        view = ViewData(
            index=i,
            image=images[i],
            camera=cam,
            ncam=normalize_camera(cam, center, scale),
            sparse_depth=depths[i],
        )
        if load_caches:
            seg_png = root / SEGMENT_CACHE_DIR / f"{i:04d}.png"
            seg_json = root / SEGMENT_CACHE_DIR / f"{i:04d}.json"
            if seg_png.exists() and seg_json.exists():
                view.segments = load_segment_cache(seg_png, seg_json)
            wmap = root / WEIGHT_CACHE_DIR / f"{i:04d}.npz"
            if wmap.exists():
                data = np.load(wmap)
                G = data["G"]
                view.weight_map = SamplingWeightMap(
                    G=G, prob=G / G.sum(), keypoints=data["keypoints"])
        views.append(view)
    return SceneDataset(root=root, views=views, norm_center=center, norm_scale=scale,
                        scene_radius=scene_radius, meta=meta)


def ensure_view_features(dataset: SceneDataset, view: ViewData, *, min_area: int,
                         superpixel_scale: float, superpixel_min_size: int,
                         superpixel_sigma: float, keypoint_count: int,
                         sampler_k: float, sampler_gamma: float,
                         sampler_mode: str = "gaussian") -> ViewData:
    """Compute segments and sampling weights for a view when not cached."""
    from .superpixel import felzenszwalb_segment, filter_pseudo_planes

    if view.segments is None:
        labels = felzenszwalb_segment(view.image, scale=superpixel_scale,
                                      min_size=superpixel_min_size,
                                      smoothing=superpixel_sigma)
        view.segments = filter_pseudo_planes(labels, min_area, view_id=view.index)
    if view.weight_map is None:
        kps = extract_keypoints(view.image, target_count=keypoint_count)
        view.weight_map = build_weight_map(
            kps, (view.camera.width, view.camera.height), k=sampler_k,
            gamma=sampler_gamma, mode=sampler_mode)
    return view
