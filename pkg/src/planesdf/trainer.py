"""Loss assembly and the optimization loop.

Per step: draw a batch of rays from one view (round robin), volume-render
it, and assemble

    L = L_rgb + lambda_sdf * L_eikonal + lambda_depth * L_depth
        + lambda_plane * L_plane + lambda_seg * (L_acc_seg + L_point_seg)

The plane terms activate after a warm-up, rotate through the view's
retained pseudo-plane segments, and treat every pseudo target as a
constant.  Runs are deterministic for a fixed config + seed: one numpy
generator drives all sampling, torch only seeds the weight init, and the
thread count is pinned.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .data import SceneDataset, ensure_view_features
from .field import (DTYPE, FieldConfig, FieldNetwork, save_checkpoint, sdf_with_gradient,
                    sphere_initialize)
from .geometry import pixel_rays, ray_scale
from .planes import (DegeneratePlaneError, hungarian_match, plane_loss, pseudo_sdf,
                     rectified_estimate, rough_estimate, segmentation_losses)
from .raysampler import build_weight_map, sample_rays
from .renderer import QuadratureConfig, render_rays


class TrainAbort(RuntimeError):
    """Raised when the loss goes non-finite; the last checkpoint survives."""


@dataclass
class TrainConfig:
    epochs: int = 50
    steps_per_epoch: int = 64
    batch_rays: int = 1024
    lr: float = 5e-4
    lr_decay_to: float = 0.1  # final-epoch multiplier, exponential schedule
    lambda_sdf: float = 0.1
    lambda_depth: float = 0.1
    lambda_plane: float = 0.2
    lambda_seg: float = 0.01
    plane_warmup_epochs: int = 5
    n1: int = 4
    n2: int = 8192
    segments_per_step: int = 4
    use_plane: bool = True
    use_weighting: bool = True
    use_sampling: bool = True
    sampler_k: float = 1.5
    sampler_gamma: float = 1.0
    sampler_mode: str = "gaussian"
    n_uniform: int = 64
    n_importance: int = 32
    opacity_floor: float = 0.05
    eikonal_points: int = 512
    init_radius: float = 1.0
    init_steps: int = 1200
    min_area: int = 1000
    superpixel_scale: float = 100.0
    superpixel_min_size: int = 50
    superpixel_sigma: float = 0.8
    keypoint_count: int = 2000
    seed: int = 0
    threads: int = 0  # 0 = leave torch's default
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if isinstance(self.field, dict):
            self.field = FieldConfig(**self.field)
        if self.epochs < 1 or self.batch_rays < 1:
            raise ValueError("epochs and batch_rays must be positive")
        for name in ("lambda_sdf", "lambda_depth", "lambda_plane", "lambda_seg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 1024 <= self.n2 <= 32768:
            raise ValueError("n2 must lie in [1024, 32768]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = dict(d.pop("field", {}))
        for key in [k for k in d if k.startswith("field.")]:
            nested[key.split(".", 1)[1]] = d.pop(key)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(field=FieldConfig(**nested), **d)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def rgb_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean L1 over rays and channels."""
    return (pred - target).abs().mean()


def eikonal_loss(net, points: torch.Tensor) -> torch.Tensor:
    """mean (|grad s| - 1)^2 over the given points."""
    _, grad = sdf_with_gradient(net, points, create_graph=True)
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean()


def depth_loss(pred_t: torch.Tensor, target_t: torch.Tensor,
               valid: torch.Tensor) -> torch.Tensor:
    """Mean |rendered - target| ray depth over valid rays; zero when none."""
    if valid.sum() == 0:
        return torch.zeros((), dtype=DTYPE)
    return (pred_t[valid] - target_t[valid]).abs().mean()


def _eikonal_batch(rng, bundle, origins, dirs, n_points, radius):
    n_uni = n_points // 2
    pts = rng.standard_normal((n_uni, 3))
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= radius * rng.uniform(0, 1, (n_uni, 1)) ** (1 / 3)
    with torch.no_grad():
        surf = origins + bundle.depth.detach().numpy()[:, None] * dirs
    take = rng.choice(len(surf), size=min(n_points - n_uni, len(surf)), replace=False)
    near = surf[take] + 0.02 * rng.standard_normal((len(take), 3))
    return torch.from_numpy(np.concatenate([pts, near], axis=0)).to(DTYPE)


def _segment_plane_terms(net, view, seg_rotation, cfg, quad_cfg, rng, alpha):
    """Rotate through segments: rough fit, rectified fit, pseudo targets."""
    segs = view.segments.segments if view.segments is not None else []
    if not segs:
        return torch.zeros((), dtype=DTYPE), {}, 0
    start = (seg_rotation * cfg.segments_per_step) % len(segs)
    chosen = [segs[(start + j) % len(segs)] for j in range(min(cfg.segments_per_step, len(segs)))]
    cam = view.ncam
    x_c = cam.center
    terms = []
    rough_planes = {}
    for seg in chosen:
        mask = view.segments.mask(seg.id)
        try:
            rough = rough_estimate(mask, net, cam, quad_cfg, rng, n1=cfg.n1,
                                   segment_id=seg.id)
            weight_fn = None
            if cfg.use_weighting and alpha is not None and seg.id < len(alpha):
                slot = int(alpha[seg.id])

                def weight_fn(pts, slot=slot):
                    with torch.no_grad():
                        x = torch.from_numpy(pts).to(DTYPE)
                        _, feat = net.sdf_and_feature(x)
                        return net.segment_probs(x, feat)[:, slot].numpy()

            rect = rectified_estimate(rough, net, cam, cfg.n2, rng, mask=mask,
                                      weight_fn=weight_fn,
                                      bound_radius=1.2 * quad_cfg.scene_radius)
        except DegeneratePlaneError:
            continue
        rough_planes[seg.id] = rough
        targets = pseudo_sdf(rect.points, rect.marched, x_c, rect.plane)
        terms.append(plane_loss(net, rect.points, targets, rect.weights))
    if not terms:
        return torch.zeros((), dtype=DTYPE), rough_planes, 0
    return torch.stack(terms).mean(), rough_planes, len(terms)


def _point_seg_targets(net, view, pixels, labels, rough_planes, alpha, n_slots):
    """Detached per-point slot probabilities at rough-plane samples, (R, M1)."""
    from .geometry import back_project, camera_to_world, plane_depth

    R = len(pixels)
    m1 = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    out = torch.full((R, m1), float("nan"), dtype=DTYPE)
    cam = view.ncam
    for seg_id, rough in rough_planes.items():
        if seg_id >= m1 or alpha is None or seg_id >= len(alpha):
            continue
        rows = np.nonzero(labels == seg_id)[0]
        if len(rows) == 0:
            continue
        ph = np.concatenate([pixels[rows], np.ones((len(rows), 1))], axis=1)
        d = plane_depth(ph, rough.plane, cam)
        ok = np.isfinite(d) & (d > 0)
        if not ok.any():
            continue
        pts = camera_to_world(back_project(ph[ok], d[ok], cam), cam)
        with torch.no_grad():
            x = torch.from_numpy(pts).to(DTYPE)
            _, feat = net.sdf_and_feature(x)
            h = net.segment_probs(x, feat)[:, int(alpha[seg_id])]
        out[torch.from_numpy(rows[ok]), seg_id] = h
    return out


TRACE_COLUMNS = ["epoch", "step", "lr", "beta", "total", "rgb", "eikonal", "depth",
                 "plane", "seg_acc", "seg_point", "opacity", "planes_fit"]


def train(config: TrainConfig, dataset: SceneDataset, out_dir) -> Path:
    """Run the optimization; returns the checkpoint path.

    Writes checkpoint.pt (refreshed every epoch) and losses.csv under
    out_dir.  Aborts with TrainAbort on a non-finite loss, leaving the last
    epoch's checkpoint and a diagnostic dump behind.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.threads > 0:
        torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    needs_segments = config.use_plane or config.use_weighting
    for view in dataset.views:
        if needs_segments or config.use_sampling:
            ensure_view_features(
                dataset, view, min_area=config.min_area,
                superpixel_scale=config.superpixel_scale,
                superpixel_min_size=config.superpixel_min_size,
                superpixel_sigma=config.superpixel_sigma,
                keypoint_count=config.keypoint_count, sampler_k=config.sampler_k,
                sampler_gamma=config.sampler_gamma, sampler_mode=config.sampler_mode)
        if not config.use_sampling or view.weight_map is None:
            view.uniform_map = build_weight_map(
                np.zeros((0, 2)), (view.camera.width, view.camera.height), k=0.0)
        if view.segments is not None and view.segments.n_segments > config.field.n_slots:
            # keep the largest slots' worth of segments, reindexed densely
            from dataclasses import replace as _replace

            by_area = sorted(view.segments.segments, key=lambda s: -s.area)
            keep = sorted(s.id for s in by_area[: config.field.n_slots])
            old_map = view.segments.label_map
            new_map = np.full_like(old_map, -1)
            new_segs = []
            for new_id, old_id in enumerate(keep):
                new_map[old_map == old_id] = new_id
                seg = next(s for s in view.segments.segments if s.id == old_id)
                new_segs.append(_replace(seg, id=new_id))
            view.segments.label_map = new_map
            view.segments.segments = new_segs

    net = FieldNetwork(config.field)
    sphere_initialize(net, radius=config.init_radius, seed=config.seed,
                      steps=config.init_steps)
    quad = QuadratureConfig(n_uniform=config.n_uniform, n_importance=config.n_importance,
                            scene_radius=dataset.scene_radius,
                            opacity_floor=config.opacity_floor)
    rough_quad = quad
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)

    extras = {
        "train_config": config.to_dict(),
        "config_hash": config.config_hash(),
        "norm_center": [float(x) for x in dataset.norm_center],
        "norm_scale": float(dataset.norm_scale),
        "scene_radius": float(dataset.scene_radius),
    }
    ckpt_path = out / "checkpoint.pt"
    trace_path = out / "losses.csv"
    trace = open(trace_path, "w", newline="")
    writer = csv.writer(trace)
    writer.writerow(TRACE_COLUMNS)

    step_global = 0
    try:
        for epoch in range(config.epochs):
            decay = config.lr_decay_to ** (epoch / max(config.epochs - 1, 1))
            for g in opt.param_groups:
                g["lr"] = config.lr * decay
            plane_active = config.use_plane and epoch >= config.plane_warmup_epochs
            for step in range(config.steps_per_epoch):
                view = dataset.views[step_global % dataset.n_views]
                wmap = view.weight_map if config.use_sampling else view.uniform_map
                pixels = sample_rays(wmap, config.batch_rays, rng).astype(np.float64)
                origins, dirs = pixel_rays(pixels, view.ncam)
                bundle = render_rays(net, origins, dirs, quad, rng)

                px = pixels.astype(int)
                gt_rgb = torch.from_numpy(view.image[px[:, 1], px[:, 0]]).to(DTYPE)
                l_rgb = rgb_loss(bundle.color, gt_rgb)

                eik_pts = _eikonal_batch(rng, bundle, origins, dirs,
                                         config.eikonal_points, dataset.scene_radius)
                l_eik = eikonal_loss(net, eik_pts)

                z = view.sparse_depth[px[:, 1], px[:, 0]]
                has_depth = np.isfinite(z)
                target_t = np.where(has_depth, z, 0.0) * dataset.norm_scale * ray_scale(
                    pixels, view.ncam)
                valid = torch.from_numpy(has_depth) & bundle.valid_depth
                l_depth = depth_loss(bundle.depth, torch.from_numpy(target_t).to(DTYPE), valid)

                labels = (view.segments.label_map[px[:, 1], px[:, 0]]
                          if view.segments is not None else np.full(len(px), -1))
                m1 = view.segments.n_segments if view.segments is not None else 0
                alpha = None
                l_acc = l_point = torch.zeros((), dtype=DTYPE)
                if config.use_weighting and m1 > 0:
                    gt_masks = torch.from_numpy(
                        (labels[:, None] == np.arange(m1)[None, :]).astype(np.float64))
                    alpha = hungarian_match(gt_masks, bundle.seg)

                l_plane = torch.zeros((), dtype=DTYPE)
                planes_fit = 0
                rough_planes = {}
                if plane_active:
                    l_plane, rough_planes, planes_fit = _segment_plane_terms(
                        net, view, step_global, config, rough_quad, rng, alpha)
                if config.use_weighting and m1 > 0:
                    point_h = None
                    if rough_planes:
                        point_h = _point_seg_targets(net, view, pixels, labels,
                                                     rough_planes, alpha,
                                                     config.field.n_slots)
                    l_acc, l_point = segmentation_losses(gt_masks, bundle.seg, alpha, point_h)

                total = (l_rgb + config.lambda_sdf * l_eik + config.lambda_depth * l_depth
                         + config.lambda_plane * l_plane
                         + config.lambda_seg * (l_acc + l_point))
                if not torch.isfinite(total):
                    diag = {c: float(v) for c, v in zip(
                        TRACE_COLUMNS[4:11],
                        [total, l_rgb, l_eik, l_depth, l_plane, l_acc, l_point])}
                    diag.update(epoch=epoch, step=step, view=view.index)
                    (out / "abort.json").write_text(json.dumps(diag, indent=1))
                    raise TrainAbort(f"non-finite loss at epoch {epoch} step {step}; "
                                     f"diagnostics in {out / 'abort.json'}")
                opt.zero_grad()
                total.backward()
                opt.step()

                writer.writerow([epoch, step, f"{config.lr * decay:.10g}",
                                 f"{net.beta.item():.12g}", f"{total.item():.12g}",
                                 f"{l_rgb.item():.12g}", f"{l_eik.item():.12g}",
                                 f"{l_depth.item():.12g}", f"{l_plane.item():.12g}",
                                 f"{l_acc.item():.12g}", f"{l_point.item():.12g}",
                                 f"{bundle.opacity.mean().item():.6g}", planes_fit])
                step_global += 1
            extras["epoch"] = epoch
            save_checkpoint(net, ckpt_path, extras)
            trace.flush()
    finally:
        trace.close()
    return ckpt_path


def field_numpy_fn(net: FieldNetwork, batch: int = 65536):
    """Wrap the field as an (n,3) numpy -> (n,) callable for mesh extraction."""

    def fn(pts: np.ndarray) -> np.ndarray:
        out = np.empty(len(pts))
        with torch.no_grad():
            for i in range(0, len(pts), batch):
                chunk = torch.from_numpy(pts[i : i + batch]).to(DTYPE)
                out[i : i + batch] = net.sdf(chunk).numpy()
        return out

    return fn


def extract_mesh(net: FieldNetwork, norm_center, norm_scale: float, resolution: int = 256,
                 bound: float = 1.0):
    """Marching cubes on the trained field, mapped back to metric coordinates."""
    from .evalmesh import marching_cubes

    mesh = marching_cubes(field_numpy_fn(net), resolution, bounds=(-bound, bound))
    mesh.vertices = mesh.vertices / norm_scale + np.asarray(norm_center)
    return mesh
