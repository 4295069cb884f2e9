"""Synthetic room scenes with analytic ground truth.

A scene is the free space of a convex room (intersection of half-spaces)
minus solid objects (posed boxes and spheres).  The signed distance of the
free space is positive inside it (air), zero on every visible surface and
negative inside walls and objects; it composes the primitive distances
with min/max, which is exact on and near all surfaces.

Ray casting against the same primitives is closed form (half-space and
slab intersections, sphere quadratics), so rendered depth maps agree with
the SDF zero set to machine precision; rendered color is a bare texture
lookup at the hit point with no shading.

Dataset layout written by write_dataset:
    images/####.png          8-bit RGB
    cameras/####.json        K, E, width, height
    sparse_depth/####.pfm    float32 z-depth in meters, NaN = invalid
    gt/mesh.ply              marching cubes of the analytic SDF (meters)
    gt/faceid/####.png       16-bit face-id maps (id + 1; 0 = no hit)
    meta.json                normalization transform and scene facts
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .evalmesh import marching_cubes, save_ply
from .geometry import Camera, look_at_extrinsics, pixel_rays, world_to_camera
from .raysampler import extract_keypoints


# --------------------------------------------------------------------------
# textures

@dataclass(frozen=True)
class Texture:
    kind: str = "flat"  # flat | checker | noise
    color: tuple = (0.5, 0.5, 0.5)
    color2: tuple = (0.1, 0.1, 0.1)
    tiles: float = 4.0  # checker tiles or noise cells per meter
    seed: int = 0

    def sample(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        c1 = np.asarray(self.color)
        if self.kind == "flat":
            return np.broadcast_to(c1, u.shape + (3,)).copy()
        c2 = np.asarray(self.color2)
        if self.kind == "checker":
            parity = (np.floor(u * self.tiles) + np.floor(v * self.tiles)) % 2
            return np.where(parity[..., None] > 0.5, c2, c1)
        if self.kind == "noise":
            t = _value_noise(u * self.tiles, v * self.tiles, self.seed)
            return c1 + (c2 - c1) * t[..., None]
        raise ValueError(f"unknown texture kind: {self.kind}")


def _hash01(i: np.ndarray, j: np.ndarray, seed: int) -> np.ndarray:
    h = (i.astype(np.int64) * 73856093) ^ (j.astype(np.int64) * 19349663) ^ (seed * 83492791)
    h = (h ^ (h >> 13)) * 1274126177
    return ((h ^ (h >> 16)) & 0xFFFFFF).astype(np.float64) / float(0xFFFFFF)


def _value_noise(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    i, j = np.floor(u), np.floor(v)
    fu, fv = u - i, v - j
    fu = fu * fu * (3 - 2 * fu)
    fv = fv * fv * (3 - 2 * fv)
    v00 = _hash01(i, j, seed)
    v10 = _hash01(i + 1, j, seed)
    v01 = _hash01(i, j + 1, seed)
    v11 = _hash01(i + 1, j + 1, seed)
    return (v00 * (1 - fu) + v10 * fu) * (1 - fv) + (v01 * (1 - fu) + v11 * fu) * fv


def _plane_tangents(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axis = np.zeros(3)
    axis[np.argmin(np.abs(n))] = 1.0
    t1 = np.cross(n, axis)
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


# --------------------------------------------------------------------------
# primitives

@dataclass(frozen=True)
class RoomPlane:
    """Half-space n . x <= b bounding the room interior; n is the outward normal."""

    normal: tuple
    offset: float
    texture: Texture = Texture()

    def unit_normal(self) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class BoxObject:
    center: tuple
    size: tuple  # full extents
    yaw_deg: float = 0.0
    texture: Texture = Texture()

    def rotation(self) -> np.ndarray:
        a = np.deg2rad(self.yaw_deg)
        return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])


@dataclass(frozen=True)
class SphereObject:
    center: tuple
    radius: float
    texture: Texture = Texture()


@dataclass
class SceneSpec:
    planes: list
    boxes: list = field(default_factory=list)
    spheres: list = field(default_factory=list)
    cameras: list = field(default_factory=list)
    bbox: tuple = ((-2.0, -2.0, -1.5), (2.0, 2.0, 1.5))  # room bounds in meters
    image_noise: float = 0.0
    depth_noise: float = 0.01
    name: str = "scene"

    def normalization(self, fill: float = 0.95) -> tuple[np.ndarray, float]:
        lo, hi = np.asarray(self.bbox[0]), np.asarray(self.bbox[1])
        center = 0.5 * (lo + hi)
        radius = np.linalg.norm(hi - center)
        return center, fill / radius


# --------------------------------------------------------------------------
# signed distance oracle (air region positive)

def _box_exterior_sdf(pts: np.ndarray, box: BoxObject) -> np.ndarray:
    """Standard box SDF: positive outside the box, negative inside."""
    R = box.rotation()
    q = np.abs((pts - np.asarray(box.center)) @ R) - 0.5 * np.asarray(box.size)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def analytic_sdf(spec: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """Exact signed distance to the free-space region (positive in the air)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    d = np.full(len(pts), np.inf)
    for plane in spec.planes:
        n = plane.unit_normal()
        b = plane.offset / np.linalg.norm(plane.normal)
        d = np.minimum(d, b - pts @ n)
    for box in spec.boxes:
        d = np.minimum(d, _box_exterior_sdf(pts, box))
    for sph in spec.spheres:
        d = np.minimum(d, np.linalg.norm(pts - np.asarray(sph.center), axis=-1) - sph.radius)
    return d


# --------------------------------------------------------------------------
# exact ray casting

def _cast(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Closed-form first-hit query.  Returns (t, face_id); t = inf on miss."""
    n_rays = len(origins)
    best_t = np.full(n_rays, np.inf)
    best_id = np.full(n_rays, -1, dtype=np.int32)

    # room exit: nearest half-space boundary the ray leaves through
    for i, plane in enumerate(spec.planes):
        n = plane.unit_normal()
        b = plane.offset / np.linalg.norm(plane.normal)
        dn = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (b - origins @ n) / dn
        valid = (dn > 1e-12) & (t > 1e-9) & (t < best_t)
        best_t[valid] = t[valid]
        best_id[valid] = i

    fid = len(spec.planes)
    for box in spec.boxes:
        R = box.rotation()
        o_l = (origins - np.asarray(box.center)) @ R
        d_l = dirs @ R
        h = 0.5 * np.asarray(box.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o_l) / d_l
            t2 = (h - o_l) / d_l
        t_lo = np.minimum(t1, t2)
        t_hi = np.maximum(t1, t2)
        t_enter = t_lo.max(axis=-1)
        t_exit = t_hi.min(axis=-1)
        hit = (t_enter < t_exit) & (t_enter > 1e-9) & (t_enter < best_t)
        axis = t_lo.argmax(axis=-1)
        side = np.take_along_axis(t1, axis[:, None], axis=1)[:, 0] > np.take_along_axis(
            t2, axis[:, None], axis=1)[:, 0]
        face = axis * 2 + side.astype(np.int32)
        best_t[hit] = t_enter[hit]
        best_id[hit] = fid + face[hit]
        fid += 6
    for sph in spec.spheres:
        oc = origins - np.asarray(sph.center)
        b_ = (oc * dirs).sum(axis=-1)
        c_ = (oc * oc).sum(axis=-1) - sph.radius**2
        disc = b_ * b_ - c_
        ok = disc >= 0
        t = np.where(ok, -b_ - np.sqrt(np.maximum(disc, 0.0)), np.inf)
        hit = ok & (t > 1e-9) & (t < best_t)
        best_t[hit] = t[hit]
        best_id[hit] = fid
        fid += 1
    return best_t, best_id


def _shade(spec: SceneSpec, hit_pts: np.ndarray, face_id: np.ndarray) -> np.ndarray:
    colors = np.zeros((len(hit_pts), 3))
    n_planes = len(spec.planes)
    for i, plane in enumerate(spec.planes):
        m = face_id == i
        if not m.any():
            continue
        n = plane.unit_normal()
        t1, t2 = _plane_tangents(n)
        colors[m] = plane.texture.sample(hit_pts[m] @ t1, hit_pts[m] @ t2)
    fid = n_planes
    for box in spec.boxes:
        R = box.rotation()
        for face in range(6):
            m = face_id == fid + face
            if m.any():
                local = (hit_pts[m] - np.asarray(box.center)) @ R
                axis = face // 2
                others = [a for a in range(3) if a != axis]
                colors[m] = box.texture.sample(local[:, others[0]], local[:, others[1]])
        fid += 6
    for sph in spec.spheres:
        m = face_id == fid
        if m.any():
            local = hit_pts[m] - np.asarray(sph.center)
            u = np.arctan2(local[:, 1], local[:, 0])
            v = np.arccos(np.clip(local[:, 2] / sph.radius, -1, 1))
            colors[m] = sph.texture.sample(u * sph.radius, v * sph.radius)
        fid += 1
    return colors


def render_ground_truth(spec: SceneSpec, cam: Camera, rng: np.random.Generator | None = None):
    """Exact ray cast of one view: (rgb float, z-depth meters, face-id int)."""
    uu, vv = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    origins, dirs = pixel_rays(pixels, cam)
    t, face_id = _cast(spec, origins, dirs)
    if not np.isfinite(t).all():
        raise ValueError("some rays escape the room; the camera must be inside")
    hits = origins + t[:, None] * dirs
    colors = _shade(spec, hits, face_id)
    if spec.image_noise > 0 and rng is not None:
        colors = np.clip(colors + spec.image_noise * rng.standard_normal(colors.shape), 0, 1)
    z = world_to_camera(hits, cam)[:, 2]
    h, w = cam.height, cam.width
    return (colors.reshape(h, w, 3), z.reshape(h, w), face_id.reshape(h, w).astype(np.int16))


def make_sparse_depth(depth: np.ndarray, keypoints: np.ndarray | None = None,
                      ratio: float | None = None, sigma: float = 0.0,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """SfM-style sparse depth: valid only at keypoints (or a random subset).

    Gaussian noise of scale sigma (meters) is added to the retained values;
    every other pixel is NaN.
    """
    rng = rng or np.random.default_rng(0)
    sparse = np.full(depth.shape, np.nan, dtype=np.float64)
    if keypoints is not None and len(keypoints):
        u = np.clip(keypoints[:, 0], 0, depth.shape[1] - 1)
        v = np.clip(keypoints[:, 1], 0, depth.shape[0] - 1)
        sparse[v, u] = depth[v, u]
    elif ratio is not None:
        if not 0 < ratio <= 1:
            raise ValueError("ratio must be in (0, 1]")
        mask = rng.uniform(size=depth.shape) < ratio
        sparse[mask] = depth[mask]
    else:
        raise ValueError("provide keypoints or a ratio")
    valid = np.isfinite(sparse)
    if sigma > 0:
        sparse[valid] += sigma * rng.standard_normal(int(valid.sum()))
    return sparse


# --------------------------------------------------------------------------
# PFM I/O (float32, little endian, rows bottom-to-top, NaN = invalid)

def save_pfm(data: np.ndarray, path) -> None:
    data = np.asarray(data, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (data.shape[1], data.shape[0]))
        f.write(data[::-1].tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError("not a grayscale PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dtype).reshape(h, w)
    return data[::-1].astype(np.float64)


# --------------------------------------------------------------------------
# stock scenes

def _orbit_cameras(n: int, radius: float, width: int, height: int,
                   center=(0.0, 0.0, 0.0), focal_scale: float = 0.7) -> list:
    f = focal_scale * width
    K = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(n):
        ang = 2 * np.pi * i / n
        height_off = 0.5 if i % 2 == 0 else -0.4
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height_off])
        pitch = 0.35 if i % 2 == 0 else -0.3
        target = center + np.array([0.0, 0.0, pitch])
        cams.append(Camera(K=K, E=look_at_extrinsics(eye, target), width=width, height=height))
    return cams


_WALL_FLAT_A = Texture("flat", color=(0.82, 0.78, 0.72))
_WALL_FLAT_B = Texture("flat", color=(0.62, 0.70, 0.78))
_WALL_FLAT_C = Texture("flat", color=(0.75, 0.66, 0.60))
_CEIL_FLAT = Texture("flat", color=(0.88, 0.88, 0.86))
_FLOOR_CHECKER = Texture("checker", color=(0.45, 0.32, 0.22), color2=(0.75, 0.62, 0.45),
                         tiles=2.0)
_WALL_CHECKER = Texture("checker", color=(0.25, 0.35, 0.55), color2=(0.8, 0.8, 0.75),
                        tiles=1.5)
_SPHERE_NOISE = Texture("noise", color=(0.2, 0.5, 0.3), color2=(0.85, 0.85, 0.2),
                        tiles=3.0, seed=5)
# deliberately close to wall B so super-pixels sometimes merge the box face
# with the wall behind it (exercises the fusion weighting)
_BOX_FLAT = Texture("flat", color=(0.58, 0.66, 0.74))


def _room_planes(tilt_wall_x: bool) -> tuple[list, tuple]:
    planes = [
        RoomPlane(normal=(0, 0, -1), offset=1.5, texture=_FLOOR_CHECKER),   # floor z=-1.5
        RoomPlane(normal=(0, 0, 1), offset=1.5, texture=_CEIL_FLAT),        # ceiling z=1.5
        RoomPlane(normal=(-1, 0, 0), offset=2.0, texture=_WALL_FLAT_A),     # wall x=-2
        RoomPlane(normal=(0, -1, 0), offset=2.0, texture=_WALL_FLAT_B),     # wall y=-2
        RoomPlane(normal=(0, 1, 0), offset=2.0, texture=_WALL_CHECKER),     # wall y=+2
    ]
    if tilt_wall_x:
        # wall through (2, y, 1.5), leaning outward 30 degrees from vertical
        c, s = np.cos(np.deg2rad(30.0)), np.sin(np.deg2rad(30.0))
        offset = c * 2.0 + s * 1.5
        planes.append(RoomPlane(normal=(c, 0, s), offset=offset, texture=_WALL_FLAT_C))
        x_max = (offset + s * 1.5) / c  # floor-level reach of the slope
        bbox = ((-2.0, -2.0, -1.5), (float(x_max), 2.0, 1.5))
    else:
        planes.append(RoomPlane(normal=(1, 0, 0), offset=2.0, texture=_WALL_FLAT_C))
        bbox = ((-2.0, -2.0, -1.5), (2.0, 2.0, 1.5))
    return planes, bbox


def _stock_objects() -> tuple[list, list]:
    # kept clear of the camera orbit (radius 1.15, heights -0.4 and +0.5)
    # and floating well above the floor so every face stays observable
    boxes = [BoxObject(center=(0.55, -0.5, -0.65), size=(0.7, 0.5, 0.5), yaw_deg=25.0,
                       texture=_BOX_FLAT)]
    spheres = [SphereObject(center=(-0.45, 0.35, -0.55), radius=0.4, texture=_SPHERE_NOISE)]
    return boxes, spheres


def box8(width: int = 160, height: int = 120) -> SceneSpec:
    """Manhattan room, 8 orbit views, mixed flat and textured faces."""
    planes, bbox = _room_planes(tilt_wall_x=False)
    boxes, spheres = _stock_objects()
    cams = _orbit_cameras(8, 1.15, width, height)
    return SceneSpec(planes=planes, boxes=boxes, spheres=spheres, cameras=cams,
                     bbox=bbox, name="box8")


def slope8(width: int = 160, height: int = 120) -> SceneSpec:
    """Same room with the +x wall tilted 30 degrees from vertical."""
    planes, bbox = _room_planes(tilt_wall_x=True)
    boxes, spheres = _stock_objects()
    cams = _orbit_cameras(8, 1.15, width, height)
    return SceneSpec(planes=planes, boxes=boxes, spheres=spheres, cameras=cams,
                     bbox=bbox, name="slope8")


STOCK_SCENES = {"box8": box8, "slope8": slope8}


# --------------------------------------------------------------------------
# dataset writer

def write_dataset(spec: SceneSpec, out_dir, gt_resolution: int = 256, seed: int = 0,
                  keypoint_count: int = 300) -> dict:
    """Render every view and write the on-disk dataset; returns meta dict."""
    out = Path(out_dir)
    for sub in ("images", "cameras", "sparse_depth", "gt/faceid"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    center, scale = spec.normalization()

    for i, cam in enumerate(spec.cameras):
        if analytic_sdf(spec, cam.center[None, :])[0] <= 0.05:
            raise ValueError(f"camera {i} is outside the free space")
        rgb, depth, faceid = render_ground_truth(spec, cam, rng)
        img8 = (np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(img8).save(out / "images" / f"{i:04d}.png")
        from .geometry import save_camera

        save_camera(cam, out / "cameras" / f"{i:04d}.json")
        kps = extract_keypoints(img8, target_count=keypoint_count)
        sparse = make_sparse_depth(depth, keypoints=kps, sigma=spec.depth_noise, rng=rng)
        save_pfm(sparse, out / "sparse_depth" / f"{i:04d}.pfm")
        Image.fromarray((faceid.astype(np.int32) + 1).astype(np.uint16), mode="I;16").save(
            out / "gt" / "faceid" / f"{i:04d}.png")

    lo, hi = np.asarray(spec.bbox[0]), np.asarray(spec.bbox[1])
    c = 0.5 * (lo + hi)
    half = float((hi - c).max()) + 0.15
    mesh = marching_cubes(
        lambda pts: analytic_sdf(spec, pts * half + c), gt_resolution, bounds=(-1.0, 1.0))
    mesh.vertices = mesh.vertices * half + c
    save_ply(mesh, out / "gt" / "mesh.ply")

    meta = {
        "name": spec.name,
        "n_views": len(spec.cameras),
        "width": spec.cameras[0].width,
        "height": spec.cameras[0].height,
        "norm_center": [float(x) for x in center],
        "norm_scale": float(scale),
        "scene_radius": 0.95,
        "bbox": [list(map(float, spec.bbox[0])), list(map(float, spec.bbox[1]))],
        "depth_noise": spec.depth_noise,
        "seed": seed,
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=1)
    return meta
