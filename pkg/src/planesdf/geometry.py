"""Cameras, rays, projections and the homogeneous plane representation.

Conventions used throughout the package:
  * pixels are addressed by their (u, v) coordinates, homogeneous p = (u, v, 1)
  * depth d is measured along the camera z-axis, so a camera-space point is
    d * K^-1 p (not d units of ray length)
  * extrinsics E are 4x4 world-to-camera rigid transforms
  * a plane with parameter vector A contains exactly the points x with
    x . A = 1; its unit normal is A / |A|
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    """Invalid camera or solver configuration (e.g. singular intrinsics)."""


class DegenerateRayError(ValueError):
    """Ray is (numerically) parallel to the queried plane."""


_RIGID_TOL = 1e-6


def _check_rigid(E: np.ndarray) -> None:
    R = E[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=_RIGID_TOL):
        raise ConfigurationError("extrinsic rotation block is not orthonormal")
    if np.linalg.det(R) < 0:
        raise ConfigurationError("extrinsic rotation block has det < 0")
    if not np.allclose(E[3], [0.0, 0.0, 0.0, 1.0], atol=_RIGID_TOL):
        raise ConfigurationError("extrinsic matrix last row must be (0,0,0,1)")


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics K (pixels), world-to-camera extrinsics E."""

    K: np.ndarray
    E: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.ascontiguousarray(np.asarray(self.K, dtype=np.float64).reshape(3, 3))
        E = np.ascontiguousarray(np.asarray(self.E, dtype=np.float64).reshape(4, 4))
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0:
            raise ConfigurationError("intrinsics must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigurationError("focal lengths must be positive")
        _check_rigid(E)
        K.setflags(write=False)
        E.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "E", E)

    @property
    def K_inv(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.K)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded above
            raise ConfigurationError("intrinsics matrix is singular") from exc

    @property
    def E_inv(self) -> np.ndarray:
        R = self.E[:3, :3]
        t = self.E[:3, 3]
        out = np.eye(4)
        out[:3, :3] = R.T
        out[:3, 3] = -R.T @ t
        return out

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.E_inv[:3, 3]

    def to_json_dict(self) -> dict:
        return {
            "K": [float(x) for x in self.K.ravel()],
            "E": [float(x) for x in self.E.ravel()],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Camera":
        return cls(
            K=np.asarray(d["K"], dtype=np.float64).reshape(3, 3),
            E=np.asarray(d["E"], dtype=np.float64).reshape(4, 4),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def load_camera(path) -> Camera:
    with open(path) as f:
        return Camera.from_json_dict(json.load(f))


def save_camera(cam: Camera, path) -> None:
    with open(path, "w") as f:
        json.dump(cam.to_json_dict(), f, indent=1)


@dataclass(frozen=True)
class PlaneParams:
    """Plane parameter 3-vector A with plane equation x . A = 1."""

    A: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64).reshape(3)
        if np.linalg.norm(A) == 0:
            raise ValueError("plane parameter vector must be nonzero")
        object.__setattr__(self, "A", A)

    @property
    def normal(self) -> np.ndarray:
        return self.A / np.linalg.norm(self.A)

    def point_distance(self, x: np.ndarray) -> np.ndarray:
        """Unsigned euclidean distance from point(s) x to the plane."""
        x = np.asarray(x, dtype=np.float64)
        return np.abs(x @ self.A - 1.0) / np.linalg.norm(self.A)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=np.float64).reshape(2))


def back_project(p: np.ndarray, d, cam: Camera) -> np.ndarray:
    """Lift homogeneous pixel(s) p at z-depth d into camera space: d * K^-1 p.

    Accepts a single (3,) pixel with scalar depth or an (n, 3) stack with an
    (n,) depth vector.
    """
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    rays = p @ cam.K_inv.T
    return d[..., None] * rays if rays.ndim == 2 else d * rays


def plane_depth(p: np.ndarray, plane: PlaneParams, cam: Camera):
    """z-depth at which the viewing ray of pixel p crosses the plane.

    Back-projecting p at the returned depth lands exactly on the plane.
    Scalar input raises DegenerateRayError when the ray is parallel to the
    plane; batched input returns NaN for such pixels instead.
    """
    p = np.asarray(p, dtype=np.float64)
    denom = (p @ cam.K_inv.T) @ plane.A
    if p.ndim == 1:
        if abs(denom) < 1e-12:
            raise DegenerateRayError("pixel ray is parallel to the plane")
        return 1.0 / denom
    out = np.full(denom.shape, np.nan)
    ok = np.abs(denom) >= 1e-12
    out[ok] = 1.0 / denom[ok]
    return out


def camera_to_world(x_cam: np.ndarray, cam: Camera) -> np.ndarray:
    """Map camera-space point(s) to world space via E^-1."""
    x_cam = np.asarray(x_cam, dtype=np.float64)
    R_inv = cam.E_inv[:3, :3]
    t_inv = cam.E_inv[:3, 3]
    return x_cam @ R_inv.T + t_inv


def world_to_camera(x_world: np.ndarray, cam: Camera) -> np.ndarray:
    x_world = np.asarray(x_world, dtype=np.float64)
    R = cam.E[:3, :3]
    t = cam.E[:3, 3]
    return x_world @ R.T + t


def pixel_ray(pixel: np.ndarray, cam: Camera) -> Ray:
    """World-space viewing ray through one pixel (u, v)."""
    o, d = pixel_rays(np.asarray(pixel, dtype=np.float64)[None, :], cam)
    return Ray(origin=o[0], direction=d[0], pixel=pixel)


def pixel_rays(pixels: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Batched pixel_ray: (n, 2) pixels -> origins (n, 3), unit directions (n, 3)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    ph = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    dirs_cam = ph @ cam.K_inv.T
    R_inv = cam.E_inv[:3, :3]
    dirs = dirs_cam @ R_inv.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    return origins, dirs


def ray_scale(pixels: np.ndarray, cam: Camera) -> np.ndarray:
    """|K^-1 p| per pixel: converts z-depth to distance along the unit ray."""
    pixels = np.asarray(pixels, dtype=np.float64)
    ph = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    return np.linalg.norm(ph @ cam.K_inv.T, axis=1)


def look_at_extrinsics(eye: np.ndarray, target: np.ndarray,
                       up: np.ndarray = (0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rigid transform for a camera at eye looking at target.

    OpenCV convention: camera x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight along up: pick an arbitrary right
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=0)
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ eye
    return E


def normalize_camera(cam: Camera, center: np.ndarray, scale: float) -> Camera:
    """Re-express a metric camera in normalized world coordinates.

    The normalized world is x_n = scale * (x - center); the returned camera
    maps normalized points to a camera frame whose depths are scale * meters.
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    R = cam.E[:3, :3]
    t = cam.E[:3, 3]
    E_n = np.eye(4)
    E_n[:3, :3] = R
    E_n[:3, 3] = scale * (t + R @ center)
    return Camera(K=cam.K.copy(), E=E_n, width=cam.width, height=cam.height)
