"""Isosurface extraction and the five reconstruction metrics.

marching_cubes runs the classic 256-case table with linear edge
interpolation, slab by slab, welding vertices through global grid-edge
keys so closed surfaces come out watertight.  Triangles are wound so that
their normals point toward decreasing field values (outward, under the
inside-positive convention).

evaluate() samples both meshes uniformly by area and computes accuracy,
completeness, precision, recall and F-score with exact nearest neighbors
from a KD-tree.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._mctables import CORNER_OFFSETS, EDGE_BASE_AXIS, EDGE_TABLE, TRI_TABLE


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True).clip(1e-30)


@dataclass
class MetricReport:
    acc: float
    comp: float
    prec: float
    recall: float
    fscore: float

    def to_dict(self) -> dict:
        return {
            "acc": self.acc, "comp": self.comp, "prec": self.prec,
            "recall": self.recall, "fscore": self.fscore,
        }


_TRI_BY_CASE = [np.asarray(t, dtype=np.int64).reshape(-1, 3) for t in TRI_TABLE]


def marching_cubes(field_fn, resolution: int, bounds=(-1.0, 1.0), iso: float = 0.0,
                   chunk: int = 64) -> TriangleMesh:
    """Extract the iso level set of field_fn on a resolution^3 point grid.

    field_fn maps an (n, 3) float64 array to (n,) values.  Inside is
    field > iso.  Returns an empty mesh (with a zero-face array) when the
    level set is not crossed.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    lo, hi = float(bounds[0]), float(bounds[1])
    xs = np.linspace(lo, hi, resolution)
    n = resolution
    step = xs[1] - xs[0]

    edge_keys_parts = []
    edge_vals_parts = []

    def eval_slab(z0, z1):
        zz = xs[z0:z1]
        gx, gy, gz = np.meshgrid(xs, xs, zz, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        return field_fn(pts).reshape(n, n, len(zz))

    prev = None
    tris_parts = []
    corner_bits = [1 << i for i in range(8)]
    for z0 in range(0, n - 1, chunk):
        z1 = min(z0 + chunk + 1, n)
        vals = eval_slab(z0, z1) if prev is None else np.concatenate(
            [prev, eval_slab(z0 + 1, z1)], axis=2)
        nz = vals.shape[2] - 1
        # case index for every cube in this slab
        case = np.zeros((n - 1, n - 1, nz), dtype=np.int32)
        for ci, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
            corner = vals[ox : ox + n - 1, oy : oy + n - 1, oz : oz + nz]
            case |= (corner <= iso) * corner_bits[ci]
        active = np.nonzero(np.array([len(t) > 0 for t in _TRI_BY_CASE])[case])
        if len(active[0]) == 0:
            prev = vals[:, :, -1:]
            continue
        ix, iy, iz = active
        cs = case[ix, iy, iz]
        iz_g = iz + z0  # global z index of the cube
        order = np.argsort(cs, kind="stable")
        ix, iy, iz_g, cs = ix[order], iy[order], iz_g[order], cs[order]
        for c in np.unique(cs):
            sel = cs == c
            tris = _TRI_BY_CASE[c]  # (T, 3) cube-edge ids
            cube_x = np.repeat(ix[sel], len(tris))
            cube_y = np.repeat(iy[sel], len(tris))
            cube_z = np.repeat(iz_g[sel], len(tris))
            edges = np.tile(tris, (int(sel.sum()), 1))  # (cubes*T, 3)
            keys = np.empty(edges.shape, dtype=np.int64)
            for e in range(12):
                m = edges == e
                if not m.any():
                    continue
                (bx, by, bz), axis = EDGE_BASE_AXIS[e]
                gx = cube_x[:, None] + bx
                gy = cube_y[:, None] + by
                gz = cube_z[:, None] + bz
                keys[m] = ((np.broadcast_to(gx, edges.shape)[m] * n
                            + np.broadcast_to(gy, edges.shape)[m]) * n
                           + np.broadcast_to(gz, edges.shape)[m]) * 3 + axis
            tris_parts.append(keys)
        # record grid values adjacent to sign changes for interpolation later
        k_part, v_part = _crossing_edge_values(vals, z0, iso, n, nz)
        edge_keys_parts.append(k_part)
        edge_vals_parts.append(v_part)
        prev = vals[:, :, -1:]

    if not tris_parts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    tri_keys = np.concatenate(tris_parts, axis=0)
    uniq, inverse = np.unique(tri_keys.ravel(), return_inverse=True)
    faces = inverse.reshape(-1, 3)

    all_keys = np.concatenate(edge_keys_parts)
    all_vals = np.concatenate(edge_vals_parts, axis=0)
    all_keys, first = np.unique(all_keys, return_index=True)
    all_vals = all_vals[first]
    pos = np.searchsorted(all_keys, uniq)
    if pos.max(initial=-1) >= len(all_keys) or not np.array_equal(all_keys[pos], uniq):
        raise RuntimeError("internal error: missing edge values for some vertices")

    # table order already winds normals toward decreasing field values
    verts = _interpolate_edges(uniq, all_vals[pos], xs, step, iso, n)
    mesh = TriangleMesh(verts, faces)
    areas = mesh.triangle_areas()
    mesh.faces = mesh.faces[areas > 1e-12]
    return mesh


def _crossing_edge_values(vals, z0, iso, n, nz):
    """Keys and endpoint values of all grid edges with a sign change."""
    sl = vals[:, :, : nz + 1]
    keys, pairs = [], []
    for axis in range(3):
        shift = [0, 0, 0]
        shift[axis] = 1
        a = sl[: n - shift[0], : n - shift[1], : sl.shape[2] - shift[2]]
        b = sl[shift[0]:, shift[1]:, shift[2]:]
        crossing = (a <= iso) != (b <= iso)
        gx, gy, gz = np.nonzero(crossing)
        keys.append(((gx.astype(np.int64) * n + gy) * n + (gz + z0)) * 3 + axis)
        pairs.append(np.stack([a[gx, gy, gz], b[gx, gy, gz]], axis=1))
    return np.concatenate(keys), np.concatenate(pairs, axis=0)


def _interpolate_edges(uniq_keys, endpoint_vals, xs, step, iso, n):
    axis = uniq_keys % 3
    rest = uniq_keys // 3
    gz = rest % n
    rest //= n
    gy = rest % n
    gx = rest // n
    va, vb = endpoint_vals[:, 0], endpoint_vals[:, 1]
    t = np.clip((iso - va) / (vb - va), 0.0, 1.0)
    verts = np.stack([xs[gx], xs[gy], xs[gz]], axis=1)
    verts[np.arange(len(verts)), axis] += t * step
    return verts


def sample_mesh_points(mesh: TriangleMesh, count: int,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniform-by-area point sampling on the mesh surface."""
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces")
    rng = rng or np.random.default_rng(0)
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    idx = rng.choice(len(mesh.faces), size=count, p=probs)
    v = mesh.vertices
    a = v[mesh.faces[idx, 0]]
    b = v[mesh.faces[idx, 1]]
    c = v[mesh.faces[idx, 2]]
    r1 = np.sqrt(rng.uniform(size=(count, 1)))
    r2 = rng.uniform(size=(count, 1))
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c


def _as_points(obj, samples: int, rng) -> np.ndarray:
    if isinstance(obj, TriangleMesh):
        return sample_mesh_points(obj, samples, rng)
    pts = np.asarray(obj, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("expected a TriangleMesh or an (n, 3) point array")
    return pts


def evaluate(pred, gt, threshold: float = 0.05, samples: int = 200_000,
             seed: int = 0, crop_margin: float | None = None) -> MetricReport:
    """Acc / Comp / Prec / Recall / F-score between prediction and GT.

    Inputs may be meshes (sampled uniformly by area) or point clouds.  With
    crop_margin set, predicted points outside the GT bounding box inflated
    by that margin are discarded first (stand-in for the re-fusion protocol
    that excludes unobservable regions).
    """
    rng = np.random.default_rng(seed)
    gt_pts = _as_points(gt, samples, rng)
    pred_pts = _as_points(pred, samples, rng)
    if len(gt_pts) == 0:
        raise ValueError("ground truth is empty")
    if crop_margin is not None and len(pred_pts):
        lo = gt_pts.min(axis=0) - crop_margin
        hi = gt_pts.max(axis=0) + crop_margin
        keep = ((pred_pts >= lo) & (pred_pts <= hi)).all(axis=1)
        pred_pts = pred_pts[keep]
    if len(pred_pts) == 0:
        return MetricReport(acc=float("inf"), comp=float("inf"),
                            prec=0.0, recall=0.0, fscore=0.0)
    d_pred = cKDTree(gt_pts).query(pred_pts)[0]
    d_gt = cKDTree(pred_pts).query(gt_pts)[0]
    prec = float((d_pred <= threshold).mean())
    recall = float((d_gt <= threshold).mean())
    f = 2 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0
    return MetricReport(acc=float(d_pred.mean()), comp=float(d_gt.mean()),
                        prec=prec, recall=recall, fscore=f)


def save_ply(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY: float32 positions, int32 face indices."""
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\n")
        f.write(b"element vertex %d\n" % len(mesh.vertices))
        f.write(b"property float x\nproperty float y\nproperty float z\n")
        f.write(b"element face %d\n" % len(mesh.faces))
        f.write(b"property list uchar int vertex_indices\nend_header\n")
        f.write(mesh.vertices.astype("<f4").tobytes())
        if len(mesh.faces):
            counts = np.full((len(mesh.faces), 1), 3, dtype=np.uint8)
            rows = np.empty(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", 3)])
            rows["n"] = 3
            rows["idx"] = mesh.faces.astype("<i4")
            f.write(rows.tobytes())


def load_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        n_vert = n_face = 0
        fmt = None
        while True:
            line = f.readline().strip()
            if line.startswith(b"format"):
                fmt = line.split()[1]
            elif line.startswith(b"element vertex"):
                n_vert = int(line.split()[-1])
            elif line.startswith(b"element face"):
                n_face = int(line.split()[-1])
            elif line == b"end_header":
                break
            elif not line:
                raise ValueError("unterminated PLY header")
        if fmt != b"binary_little_endian":
            raise ValueError(f"unsupported PLY format: {fmt}")
        verts = np.frombuffer(f.read(12 * n_vert), dtype="<f4").reshape(n_vert, 3)
        faces = np.zeros((n_face, 3), dtype=np.int64)
        if n_face:
            rows = np.frombuffer(f.read(13 * n_face),
                                 dtype=[("n", "u1"), ("idx", "<i4", 3)])
            if (rows["n"] != 3).any():
                raise ValueError("only triangle faces are supported")
            faces = rows["idx"].astype(np.int64)
    return TriangleMesh(verts.astype(np.float64), faces)
