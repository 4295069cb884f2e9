"""Isosurface extraction, mesh sampling, PLY I/O and the metric suite.

The nearest-neighbor oracle for evaluate() is a brute-force O(n^2)
distance matrix; the KD-tree implementation must match it exactly.
"""

import numpy as np
import pytest

from planesdf.evalmesh import (
    MetricReport,
    TriangleMesh,
    evaluate,
    load_ply,
    marching_cubes,
    sample_mesh_points,
    save_ply,
)


def _sphere_field(r=0.5):
    return lambda pts: r - np.linalg.norm(pts, axis=1)


@pytest.fixture(scope="module")
def sphere_mesh():
    return marching_cubes(_sphere_field(), 128)


class TestMarchingCubes:
    def test_sphere_vertex_radii(self, sphere_mesh):
        radii = np.linalg.norm(sphere_mesh.vertices, axis=1)
        cell = 2.0 / 127
        assert radii.min() > 0.5 - 1.5 * cell
        assert radii.max() < 0.5 + 1.5 * cell

    def test_no_sign_change_empty_mesh(self):
        mesh = marching_cubes(lambda p: np.full(len(p), -2.0), 32)
        assert len(mesh.faces) == 0

    def test_sphere_watertight(self, sphere_mesh):
        f = sphere_mesh.faces
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        assert (counts == 2).all()

    def test_normals_point_toward_decreasing_field(self, sphere_mesh):
        n = sphere_mesh.face_normals()
        centroids = sphere_mesh.vertices[sphere_mesh.faces].mean(axis=1)
        assert ((n * centroids).sum(axis=1) > 0).all()  # outward = decreasing

    def test_vertex_field_values_small(self, sphere_mesh):
        # |field| at vertices bounded by cell size times the unit gradient
        vals = _sphere_field()(sphere_mesh.vertices)
        cell = 2.0 / 127
        frac = (np.abs(vals) < cell).mean()
        assert frac > 0.99

    def test_chunk_boundaries_seamless(self):
        m1 = marching_cubes(_sphere_field(), 96, chunk=16)
        m2 = marching_cubes(_sphere_field(), 96, chunk=200)
        assert len(m1.faces) == len(m2.faces)
        f = m1.faces
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        assert (counts == 2).all()

    def test_resolution_validation(self):
        with pytest.raises(ValueError):
            marching_cubes(_sphere_field(), 1)


class TestSampleMeshPoints:
    def test_single_triangle_barycentric_validity(self):
        mesh = TriangleMesh(np.array([[0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]]),
                            np.array([[0, 1, 2]]))
        pts = sample_mesh_points(mesh, 500, np.random.default_rng(0))
        assert (pts[:, 2] == 0).all()
        assert (pts[:, 0] >= -1e-12).all() and (pts[:, 1] >= -1e-12).all()
        assert (pts[:, 0] + pts[:, 1] <= 1 + 1e-12).all()

    def test_area_proportional_allocation(self):
        # two triangles with areas 1:3
        verts = np.array([
            [0, 0, 0], [1.0, 0, 0], [0, 1.0, 0],   # area 0.5
            [5, 0, 0], [5 + np.sqrt(3.0), 0, 0], [5, np.sqrt(3.0), 0],  # area 1.5
        ])
        mesh = TriangleMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
        pts = sample_mesh_points(mesh, 40_000, np.random.default_rng(1))
        frac = (pts[:, 0] > 2.5).mean()
        sigma = np.sqrt(0.75 * 0.25 / 40_000)
        assert abs(frac - 0.75) < 3 * sigma

    def test_sphere_mean_radius(self, sphere_mesh):
        pts = sample_mesh_points(sphere_mesh, 50_000, np.random.default_rng(2))
        mean_r = np.linalg.norm(pts, axis=1).mean()
        assert abs(mean_r - 0.5) / 0.5 < 0.005

    def test_deterministic_given_seed(self, sphere_mesh):
        p1 = sample_mesh_points(sphere_mesh, 100, np.random.default_rng(3))
        p2 = sample_mesh_points(sphere_mesh, 100, np.random.default_rng(3))
        assert np.array_equal(p1, p2)


def _brute_metrics(pred, gt, threshold):
    d = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=2)
    d_pred = d.min(axis=1)
    d_gt = d.min(axis=0)
    prec = (d_pred <= threshold).mean()
    recall = (d_gt <= threshold).mean()
    f = 2 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0
    return d_pred.mean(), d_gt.mean(), prec, recall, f


class TestEvaluate:
    def test_identity_clouds(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(-1, 1, (500, 3))
        rep = evaluate(pts, pts.copy())
        assert rep.acc == 0.0 and rep.comp == 0.0
        assert rep.prec == rep.recall == rep.fscore == 1.0

    def test_shifted_cloud(self):
        # grid spacing far above the shift so every point's nearest neighbor
        # is its own shifted copy
        g = np.linspace(-1, 1, 7)
        gt = np.stack(np.meshgrid(g, g, g), axis=-1).reshape(-1, 3)
        pred = gt + np.array([0.03, 0.0, 0.0])
        rep = evaluate(pred, gt, threshold=0.05)
        assert rep.prec == 1.0 and rep.recall == 1.0
        assert rep.acc == pytest.approx(0.03, abs=1e-9)
        assert rep.comp == pytest.approx(0.03, abs=1e-9)
        assert rep.fscore == 1.0

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(6)
        pred = rng.uniform(-1, 1, (1000, 3))
        gt = rng.uniform(-1, 1, (1000, 3))
        rep = evaluate(pred, gt, threshold=0.05)
        acc, comp, prec, recall, f = _brute_metrics(pred, gt, 0.05)
        assert rep.acc == pytest.approx(acc, abs=1e-12)
        assert rep.comp == pytest.approx(comp, abs=1e-12)
        assert rep.prec == prec and rep.recall == recall
        assert rep.fscore == pytest.approx(f, abs=1e-12)

    def test_symmetry_acc_comp(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(-1, 1, (400, 3))
        b = rng.uniform(-1, 1, (300, 3))
        assert evaluate(a, b).acc == pytest.approx(evaluate(b, a).comp, abs=1e-12)
        assert evaluate(a, b).prec == pytest.approx(evaluate(b, a).recall, abs=1e-12)

    def test_empty_prediction(self):
        gt = np.random.default_rng(8).uniform(-1, 1, (100, 3))
        rep = evaluate(np.zeros((0, 3)), gt)
        assert np.isinf(rep.acc)
        assert rep.prec == rep.recall == rep.fscore == 0.0

    def test_crop_margin_drops_outliers(self):
        rng = np.random.default_rng(9)
        gt = rng.uniform(-1, 1, (500, 3))
        shell = 5.0 * rng.standard_normal((200, 3)) + 20.0
        pred = np.concatenate([gt, shell])
        rep_raw = evaluate(pred, gt, threshold=0.05)
        rep_crop = evaluate(pred, gt, threshold=0.05, crop_margin=0.1)
        assert rep_crop.prec == 1.0
        assert rep_raw.prec < 1.0

    def test_mesh_inputs_sampled(self, sphere_mesh):
        rep = evaluate(sphere_mesh, sphere_mesh, threshold=0.05, samples=20_000)
        assert rep.fscore > 0.999
        assert rep.acc < 0.02


class TestPlyIO:
    def test_round_trip(self, sphere_mesh, tmp_path):
        path = tmp_path / "m.ply"
        save_ply(sphere_mesh, path)
        loaded = load_ply(path)
        assert len(loaded.vertices) == len(sphere_mesh.vertices)
        assert np.array_equal(loaded.faces, sphere_mesh.faces)
        np.testing.assert_allclose(loaded.vertices, sphere_mesh.vertices, atol=1e-6)

    def test_header_is_binary_little_endian(self, tmp_path):
        mesh = TriangleMesh(np.array([[0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]]),
                            np.array([[0, 1, 2]]))
        path = tmp_path / "tri.ply"
        save_ply(mesh, path)
        head = path.read_bytes()[:200]
        assert b"format binary_little_endian 1.0" in head
        assert b"property list uchar int vertex_indices" in head

    def test_point_cloud_round_trip(self, tmp_path):
        cloud = TriangleMesh(np.random.default_rng(10).uniform(size=(50, 3)),
                             np.zeros((0, 3), dtype=np.int64))
        path = tmp_path / "cloud.ply"
        save_ply(cloud, path)
        loaded = load_ply(path)
        assert len(loaded.vertices) == 50 and len(loaded.faces) == 0
