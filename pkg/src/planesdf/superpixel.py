"""Unsupervised pseudo-plane segment generation.

Greedy graph-based segmentation on the 8-connected pixel grid: edges are
sorted by color distance (stable, so ties resolve by construction order)
and two components merge when the edge weight does not exceed either
component's internal difference plus scale / |component|.  Components
smaller than min_size are absorbed in a final pass.  Segments that survive
an area threshold are treated as pseudo-planes downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage


@dataclass(frozen=True)
class SegmentInfo:
    id: int
    area: int
    bbox: tuple  # (row_min, col_min, row_max, col_max), inclusive


@dataclass
class PlaneSegmentSet:
    """Per-image pixel partition filtered to pseudo-plane candidates.

    label_map is (H, W) int32 with -1 for pixels that belong to no retained
    segment; retained ids are dense from 0.
    """

    label_map: np.ndarray
    segments: list
    view_id: int = -1

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def mask(self, seg_id: int) -> np.ndarray:
        return self.label_map == seg_id


def _build_edges(h: int, w: int):
    """Deterministic 8-connected edge list: per pixel E, S, SE, SW."""
    idx = np.arange(h * w).reshape(h, w)
    pairs = []
    pairs.append((idx[:, :-1].ravel(), idx[:, 1:].ravel()))       # east
    pairs.append((idx[:-1, :].ravel(), idx[1:, :].ravel()))       # south
    pairs.append((idx[:-1, :-1].ravel(), idx[1:, 1:].ravel()))    # south-east
    pairs.append((idx[:-1, 1:].ravel(), idx[1:, :-1].ravel()))    # south-west
    a = np.concatenate([p[0] for p in pairs])
    b = np.concatenate([p[1] for p in pairs])
    return a, b


class _UnionFind:
    def __init__(self, n: int, scale: float):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)
        self.threshold = np.full(n, scale, dtype=np.float64)

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:  # path compression
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def felzenszwalb_segment(image: np.ndarray, scale: float = 100.0, min_size: int = 50,
                         smoothing: float = 0.8) -> np.ndarray:
    """Segment an RGB image; returns an (H, W) int32 label map, labels dense.

    Deterministic for identical inputs: edge sorting is stable and the edge
    list is built in a fixed order.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None].repeat(3, axis=-1)
    if img.max() > 1.5:  # uint8-style input
        img = img / 255.0
    if img.size == 0:
        raise ValueError("image is empty")
    h, w = img.shape[:2]
    if smoothing > 0:
        img = np.stack(
            [ndimage.gaussian_filter(img[..., c], smoothing, mode="nearest") for c in range(3)],
            axis=-1,
        )

    a, b = _build_edges(h, w)
    flat = img.reshape(-1, 3)
    weights = np.sqrt(((flat[a] - flat[b]) ** 2).sum(axis=1))
    order = np.argsort(weights, kind="stable")

    uf = _UnionFind(h * w, scale)
    find, union = uf.find, uf.union
    threshold = uf.threshold
    size = uf.size
    for e in order:
        ra, rb = find(a[e]), find(b[e])
        if ra == rb:
            continue
        wgt = weights[e]
        if wgt <= threshold[ra] and wgt <= threshold[rb]:
            r = union(ra, rb)
            threshold[r] = wgt + scale / size[r]

    # absorb small components, lowest-weight (nearest-color) edges first
    for e in order:
        ra, rb = find(a[e]), find(b[e])
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            union(ra, rb)

    roots = np.fromiter((find(i) for i in range(h * w)), dtype=np.int64, count=h * w)
    _, labels = np.unique(roots, return_inverse=True)
    # renumber by first appearance in row-major order
    first = np.full(labels.max() + 1, -1, dtype=np.int64)
    next_id = 0
    remap = np.empty_like(first)
    for lab in labels:
        if first[lab] < 0:
            first[lab] = next_id
            next_id += 1
    remap = first
    return remap[labels].reshape(h, w).astype(np.int32)


def filter_pseudo_planes(labels: np.ndarray, min_area: int, view_id: int = -1) -> PlaneSegmentSet:
    """Keep segments with area >= min_area; reindex densely; drop the rest."""
    labels = np.asarray(labels)
    counts = np.bincount(labels.ravel())
    keep = np.where(counts >= max(min_area, 1))[0]
    out = np.full(labels.shape, -1, dtype=np.int32)
    segments = []
    for new_id, old_id in enumerate(keep):
        mask = labels == old_id
        out[mask] = new_id
        rows, cols = np.where(mask)
        segments.append(SegmentInfo(
            id=new_id,
            area=int(counts[old_id]),
            bbox=(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())),
        ))
    return PlaneSegmentSet(label_map=out, segments=segments, view_id=view_id)


def save_segment_cache(segset: PlaneSegmentSet, png_path, json_path) -> None:
    """16-bit PNG label map (label + 1; 0 = unlabeled) plus a JSON sidecar."""
    shifted = (segset.label_map + 1).astype(np.uint16)
    Image.fromarray(shifted, mode="I;16").save(png_path)
    sidecar = {
        "view_id": segset.view_id,
        "segments": [
            {"id": s.id, "area": s.area, "bbox": list(s.bbox)} for s in segset.segments
        ],
    }
    with open(json_path, "w") as f:
        json.dump(sidecar, f, indent=1)


def load_segment_cache(png_path, json_path) -> PlaneSegmentSet:
    shifted = np.asarray(Image.open(png_path), dtype=np.int32)
    with open(json_path) as f:
        sidecar = json.load(f)
    segments = [
        SegmentInfo(id=s["id"], area=s["area"], bbox=tuple(s["bbox"]))
        for s in sidecar["segments"]
    ]
    return PlaneSegmentSet(
        label_map=shifted - 1, segments=segments, view_id=sidecar["view_id"]
    )
