"""Exact geometric kernels: normalization, farthest point sampling, KD-tree kNN.

Determinism rules used throughout:
- squared distances are always computed as dx*dx + dy*dy + dz*dz in that
  order, so every engine (tree traversal, vectorized scan) produces
  bit-identical values for the same point pair;
- neighbor order and all argmax selections break ties by
  (distance, x, y, z, input index), so results are invariant to input row
  permutation except on exact duplicate points;
- centroids are summed over per-axis sorted values, which makes them
  independent of row order as well.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np


class GeometryError(ValueError):
    """Invalid geometric input (bad sizes, non-finite coordinates)."""


# --------------------------------------------------------------------- types


@dataclass
class PointCloud:
    """n points with coordinates and optional per-point normals / colors."""

    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise GeometryError(f"positions must be (n, 3), got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise GeometryError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise GeometryError("positions contain non-finite values")
        for name in ("normals", "colors"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            if arr.shape != self.positions.shape:
                raise GeometryError(f"{name} must have shape {self.positions.shape}, "
                                    f"got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise GeometryError(f"{name} contain non-finite values")
            setattr(self, name, arr)

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass
class NormalizationTransform:
    """Recorded centering/scaling; invert() maps predictions back."""

    centroid: np.ndarray
    scale: float
    degenerate: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.centroid) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.centroid


class KnnResult(NamedTuple):
    indices: np.ndarray   # int64, ascending canonical order
    shortfall: int        # k - len(indices) when the cloud was too small


# ----------------------------------------------------------------- utilities


def stable_centroid(positions: np.ndarray) -> np.ndarray:
    """Mean position, independent of row order (sums sorted values)."""
    return np.array([np.sort(positions[:, a]).sum() for a in range(3)]) / len(positions)


def _sq_dists(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    dx = points[:, 0] - q[0]
    dy = points[:, 1] - q[1]
    dz = points[:, 2] - q[2]
    return dx * dx + dy * dy + dz * dz


def _argmax_tiebreak(values: np.ndarray, positions: np.ndarray) -> int:
    """Index of the maximum; ties go to the lexicographically smallest point."""
    mx = values.max()
    cand = np.flatnonzero(values == mx)
    if cand.size == 1:
        return int(cand[0])
    p = positions[cand]
    order = np.lexsort((cand, p[:, 2], p[:, 1], p[:, 0]))
    return int(cand[order[0]])


def _canonical_order(d2: np.ndarray, idx: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Sort candidate indices by (distance, x, y, z, index)."""
    p = positions[idx]
    order = np.lexsort((idx, p[:, 2], p[:, 1], p[:, 0], d2))
    return idx[order]


# -------------------------------------------------------------- normalization


def normalize(cloud: PointCloud):
    """Center at the origin and scale so the farthest point has norm 1.

    Returns (normalized cloud, transform). A degenerate cloud (all points
    identical) keeps scale 1 and is flagged on the transform.
    """
    centroid = stable_centroid(cloud.positions)
    centered = cloud.positions - centroid
    d2 = centered[:, 0] ** 2 + centered[:, 1] ** 2 + centered[:, 2] ** 2
    max_d2 = d2.max()
    if max_d2 == 0.0:
        transform = NormalizationTransform(centroid, 1.0, degenerate=True)
        return PointCloud(centered, cloud.normals, cloud.colors), transform
    scale = float(np.sqrt(max_d2))
    transform = NormalizationTransform(centroid, scale)
    return PointCloud(centered / scale, cloud.normals, cloud.colors), transform


# ------------------------------------------------------ farthest point sample


def farthest_point_sample(positions: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min subsample of m distinct point indices.

    The seed is the point farthest from the (order-independent) centroid;
    each following pick maximizes the minimum distance to the selected set.
    Ties break to the lexicographically smallest coordinate triple.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"farthest_point_sample: m={m} out of range for n={n}")
    centroid = stable_centroid(positions)
    seed = _argmax_tiebreak(_sq_dists(positions, centroid), positions)
    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed
    mind2 = _sq_dists(positions, positions[seed])
    mind2[seed] = -np.inf
    for step in range(1, m):
        pick = _argmax_tiebreak(mind2, positions)
        selected[step] = pick
        np.minimum(mind2, _sq_dists(positions, positions[pick]), out=mind2)
        mind2[pick] = -np.inf
    return selected


# -------------------------------------------------------------------- KD-tree


_LEAF_SIZE = 16


class KdTree:
    """Static median-split KD-tree over an indexed point set.

    Nodes live in flat arrays; leaves hold ranges of a permutation of the
    input indices, so every input index lands in exactly one leaf. Splits
    use the widest-extent axis.
    """

    def __init__(self, points: np.ndarray):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise GeometryError(f"KdTree expects (n, 3) points, got {points.shape}")
        if points.shape[0] < 1:
            raise GeometryError("KdTree needs at least one point")
        self.points = points
        self.axis: list = []
        self.split: list = []
        self.left: list = []
        self.right: list = []
        self.lo: list = []
        self.hi: list = []
        self.perm = np.empty(points.shape[0], dtype=np.int64)
        self._pos = 0
        self._build(np.arange(points.shape[0], dtype=np.int64))
        self.axis = np.array(self.axis, dtype=np.int64)
        self.split = np.array(self.split, dtype=np.float64)
        self.left = np.array(self.left, dtype=np.int64)
        self.right = np.array(self.right, dtype=np.int64)
        self.lo = np.array(self.lo, dtype=np.int64)
        self.hi = np.array(self.hi, dtype=np.int64)

    def _new_node(self) -> int:
        self.axis.append(-1)
        self.split.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.lo.append(-1)
        self.hi.append(-1)
        return len(self.axis) - 1

    def _build(self, indices: np.ndarray) -> int:
        node = self._new_node()
        if indices.size <= _LEAF_SIZE:
            self.lo[node] = self._pos
            self.perm[self._pos:self._pos + indices.size] = indices
            self._pos += indices.size
            self.hi[node] = self._pos
            return node
        pts = self.points[indices]
        extents = pts.max(axis=0) - pts.min(axis=0)
        axis = int(np.argmax(extents))
        order = np.argsort(pts[:, axis], kind="stable")
        mid = indices.size // 2
        self.axis[node] = axis
        self.split[node] = float(pts[order[mid], axis])
        self.left[node] = self._build(indices[order[:mid]])
        self.right[node] = self._build(indices[order[mid:]])
        return node


def build_kdtree(points: np.ndarray) -> KdTree:
    return KdTree(points)


def _knn_tree(tree: KdTree, q: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest via tree traversal with boundary-tie collection."""
    pts = tree.points
    heap: list = []            # max-heap of -d2, tracks the k best distances
    kth = np.inf
    cand_d2: list = []
    cand_idx: list = []

    def visit(node):
        nonlocal kth
        axis = tree.axis[node]
        if axis < 0:
            idx = tree.perm[tree.lo[node]:tree.hi[node]]
            d2 = _sq_dists(pts[idx], q)
            for d, i in zip(d2, idx):
                if d <= kth:
                    cand_d2.append(d)
                    cand_idx.append(i)
                    heapq.heappush(heap, -d)
                    if len(heap) > k:
                        heapq.heappop(heap)
                    if len(heap) == k:
                        kth = -heap[0]
            return
        split = tree.split[node]
        delta = q[axis] - split
        near, far = (tree.left[node], tree.right[node]) if delta < 0 else \
                    (tree.right[node], tree.left[node])
        visit(near)
        if delta * delta <= kth:
            visit(far)

    visit(0)
    d2 = np.array(cand_d2)
    idx = np.array(cand_idx, dtype=np.int64)
    keep = d2 <= kth
    return _canonical_order(d2[keep], idx[keep], pts)[:k]


def _knn_scan(points: np.ndarray, q: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest by full vectorized scan (same canonical order)."""
    d2 = _sq_dists(points, q)
    if k >= points.shape[0]:
        return _canonical_order(d2, np.arange(points.shape[0], dtype=np.int64), points)
    part = np.argpartition(d2, k - 1)
    kth = d2[part[:k]].max()
    keep = np.flatnonzero(d2 <= kth)
    return _canonical_order(d2[keep], keep.astype(np.int64), points)[:k]


def knn_query(tree: KdTree, query, k: int) -> KnnResult:
    """k nearest points to query, ascending by (distance, x, y, z, index).

    k > n clamps to n and reports the shortfall. Large k relative to n
    routes to a vectorized scan; both engines are bit-identical.
    """
    if k < 1:
        raise GeometryError(f"knn_query: k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    n = tree.points.shape[0]
    kk = min(k, n)
    if kk > n // 8:
        idx = _knn_scan(tree.points, q, kk)
    else:
        idx = _knn_tree(tree, q, kk)
    return KnnResult(idx, k - kk)


# ------------------------------------------------------------------- bulk kNN


def knn_bulk(points: np.ndarray, queries: np.ndarray, k: int,
             chunk: int = 512) -> np.ndarray:
    """Exact k nearest for many queries at once; rows in canonical order.

    Vectorized argpartition fast path with an exact fallback for rows that
    contain distance ties, so the result always matches knn_query.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise GeometryError(f"knn_bulk: k={k} out of range for n={n}")
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    all_idx = np.arange(n, dtype=np.int64)
    for lo in range(0, queries.shape[0], chunk):
        qs = queries[lo:lo + chunk]
        dx = points[None, :, 0] - qs[:, 0, None]
        dy = points[None, :, 1] - qs[:, 1, None]
        dz = points[None, :, 2] - qs[:, 2, None]
        d2 = dx * dx + dy * dy + dz * dz
        if k == n:
            for r in range(qs.shape[0]):
                out[lo + r] = _canonical_order(d2[r], all_idx, points)
            continue
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        for r in range(qs.shape[0]):
            row = d2[r]
            sel = part[r]
            sel_d2 = row[sel]
            kth = sel_d2.max()
            # Ties inside or at the selection boundary need the full keys.
            if np.unique(sel_d2).size < k or (row <= kth).sum() > k:
                keep = np.flatnonzero(row <= kth).astype(np.int64)
                out[lo + r] = _canonical_order(row[keep], keep, points)[:k]
            else:
                order = np.argsort(sel_d2, kind="stable")
                out[lo + r] = sel[order]
    return out


# ------------------------------------------------------------------- grouping


def group_neighbor_indices(positions: np.ndarray, center_indices: np.ndarray,
                           k: int):
    """Neighbor index matrix for grouping: (centers, k) rows into positions.

    When n < k the rows are padded by repeating the center index; the second
    return value flags that padding happened.
    """
    positions = np.asarray(positions, dtype=np.float64)
    center_indices = np.asarray(center_indices, dtype=np.int64)
    n = positions.shape[0]
    kk = min(k, n)
    idx = knn_bulk(positions, positions[center_indices], kk)
    if kk == k:
        return idx, False
    pad = np.repeat(center_indices[:, None], k - kk, axis=1)
    return np.concatenate([idx, pad], axis=1), True


def group_neighbors(positions: np.ndarray, features: Optional[np.ndarray],
                    center_indices: np.ndarray, k: int = 16):
    """Group the k nearest points around each center.

    Returns (centers (c, 3), relative positions (c, k, 3), grouped features
    (c, k, d) or None, padded flag). Relative positions are neighbor minus
    center.
    """
    center_indices = np.asarray(center_indices, dtype=np.int64)
    idx, padded = group_neighbor_indices(positions, center_indices, k)
    centers = positions[center_indices]
    grouped_pos = positions[idx] - centers[:, None, :]
    grouped_feat = None if features is None else np.asarray(features)[idx]
    return centers, grouped_pos, grouped_feat, padded
