"""Geometry kernels vs brute-force / exhaustive oracles."""
import numpy as np
import pytest

from pointmark.geometry import (
    GeometryError,
    KdTree,
    PointCloud,
    build_kdtree,
    farthest_point_sample,
    group_neighbor_indices,
    group_neighbors,
    knn_bulk,
    knn_query,
    normalize,
)


def brute_force_knn(points, q, k):
    """Independent linear-scan oracle with the documented tie-break."""
    d = points - q
    d2 = d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2
    keys = sorted(
        range(len(points)),
        key=lambda i: (d2[i], points[i, 0], points[i, 1], points[i, 2], i),
    )
    return np.array(keys[:k], dtype=np.int64)


class TestPointCloud:
    def test_rejects_empty(self):
        with pytest.raises(GeometryError):
            PointCloud(np.zeros((0, 3)))

    def test_rejects_nan(self):
        with pytest.raises(GeometryError):
            PointCloud(np.array([[0.0, 0.0, np.nan]]))

    def test_rejects_mismatched_normals(self):
        with pytest.raises(GeometryError):
            PointCloud(np.zeros((2, 3)), normals=np.zeros((3, 3)))


class TestNormalize:
    def test_two_point_symmetry(self):
        cloud = PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
        out, tf = normalize(cloud)
        assert np.allclose(tf.centroid, [1.0, 0, 0])
        assert tf.scale == 1.0
        assert np.allclose(out.positions, [[-1.0, 0, 0], [1.0, 0, 0]])

    def test_already_normalized_identity(self):
        cloud = PointCloud(np.array([[1.0, 0, 0], [-1.0, 0, 0],
                                     [0, 0.5, 0], [0, -0.5, 0]]))
        _, tf = normalize(cloud)
        assert np.allclose(tf.centroid, 0.0, atol=1e-15)
        assert abs(tf.scale - 1.0) <= 1e-15

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-50, 90, size=(200, 3))
        out, tf = normalize(PointCloud(pts))
        back = tf.invert(out.positions)
        assert np.max(np.abs(back - pts)) <= 1e-12

    def test_max_norm_is_one(self):
        rng = np.random.default_rng(1)
        out, _ = normalize(PointCloud(rng.standard_normal((100, 3)) * 7))
        norms = np.linalg.norm(out.positions, axis=1)
        assert abs(norms.max() - 1.0) <= 1e-12

    def test_degenerate_cloud_flagged(self):
        out, tf = normalize(PointCloud(np.ones((5, 3))))
        assert tf.degenerate
        assert tf.scale == 1.0
        assert np.allclose(out.positions, 0.0)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((64, 3))
        perm = rng.permutation(64)
        a, _ = normalize(PointCloud(pts))
        b, _ = normalize(PointCloud(pts[perm]))
        assert np.array_equal(a.positions[perm], b.positions)

    def test_preserves_normals_colors(self):
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((10, 3))
        nrm = rng.standard_normal((10, 3))
        col = rng.uniform(0, 1, (10, 3))
        out, _ = normalize(PointCloud(pts, normals=nrm, colors=col))
        assert np.array_equal(out.normals, nrm)
        assert np.array_equal(out.colors, col)


class TestFarthestPointSample:
    def test_unit_square_second_pick(self):
        # Corners of the unit square in z=0; seeding at (0,0,0) the greedy
        # max-min pick is the opposite corner (1,1,0).
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0]])
        idx = farthest_point_sample(pts, 2)
        # seed: farthest from centroid (0.5,0.5,0) is a tie between all 4
        # corners -> lexicographically smallest = (0,0,0) = index 0
        assert idx[0] == 0
        assert idx[1] == 3

    def test_m_equals_n(self):
        rng = np.random.default_rng(4)
        pts = rng.standard_normal((17, 3))
        idx = farthest_point_sample(pts, 17)
        assert sorted(idx) == list(range(17))

    def test_m_one_is_centroid_farthest(self):
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((40, 3))
        centroid = pts.mean(axis=0)
        d2 = ((pts - centroid) ** 2).sum(axis=1)
        idx = farthest_point_sample(pts, 1)
        assert np.allclose(d2[idx[0]], d2.max())

    def test_m_out_of_range(self):
        with pytest.raises(GeometryError):
            farthest_point_sample(np.zeros((3, 3)), 4)

    def test_greedy_max_min_property(self):
        # Exhaustive check: each pick maximizes min-distance to the prefix.
        rng = np.random.default_rng(6)
        pts = rng.standard_normal((48, 3))
        idx = farthest_point_sample(pts, 20)
        for step in range(1, 20):
            prefix = pts[idx[:step]]
            mind = np.full(len(pts), np.inf)
            for p in prefix:
                mind = np.minimum(mind, ((pts - p) ** 2).sum(axis=1))
            mind[idx[:step]] = -np.inf
            assert mind[idx[step]] == mind.max()

    def test_permutation_invariant(self):
        rng = np.random.default_rng(7)
        pts = rng.standard_normal((60, 3))
        perm = rng.permutation(60)
        inv = np.empty(60, dtype=np.int64)
        inv[perm] = np.arange(60)
        a = farthest_point_sample(pts, 15)
        b = farthest_point_sample(pts[perm], 15)
        assert np.array_equal(inv[a], b)


class TestKdTree:
    def test_single_point(self):
        tree = build_kdtree(np.array([[1.0, 2.0, 3.0]]))
        assert tree.axis[0] == -1
        assert knn_query(tree, [0, 0, 0], 1).indices.tolist() == [0]

    def test_collinear_splits_on_line_axis(self):
        pts = np.zeros((32, 3))
        pts[:, 1] = np.arange(32, dtype=np.float64)
        tree = build_kdtree(pts)
        assert tree.axis[0] == 1

    def test_every_index_in_exactly_one_leaf(self):
        rng = np.random.default_rng(8)
        tree = build_kdtree(rng.standard_normal((500, 3)))
        assert sorted(tree.perm.tolist()) == list(range(500))
        leaves = np.flatnonzero(tree.axis == -1)
        assert all(tree.hi[lv] - tree.lo[lv] <= 16 for lv in leaves)

    def test_half_space_constraints(self):
        rng = np.random.default_rng(9)
        pts = rng.standard_normal((300, 3))
        tree = build_kdtree(pts)

        def walk(node, constraints):
            if tree.axis[node] < 0:
                for i in tree.perm[tree.lo[node]:tree.hi[node]]:
                    for axis, split, side in constraints:
                        if side == "le":
                            assert pts[i, axis] <= split
                        else:
                            assert pts[i, axis] >= split
                return
            a, s = tree.axis[node], tree.split[node]
            walk(tree.left[node], constraints + [(a, s, "le")])
            walk(tree.right[node], constraints + [(a, s, "ge")])

        walk(0, [])

    def test_query_on_data_point_is_first(self):
        rng = np.random.default_rng(10)
        pts = rng.standard_normal((100, 3))
        tree = build_kdtree(pts)
        res = knn_query(tree, pts[42], 5)
        assert res.indices[0] == 42

    def test_k_equals_n_sorted_by_distance(self):
        rng = np.random.default_rng(11)
        pts = rng.standard_normal((30, 3))
        tree = build_kdtree(pts)
        q = rng.standard_normal(3)
        res = knn_query(tree, q, 30)
        d2 = ((pts[res.indices] - q) ** 2).sum(axis=1)
        assert np.all(np.diff(d2) >= 0)
        assert sorted(res.indices.tolist()) == list(range(30))

    def test_k_clamped_with_shortfall(self):
        tree = build_kdtree(np.random.default_rng(12).standard_normal((5, 3)))
        res = knn_query(tree, [0, 0, 0], 9)
        assert len(res.indices) == 5
        assert res.shortfall == 4

    @pytest.mark.parametrize("k", [1, 16, 256])
    def test_matches_brute_force(self, k):
        rng = np.random.default_rng(13 + k)
        pts = rng.uniform(-1, 1, size=(3000, 3))
        tree = build_kdtree(pts)
        for _ in range(10):
            q = rng.uniform(-1.2, 1.2, size=3)
            got = knn_query(tree, q, k).indices
            want = brute_force_knn(pts, q, k)
            assert np.array_equal(got, want)

    def test_duplicate_points_handled(self):
        pts = np.array([[0.0, 0, 0]] * 5 + [[1.0, 0, 0]] * 5)
        tree = build_kdtree(pts)
        res = knn_query(tree, [0.1, 0, 0], 7)
        assert np.array_equal(np.sort(res.indices[:5]), np.arange(5))

    def test_engines_bit_identical(self):
        # Large-k scan engine and tree traversal agree exactly.
        rng = np.random.default_rng(14)
        pts = rng.standard_normal((256, 3))
        tree = build_kdtree(pts)
        from pointmark.geometry import _knn_scan, _knn_tree
        for _ in range(20):
            q = rng.standard_normal(3)
            assert np.array_equal(_knn_scan(pts, q, 40), _knn_tree(tree, q, 40))


class TestKnnBulk:
    def test_matches_single_queries(self):
        rng = np.random.default_rng(15)
        pts = rng.standard_normal((400, 3))
        tree = build_kdtree(pts)
        queries = rng.standard_normal((25, 3))
        bulk = knn_bulk(pts, queries, 16)
        for r, q in enumerate(queries):
            assert np.array_equal(bulk[r], knn_query(tree, q, 16).indices)

    def test_tie_rows_exact(self):
        # A symmetric grid creates massive distance ties; the fallback path
        # must still match the brute-force oracle.
        g = np.arange(4, dtype=np.float64)
        pts = np.array([[x, y, z] for x in g for y in g for z in g])
        queries = np.array([[1.5, 1.5, 1.5], [0.0, 0.0, 0.0], [2.0, 1.0, 1.0]])
        bulk = knn_bulk(pts, queries, 8)
        for r, q in enumerate(queries):
            assert np.array_equal(bulk[r], brute_force_knn(pts, q, 8))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(16)
        pts = rng.standard_normal((128, 3))
        perm = rng.permutation(128)
        inv = np.empty(128, dtype=np.int64)
        inv[perm] = np.arange(128)
        q = rng.standard_normal((10, 3))
        a = knn_bulk(pts, q, 9)
        b = knn_bulk(pts[perm], q, 9)
        assert np.array_equal(inv[a], b)


class TestGroupNeighbors:
    def test_k1_group_is_center_itself(self):
        rng = np.random.default_rng(17)
        pts = rng.standard_normal((30, 3))
        centers = np.array([3, 17, 29])
        c, rel, feats, padded = group_neighbors(pts, None, centers, k=1)
        assert np.array_equal(c, pts[centers])
        assert np.allclose(rel, 0.0)
        assert not padded

    def test_relative_norms_bounded_by_kth(self):
        rng = np.random.default_rng(18)
        pts = rng.standard_normal((200, 3))
        centers = farthest_point_sample(pts, 20)
        _, rel, _, _ = group_neighbors(pts, None, centers, k=8)
        norms = np.linalg.norm(rel, axis=2)
        kth = norms[:, -1]
        assert np.all(norms <= kth[:, None] + 1e-15)

    def test_membership_matches_brute_force(self):
        rng = np.random.default_rng(19)
        pts = rng.standard_normal((512, 3))
        centers = farthest_point_sample(pts, 32)
        idx, _ = group_neighbor_indices(pts, centers, 16)
        for r, ci in enumerate(centers):
            want = brute_force_knn(pts, pts[ci], 16)
            assert np.array_equal(idx[r], want)

    def test_padding_when_cloud_small(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
        idx, padded = group_neighbor_indices(pts, np.array([1]), 5)
        assert padded
        assert idx.shape == (1, 5)
        assert np.all(idx[0, 3:] == 1)

    def test_features_gathered(self):
        rng = np.random.default_rng(20)
        pts = rng.standard_normal((50, 3))
        feats = rng.standard_normal((50, 4))
        centers = np.array([0, 10])
        idx, _ = group_neighbor_indices(pts, centers, 6)
        _, _, gf, _ = group_neighbors(pts, feats, centers, 6)
        assert np.array_equal(gf, feats[idx])
