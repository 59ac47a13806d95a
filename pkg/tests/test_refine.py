"""Crop-and-refine: crops vs brute force, identity-at-init, clipping."""
import numpy as np
import pytest

from pointmark.cascade import ConfigError
from pointmark.geometry import PointCloud, build_kdtree
from pointmark.refine import (
    RefineConfig,
    RefineParams,
    build_patches,
    crop_region,
    refine_all,
    refine_landmark,
    refine_loss,
)
from pointmark.tensorcore import Tape


def tiny_config(**kw):
    defaults = dict(k=16, depth=2, width=6, k_attention=4, pool_stride=4,
                    pool_group=4)
    defaults.update(kw)
    return RefineConfig(**defaults)


def brute_force_knn(points, q, k):
    d = points - q
    d2 = d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2
    keys = sorted(range(len(points)),
                  key=lambda i: (d2[i], points[i, 0], points[i, 1], points[i, 2], i))
    return np.array(keys[:k], dtype=np.int64)


class TestCropRegion:
    def test_whole_cloud_recentred(self):
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((20, 3))
        cloud = PointCloud(pts)
        coarse = np.array([0.5, -0.2, 0.1])
        local, info = crop_region(cloud, coarse, 20)
        assert info.shortfall == 0
        assert local.n == 20
        rebuilt = local.positions * info.radius + coarse
        assert np.allclose(np.sort(rebuilt, axis=0), np.sort(pts, axis=0),
                           atol=1e-12)

    def test_coarse_on_data_point(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((50, 3))
        cloud = PointCloud(pts)
        local, info = crop_region(cloud, pts[7], 5)
        assert info.indices[0] == 7
        assert np.allclose(local.positions[0], 0.0)

    def test_membership_matches_brute_force(self):
        rng = np.random.default_rng(2)
        pts = rng.standard_normal((300, 3))
        cloud = PointCloud(pts)
        tree = build_kdtree(pts)
        for _ in range(10):
            coarse = rng.standard_normal(3)
            _, info = crop_region(cloud, coarse, 32, tree)
            assert np.array_equal(info.indices, brute_force_knn(pts, coarse, 32))

    def test_k_exceeding_n_clamped(self):
        cloud = PointCloud(np.random.default_rng(3).standard_normal((10, 3)))
        local, info = crop_region(cloud, [0, 0, 0], 40)
        assert local.n == 10
        assert info.shortfall == 30

    def test_patch_radius_normalizes_to_one(self):
        rng = np.random.default_rng(4)
        cloud = PointCloud(rng.standard_normal((64, 3)))
        local, info = crop_region(cloud, rng.standard_normal(3), 16)
        norms = np.linalg.norm(local.positions, axis=1)
        assert abs(norms.max() - 1.0) <= 1e-12
        assert info.radius > 0

    def test_channels_carried_into_patch(self):
        rng = np.random.default_rng(5)
        cloud = PointCloud(rng.standard_normal((30, 3)),
                           normals=rng.standard_normal((30, 3)),
                           colors=rng.uniform(0, 1, (30, 3)))
        local, info = crop_region(cloud, [0.0, 0, 0], 8)
        assert np.array_equal(local.normals, cloud.normals[info.indices])
        assert np.array_equal(local.colors, cloud.colors[info.indices])


class TestRefineLandmark:
    def test_zero_head_zero_residual(self):
        rng = np.random.default_rng(6)
        cfg = tiny_config()
        params = RefineParams.create(rng, cfg)
        cloud = PointCloud(rng.standard_normal((16, 3)))
        local, _ = crop_region(cloud, [0.1, 0.2, 0.3], 16)
        residual = refine_landmark(Tape(), local, params, cfg)
        assert np.array_equal(residual.data, np.zeros(3))

    def test_patch_permutation_bit_identical(self):
        rng = np.random.default_rng(7)
        cfg = tiny_config()
        params = RefineParams.create(rng, cfg)
        params.head.w.data[:] = rng.standard_normal(params.head.w.shape) * 0.1
        pts = rng.standard_normal((16, 3))
        perm = rng.permutation(16)
        r1 = refine_landmark(Tape(), PointCloud(pts), params, cfg)
        r2 = refine_landmark(Tape(), PointCloud(pts[perm]), params, cfg)
        assert np.array_equal(r1.data, r2.data)

    def test_residual_norm_clipped(self):
        rng = np.random.default_rng(8)
        cfg = tiny_config(residual_clip=0.25)
        params = RefineParams.create(rng, cfg)
        params.head.w.data[:] = rng.standard_normal(params.head.w.shape) * 50.0
        params.head.b.data[:] = [10.0, -4.0, 2.0]
        cloud = PointCloud(rng.standard_normal((16, 3)))
        local, _ = crop_region(cloud, [0.0, 0, 0], 16)
        residual = refine_landmark(Tape(), local, params, cfg)
        assert np.linalg.norm(residual.data) <= 0.25 + 1e-12


class TestRefineAll:
    def test_zero_residuals_identity(self):
        rng = np.random.default_rng(9)
        cfg = tiny_config()
        params = RefineParams.create(rng, cfg)
        cloud = PointCloud(rng.standard_normal((40, 3)))
        coarse = rng.standard_normal((5, 3)) * 0.5
        fine = refine_all(cloud, coarse, params, cfg)
        assert np.array_equal(fine, coarse)

    def test_displacement_bounded_by_clip_times_radius(self):
        rng = np.random.default_rng(10)
        cfg = tiny_config(residual_clip=0.2)
        params = RefineParams.create(rng, cfg)
        params.head.w.data[:] = rng.standard_normal(params.head.w.shape) * 30.0
        cloud = PointCloud(rng.standard_normal((64, 3)))
        coarse = rng.standard_normal((4, 3)) * 0.3
        tree = build_kdtree(cloud.positions)
        fine = refine_all(cloud, coarse, params, cfg, tree)
        for j in range(4):
            _, info = crop_region(cloud, coarse[j], cfg.k, tree)
            assert np.linalg.norm(fine[j] - coarse[j]) <= \
                0.2 * info.radius + 1e-12

    def test_plug_in_interface_any_coarse(self):
        # The refiner consumes only (cloud, coarse): arbitrary prediction
        # sources work.
        rng = np.random.default_rng(11)
        cfg = tiny_config()
        params = RefineParams.create(rng, cfg)
        cloud = PointCloud(rng.standard_normal((32, 3)))
        external_coarse = np.array([[0.0, 0, 0], [1.0, 1, 1], [-2.0, 0.5, 0.25]])
        fine = refine_all(cloud, external_coarse, params, cfg)
        assert fine.shape == (3, 3)
        assert np.all(np.isfinite(fine))


class TestRefineLoss:
    def test_zero_at_perfect_coarse_with_zero_init(self):
        rng = np.random.default_rng(12)
        cfg = tiny_config()
        params = RefineParams.create(rng, cfg)
        cloud = PointCloud(rng.standard_normal((32, 3)))
        coarse = rng.standard_normal((3, 3)) * 0.4
        patches = build_patches(cloud, coarse, coarse.copy(), cfg)
        loss = refine_loss(Tape(), patches, params, cfg)
        assert loss.item() == 0.0

    def test_positive_when_targets_differ(self):
        rng = np.random.default_rng(13)
        cfg = tiny_config()
        params = RefineParams.create(rng, cfg)
        cloud = PointCloud(rng.standard_normal((32, 3)))
        coarse = rng.standard_normal((3, 3)) * 0.4
        targets = coarse + 0.05
        patches = build_patches(cloud, coarse, targets, cfg)
        loss = refine_loss(Tape(), patches, params, cfg)
        expected = np.mean(np.sum((coarse - targets) ** 2, axis=1))
        assert abs(loss.item() - expected) <= 1e-12

    def test_gradients_flow_to_head(self):
        rng = np.random.default_rng(14)
        cfg = tiny_config()
        params = RefineParams.create(rng, cfg)
        cloud = PointCloud(rng.standard_normal((32, 3)))
        coarse = rng.standard_normal((2, 3)) * 0.4
        patches = build_patches(cloud, coarse, coarse + 0.05, cfg)
        tape = Tape()
        loss = refine_loss(tape, patches, params, cfg)
        tape.backward(loss)
        g = tape.grad(params.head.b)
        assert g.shape == (3,)
        assert np.any(g != 0.0)


class TestConfigValidation:
    def test_min_k(self):
        with pytest.raises(ConfigError):
            RefineConfig(k=8)

    def test_doc_round_trip(self):
        cfg = tiny_config()
        doc = cfg.to_doc()
        back = RefineConfig.from_doc(doc)
        assert back.k == cfg.k and back.depth == cfg.depth

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            RefineConfig.from_doc({"k": 64, "mystery": True})
