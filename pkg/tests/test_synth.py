"""Generator determinism, analytic landmark placement, corpus round trips."""
import numpy as np
import pytest

from pointmark import synth
from pointmark.cloudio import load_manifest, parse_landmarks, parse_ply
from pointmark.synth import (
    LANDMARK_NAMES,
    SynthConfig,
    generate,
    generate_corpus,
    generate_sample,
)


def capsule_surface_distance(point, p0, p1, radius):
    axis = p1 - p0
    t = np.clip(np.dot(point - p0, axis) / np.dot(axis, axis), 0.0, 1.0)
    return abs(np.linalg.norm(point - (p0 + t * axis)) - radius)


def small_config(**kw):
    defaults = dict(points_per_cloud=512, noise_sigma=0.003)
    defaults.update(kw)
    return SynthConfig(**defaults)


class TestGenerate:
    def test_deterministic(self):
        cfg = small_config()
        c1, m1 = generate(cfg, seed=42)
        c2, m2 = generate(cfg, seed=42)
        assert np.array_equal(c1.positions, c2.positions)
        assert np.array_equal(c1.normals, c2.normals)
        assert np.array_equal(c1.colors, c2.colors)
        assert np.array_equal(m1.coords, m2.coords)

    def test_seed_sensitivity(self):
        cfg = small_config()
        c1, _ = generate(cfg, seed=1)
        c2, _ = generate(cfg, seed=2)
        assert not np.array_equal(c1.positions, c2.positions)

    def test_eleven_landmarks(self):
        _, marks = generate(small_config(), seed=0)
        assert marks.count == 11
        assert marks.names == LANDMARK_NAMES

    def test_point_count_and_channels(self):
        cloud, _ = generate(small_config(points_per_cloud=700), seed=3)
        assert cloud.n == 700
        assert cloud.normals.shape == (700, 3)
        assert cloud.colors.shape == (700, 3)
        assert np.all((cloud.colors >= 0) & (cloud.colors <= 1))

    def test_channels_optional(self):
        cloud, _ = generate(small_config(with_normals=False, with_colors=False),
                            seed=3)
        assert cloud.normals is None and cloud.colors is None

    def test_normals_unit_length(self):
        cloud, _ = generate(small_config(), seed=4)
        norms = np.linalg.norm(cloud.normals, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-9)

    def test_landmarks_on_primitive_surfaces(self):
        # Zero noise, canonical transform: every landmark must sit on its
        # primitive's surface to 1e-9 by construction.
        cfg = small_config(noise_sigma=0.0, yaw_range=0.0, scale_range=(1.0, 1.0),
                           pose_jitter=0.0)
        _, marks = generate(cfg, seed=5)
        by_name = dict(zip(marks.names, marks.coords))

        for name in ("head_top", "head_left", "head_right", "head_front", "chin"):
            rel = (by_name[name] - synth._HEAD_CENTER) / synth._HEAD_AXES
            assert abs(np.linalg.norm(rel) - 1.0) <= 1e-9, name

        for side, arm in (("left", synth._ARM_L), ("right", synth._ARM_R)):
            p0, p1, r, _ = arm
            assert capsule_surface_distance(by_name[f"shoulder_{side}"], p0, p1,
                                            r) <= 1e-9

        for side, leg in (("left", synth._LEG_L), ("right", synth._LEG_R)):
            p0, p1, r, _ = leg
            for kind in ("knee_front", "knee_side"):
                assert capsule_surface_distance(by_name[f"{kind}_{side}"], p0, p1,
                                                r) <= 1e-9

    def test_landmarks_inside_inflated_bbox(self):
        cfg = small_config(points_per_cloud=2048)
        for seed in range(5):
            cloud, marks = generate(cfg, seed=seed)
            pad = 3 * cfg.noise_sigma
            lo = cloud.positions.min(axis=0) - pad
            hi = cloud.positions.max(axis=0) + pad
            assert np.all(marks.coords >= lo) and np.all(marks.coords <= hi)

    def test_mirror_symmetry_in_canonical_pose(self):
        cfg = small_config(yaw_range=0.0, scale_range=(1.0, 1.0), pose_jitter=0.0)
        _, marks = generate(cfg, seed=6)
        by_name = dict(zip(marks.names, marks.coords))
        pairs = [("head_left", "head_right"), ("shoulder_left", "shoulder_right"),
                 ("knee_front_left", "knee_front_right"),
                 ("knee_side_left", "knee_side_right")]
        mirror = np.array([-1.0, 1.0, 1.0])
        for left, right in pairs:
            assert np.max(np.abs(by_name[left] * mirror - by_name[right])) <= 1e-9
        for center in ("head_top", "head_front", "chin"):
            assert abs(by_name[center][0]) <= 1e-9

    def test_transform_consistency(self):
        # Emitted cloud == scale * R(yaw) applied to the canonical generation.
        cfg = small_config()
        sample = generate_sample(cfg, seed=7)
        canonical = generate_sample(small_config(yaw_range=0.0,
                                                 scale_range=(1.0, 1.0)), seed=7)
        c, s = np.cos(sample.yaw), np.sin(sample.yaw)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        rebuilt = sample.scale * (canonical.cloud.positions @ rot.T)
        assert np.array_equal(rebuilt, sample.cloud.positions)
        rebuilt_marks = sample.scale * (canonical.landmarks.coords @ rot.T)
        assert np.array_equal(rebuilt_marks, sample.landmarks.coords)


class TestCorpus:
    def test_corpus_round_trip(self, tmp_path):
        cfg = small_config(points_per_cloud=300)
        manifest_path = generate_corpus(cfg, count=5, seed=9, out_dir=tmp_path)
        manifest = load_manifest(manifest_path)
        assert len(manifest) == 5
        assert manifest.landmark_count == 11
        assert manifest.feature_dimension == 10
        for i in range(5):
            cloud = manifest.load_cloud(i)
            marks = manifest.load_landmarks(i)
            assert cloud.n == 300
            assert marks.count == 11

    def test_rerun_identical_bytes(self, tmp_path):
        cfg = small_config(points_per_cloud=280)
        p1 = generate_corpus(cfg, count=3, seed=11, out_dir=tmp_path / "a")
        p2 = generate_corpus(cfg, count=3, seed=11, out_dir=tmp_path / "b")
        for name in ("manifest.json", "cloud_000.ply", "cloud_002.landmarks.json"):
            assert (p1.parent / name).read_bytes() == (p2.parent / name).read_bytes()

    def test_different_seeds_disjoint_geometry(self, tmp_path):
        cfg = small_config(points_per_cloud=280)
        generate_corpus(cfg, count=2, seed=1, out_dir=tmp_path / "a")
        generate_corpus(cfg, count=2, seed=2, out_dir=tmp_path / "b")
        a = parse_ply((tmp_path / "a" / "cloud_000.ply").read_bytes())
        b = parse_ply((tmp_path / "b" / "cloud_000.ply").read_bytes())
        assert not np.array_equal(a.positions, b.positions)

    def test_emitted_files_reparse_losslessly(self, tmp_path):
        cfg = small_config(points_per_cloud=260)
        generate_corpus(cfg, count=2, seed=13, out_dir=tmp_path)
        for i in range(2):
            ply_bytes = (tmp_path / f"cloud_{i:03d}.ply").read_bytes()
            from pointmark.cloudio import write_ply
            assert write_ply(parse_ply(ply_bytes), binary=True) == ply_bytes
            lm_bytes = (tmp_path / f"cloud_{i:03d}.landmarks.json").read_bytes()
            from pointmark.cloudio import write_landmarks
            assert write_landmarks(parse_landmarks(lm_bytes)) == lm_bytes


class TestConfigValidation:
    def test_too_few_points(self):
        with pytest.raises(ValueError):
            SynthConfig(points_per_cloud=17)

    def test_negative_noise(self):
        with pytest.raises(ValueError):
            SynthConfig(noise_sigma=-0.1)

    def test_wrong_landmark_count(self):
        with pytest.raises(ValueError):
            SynthConfig(landmark_count=7)
