"""Procedural humanoid point clouds with analytic ground-truth landmarks.

Bodies are assembled from capsules (torso, neck, limbs) and an ellipsoid
head in a canonical frame: z up, feet at z = 0, head apex at z = 1, facing
+y. Landmarks sit exactly on primitive surfaces and rotate with their limb
under pose jitter, so with zero noise every landmark is on-surface by
construction. A seeded yaw/scale transform is applied identically to points
and landmarks; surface noise is added in the body frame before the
transform, so the emitted cloud is exactly scale * R(yaw) * (body + noise).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .cloudio import (
    DatasetManifest,
    LandmarkSet,
    ManifestEntry,
    save_manifest,
    write_landmarks,
    write_ply,
)
from .geometry import PointCloud

LANDMARK_NAMES = [
    "head_top", "head_left", "head_right", "head_front", "chin",
    "shoulder_left", "shoulder_right",
    "knee_front_left", "knee_front_right",
    "knee_side_left", "knee_side_right",
]


@dataclass
class SynthConfig:
    points_per_cloud: int = 4096
    noise_sigma: float = 0.005        # fraction of body height
    yaw_range: float = 0.35           # radians, uniform in [-yaw, +yaw]
    scale_range: Tuple[float, float] = (0.9, 1.1)
    pose_jitter: float = 0.08         # limb swing, radians
    landmark_count: int = 11
    with_normals: bool = True
    with_colors: bool = True

    def __post_init__(self):
        if self.points_per_cloud < 256:
            raise ValueError("points_per_cloud must be >= 256")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.landmark_count != len(LANDMARK_NAMES):
            raise ValueError(f"generator produces exactly {len(LANDMARK_NAMES)} "
                             f"landmarks")
        if not self.scale_range[0] <= self.scale_range[1]:
            raise ValueError("scale_range must be (lo, hi) with lo <= hi")


@dataclass
class SynthSample:
    cloud: PointCloud
    landmarks: LandmarkSet
    yaw: float
    scale: float


# ------------------------------------------------------------- body template

# Capsule: (p0, p1, radius, color, joint) where joint is the rotation pivot
# for pose jitter (None = rigid part).
_SKIN = np.array([224, 172, 105]) / 255.0
_SHIRT = np.array([60, 90, 170]) / 255.0
_SLEEVE = np.array([70, 100, 180]) / 255.0
_PANTS = np.array([50, 50, 60]) / 255.0

_HEAD_CENTER = np.array([0.0, 0.0, 0.90])
_HEAD_AXES = np.array([0.075, 0.09, 0.10])

_TORSO = (np.array([0.0, 0.0, 0.50]), np.array([0.0, 0.0, 0.82]), 0.13, _SHIRT)
_NECK = (np.array([0.0, 0.0, 0.80]), np.array([0.0, 0.0, 0.845]), 0.04, _SKIN)
_LEG_L = (np.array([-0.09, 0.0, 0.50]), np.array([-0.09, 0.0, 0.04]), 0.055, _PANTS)
_LEG_R = (np.array([0.09, 0.0, 0.50]), np.array([0.09, 0.0, 0.04]), 0.055, _PANTS)
_ARM_L = (np.array([-0.20, 0.0, 0.80]), np.array([-0.27, 0.02, 0.46]), 0.04, _SLEEVE)
_ARM_R = (np.array([0.20, 0.0, 0.80]), np.array([0.27, 0.02, 0.46]), 0.04, _SLEEVE)

# Sampling share per part (torso absorbs rounding remainders).
_PART_FRACTIONS = {
    "torso": 0.30, "head": 0.14, "neck": 0.02,
    "leg_l": 0.16, "leg_r": 0.16, "arm_l": 0.11, "arm_r": 0.11,
}

_SQ2 = np.sqrt(0.5)


def _rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def _rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def _sample_capsule(rng, p0, p1, radius, count):
    """Area-weighted surface samples of a capsule; returns points, normals."""
    axis = p1 - p0
    length = np.linalg.norm(axis)
    axis_u = axis / length
    # orthonormal frame around the axis
    helper = np.array([1.0, 0, 0]) if abs(axis_u[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(axis_u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis_u, e1)
    p_cyl = length / (length + 2.0 * radius)
    u = rng.random(count)
    pts = np.empty((count, 3))
    nrm = np.empty((count, 3))
    cyl = u < p_cyl
    n_cyl = int(cyl.sum())
    t = rng.random(n_cyl) * length
    theta = rng.random(n_cyl) * 2 * np.pi
    radial = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    pts[cyl] = p0 + t[:, None] * axis_u + radius * radial
    nrm[cyl] = radial
    n_cap = count - n_cyl
    d = rng.standard_normal((n_cap, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    top = d @ axis_u > 0
    centers = np.where(top[:, None], p1, p0)
    pts[~cyl] = centers + radius * d
    nrm[~cyl] = d
    return pts, nrm


def _sample_ellipsoid(rng, center, axes, count):
    d = rng.standard_normal((count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = center + d * axes
    nrm = d / axes
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pts, nrm


def _rotate_part(p0, p1, marks, angle):
    """Swing a capsule (and its attached landmarks) about p0 around x."""
    rot = _rot_x(angle)
    p1r = p0 + rot @ (p1 - p0)
    marks_r = [p0 + rot @ (m - p0) for m in marks]
    return p1r, marks_r


def _build_body(rng_pose, pose_jitter):
    """Posed capsule list, head spec, and the 11 landmarks (body frame)."""
    angles = rng_pose.uniform(-pose_jitter, pose_jitter, size=4) if pose_jitter > 0 \
        else np.zeros(4)

    chin = _HEAD_CENTER + np.array([0.0, _HEAD_AXES[1] * _SQ2, -_HEAD_AXES[2] * _SQ2])
    head_marks = {
        "head_top": _HEAD_CENTER + [0, 0, _HEAD_AXES[2]],
        "head_left": _HEAD_CENTER + [-_HEAD_AXES[0], 0, 0],
        "head_right": _HEAD_CENTER + [_HEAD_AXES[0], 0, 0],
        "head_front": _HEAD_CENTER + [0, _HEAD_AXES[1], 0],
        "chin": chin,
    }

    parts = {"torso": _TORSO, "neck": _NECK}
    marks = dict(head_marks)

    for name, base, angle, mark_fn in (
        ("leg_l", _LEG_L, angles[0], "knee"),
        ("leg_r", _LEG_R, angles[1], "knee"),
        ("arm_l", _ARM_L, angles[2], "shoulder"),
        ("arm_r", _ARM_R, angles[3], "shoulder"),
    ):
        p0, p1, radius, color = base
        side = "left" if name.endswith("_l") else "right"
        if mark_fn == "knee":
            mid = 0.5 * (p0 + p1)
            front = mid + np.array([0.0, radius, 0.0])
            out = mid + np.array([-radius if side == "left" else radius, 0.0, 0.0])
            p1r, (front_r, out_r) = _rotate_part(p0, p1, [front, out], angle)
            marks[f"knee_front_{side}"] = front_r
            marks[f"knee_side_{side}"] = out_r
        else:
            top = p0 + np.array([0.0, 0.0, radius])
            p1r, (top_r,) = _rotate_part(p0, p1, [top], angle)
            marks[f"shoulder_{side}"] = top_r
        parts[name] = (p0, p1r, radius, color)

    landmark_array = np.stack([marks[n] for n in LANDMARK_NAMES])
    return parts, landmark_array


def _allocate_counts(total: int) -> dict:
    counts = {name: int(total * frac) for name, frac in _PART_FRACTIONS.items()}
    counts["torso"] += total - sum(counts.values())
    return counts


def generate_sample(config: SynthConfig, seed: int) -> SynthSample:
    """One posed, scaled, yawed body with landmarks; deterministic per seed."""
    ss = np.random.SeedSequence(seed)
    rng_pose, rng_surface, rng_noise, rng_xform = \
        (np.random.default_rng(s) for s in ss.spawn(4))

    parts, landmarks = _build_body(rng_pose, config.pose_jitter)
    counts = _allocate_counts(config.points_per_cloud)

    pts_list, nrm_list, col_list = [], [], []
    for name in _PART_FRACTIONS:  # fixed order for determinism
        count = counts[name]
        if name == "head":
            pts, nrm = _sample_ellipsoid(rng_surface, _HEAD_CENTER, _HEAD_AXES, count)
            color = _SKIN
        else:
            p0, p1, radius, color = parts[name]
            pts, nrm = _sample_capsule(rng_surface, p0, p1, radius, count)
        pts_list.append(pts)
        nrm_list.append(nrm)
        col_list.append(np.tile(color, (count, 1)))
    points = np.concatenate(pts_list)
    normals = np.concatenate(nrm_list)
    colors = np.concatenate(col_list)

    if config.noise_sigma > 0:
        points = points + rng_noise.normal(0.0, config.noise_sigma, points.shape)
    else:
        rng_noise.normal(0.0, 1.0, points.shape)  # keep stream alignment

    # Both transform draws always consume the stream so that configs which
    # disable yaw or scale still see identical pose/surface/noise samples.
    yaw = float(rng_xform.uniform(-config.yaw_range, config.yaw_range))
    scale = float(rng_xform.uniform(*config.scale_range))
    rot = _rot_z(yaw)
    points = scale * (points @ rot.T)
    landmarks = scale * (landmarks @ rot.T)
    normals = normals @ rot.T

    cloud = PointCloud(points,
                       normals=normals if config.with_normals else None,
                       colors=colors if config.with_colors else None)
    return SynthSample(cloud, LandmarkSet(landmarks, names=list(LANDMARK_NAMES)),
                       yaw=yaw, scale=scale)


def generate(config: SynthConfig, seed: int):
    """(PointCloud, LandmarkSet) for one seeded body."""
    sample = generate_sample(config, seed)
    return sample.cloud, sample.landmarks


def generate_corpus(config: SynthConfig, count: int, seed: int, out_dir) -> Path:
    """Write `count` clouds + annotations + a manifest; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    child_seeds = np.random.SeedSequence(seed).generate_state(count)
    entries: List[ManifestEntry] = []
    for i in range(count):
        sample = generate_sample(config, int(child_seeds[i]))
        cloud_name = f"cloud_{i:03d}.ply"
        marks_name = f"cloud_{i:03d}.landmarks.json"
        (out_dir / cloud_name).write_bytes(write_ply(sample.cloud, binary=True))
        (out_dir / marks_name).write_bytes(write_landmarks(sample.landmarks))
        entries.append(ManifestEntry(cloud_name, marks_name, f"subject_{i:03d}"))
    if config.with_normals and config.with_colors:
        feature_dimension = 10
    elif config.with_normals:
        feature_dimension = 6
    else:
        feature_dimension = 3
    manifest = DatasetManifest(entries, landmark_count=config.landmark_count,
                               feature_dimension=feature_dimension,
                               base_dir=out_dir)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
