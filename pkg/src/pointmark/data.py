"""Dataset preparation shared by the training phases.

Each manifest entry becomes a LoadedSample: the cloud FPS-downsampled to the
model's sample count when larger (epoch-seeded), normalized, with the
normalization transform retained so predictions can be mapped back to
original units. Geometry plans are attached once per run because positions
are fixed across epochs for exact-size corpora.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .cascade import CascadeConfig, ForwardPlan, build_plan
from .cloudio import DatasetManifest
from .geometry import (
    NormalizationTransform,
    PointCloud,
    _argmax_tiebreak,
    _sq_dists,
    normalize,
)


@dataclass
class LoadedSample:
    name: str
    cloud: PointCloud                      # sampled + normalized
    transform: NormalizationTransform
    gt_original: np.ndarray                # (J, 3) in original units
    gt_normalized: np.ndarray              # (J, 3) in the normalized frame
    plan: Optional[ForwardPlan] = None
    raw_cloud: Optional[PointCloud] = None  # kept only when resampling applies


def seeded_fps(positions: np.ndarray, m: int, seed) -> np.ndarray:
    """Greedy max-min sample with a seeded random start point.

    Used only to downsample oversized clouds, where per-epoch variety is
    wanted; the deterministic centroid-seeded variant lives in geometry.
    """
    n = positions.shape[0]
    rng = np.random.default_rng(seed)
    selected = np.empty(m, dtype=np.int64)
    selected[0] = rng.integers(n)
    mind2 = _sq_dists(positions, positions[selected[0]])
    mind2[selected[0]] = -np.inf
    for step in range(1, m):
        pick = _argmax_tiebreak(mind2, positions)
        selected[step] = pick
        np.minimum(mind2, _sq_dists(positions, positions[pick]), out=mind2)
        mind2[pick] = -np.inf
    return selected


def prepare_sample(cloud: PointCloud, gt: np.ndarray, sample_count: int,
                   epoch_seed=0):
    """Downsample (if oversized) and normalize one cloud."""
    if cloud.n > sample_count:
        idx = seeded_fps(cloud.positions, sample_count, epoch_seed)
        cloud = PointCloud(cloud.positions[idx],
                           normals=None if cloud.normals is None
                           else cloud.normals[idx],
                           colors=None if cloud.colors is None
                           else cloud.colors[idx])
    normalized, transform = normalize(cloud)
    gt_norm = transform.apply(np.asarray(gt, dtype=np.float64))
    return normalized, transform, gt_norm


def load_samples(manifest: DatasetManifest, indices, config: CascadeConfig,
                 epoch_seed=0, keep_raw: bool = False) -> List[LoadedSample]:
    samples = []
    for i in indices:
        raw = manifest.load_cloud(i)
        gt = manifest.load_landmarks(i).coords
        cloud, transform, gt_norm = prepare_sample(raw, gt, config.sample_count,
                                                   epoch_seed=[epoch_seed, int(i)])
        needs_raw = keep_raw and raw.n > config.sample_count
        samples.append(LoadedSample(
            name=manifest.entries[i].subject or f"entry_{i}",
            cloud=cloud, transform=transform,
            gt_original=np.asarray(gt, dtype=np.float64),
            gt_normalized=gt_norm,
            raw_cloud=raw if needs_raw else None,
        ))
    return samples


def resample_epoch(samples: List[LoadedSample], config: CascadeConfig,
                   epoch_seed) -> None:
    """Re-draw the FPS view of oversized clouds for a new epoch (in place)."""
    for i, sample in enumerate(samples):
        if sample.raw_cloud is None:
            continue
        cloud, transform, gt_norm = prepare_sample(
            sample.raw_cloud, sample.gt_original, config.sample_count,
            epoch_seed=[epoch_seed, i])
        sample.cloud = cloud
        sample.transform = transform
        sample.gt_normalized = gt_norm
        sample.plan = None


def attach_plans(samples: List[LoadedSample], config: CascadeConfig) -> None:
    for sample in samples:
        if sample.plan is None:
            sample.plan = build_plan(sample.cloud.positions, config)
