"""Horizontal cascade: encoder, stacked decoder+pooling stages, stage heads.

Every stage supervises its own J x 3 regression head; the final stage's
output is the coarse landmark prediction. Geometry (neighbor indices, FPS
selections, grouping) depends only on point positions, never on parameters,
so it can be precomputed once per cloud into a ForwardPlan and reused
across training steps with bit-identical results.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import geometry
from .attention import (
    FeatureCloud,
    Linear,
    VectorAttentionParams,
    attention_offsets,
    neighbor_indices,
    vector_attention,
)
from .geometry import PointCloud
from .kernels import build_scatter_plan
from .tensorcore import Tape, Tensor


class ConfigError(ValueError):
    """Invalid model configuration."""


@dataclass
class CascadeConfig:
    """Architecture hyperparameters of the horizontal cascade."""

    stages: int = 4              # M
    width: int = 128             # uniform channel width
    k_attention: int = 16
    pool_stride: int = 4
    pool_group: int = 16
    landmarks: int = 11          # J
    feature_dim: int = 3         # d in {3, 6, 10}
    sample_count: int = 4096     # n

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError("stages (M) must be >= 1")
        if self.feature_dim not in (3, 6, 10):
            raise ConfigError(f"feature_dim must be 3, 6 or 10, got {self.feature_dim}")
        for name in ("width", "k_attention", "pool_stride", "pool_group",
                     "landmarks", "sample_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def widths(self) -> List[int]:
        return [self.width] * self.stages

    def stage_point_counts(self) -> List[int]:
        """Point count entering each stage (after the previous pooling)."""
        counts = []
        n = self.sample_count
        for _ in range(self.stages):
            counts.append(n)
            n = math.ceil(n / self.pool_stride)
        return counts

    def to_doc(self) -> dict:
        return {"n": self.sample_count, "d": self.feature_dim, "M": self.stages,
                "width": self.width, "k_att": self.k_attention,
                "stride": self.pool_stride, "group": self.pool_group,
                "J": self.landmarks}

    @classmethod
    def from_doc(cls, doc: dict) -> "CascadeConfig":
        known = {"n", "d", "M", "width", "k_att", "stride", "group", "J"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(stages=doc.get("M", 4), width=doc.get("width", 128),
                   k_attention=doc.get("k_att", 16), pool_stride=doc.get("stride", 4),
                   pool_group=doc.get("group", 16), landmarks=doc.get("J", 11),
                   feature_dim=doc.get("d", 3), sample_count=doc.get("n", 4096))


# ------------------------------------------------------------------ parameters


@dataclass
class StageParams:
    attn: VectorAttentionParams
    pool_mlp: Linear             # (3 + c) -> c, shared across neighbors
    head1: Linear                # c -> c
    head2: Linear                # c -> J*3


@dataclass
class CptParams:
    encoder: Linear              # d -> c
    stages: List[StageParams]

    @classmethod
    def create(cls, rng, config: CascadeConfig) -> "CptParams":
        c = config.width
        encoder = Linear.create(rng, config.feature_dim, c, "he")
        stages = []
        for _ in range(config.stages):
            stages.append(StageParams(
                attn=VectorAttentionParams.create(rng, c, c),
                pool_mlp=Linear.create(rng, 3 + c, c, "he"),
                head1=Linear.create(rng, c, c, "he"),
                head2=Linear.create(rng, c, 3 * config.landmarks, "xavier"),
            ))
        return cls(encoder, stages)

    def named(self):
        yield from self.encoder.named("encoder")
        for s, stage in enumerate(self.stages):
            yield from stage.attn.named(f"stage{s}.attn")
            yield from stage.pool_mlp.named(f"stage{s}.pool_mlp")
            yield from stage.head1.named(f"stage{s}.head1")
            yield from stage.head2.named(f"stage{s}.head2")

    def as_dict(self) -> dict:
        return dict(self.named())

    @classmethod
    def from_dict(cls, params: dict, config: CascadeConfig) -> "CptParams":
        def lin(prefix):
            return Linear(params[f"{prefix}.w"], params[f"{prefix}.b"])
        stages = [StageParams(
            attn=VectorAttentionParams.from_params(params, f"stage{s}.attn"),
            pool_mlp=lin(f"stage{s}.pool_mlp"),
            head1=lin(f"stage{s}.head1"),
            head2=lin(f"stage{s}.head2"),
        ) for s in range(config.stages)]
        return cls(lin("encoder"), stages)

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named())


# ------------------------------------------------------------------- planning


@dataclass
class StagePlan:
    """Cached geometry for one stage over a fixed point set."""

    positions: np.ndarray        # (n, 3) points entering the stage
    attn_idx: np.ndarray         # (n, k) self-inclusive neighbors
    attn_scatter: tuple
    fps_idx: np.ndarray          # (m,) pooling centers within this stage
    group_idx: np.ndarray        # (m, g) grouping neighbors
    group_scatter: tuple


@dataclass
class ForwardPlan:
    stages: List[StagePlan] = field(default_factory=list)


def build_plan(positions: np.ndarray, config: CascadeConfig) -> ForwardPlan:
    """Precompute all neighbor/sampling structure for one cloud."""
    plan = ForwardPlan()
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    for _ in range(config.stages):
        n = pos.shape[0]
        attn_idx = neighbor_indices(pos, config.k_attention)
        m = math.ceil(n / config.pool_stride)
        fps_idx = geometry.farthest_point_sample(pos, m)
        group_idx, _ = geometry.group_neighbor_indices(pos, fps_idx,
                                                       config.pool_group)
        plan.stages.append(StagePlan(
            positions=pos,
            attn_idx=attn_idx.astype(np.int32),
            attn_scatter=build_scatter_plan(attn_idx.ravel(), n),
            fps_idx=fps_idx.astype(np.int32),
            group_idx=group_idx.astype(np.int32),
            group_scatter=build_scatter_plan(group_idx.ravel(), n),
        ))
        pos = pos[fps_idx]
    return plan


# ------------------------------------------------------------------- forward


def input_columns(cloud: PointCloud, feature_dim: int) -> np.ndarray:
    """Assemble the (n, d) encoder input per the feature dimension.

    d=3: coordinates; d=6: + normals; d=10: + colors and a constant channel
    (the paper's 10-dimensional setting counts one channel beyond the nine
    geometric/color values).
    """
    cols = [cloud.positions]
    if feature_dim >= 6:
        if cloud.normals is None:
            raise ConfigError("feature_dim >= 6 requires normals")
        cols.append(cloud.normals)
    if feature_dim == 10:
        if cloud.colors is None:
            raise ConfigError("feature_dim 10 requires colors")
        cols.append(cloud.colors)
        cols.append(np.ones((cloud.n, 1)))
    return np.ascontiguousarray(np.concatenate(cols, axis=1))


def encode(tape: Tape, cloud: PointCloud, params: CptParams,
           config: CascadeConfig) -> FeatureCloud:
    """Pointwise encoder MLP: (n, d) columns -> (n, width) features."""
    cols = input_columns(cloud, config.feature_dim)
    feats = tape.linear_relu(Tensor(cols), params.encoder.w, params.encoder.b)
    return FeatureCloud(cloud.positions, feats)


def pooling_layer(tape: Tape, fc: FeatureCloud, pool_mlp: Linear,
                  config: CascadeConfig,
                  stage_plan: Optional[StagePlan] = None) -> FeatureCloud:
    """FPS to ceil(n/stride) centers, group, shared MLP, max-pool per group."""
    n = fc.n
    if stage_plan is None:
        m = math.ceil(n / config.pool_stride)
        fps_idx = geometry.farthest_point_sample(fc.positions, m)
        group_idx, _ = geometry.group_neighbor_indices(fc.positions, fps_idx,
                                                       config.pool_group)
        scatter = None
    else:
        fps_idx = stage_plan.fps_idx
        group_idx = stage_plan.group_idx
        scatter = stage_plan.group_scatter
    m, g = group_idx.shape
    centers = fc.positions[fps_idx]
    rel = fc.positions[group_idx] - centers[:, None, :]
    rel_flat = Tensor(np.ascontiguousarray(rel.reshape(-1, 3)))
    gathered = tape.gather_rows(fc.features, group_idx.reshape(-1), scatter)
    mixed = tape.concat_cols(rel_flat, gathered)
    per_neighbor = tape.linear_relu(mixed, pool_mlp.w, pool_mlp.b)
    grouped = tape.reshape(per_neighbor, (m, g, per_neighbor.shape[1]))
    pooled = tape.reduce(grouped, 1, "max")
    return FeatureCloud(np.ascontiguousarray(centers), pooled)


def stage_head(tape: Tape, fc: FeatureCloud, stage: StageParams,
               landmarks: int) -> Tensor:
    """Global max-pool, two FC layers, reshape to (J, 3)."""
    pooled = tape.reshape(tape.reduce(fc.features, 0, "max"), (1, -1))
    hidden = tape.linear_relu(pooled, stage.head1.w, stage.head1.b)
    flat = tape.linear(hidden, stage.head2.w, stage.head2.b)
    return tape.reshape(flat, (landmarks, 3))


def cpt_forward(tape: Tape, cloud: PointCloud, params: CptParams,
                config: CascadeConfig,
                plan: Optional[ForwardPlan] = None) -> List[Tensor]:
    """All M stage predictions; the last one is the coarse output."""
    if plan is None:
        plan = build_plan(cloud.positions, config)
    fc = encode(tape, cloud, params, config)
    preds = []
    for stage_params, stage_plan in zip(params.stages, plan.stages):
        feats = vector_attention(tape, fc.features, stage_plan.positions,
                                 stage_plan.attn_idx, stage_params.attn,
                                 stage_plan.attn_scatter)
        fc = FeatureCloud(stage_plan.positions, feats)
        fc = pooling_layer(tape, fc, stage_params.pool_mlp, config, stage_plan)
        preds.append(stage_head(tape, fc, stage_params, config.landmarks))
    return preds


def m2se_loss(tape: Tape, preds: List[Tensor], gt) -> Tensor:
    """Multistage MSE: (1/J) sum over stages and landmarks of squared error."""
    gt_t = gt if isinstance(gt, Tensor) else Tensor(gt)
    total = None
    for pred in preds:
        if pred.shape != gt_t.shape:
            raise ConfigError(f"prediction shape {pred.shape} != ground truth "
                              f"{gt_t.shape}")
        diff = tape.elementwise(pred, gt_t, "sub")
        sq = tape.elementwise(diff, diff, "hadamard")
        stage_sum = tape.reduce(sq, None, "sum")
        total = stage_sum if total is None else tape.elementwise(total, stage_sum,
                                                                 "add")
    return tape.scale(total, 1.0 / gt_t.shape[0])


# -------------------------------------------------------------- config file IO


def save_model_config(path, cascade: CascadeConfig, refine_doc: dict = None) -> None:
    doc = {"model": cascade.to_doc()}
    if refine_doc is not None:
        doc["refine"] = refine_doc
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return CascadeConfig.from_doc(doc["model"]), doc.get("refine")
