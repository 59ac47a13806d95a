"""Per-landmark local refinement: crop k nearest points, regress a residual.

For each coarse landmark a KD-tree crop of the k nearest points is
recentered at the coarse position and rescaled by its patch radius; stacked
decoder+pooling stages and a zero-initialized head regress a residual in
patch units, clipped in norm. At initialization the refinement is exactly
the identity on the coarse predictions, so refinement never starts worse
than the coarse stage. The module consumes only (cloud, coarse landmarks):
any predictor's output can feed it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import geometry
from .attention import FeatureCloud, Linear, VectorAttentionParams, vector_attention
from .cascade import CascadeConfig, ConfigError, build_plan, input_columns, \
    pooling_layer
from .geometry import KdTree, PointCloud
from .tensorcore import Tape, Tensor


@dataclass
class RefineConfig:
    """Vertical-cascade hyperparameters; k defaults to n/4 at the call site."""

    k: int = 1024
    depth: int = 4
    width: int = 64
    residual_clip: float = 0.25
    k_attention: int = 16
    pool_stride: int = 4
    pool_group: int = 16
    feature_dim: int = 3

    def __post_init__(self):
        if self.k < 16:
            raise ConfigError("refine k must be >= 16")
        if self.depth < 1:
            raise ConfigError("refine depth must be >= 1")
        if self.residual_clip <= 0:
            raise ConfigError("residual_clip must be positive")

    def stage_config(self) -> CascadeConfig:
        """Equivalent cascade config for the patch decoder stack."""
        return CascadeConfig(stages=self.depth, width=self.width,
                             k_attention=self.k_attention,
                             pool_stride=self.pool_stride,
                             pool_group=self.pool_group,
                             landmarks=1, feature_dim=self.feature_dim,
                             sample_count=self.k)

    def to_doc(self) -> dict:
        return {"k": self.k, "depth": self.depth, "width": self.width,
                "residual_clip": self.residual_clip}

    @classmethod
    def from_doc(cls, doc: dict, feature_dim: int = 3) -> "RefineConfig":
        known = {"k", "depth", "width", "residual_clip"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown refine config keys: {sorted(unknown)}")
        return cls(k=doc.get("k", 1024), depth=doc.get("depth", 4),
                   width=doc.get("width", 64),
                   residual_clip=doc.get("residual_clip", 0.25),
                   feature_dim=feature_dim)


@dataclass
class RefineStage:
    attn: VectorAttentionParams
    pool_mlp: Linear


@dataclass
class RefineParams:
    """Shared across all J landmarks; the residual head starts at zero."""

    encoder: Linear
    stages: List[RefineStage]
    head: Linear                 # width -> 3, zero-init

    @classmethod
    def create(cls, rng, config: RefineConfig) -> "RefineParams":
        c = config.width
        stages = [RefineStage(VectorAttentionParams.create(rng, c, c),
                              Linear.create(rng, 3 + c, c, "he"))
                  for _ in range(config.depth)]
        head = Linear(Tensor(np.zeros((c, 3)), requires_grad=True),
                      Tensor(np.zeros(3), requires_grad=True))
        return cls(Linear.create(rng, config.feature_dim, c, "he"), stages, head)

    def named(self):
        yield from self.encoder.named("refine.encoder")
        for s, stage in enumerate(self.stages):
            yield from stage.attn.named(f"refine.stage{s}.attn")
            yield from stage.pool_mlp.named(f"refine.stage{s}.pool_mlp")
        yield from self.head.named("refine.head")

    def as_dict(self) -> dict:
        return dict(self.named())

    @classmethod
    def from_dict(cls, params: dict, config: RefineConfig) -> "RefineParams":
        def lin(prefix):
            return Linear(params[f"{prefix}.w"], params[f"{prefix}.b"])
        stages = [RefineStage(
            VectorAttentionParams.from_params(params, f"refine.stage{s}.attn"),
            lin(f"refine.stage{s}.pool_mlp"),
        ) for s in range(config.depth)]
        return cls(lin("refine.encoder"), stages, lin("refine.head"))

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named())


# ---------------------------------------------------------------------- crops


@dataclass
class CropInfo:
    indices: np.ndarray
    radius: float
    shortfall: int


def crop_region(cloud: PointCloud, coarse, k: int,
                tree: Optional[KdTree] = None):
    """The k nearest points to a coarse landmark, recentered and rescaled.

    Positions are expressed relative to the coarse point and divided by the
    patch radius (max local norm), which is retained in CropInfo. k > n
    clamps with the shortfall reported.
    """
    coarse = np.asarray(coarse, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(coarse)):
        raise geometry.GeometryError("coarse landmark is not finite")
    if tree is None:
        tree = geometry.build_kdtree(cloud.positions)
    result = geometry.knn_query(tree, coarse, k)
    idx = result.indices
    rel = cloud.positions[idx] - coarse
    norms = np.sqrt(rel[:, 0] ** 2 + rel[:, 1] ** 2 + rel[:, 2] ** 2)
    radius = float(norms.max())
    if radius == 0.0:
        radius = 1.0
    local = PointCloud(rel / radius,
                       normals=None if cloud.normals is None else cloud.normals[idx],
                       colors=None if cloud.colors is None else cloud.colors[idx])
    return local, CropInfo(idx, radius, result.shortfall)


# -------------------------------------------------------------------- forward


def refine_landmark(tape: Tape, local: PointCloud, params: RefineParams,
                    config: RefineConfig, plan=None) -> Tensor:
    """Residual (3,) in patch units: decoder stack, global pool, clipped head."""
    stage_config = config.stage_config()
    if plan is None:
        plan = build_plan(local.positions, stage_config)
    cols = input_columns(local, config.feature_dim)
    feats = tape.linear_relu(Tensor(cols), params.encoder.w, params.encoder.b)
    fc = FeatureCloud(local.positions, feats)
    for stage, stage_plan in zip(params.stages, plan.stages):
        feats = vector_attention(tape, fc.features, stage_plan.positions,
                                 stage_plan.attn_idx, stage.attn,
                                 stage_plan.attn_scatter)
        fc = FeatureCloud(stage_plan.positions, feats)
        fc = pooling_layer(tape, fc, stage.pool_mlp, stage_config, stage_plan)
    pooled = tape.reshape(tape.reduce(fc.features, 0, "max"), (1, -1))
    residual = tape.reshape(tape.linear(pooled, params.head.w, params.head.b), (3,))
    return tape.clip_by_norm(residual, config.residual_clip)


def refine_all(cloud: PointCloud, coarse: np.ndarray, params: RefineParams,
               config: RefineConfig, tree: Optional[KdTree] = None) -> np.ndarray:
    """Refine every coarse landmark; one KD-tree query per landmark."""
    coarse = np.asarray(coarse, dtype=np.float64)
    if tree is None:
        tree = geometry.build_kdtree(cloud.positions)
    fine = np.empty_like(coarse)
    for j in range(coarse.shape[0]):
        local, info = crop_region(cloud, coarse[j], config.k, tree)
        tape = Tape()
        residual = refine_landmark(tape, local, params, config)
        fine[j] = coarse[j] + info.radius * residual.data
    return fine


# ------------------------------------------------------------------- training


@dataclass
class RefinePatch:
    """Precomputed training patch for one (cloud, landmark) pair."""

    local: PointCloud
    radius: float
    coarse: np.ndarray
    target: np.ndarray           # ground-truth landmark, same frame as coarse
    plan: object = None


def build_patches(cloud: PointCloud, coarse: np.ndarray, targets: np.ndarray,
                  config: RefineConfig, with_plans: bool = True) -> List[RefinePatch]:
    """Crop and plan every landmark's patch for one cloud."""
    tree = geometry.build_kdtree(cloud.positions)
    patches = []
    stage_config = config.stage_config()
    for j in range(coarse.shape[0]):
        local, info = crop_region(cloud, coarse[j], config.k, tree)
        plan = build_plan(local.positions, stage_config) if with_plans else None
        patches.append(RefinePatch(local, info.radius, coarse[j].copy(),
                                   targets[j].copy(), plan))
    return patches


def refine_loss(tape: Tape, patches: List[RefinePatch], params: RefineParams,
                config: RefineConfig) -> Tensor:
    """Mean squared Euclidean error of the fine predictions of one cloud."""
    total = None
    for patch in patches:
        residual = refine_landmark(tape, patch.local, params, config, patch.plan)
        fine = tape.elementwise(tape.scale(residual, patch.radius),
                                Tensor(patch.coarse), "add")
        diff = tape.elementwise(fine, Tensor(patch.target), "sub")
        sq = tape.reduce(tape.elementwise(diff, diff, "hadamard"), None, "sum")
        total = sq if total is None else tape.elementwise(total, sq, "add")
    return tape.scale(total, 1.0 / len(patches))


def train_refine(samples, coarse_predictions, config: RefineConfig, train,
                 log=None):
    """Train the refiner against a frozen predictor's coarse outputs.

    samples carry normalized clouds and normalized ground truth; patches are
    cropped once (the frozen coarse predictions are deterministic) and
    reused every epoch. Returns (RefineParams, history dict).
    """
    from .tensorcore import AdamState, Workspace, adam_step

    log = log or (lambda m: None)
    rng = np.random.default_rng([train.seed, 0xf1])
    params = RefineParams.create(rng, config)
    params_dict = params.as_dict()

    all_patches = []
    for sample, coarse in zip(samples, coarse_predictions):
        all_patches.append(build_patches(sample.cloud, coarse,
                                         sample.gt_normalized, config))

    state = AdamState(lr=train.learning_rate)
    workspace = Workspace()
    history = {"losses": []}
    for epoch in range(train.epochs):
        order = np.random.default_rng([train.seed, epoch, 0xf2]).permutation(
            len(samples))
        losses = []
        for lo in range(0, len(order), train.batch_size):
            batch = order[lo:lo + train.batch_size]
            grads: dict = {}
            scale = 1.0 / len(batch)
            for si in batch:
                tape = Tape(workspace)
                loss = refine_loss(tape, all_patches[si], params, config)
                value = loss.item()
                if not math.isfinite(value):
                    raise RuntimeError(f"non-finite refine loss at epoch {epoch}, "
                                       f"sample {samples[si].name}")
                losses.append(value)
                tape.backward(loss)
                for path, tensor in params_dict.items():
                    g = tape.grad(tensor) * scale
                    if path in grads:
                        grads[path] += g
                    else:
                        grads[path] = g
                tape.close()
            params_dict = adam_step(params_dict, grads, state)
            params = RefineParams.from_dict(params_dict, config)
        mean_loss = float(np.mean(losses))
        history["losses"].append(mean_loss)
        if epoch % 5 == 0 or epoch == train.epochs - 1:
            log(f"refine epoch {epoch:3d}: loss {mean_loss:.6f}")
    return params, history
