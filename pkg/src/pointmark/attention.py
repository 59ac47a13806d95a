"""Local vector attention decoder layer for point features.

Per point i with neighbors idx(i): x_i = FC1(f_i), Q = FC2(x_i) broadcast
over neighbors, K/V gathered from FC3(x)/FC4(x) at the neighbor indices,
P = positional MLP of the coordinate offsets (center minus neighbor), and
the output is out_proj(sum_j softmax_j(Q - K + P) * (V + P)) + x_i with the
softmax running over the neighbor axis independently per channel. Each
point's neighbor list contains the point itself (distance zero), which also
covers the single-point degenerate case.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .tensorcore import Tape, Tensor, init_param


@dataclass
class Linear:
    """One fully connected layer's weights."""

    w: Tensor
    b: Tensor

    @classmethod
    def create(cls, rng, d_in: int, d_out: int, scheme: str = "he") -> "Linear":
        return cls(init_param(rng, (d_in, d_out), scheme),
                   init_param(rng, (d_out,), "zero"))

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b

    def load(self, params: dict, prefix: str) -> "Linear":
        return Linear(params[f"{prefix}.w"], params[f"{prefix}.b"])


@dataclass
class VectorAttentionParams:
    """The five FC blocks of one decoder layer plus the output projection."""

    fc1: Linear        # feature embedding, d_in -> c
    fc2: Linear        # query, c -> c
    fc3: Linear        # key, c -> c
    fc4: Linear        # value, c -> c
    fc5a: Linear       # positional MLP, 3 -> c (rectified)
    fc5b: Linear       # positional MLP, c -> c
    out_proj: Linear   # c -> c

    @classmethod
    def create(cls, rng, d_in: int, c: int) -> "VectorAttentionParams":
        return cls(
            fc1=Linear.create(rng, d_in, c, "xavier"),
            fc2=Linear.create(rng, c, c, "xavier"),
            fc3=Linear.create(rng, c, c, "xavier"),
            fc4=Linear.create(rng, c, c, "xavier"),
            fc5a=Linear.create(rng, 3, c, "he"),
            fc5b=Linear.create(rng, c, c, "xavier"),
            out_proj=Linear.create(rng, c, c, "xavier"),
        )

    _FIELDS = ("fc1", "fc2", "fc3", "fc4", "fc5a", "fc5b", "out_proj")

    def named(self, prefix: str):
        for name in self._FIELDS:
            yield from getattr(self, name).named(f"{prefix}.{name}")

    @classmethod
    def from_params(cls, params: dict, prefix: str):
        return cls(**{name: Linear(params[f"{prefix}.{name}.w"],
                                   params[f"{prefix}.{name}.b"])
                      for name in cls._FIELDS})


@dataclass
class FeatureCloud:
    """Row-aligned positions (n, 3) and learned features (n, d')."""

    positions: np.ndarray
    features: Tensor

    def __post_init__(self):
        if self.positions.shape[0] != self.features.shape[0]:
            raise ValueError(f"positions {self.positions.shape} and features "
                             f"{self.features.shape} are not row-aligned")

    @property
    def n(self) -> int:
        return self.positions.shape[0]


def neighbor_indices(positions: np.ndarray, k: int) -> np.ndarray:
    """Self-inclusive k nearest neighbors of every point; self-padded if n < k."""
    n = positions.shape[0]
    kk = min(k, n)
    idx = geometry.knn_bulk(positions, positions, kk)
    if kk < k:
        pad = np.repeat(np.arange(n, dtype=idx.dtype)[:, None], k - kk, axis=1)
        idx = np.concatenate([idx, pad], axis=1)
    return idx


def attention_offsets(positions: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Positional-encoding inputs: center minus neighbor, flattened (n*k, 3)."""
    offs = positions[:, None, :] - positions[idx]
    return np.ascontiguousarray(offs.reshape(-1, 3))


def positional_encoding(tape: Tape, center_positions: np.ndarray,
                        neighbor_positions: np.ndarray,
                        params: VectorAttentionParams) -> Tensor:
    """P = FC5(center - neighbors) as an (n, k, c) tensor (two-layer MLP)."""
    n, k, _ = neighbor_positions.shape
    offsets = center_positions[:, None, :] - neighbor_positions
    return positional_encoding_from_offsets(
        tape, np.ascontiguousarray(offsets.reshape(-1, 3)), params, n, k)


def positional_encoding_from_offsets(tape: Tape, offsets_flat: np.ndarray,
                                     params: VectorAttentionParams,
                                     n: int, k: int) -> Tensor:
    hidden = tape.linear_relu(Tensor(offsets_flat), params.fc5a.w, params.fc5a.b)
    flat = tape.linear(hidden, params.fc5b.w, params.fc5b.b)
    return tape.reshape(flat, (n, k, flat.shape[1]))


def vector_attention(tape: Tape, features: Tensor, positions: np.ndarray,
                     idx: np.ndarray, params: VectorAttentionParams,
                     scatter_plan=None) -> Tensor:
    """One attention block: embed, aggregate over neighbors, project, residual."""
    n, k = idx.shape
    x = tape.linear(features, params.fc1.w, params.fc1.b)
    q = tape.linear(x, params.fc2.w, params.fc2.b)
    keys = tape.linear(x, params.fc3.w, params.fc3.b)
    values = tape.linear(x, params.fc4.w, params.fc4.b)
    pos = positional_encoding_from_offsets(
        tape, attention_offsets(positions, idx), params, n, k)
    agg = tape.attention_combine(q, keys, values, pos, idx, scatter_plan)
    out = tape.linear(agg, params.out_proj.w, params.out_proj.b)
    return tape.elementwise(out, x, "add")


def decoder_layer(tape: Tape, fc: FeatureCloud, params: VectorAttentionParams,
                  k_attention: int = 16, idx: np.ndarray = None,
                  scatter_plan=None) -> FeatureCloud:
    """Transform features with local attention; positions pass through."""
    if idx is None:
        idx = neighbor_indices(fc.positions, k_attention)
    feats = vector_attention(tape, fc.features, fc.positions, idx, params,
                             scatter_plan)
    return FeatureCloud(fc.positions, feats)
