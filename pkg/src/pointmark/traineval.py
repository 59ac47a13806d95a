"""Training loops, MPJPE evaluation, ablations, parameter/FLOP accounting.

Runs are bit-reproducible for a fixed seed: sample order, parameter
iteration, and every reduction run in fixed orders. A run directory holds
{config.json, checkpoints/, metrics/, logs/}; the metrics CSVs and
checkpoints are byte-deterministic, wall-clock timing goes to the summary
and logs only.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import refine as refine_mod
from .cascade import (
    CascadeConfig,
    ConfigError,
    CptParams,
    cpt_forward,
    m2se_loss,
)
from .cloudio import DatasetManifest, split_dataset
from .data import LoadedSample, attach_plans, load_samples, resample_epoch
from .geometry import stable_centroid
from .refine import RefineConfig, RefineParams
from .tensorcore import AdamState, Tape, Workspace, adam_step, save_checkpoint


class TrainingError(RuntimeError):
    """Non-finite loss or inconsistent training inputs."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    train_fraction: float = 0.9
    phase: str = "cpt"              # "cpt" | "refine"
    cosine_decay: bool = False      # optional schedule; constant lr by default

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.phase not in ("cpt", "refine"):
            raise ConfigError(f"unknown phase {self.phase!r}")

    def to_doc(self) -> dict:
        return {"learning_rate": self.learning_rate, "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed,
                "train_fraction": self.train_fraction, "phase": self.phase,
                "cosine_decay": self.cosine_decay}

    @classmethod
    def from_doc(cls, doc: dict) -> "TrainConfig":
        known = {"learning_rate", "epochs", "batch_size", "seed",
                 "train_fraction", "phase", "cosine_decay"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class MetricsReport:
    epoch_losses: List[float] = field(default_factory=list)
    epoch_val_mpjpe: List[float] = field(default_factory=list)
    final_mpjpe_coarse: float = float("nan")
    final_mpjpe_fine: Optional[float] = None
    best_val_mpjpe: float = float("nan")
    per_landmark: List[float] = field(default_factory=list)
    param_count: int = 0
    flop_estimate: int = 0
    wall_clock_seconds: float = 0.0

    def summary_doc(self) -> dict:
        return {
            "final_mpjpe_coarse": self.final_mpjpe_coarse,
            "final_mpjpe_fine": self.final_mpjpe_fine,
            "best_val_mpjpe": self.best_val_mpjpe,
            "per_landmark": self.per_landmark,
            "param_count": self.param_count,
            "flop_estimate": self.flop_estimate,
            "epochs": len(self.epoch_losses),
            "wall_clock_seconds": self.wall_clock_seconds,
        }


# --------------------------------------------------------------------- metric


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance over landmarks (model units)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"mpjpe shape mismatch: {pred.shape} vs {gt.shape}")
    d = pred - gt
    return float(np.mean(np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2)))


def per_landmark_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    d = pred - gt
    return np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2)


def centroid_baseline_mpjpe(samples: List[LoadedSample]) -> float:
    """MPJPE of predicting the cloud centroid for every landmark."""
    values = []
    for s in samples:
        centroid = s.transform.invert(stable_centroid(s.cloud.positions))
        values.append(mpjpe(np.tile(centroid, (s.gt_original.shape[0], 1)),
                            s.gt_original))
    return float(np.mean(values))


# ------------------------------------------------------------------ inference


def predict_coarse(sample: LoadedSample, params: CptParams,
                   config: CascadeConfig) -> np.ndarray:
    """Final-stage prediction in original units."""
    tape = Tape()
    preds = cpt_forward(tape, sample.cloud, params, config, sample.plan)
    return sample.transform.invert(preds[-1].data)


def predict_coarse_normalized(sample: LoadedSample, params: CptParams,
                              config: CascadeConfig) -> np.ndarray:
    tape = Tape()
    preds = cpt_forward(tape, sample.cloud, params, config, sample.plan)
    return preds[-1].data.copy()


def evaluate_samples(samples: List[LoadedSample], params: CptParams,
                     config: CascadeConfig,
                     refine_params: Optional[RefineParams] = None,
                     refine_config: Optional[RefineConfig] = None) -> dict:
    """Coarse (and optionally fine) MPJPE with a per-landmark breakdown."""
    coarse_vals, fine_vals = [], []
    lm_acc = None
    for sample in samples:
        coarse_norm = predict_coarse_normalized(sample, params, config)
        coarse = sample.transform.invert(coarse_norm)
        coarse_vals.append(mpjpe(coarse, sample.gt_original))
        errs = per_landmark_errors(coarse, sample.gt_original)
        lm_acc = errs if lm_acc is None else lm_acc + errs
        if refine_params is not None:
            fine_norm = refine_mod.refine_all(sample.cloud, coarse_norm,
                                              refine_params, refine_config)
            fine = sample.transform.invert(fine_norm)
            fine_vals.append(mpjpe(fine, sample.gt_original))
    out = {
        "mpjpe_coarse": float(np.mean(coarse_vals)),
        "per_landmark": (lm_acc / len(samples)).tolist(),
    }
    if fine_vals:
        out["mpjpe_fine"] = float(np.mean(fine_vals))
    return out


# ------------------------------------------------------------------- training


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5eed]).permutation(n)


def _lr_at(train: TrainConfig, epoch: int) -> float:
    if not train.cosine_decay:
        return train.learning_rate
    progress = epoch / max(1, train.epochs - 1)
    return train.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


class RunDir:
    """The {config, checkpoints/, metrics/, logs/} layout of one run."""

    def __init__(self, root):
        self.root = Path(root)
        self.checkpoints = self.root / "checkpoints"
        self.metrics = self.root / "metrics"
        self.logs = self.root / "logs"
        for p in (self.root, self.checkpoints, self.metrics, self.logs):
            p.mkdir(parents=True, exist_ok=True)
        self._log_fh = None

    def write_config(self, doc: dict) -> None:
        with open(self.root / "config.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    def log(self, message: str) -> None:
        line = f"[{time.strftime('%H:%M:%S')}] {message}"
        print(line, flush=True)
        if self._log_fh is None:
            self._log_fh = open(self.logs / "run.log", "a", encoding="utf-8")
        self._log_fh.write(line + "\n")
        self._log_fh.flush()

    def write_epoch_csv(self, name: str, rows: List[dict]) -> None:
        if not rows:
            return
        with open(self.metrics / name, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)

    def write_summary(self, doc: dict) -> None:
        with open(self.metrics / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")


def _accumulate_cpt_grads(sample: LoadedSample, params: CptParams,
                          params_dict: dict, config: CascadeConfig,
                          scale: float, grads: dict, epoch: int,
                          workspace: Optional[Workspace] = None):
    tape = Tape(workspace)
    preds = cpt_forward(tape, sample.cloud, params, config, sample.plan)
    loss = m2se_loss(tape, preds, sample.gt_normalized)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at epoch {epoch}, "
                            f"sample {sample.name}")
    tape.backward(loss)
    for path, tensor in params_dict.items():
        g = tape.grad(tensor) * scale
        if path in grads:
            grads[path] += g
        else:
            grads[path] = g
    tape.close()
    return value


def train_cpt(manifest: DatasetManifest, config: CascadeConfig,
              train: TrainConfig, run_dir: Optional[RunDir] = None,
              quiet: bool = False):
    """Phase 1: train the horizontal cascade; returns (params, report).

    Deterministic given the seed; checkpoints the best-by-validation-MPJPE
    and final parameters when a run directory is given.
    """
    t_start = time.perf_counter()
    log = run_dir.log if run_dir is not None else \
        (lambda m: None) if quiet else (lambda m: print(m, flush=True))

    train_idx, test_idx = split_dataset(manifest, train.train_fraction, train.seed)
    train_samples = load_samples(manifest, train_idx, config, keep_raw=True)
    test_samples = load_samples(manifest, test_idx, config)
    has_resampling = any(s.raw_cloud is not None for s in train_samples)
    attach_plans(train_samples, config)
    attach_plans(test_samples, config)

    rng = np.random.default_rng(train.seed)
    params = CptParams.create(rng, config)
    params_dict = params.as_dict()
    state = AdamState(lr=train.learning_rate)

    report = MetricsReport(param_count=params.param_count(),
                           flop_estimate=count_params_flops(params, config)[1])
    log(f"training cascade: {len(train_samples)} train / {len(test_samples)} "
        f"test clouds, {report.param_count} params")

    best_val = math.inf
    best_params_dict = None
    rows = []
    workspace = Workspace()
    for epoch in range(train.epochs):
        if has_resampling and epoch > 0:
            resample_epoch(train_samples, config, [train.seed, epoch])
            attach_plans(train_samples, config)
        state.lr = _lr_at(train, epoch)
        order = _epoch_order(train.seed, epoch, len(train_samples))
        losses = []
        for lo in range(0, len(order), train.batch_size):
            batch = order[lo:lo + train.batch_size]
            grads: dict = {}
            scale = 1.0 / len(batch)
            for si in batch:
                losses.append(_accumulate_cpt_grads(
                    train_samples[si], params, params_dict, config, scale,
                    grads, epoch, workspace))
            params_dict = adam_step(params_dict, grads, state)
            params = CptParams.from_dict(params_dict, config)
        val = evaluate_samples(test_samples, params, config)["mpjpe_coarse"]
        mean_loss = float(np.mean(losses))
        report.epoch_losses.append(mean_loss)
        report.epoch_val_mpjpe.append(val)
        rows.append({"epoch": epoch, "train_loss": repr(mean_loss),
                     "val_mpjpe": repr(val)})
        if val < best_val:
            best_val = val
            best_params_dict = dict(params_dict)
        if epoch % 10 == 0 or epoch == train.epochs - 1:
            log(f"epoch {epoch:3d}: loss {mean_loss:.6f}, val MPJPE {val:.6f}")

    report.best_val_mpjpe = best_val
    final_eval = evaluate_samples(test_samples, params, config)
    report.final_mpjpe_coarse = final_eval["mpjpe_coarse"]
    report.per_landmark = final_eval["per_landmark"]
    report.wall_clock_seconds = time.perf_counter() - t_start

    if run_dir is not None:
        save_checkpoint(run_dir.checkpoints / "cpt_final.ckpt", params_dict)
        save_checkpoint(run_dir.checkpoints / "cpt_best.ckpt",
                        best_params_dict or params_dict)
        run_dir.write_epoch_csv("train_cpt.csv", rows)
        run_dir.write_summary(report.summary_doc())
    return params, report


def train_refine_phase(manifest: DatasetManifest, cpt_params: CptParams,
                       config: CascadeConfig, refine_config: RefineConfig,
                       train: TrainConfig, run_dir: Optional[RunDir] = None,
                       quiet: bool = False):
    """Phase 2: freeze the cascade, train the refiner on its coarse output."""
    t_start = time.perf_counter()
    log = run_dir.log if run_dir is not None else \
        (lambda m: None) if quiet else (lambda m: print(m, flush=True))

    train_idx, test_idx = split_dataset(manifest, train.train_fraction, train.seed)
    train_samples = load_samples(manifest, train_idx, config)
    test_samples = load_samples(manifest, test_idx, config)
    attach_plans(train_samples, config)
    attach_plans(test_samples, config)

    coarse_train = [predict_coarse_normalized(s, cpt_params, config)
                    for s in train_samples]
    log(f"refine phase: building {len(train_samples)} x "
        f"{config.landmarks} patches (k={refine_config.k})")

    refine_params, history = refine_mod.train_refine(
        train_samples, coarse_train, refine_config, train, log=log)

    final = evaluate_samples(test_samples, cpt_params, config,
                             refine_params, refine_config)
    report = MetricsReport(
        epoch_losses=history["losses"],
        final_mpjpe_coarse=final["mpjpe_coarse"],
        final_mpjpe_fine=final["mpjpe_fine"],
        best_val_mpjpe=final["mpjpe_fine"],
        per_landmark=final["per_landmark"],
        param_count=refine_params.param_count(),
        flop_estimate=0,
        wall_clock_seconds=time.perf_counter() - t_start,
    )
    if run_dir is not None:
        save_checkpoint(run_dir.checkpoints / "refine_final.ckpt",
                        refine_params.as_dict())
        rows = [{"epoch": e, "train_loss": repr(v)}
                for e, v in enumerate(history["losses"])]
        run_dir.write_epoch_csv("train_refine.csv", rows)
        run_dir.write_summary(report.summary_doc())
    log(f"refine done: coarse {final['mpjpe_coarse']:.6f} -> "
        f"fine {final['mpjpe_fine']:.6f}")
    return refine_params, report


# ------------------------------------------------------------------ ablations

ABLATION_AXES = ("refine_k", "depth", "width", "points", "feature_dim")


def ablate(manifest: DatasetManifest, axis: str, values, config: CascadeConfig,
           refine_config: RefineConfig, train: TrainConfig,
           out_path=None, quiet: bool = True) -> List[dict]:
    """One full train (+eval) per value along one ablation axis.

    The refine phase runs only on the refine_k axis; the other axes ablate
    the cascade and report coarse MPJPE, mirroring the per-axis design of
    the reference experiments.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; "
                          f"expected one of {ABLATION_AXES}")
    rows = []
    for value in values:
        cfg = config
        rcfg_doc = refine_config.to_doc()
        if axis == "depth":
            cfg = replace(config, stages=int(value))
        elif axis == "width":
            cfg = replace(config, width=int(value))
        elif axis == "points":
            cfg = replace(config, sample_count=int(value))
        elif axis == "feature_dim":
            cfg = replace(config, feature_dim=int(value))
        elif axis == "refine_k":
            rcfg_doc["k"] = int(value)
        rcfg = RefineConfig.from_doc(rcfg_doc, feature_dim=cfg.feature_dim)

        t0 = time.perf_counter()
        params, report = train_cpt(manifest, cfg, train, quiet=quiet)
        row = {
            "axis": axis, "value": value,
            "params": params.param_count(),
            "flops": count_params_flops(params, cfg)[1],
            "mpjpe_coarse": report.final_mpjpe_coarse,
            "mpjpe_fine": "",
        }
        if axis == "refine_k":
            _, refine_report = train_refine_phase(manifest, params, cfg, rcfg,
                                                  train, quiet=quiet)
            row["mpjpe_fine"] = refine_report.final_mpjpe_fine
        row["seconds"] = round(time.perf_counter() - t0, 2)
        rows.append(row)
    if out_path is not None:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows


# ----------------------------------------------------------------- accounting


def flops_matmul(m: int, k: int, n: int) -> int:
    """Documented convention: a matmul m x k x n costs 2*m*k*n FLOPs."""
    return 2 * m * k * n


def count_params_flops(params: CptParams, config: CascadeConfig):
    """(exact parameter count, FLOP estimate for one forward pass).

    Convention: matmul 2mkn; bias, relu and elementwise 1 FLOP per element;
    softmax 5 per element; attention logits/aggregation 5 per element.
    """
    count = params.param_count()
    c = config.width
    k = config.k_attention
    g = config.pool_group
    j = config.landmarks
    flops = 0
    n = config.sample_count
    d = config.feature_dim
    flops += flops_matmul(n, d, c) + 2 * n * c            # encoder + bias + relu
    for _ in range(config.stages):
        nk = n * k
        flops += 5 * (flops_matmul(n, c, c) + n * c)      # fc1-4, out_proj
        flops += flops_matmul(nk, 3, c) + 2 * nk * c      # fc5a + bias + relu
        flops += flops_matmul(nk, c, c) + nk * c          # fc5b + bias
        flops += 2 * nk * c                               # q - K + P
        flops += 5 * nk * c                               # softmax over neighbors
        flops += 3 * nk * c                               # (V+P) weighting + sum
        flops += n * c                                    # residual
        m = math.ceil(n / config.pool_stride)
        mg = m * g
        flops += flops_matmul(mg, 3 + c, c) + 2 * mg * c  # pool MLP + bias + relu
        flops += mg * c                                   # group max
        flops += m * c                                    # global max pool
        flops += flops_matmul(1, c, c) + 2 * c            # head fc1
        flops += flops_matmul(1, c, 3 * j) + 3 * j        # head fc2
        n = m
    return count, flops
