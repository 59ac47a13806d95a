"""Numba-compiled kernels for the hot paths of the tape.

Everything here is an exact, deterministic implementation detail behind the
tensorcore op contracts: per-row loops run in a fixed order, parallel
iterations write disjoint rows, and compile-time choices (including
fastmath vectorization patterns) are fixed per build, so results are
bit-reproducible across runs with the same thread count.
"""
from __future__ import annotations

import ctypes
import os

import numpy as np

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from numba import njit, prange  # noqa: E402


def tune_allocator() -> None:
    """Keep large allocations on the glibc heap instead of mmap.

    numpy frees and reallocates ~67 MB activation buffers every training
    step; with the default mmap threshold each round trip costs a page-fault
    storm (measured 8x slowdown on allocation-heavy passes). Best effort:
    silently does nothing on non-glibc platforms.
    """
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except Exception:
        pass


@njit(parallel=True, fastmath=True, cache=True)
def attention_logits(q, keys, pos, idx, logits):
    """Max-shifted attention logits: logits_ijc = (q - K[idx] + P) - max_j.

    The caller exponentiates the buffer in place (numpy's SIMD exp) and
    feeds it to attention_combine_exp, which normalizes it into the softmax
    weights.
    """
    n, k, c = pos.shape
    for i in prange(n):
        buf = np.empty((k, c))
        for j in range(k):
            r = idx[i, j]
            for ch in range(c):
                buf[j, ch] = q[i, ch] - keys[r, ch] + pos[i, j, ch]
        for ch in range(c):
            m = buf[0, ch]
            for j in range(1, k):
                if buf[j, ch] > m:
                    m = buf[j, ch]
            for j in range(k):
                logits[i, j, ch] = buf[j, ch] - m

@njit(parallel=True, fastmath=True, cache=True)
def attention_combine_exp(expw, values, pos, idx, out):
    """Normalize exponentiated logits into weights (in place) and aggregate.

    On return expw holds the softmax weights over the neighbor axis and
    out_ic = sum_j w_ijc * (V[idx_ij]_c + P_ijc).
    """
    n, k, c = pos.shape
    for i in prange(n):
        for ch in range(c):
            tot = 0.0
            for j in range(k):
                tot += expw[i, j, ch]
            inv = 1.0 / tot
            acc = 0.0
            for j in range(k):
                w = expw[i, j, ch] * inv
                expw[i, j, ch] = w
                acc += w * (values[idx[i, j], ch] + pos[i, j, ch])
            out[i, ch] = acc


@njit(parallel=True, fastmath=True, cache=True)
def attention_backward(g, weights, values, pos, idx, dq, dpos, dkey_src, dval_src):
    """Backward of the attention aggregation.

    Consumes the upstream gradient g (n, c) and the saved softmax weights;
    recomputes V+P on the fly. Writes dq (n, c), dpos (n, k, c), and the
    per-neighbor gradient sources dkey_src / dval_src (n, k, c), which the
    caller scatter-adds into dK / dV with segment_sum_rows. dkey_src already
    carries the minus sign from d(q - K + P)/dK.
    """
    n, k, c = pos.shape
    for i in prange(n):
        for ch in range(c):
            gv = g[i, ch]
            t = 0.0
            for j in range(k):
                vp = values[idx[i, j], ch] + pos[i, j, ch]
                t += vp * gv * weights[i, j, ch]
            dq_acc = 0.0
            for j in range(k):
                vp = values[idx[i, j], ch] + pos[i, j, ch]
                s = weights[i, j, ch]
                dvp = s * gv
                dlog = s * (vp * gv - t)
                dq_acc += dlog
                dval_src[i, j, ch] = dvp
                dkey_src[i, j, ch] = -dlog
                dpos[i, j, ch] = dvp + dlog
            dq[i, ch] = dq_acc


@njit(parallel=True, cache=True)
def segment_sum_rows(src, order, starts, out):
    """Scatter-add rows of src into out using a precomputed sort plan.

    order permutes src rows so that rows destined for the same output row
    are contiguous; starts[r]:starts[r+1] delimits output row r. Each output
    row is accumulated sequentially in sorted source order, so the result is
    deterministic and independent of thread scheduling.
    """
    nrows = starts.shape[0] - 1
    c = src.shape[1]
    for r in prange(nrows):
        for ch in range(c):
            out[r, ch] = 0.0
        for t in range(starts[r], starts[r + 1]):
            s = order[t]
            for ch in range(c):
                out[r, ch] += src[s, ch]


def build_scatter_plan(flat_idx: np.ndarray, n_rows: int):
    """Precompute the (order, starts) plan for segment_sum_rows.

    flat_idx maps each source row to an output row in [0, n_rows).
    """
    flat_idx = np.ascontiguousarray(flat_idx.ravel(), dtype=np.int64)
    order = np.argsort(flat_idx, kind="stable")
    starts = np.searchsorted(flat_idx[order], np.arange(n_rows + 1, dtype=np.int64))
    return order.astype(np.int64), starts.astype(np.int64)


def scatter_add_rows(src: np.ndarray, flat_idx: np.ndarray, n_rows: int,
                     plan=None, out: np.ndarray = None) -> np.ndarray:
    """Row scatter-add: out[flat_idx[t]] += src[t], deterministically."""
    if plan is None:
        plan = build_scatter_plan(flat_idx, n_rows)
    order, starts = plan
    src = np.ascontiguousarray(src)
    if out is None:
        out = np.empty((n_rows, src.shape[1]), dtype=np.float64)
    segment_sum_rows(src, order, starts, out)
    return out


def warmup() -> None:
    """Trigger JIT compilation of all kernels on tiny inputs."""
    n, k, c = 2, 2, 3
    q = np.zeros((n, c))
    box = np.zeros((n, k, c))
    idx = np.zeros((n, k), dtype=np.int64)
    out = np.zeros((n, c))
    attention_logits(q, q, box, idx, box.copy())
    attention_combine_exp(np.ones((n, k, c)), q, box, idx, out)
    attention_backward(out, box, q, box, idx, out.copy(), box.copy(),
                       box.copy(), box.copy())
    scatter_add_rows(np.zeros((4, 3)), np.zeros(4, dtype=np.int64), 2)
