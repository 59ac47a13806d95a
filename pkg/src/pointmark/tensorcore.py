"""Dense float64 tensors with a reverse-mode tape, Adam, and checkpoints.

The tape is dynamic: every forward pass builds a fresh Tape whose node list
is its own topological order. Tensors are immutable once created; a training
step is the single writer of its tape. All arithmetic is float64 with fixed
reduction orders, so forward passes are bit-identical across runs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

kernels.tune_allocator()


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class GradientError(RuntimeError):
    """Raised on non-finite gradients or misuse of the backward pass."""


# When enabled, every op output is checked for NaN/Inf (slow; used by tests).
DEBUG_CHECK_FINITE = False


class Workspace:
    """Shape-keyed recycling pool for large temporary buffers.

    Training steps allocate and free the same ~10-70 MB activation shapes
    thousands of times; recycling the exact arrays keeps their pages warm
    (fresh allocations measured 3x slower on the attention backward). A
    tape checked out from the pool must be close()d once its gradients have
    been read; tensors from a closed tape may alias recycled memory.
    """

    def __init__(self):
        self._free = {}

    def take(self, shape) -> np.ndarray:
        stack = self._free.get(shape)
        if stack:
            return stack.pop()
        return np.empty(shape)

    def give(self, arrays) -> None:
        for arr in arrays:
            self._free.setdefault(arr.shape, []).append(arr)

    def clear(self) -> None:
        self._free.clear()


def _as_f64(values) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    return arr


class Tensor:
    """Shape-tagged float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "tape", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_f64(values)
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.node_id = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


_INIT_SCHEMES = ("he", "xavier", "zero")


def init_param(rng: np.random.Generator, shape, scheme: str = "he") -> Tensor:
    """Fresh parameter tensor. fan_in is the first dimension for matrices."""
    if scheme == "zero":
        return Tensor(np.zeros(shape), requires_grad=True)
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    if scheme == "he":
        std = np.sqrt(2.0 / fan_in)
    elif scheme == "xavier":
        std = np.sqrt(1.0 / fan_in)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}; expected {_INIT_SCHEMES}")
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Tape:
    """Append-only record of one forward pass.

    Node ids are list positions, so insertion order is the topological
    order. backward() walks the list in reverse exactly once, accumulating
    gradients in that fixed order.
    """

    def __init__(self, workspace: Workspace = None):
        self.nodes = []        # (name, input_ids, vjp or None for leaves)
        self._needs = []       # per-node: does any path reach a parameter?
        self._tensors = []     # per-node output tensor (leaves included)
        self._grads = None
        self._ws = workspace
        self._owned = []

    def _take(self, shape) -> np.ndarray:
        """Temporary buffer, recycled through the workspace when present."""
        if self._ws is None:
            return np.empty(shape)
        arr = self._ws.take(shape)
        self._owned.append(arr)
        return arr

    def close(self) -> None:
        """Return pooled buffers and drop the node graph.

        Only call after all needed gradients/outputs have been copied out;
        tensors created on this tape may alias recycled memory afterwards.
        """
        if self._ws is not None:
            self._ws.give(self._owned)
            self._owned = []
        self.nodes = []
        self._needs = []
        self._tensors = []
        self._grads = None

    # ------------------------------------------------------------------ core

    def _adopt(self, t: Tensor) -> int:
        """Register a tensor created outside this tape as a leaf node."""
        if t.tape is self:
            return t.node_id
        nid = len(self.nodes)
        self.nodes.append(("leaf", (), None))
        self._needs.append(t.requires_grad)
        self._tensors.append(t)
        t.tape = self
        t.node_id = nid
        return nid

    def _emit(self, name: str, inputs, data: np.ndarray, vjp) -> Tensor:
        ids = tuple(self._adopt(t) for t in inputs)
        needs = any(self._needs[i] for i in ids)
        if DEBUG_CHECK_FINITE and not np.all(np.isfinite(data)):
            raise GradientError(f"non-finite values in output of {name}")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = needs
        out.tape = self
        out.node_id = len(self.nodes)
        self.nodes.append((name, ids, vjp if needs else None))
        self._needs.append(needs)
        self._tensors.append(out)
        return out

    def _need(self, t: Tensor) -> bool:
        return t.requires_grad or (t.tape is self and t.node_id is not None
                                   and self._needs[t.node_id])

    # ------------------------------------------------------------- operations

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """Standard 2-D matrix product."""
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
        out = self._take((a.shape[0], b.shape[1]))
        np.matmul(a.data, b.data, out=out)
        na, nb = self._need(a), self._need(b)
        adat, bdat = a.data, b.data

        def vjp(g):
            ga = None
            if na:
                ga = self._take(adat.shape)
                np.matmul(g, bdat.T, out=ga)
            gb = adat.T @ g if nb else None
            return ga, gb

        return self._emit("matmul", (a, b), out, vjp)

    def elementwise(self, a: Tensor, b: Tensor, kind: str) -> Tensor:
        """Pointwise add / sub / hadamard on equal shapes (no broadcasting)."""
        if a.shape != b.shape:
            raise ShapeError(f"elementwise {kind}: shapes differ {a.shape} vs {b.shape}")
        na, nb = self._need(a), self._need(b)
        if kind == "add":
            out = a.data + b.data

            def vjp(g):
                return (g if na else None), (g if nb else None)
        elif kind == "sub":
            out = a.data - b.data

            def vjp(g):
                return (g if na else None), (-g if nb else None)
        elif kind == "hadamard":
            out = a.data * b.data
            adat, bdat = a.data, b.data

            def vjp(g):
                return (g * bdat if na else None), (g * adat if nb else None)
        else:
            raise ValueError(f"unknown elementwise kind {kind!r}")
        return self._emit(kind, (a, b), out, vjp)

    def add_row_bias(self, x: Tensor, bias: Tensor) -> Tensor:
        """x + bias with bias broadcast over all leading axes (explicit)."""
        if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
            raise ShapeError(f"bias {bias.shape} does not match rows of {x.shape}")
        out = x.data + bias.data
        nx, nb = self._need(x), self._need(bias)
        lead = tuple(range(x.data.ndim - 1))

        def vjp(g):
            gb = g.sum(axis=lead) if nb else None
            return (g if nx else None), gb

        return self._emit("add_row_bias", (x, bias), out, vjp)

    def relu(self, x: Tensor) -> Tensor:
        out = np.maximum(x.data, 0.0)
        nx = self._need(x)

        def vjp(g):
            return ((g * (out > 0.0)) if nx else None,)

        return self._emit("relu", (x,), out, vjp)

    def linear(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """Fused x @ w + b for 2-D x; the workhorse of every FC layer."""
        if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"linear: {x.shape} x {w.shape}")
        out = self._take((x.shape[0], w.shape[1]))
        np.matmul(x.data, w.data, out=out)
        out += b.data
        nx, nw, nb = self._need(x), self._need(w), self._need(b)
        xdat, wdat = x.data, w.data

        def vjp(g):
            gx = None
            if nx:
                gx = self._take(xdat.shape)
                np.matmul(g, wdat.T, out=gx)
            gw = xdat.T @ g if nw else None
            gb = g.sum(axis=0) if nb else None
            return gx, gw, gb

        return self._emit("linear", (x, w, b), out, vjp)

    def linear_relu(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """Fused max(x @ w + b, 0)."""
        if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"linear_relu: {x.shape} x {w.shape}")
        out = self._take((x.shape[0], w.shape[1]))
        np.matmul(x.data, w.data, out=out)
        out += b.data
        np.maximum(out, 0.0, out=out)
        nx, nw, nb = self._need(x), self._need(w), self._need(b)
        xdat, wdat = x.data, w.data

        def vjp(g):
            gz = self._take(out.shape)
            np.greater(out, 0.0, out=gz)
            gz *= g
            gx = None
            if nx:
                gx = self._take(xdat.shape)
                np.matmul(gz, wdat.T, out=gx)
            gw = xdat.T @ gz if nw else None
            gb = gz.sum(axis=0) if nb else None
            return gx, gw, gb

        return self._emit("linear_relu", (x, w, b), out, vjp)

    def softmax_over_neighbors(self, t: Tensor) -> Tensor:
        """Softmax along axis 1 of an (n, k, c) tensor, per point and channel."""
        if t.data.ndim != 3:
            raise ShapeError(f"softmax_over_neighbors expects (n, k, c), got {t.shape}")
        if t.shape[1] < 1:
            raise ShapeError("softmax_over_neighbors: k must be >= 1")
        shifted = t.data - t.data.max(axis=1, keepdims=True)
        np.exp(shifted, out=shifted)
        s = shifted
        s /= s.sum(axis=1, keepdims=True)
        nt = self._need(t)

        def vjp(g):
            if not nt:
                return (None,)
            inner = (g * s).sum(axis=1, keepdims=True)
            return (s * (g - inner),)

        return self._emit("softmax_over_neighbors", (t,), s, vjp)

    def reduce(self, t: Tensor, axis, kind: str) -> Tensor:
        """Reduce one axis (or all, axis=None) by max / mean / sum.

        max routes gradient to the first occurrence of the maximum.
        """
        data = t.data
        if axis is None:
            if data.size == 0:
                raise ShapeError("reduce over empty tensor")
            flat = data.reshape(-1)
            return self._reduce_impl(t, flat, 0, kind, scalar=True)
        if not -data.ndim <= axis < data.ndim:
            raise ShapeError(f"reduce axis {axis} invalid for shape {t.shape}")
        axis = axis % data.ndim
        if data.shape[axis] == 0:
            raise ShapeError("reduce over empty axis")
        return self._reduce_impl(t, data, axis, kind, scalar=False)

    def _reduce_impl(self, t, data, axis, kind, scalar):
        nt = self._need(t)
        orig_shape = t.shape
        if kind == "max":
            out = data.max(axis=axis)
            red_shape = out.shape
            arg = np.argmax(data, axis=axis)

            def vjp(g):
                if not nt:
                    return (None,)
                gx = np.zeros_like(data)
                np.put_along_axis(gx, np.expand_dims(arg, axis),
                                  np.expand_dims(g.reshape(red_shape), axis), axis)
                return (gx.reshape(orig_shape),)
        elif kind == "mean":
            out = data.mean(axis=axis)
            red_shape = out.shape
            denom = data.shape[axis]

            def vjp(g):
                if not nt:
                    return (None,)
                gx = np.broadcast_to(np.expand_dims(g.reshape(red_shape) / denom, axis),
                                     data.shape)
                return (np.ascontiguousarray(gx).reshape(orig_shape),)
        elif kind == "sum":
            out = data.sum(axis=axis)
            red_shape = out.shape

            def vjp(g):
                if not nt:
                    return (None,)
                gx = np.broadcast_to(np.expand_dims(g.reshape(red_shape), axis),
                                     data.shape)
                return (np.ascontiguousarray(gx).reshape(orig_shape),)
        else:
            raise ValueError(f"unknown reduce kind {kind!r}")
        if scalar:
            out = out.reshape(1)
        return self._emit(f"reduce_{kind}", (t,), np.ascontiguousarray(out), vjp)

    def gather_rows(self, x: Tensor, idx: np.ndarray, plan=None) -> Tensor:
        """Select rows of a 2-D tensor: out[t] = x[idx[t]]."""
        if x.data.ndim != 2:
            raise ShapeError(f"gather_rows expects 2-D input, got {x.shape}")
        flat = np.ascontiguousarray(idx.reshape(-1), dtype=np.int64)
        if flat.size and (flat.min() < 0 or flat.max() >= x.shape[0]):
            raise ShapeError("gather_rows: index out of range")
        out = self._take((flat.size, x.shape[1]))
        np.take(x.data, flat, axis=0, out=out)
        nx = self._need(x)
        n_rows = x.shape[0]

        def vjp(g):
            if not nx:
                return (None,)
            gx = self._take((n_rows, g.shape[1]))
            return (kernels.scatter_add_rows(g, flat, n_rows, plan, out=gx),)

        return self._emit("gather_rows", (x,), out, vjp)

    def attention_combine(self, q: Tensor, keys: Tensor, values: Tensor,
                          pos: Tensor, idx: np.ndarray, plan=None) -> Tensor:
        """Neighbor attention aggregation (fused).

        out_i = sum_j softmax_j(q_i - K[idx_ij] + P_ij) * (V[idx_ij] + P_ij),
        with the softmax over the neighbor axis per channel. Equivalent to
        the composition of gather_rows / elementwise / softmax_over_neighbors
        / reduce-sum, which the tests cross-check.
        """
        n, c = q.shape
        if pos.data.ndim != 3 or pos.shape[0] != n or pos.shape[2] != c:
            raise ShapeError(f"attention_combine: pos {pos.shape} vs q {q.shape}")
        if keys.shape != values.shape or keys.shape[1] != c:
            raise ShapeError("attention_combine: K/V shapes inconsistent")
        k = pos.shape[1]
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        if idx.shape != (n, k):
            raise ShapeError(f"attention_combine: idx {idx.shape}, expected {(n, k)}")
        if idx.size and (idx.min() < 0 or idx.max() >= keys.shape[0]):
            raise ShapeError("attention_combine: neighbor index out of range")
        out = self._take((n, c))
        weights = self._take((n, k, c))
        kernels.attention_logits(q.data, keys.data, pos.data, idx, weights)
        np.exp(weights, out=weights)
        kernels.attention_combine_exp(weights, values.data, pos.data, idx, out)
        needs = (self._need(q), self._need(keys), self._need(values), self._need(pos))
        vdat, pdat = values.data, pos.data
        n_src = keys.shape[0]

        def vjp(g):
            g = np.ascontiguousarray(g)
            dq = self._take((n, c))
            dpos = self._take((n, k, c))
            dkey_src = self._take((n, k, c))
            dval_src = self._take((n, k, c))
            kernels.attention_backward(g, weights, vdat, pdat, idx,
                                       dq, dpos, dkey_src, dval_src)
            flat = idx.reshape(-1)
            gk = gv = None
            if needs[1]:
                gk = self._take((n_src, c))
                kernels.scatter_add_rows(dkey_src.reshape(n * k, c), flat,
                                         n_src, plan, out=gk)
            if needs[2]:
                gv = self._take((n_src, c))
                kernels.scatter_add_rows(dval_src.reshape(n * k, c), flat,
                                         n_src, plan, out=gv)
            return (dq if needs[0] else None), gk, gv, (dpos if needs[3] else None)

        return self._emit("attention_combine", (q, keys, values, pos), out, vjp)

    def attention_weights(self, q: Tensor, keys: Tensor, pos: Tensor,
                          idx: np.ndarray) -> np.ndarray:
        """Softmax weights of attention_combine, for inspection (no tape node)."""
        n, c = q.shape
        k = pos.shape[1]
        out = np.empty((n, c))
        weights = np.empty((n, k, c))
        idx = np.ascontiguousarray(idx, np.int64)
        kernels.attention_logits(q.data, keys.data, pos.data, idx, weights)
        np.exp(weights, out=weights)
        kernels.attention_combine_exp(weights, np.zeros_like(keys.data),
                                      pos.data, idx, out)
        return weights

    def concat_cols(self, a: Tensor, b: Tensor) -> Tensor:
        """Concatenate two 2-D tensors along the column axis."""
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeError(f"concat_cols: {a.shape} vs {b.shape}")
        out = np.concatenate([a.data, b.data], axis=1)
        na, nb = self._need(a), self._need(b)
        ca = a.shape[1]

        def vjp(g):
            ga = np.ascontiguousarray(g[:, :ca]) if na else None
            gb = np.ascontiguousarray(g[:, ca:]) if nb else None
            return ga, gb

        return self._emit("concat_cols", (a, b), out, vjp)

    def reshape(self, t: Tensor, shape) -> Tensor:
        shape = tuple(shape)
        out = t.data.reshape(shape)
        nt = self._need(t)
        orig = t.shape

        def vjp(g):
            return (g.reshape(orig) if nt else None,)

        return self._emit("reshape", (t,), out, vjp)

    def scale(self, t: Tensor, alpha: float) -> Tensor:
        alpha = float(alpha)
        out = t.data * alpha
        nt = self._need(t)

        def vjp(g):
            return (g * alpha if nt else None,)

        return self._emit("scale", (t,), out, vjp)

    def clip_by_norm(self, t: Tensor, max_norm: float) -> Tensor:
        """Rescale t so its Euclidean norm is at most max_norm (smooth vjp)."""
        norm = float(np.sqrt(np.sum(t.data * t.data)))
        nt = self._need(t)
        if norm <= max_norm:
            out = t.data.copy()

            def vjp(g):
                return (g if nt else None,)
        else:
            factor = max_norm / norm
            out = t.data * factor
            tdat = t.data

            def vjp(g):
                if not nt:
                    return (None,)
                inner = np.sum(tdat * g) / (norm * norm)
                return (factor * (g - tdat * inner),)

        return self._emit("clip_by_norm", (t,), out, vjp)

    # --------------------------------------------------------------- backward

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients for every node reachable from loss.

        Traversal is the fixed reverse insertion order, so accumulation is
        deterministic. loss must be scalar (a single element).
        """
        if loss.tape is not self:
            raise GradientError("loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(len(self.nodes) - 1, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            name, ids, vjp = self.nodes[nid]
            if vjp is None:
                continue
            parts = vjp(g)
            for in_id, part in zip(ids, parts):
                if part is None or not self._needs[in_id]:
                    continue
                if grads[in_id] is None:
                    grads[in_id] = part.copy() if part is g else part
                else:
                    grads[in_id] = grads[in_id] + part
            # Interior gradients are dead once consumed; keep leaf grads.
            if self.nodes[nid][0] != "leaf":
                grads[nid] = None
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() w.r.t. tensor t."""
        if self._grads is None:
            raise GradientError("backward() has not been run on this tape")
        if t.tape is not self or t.node_id is None:
            raise GradientError("tensor is not on this tape")
        g = self._grads[t.node_id]
        if g is None:
            g = np.zeros(t.shape)
        if g.shape != t.data.shape:
            raise GradientError(f"gradient shape {g.shape} != tensor shape {t.shape}")
        return g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


# ------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    """Adam with the standard defaults and bias correction."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)  # path -> (m, v)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update; returns a fresh parameter dict.

    Parameters are visited in sorted path order for determinism. A NaN or
    Inf gradient aborts with the offending parameter named.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    updated = {}
    for path in sorted(params):
        p = params[path]
        g = grads[path]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param {path} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {path!r}")
        if path not in state.moments:
            state.moments[path] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        updated[path] = Tensor(p.data - step, requires_grad=True)
    return updated


# ----------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"PMRK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: dict) -> None:
    """Write a flat parameter archive: sorted paths, shapes, f64 LE payloads."""
    items = sorted(params.items())
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", _CKPT_VERSION, len(items)))
        for name, p in items:
            arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a parameter archive back into requires_grad tensors."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<IQ", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        params[name] = Tensor(arr.copy(), requires_grad=True)
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params
