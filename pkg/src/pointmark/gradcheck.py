"""Central finite-difference verification of every differentiable operation.

The checker re-evaluates the forward pass only, so it is independent of the
analytic vjp implementations it validates. Inputs near non-differentiable
points (relu kinks, tied maxima) are nudged away before checking.
"""
from __future__ import annotations

import numpy as np

from .tensorcore import Tape, Tensor

DEFAULT_H = 1e-6


def finite_diff_grad(forward, arrays, which: int, h: float = DEFAULT_H) -> np.ndarray:
    """Central differences of scalar forward() w.r.t. arrays[which]."""
    base = [a.copy() for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = forward(base)
        flat[i] = orig - h
        fm = forward(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_scalar_fn(build, arrays, h: float = DEFAULT_H) -> float:
    """Compare tape gradients of build(tape, tensors) against central FD.

    build must return a scalar Tensor; arrays are the differentiable inputs.
    Returns the worst relative error across all inputs and elements.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    tape = Tape()
    loss = build(tape, tensors)
    tape.backward(loss)
    analytic = [tape.grad(t) for t in tensors]

    def forward_with(replaced):
        ts = [Tensor(a) for a in replaced]
        return build(Tape(), ts).item()

    worst = 0.0
    for i in range(len(arrays)):
        numeric = finite_diff_grad(forward_with, arrays, i, h=h)
        worst = max(worst, max_rel_err(analytic[i], numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-1.0, 1.0, size=shape)
    x = x + np.sign(x) * margin
    return x


def _project(tape, t, rng):
    """Random fixed projection to a scalar so any op output can be checked."""
    w = Tensor(rng.uniform(-1.0, 1.0, size=t.shape))
    return tape.reduce(tape.elementwise(t, w, "hadamard"), None, "sum")


# One entry per differentiable tensorcore op: rng -> max relative error.


def _check_matmul(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    proj = rng.uniform(-1, 1, size=(3, 2))

    def build(tape, ts):
        out = tape.matmul(ts[0], ts[1])
        return tape.reduce(tape.elementwise(out, Tensor(proj), "hadamard"), None, "sum")

    return check_scalar_fn(build, [a, b])


def _check_elementwise(rng):
    worst = 0.0
    for kind in ("add", "sub", "hadamard"):
        a = rng.standard_normal((2, 5))
        b = rng.standard_normal((2, 5))
        proj = rng.uniform(-1, 1, size=(2, 5))

        def build(tape, ts, kind=kind):
            out = tape.elementwise(ts[0], ts[1], kind)
            return tape.reduce(tape.elementwise(out, Tensor(proj), "hadamard"),
                               None, "sum")

        worst = max(worst, check_scalar_fn(build, [a, b]))
    return worst


def _check_add_row_bias(rng):
    x = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)
    proj = rng.uniform(-1, 1, size=(4, 3))

    def build(tape, ts):
        out = tape.add_row_bias(ts[0], ts[1])
        return tape.reduce(tape.elementwise(out, Tensor(proj), "hadamard"), None, "sum")

    return check_scalar_fn(build, [x, b])


def _check_relu(rng):
    x = _away_from_zero(rng, (3, 4))
    proj = rng.uniform(-1, 1, size=(3, 4))

    def build(tape, ts):
        return tape.reduce(tape.elementwise(tape.relu(ts[0]), Tensor(proj),
                                            "hadamard"), None, "sum")

    return check_scalar_fn(build, [x])


def _check_linear(rng):
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 2))
    b = rng.standard_normal(2)
    proj = rng.uniform(-1, 1, size=(4, 2))

    def build(tape, ts):
        out = tape.linear(ts[0], ts[1], ts[2])
        return tape.reduce(tape.elementwise(out, Tensor(proj), "hadamard"), None, "sum")

    return check_scalar_fn(build, [x, w, b])


def _check_linear_relu(rng):
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 2))
    b = _away_from_zero(rng, 2)

    def build(tape, ts):
        out = tape.linear_relu(ts[0], ts[1], ts[2])
        return tape.reduce(out, None, "sum")

    return check_scalar_fn(build, [x, w, b])


def _check_softmax(rng):
    t = rng.standard_normal((3, 4, 2))
    proj = rng.uniform(-1, 1, size=(3, 4, 2))

    def build(tape, ts):
        out = tape.softmax_over_neighbors(ts[0])
        return tape.reduce(tape.elementwise(out, Tensor(proj), "hadamard"), None, "sum")

    return check_scalar_fn(build, [t])


def _check_reduce(rng):
    worst = 0.0
    x = rng.standard_normal((3, 5))
    x += np.arange(15).reshape(3, 5) * 0.31  # keep maxima unique
    for kind in ("max", "mean", "sum"):
        for axis in (0, 1, None):
            shape = np.empty_like(x).sum(axis=axis).shape if axis is not None else (1,)
            proj = rng.uniform(-1, 1, size=shape)

            def build(tape, ts, kind=kind, axis=axis):
                out = tape.reduce(ts[0], axis, kind)
                return tape.reduce(tape.elementwise(out, Tensor(proj), "hadamard"),
                                   None, "sum")

            worst = max(worst, check_scalar_fn(build, [x]))
    return worst


def _check_gather_rows(rng):
    x = rng.standard_normal((6, 3))
    idx = rng.integers(0, 6, size=8)
    proj = rng.uniform(-1, 1, size=(8, 3))

    def build(tape, ts):
        out = tape.gather_rows(ts[0], idx)
        return tape.reduce(tape.elementwise(out, Tensor(proj), "hadamard"), None, "sum")

    return check_scalar_fn(build, [x])


def _check_attention_combine(rng):
    n, k, c, m = 3, 4, 2, 5
    q = rng.standard_normal((n, c))
    keys = rng.standard_normal((m, c))
    values = rng.standard_normal((m, c))
    pos = rng.standard_normal((n, k, c))
    idx = rng.integers(0, m, size=(n, k))
    proj = rng.uniform(-1, 1, size=(n, c))

    def build(tape, ts):
        out = tape.attention_combine(ts[0], ts[1], ts[2], ts[3], idx)
        return tape.reduce(tape.elementwise(out, Tensor(proj), "hadamard"), None, "sum")

    return check_scalar_fn(build, [q, keys, values, pos])


def _check_concat_cols(rng):
    a = rng.standard_normal((4, 2))
    b = rng.standard_normal((4, 3))
    proj = rng.uniform(-1, 1, size=(4, 5))

    def build(tape, ts):
        out = tape.concat_cols(ts[0], ts[1])
        return tape.reduce(tape.elementwise(out, Tensor(proj), "hadamard"), None, "sum")

    return check_scalar_fn(build, [a, b])


def _check_reshape_scale(rng):
    x = rng.standard_normal((2, 6))
    proj = rng.uniform(-1, 1, size=(3, 4))

    def build(tape, ts):
        out = tape.scale(tape.reshape(ts[0], (3, 4)), 1.7)
        return tape.reduce(tape.elementwise(out, Tensor(proj), "hadamard"), None, "sum")

    return check_scalar_fn(build, [x])


OP_CHECKS = {
    "matmul": _check_matmul,
    "elementwise": _check_elementwise,
    "add_row_bias": _check_add_row_bias,
    "relu": _check_relu,
    "linear": _check_linear,
    "linear_relu": _check_linear_relu,
    "softmax_over_neighbors": _check_softmax,
    "reduce": _check_reduce,
    "gather_rows": _check_gather_rows,
    "attention_combine": _check_attention_combine,
    "concat_cols": _check_concat_cols,
    "reshape_scale": _check_reshape_scale,
}


def run_op_suite(instances: int = 100, seed: int = 0, names=None) -> dict:
    """Max relative FD error per op over `instances` random instances."""
    report = {}
    for name, fn in OP_CHECKS.items():
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng(seed)
        report[name] = max(fn(rng) for _ in range(instances))
    return report
