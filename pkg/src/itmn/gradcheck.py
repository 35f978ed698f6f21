"""Finite-difference verification of every differentiable primitive.

The oracle side never touches the tape: it re-evaluates a forward-only
closure at perturbed inputs. All checks run at float64 with central
differences, the precision reserved for exactly this purpose.
"""
from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from . import tensor as T

FD_STEP = 1e-5
TOLERANCE = 1e-5


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f at x, element by element."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f(x)
        flat[i] = keep - step
        lo = f(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation, normalized by the gradient scale (at least 1)."""
    denom = max(1.0, float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom


def _compare(build: Callable[[], tuple], seeds=range(5), step: float = FD_STEP) -> float:
    """Worst relative error over seeds.

    build(rng) returns (leaves, forward) where forward() recomputes the
    scalar loss from the leaves' current data.
    """
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        leaves, forward = build(rng)
        with T.Tape() as tape:
            loss = forward()
        grads = T.backward(tape, loss)
        for leaf in leaves:
            analytic = tape.grad_for(grads, leaf)
            assert analytic is not None, "leaf missing from gradient map"

            def f(_arr, leaf=leaf):
                return forward().item()

            fd = finite_difference_grad(f, leaf.data, step)
            worst = max(worst, max_rel_error(analytic.data, fd))
    return worst


def _param(rng, shape, scl=1.0) -> T.Tensor:
    return T.Tensor(rng.normal(scale=scl, size=shape).astype(np.float64), requires_grad=True)


def _sq_loss(y: T.Tensor) -> T.Tensor:
    return T.sum_all(T.mul(y, y))


def check_conv2d() -> float:
    def build(rng):
        x = _param(rng, (2, 3, 8, 8))
        w = _param(rng, (4, 3, 3, 3), 0.5)
        b = _param(rng, (1, 4, 1, 1), 0.1)
        return (x, w, b), lambda: _sq_loss(T.conv2d(x, w, b, stride=2, pad=1))
    return _compare(build)


def check_conv2d_transpose() -> float:
    def build(rng):
        x = _param(rng, (2, 4, 5, 5))
        w = _param(rng, (4, 3, 3, 3), 0.5)
        b = _param(rng, (1, 3, 1, 1), 0.1)
        return (x, w, b), lambda: _sq_loss(T.conv2d_transpose(x, w, b, stride=2, pad=1))
    return _compare(build)


def check_batchnorm() -> float:
    def build(rng):
        x = _param(rng, (4, 2, 3, 3))
        st = T.BatchNormState.create(2, dtype=np.float64)
        st.gamma = _param(rng, (1, 2, 1, 1), 0.5)
        st.beta = _param(rng, (1, 2, 1, 1), 0.5)
        probe = _param(rng, (4, 2, 3, 3), 0.3)

        def forward():
            y = T.batchnorm(x, st, mode="train")
            return T.sum_all(T.mul(y, probe.detach()))

        return (x, st.gamma, st.beta), forward
    return _compare(build)


def check_leaky_relu() -> float:
    def build(rng):
        data = rng.normal(size=(3, 2, 4, 4))
        # keep samples away from the kink so central differences stay valid
        data = np.where(np.abs(data) < 1e-3, data + 0.5, data)
        x = T.Tensor(data, requires_grad=True)
        return (x,), lambda: _sq_loss(T.leaky_relu(x, 0.2))
    return _compare(build)


def check_sigmoid() -> float:
    def build(rng):
        x = _param(rng, (3, 2, 4, 4))
        return (x,), lambda: _sq_loss(T.sigmoid(x))
    return _compare(build)


def check_concat_channels() -> float:
    def build(rng):
        a = _param(rng, (2, 2, 4, 4))
        b = _param(rng, (2, 3, 4, 4))
        probe = T.Tensor(rng.normal(size=(2, 5, 4, 4)))

        def forward():
            y = T.concat_channels(a, b)
            return T.sum_all(T.mul(y, probe))

        return (a, b), forward
    return _compare(build)


def check_fc() -> float:
    def build(rng):
        x = _param(rng, (3, 2, 2, 2))
        w = _param(rng, (5, 8, 1, 1), 0.5)
        b = _param(rng, (1, 5, 1, 1), 0.1)
        return (x, w, b), lambda: _sq_loss(T.fc(x, w, b))
    return _compare(build)


def check_spatial_slice() -> float:
    def build(rng):
        x = _param(rng, (2, 3, 5, 6))
        return (x,), lambda: _sq_loss(T.spatial_slice(x, 1, 4, 2, 6))
    return _compare(build)


def check_mse() -> float:
    from .loss import mse

    def build(rng):
        p = _param(rng, (3, 2, 4, 4))
        t = T.Tensor(rng.normal(size=(3, 2, 4, 4)))
        return (p,), lambda: mse(p, t)
    return _compare(build)


def check_diff() -> float:
    from .loss import diff_x, diff_y

    def build(rng):
        x = _param(rng, (2, 3, 4, 5))
        probe_x = T.Tensor(rng.normal(size=(2, 3, 4, 4)))
        probe_y = T.Tensor(rng.normal(size=(2, 3, 3, 5)))

        def forward():
            a = T.sum_all(T.mul(diff_x(x), probe_x))
            b = T.sum_all(T.mul(diff_y(x), probe_y))
            return T.add(a, b)

        return (x,), forward
    return _compare(build)


def check_composite() -> float:
    """conv -> batchnorm -> leaky_relu -> mse, differentiated end to end."""
    from .loss import mse

    def build(rng):
        x = _param(rng, (2, 3, 6, 6))
        w = _param(rng, (4, 3, 3, 3), 0.5)
        b = _param(rng, (1, 4, 1, 1), 0.1)
        st = T.BatchNormState.create(4, dtype=np.float64)
        st.gamma = _param(rng, (1, 4, 1, 1), 0.5)
        st.beta = _param(rng, (1, 4, 1, 1), 0.5)
        target = T.Tensor(rng.normal(size=(2, 4, 3, 3)))

        def forward():
            y = T.conv2d(x, w, b, stride=2, pad=1)
            y = T.batchnorm(y, st, mode="train")
            y = T.leaky_relu(y, 0.2)
            return mse(y, target)

        return (x, w, b, st.gamma, st.beta), forward
    return _compare(build)


CHECKS: dict[str, Callable[[], float]] = {
    "conv2d": check_conv2d,
    "conv2d_transpose": check_conv2d_transpose,
    "batchnorm": check_batchnorm,
    "leaky_relu": check_leaky_relu,
    "sigmoid": check_sigmoid,
    "concat_channels": check_concat_channels,
    "fc": check_fc,
    "spatial_slice": check_spatial_slice,
    "mse": check_mse,
    "diff_xy": check_diff,
    "composite_conv_bn_lrelu_mse": check_composite,
}


def run_all(checks: Optional[Mapping[str, Callable[[], float]]] = None,
            tol: float = TOLERANCE, printer: Callable[[str], None] = print) -> bool:
    """Run every check; print one line per op; True iff all under tol."""
    checks = CHECKS if checks is None else checks
    ok = True
    for name, fn in checks.items():
        err = fn()
        passed = err < tol
        ok = ok and passed
        printer(f"{name}: max_rel_err={err:.3e} {'OK' if passed else 'FAIL'} (tol {tol:.0e})")
    return ok
