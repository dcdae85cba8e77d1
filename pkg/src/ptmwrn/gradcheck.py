"""Finite-difference gradient suite over every differentiable building block.

Each check draws random 64-bit inputs, reduces the op's output to a scalar
with a random probe (``weighted_sum``) and compares autograd gradients to
central differences. Used by ``ptmwrn gradcheck`` and the test-suite.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np

from .autograd import (
    GradCheckReport,
    Tensor,
    batch_norm,
    channel_concat,
    checked,
    conv2d,
    elementwise_add,
    finite_diff_check,
    mse_half,
    relu,
    weighted_sum,
)
from .model import MwrnConfig, build_stage, forward, residual_block
from .wavelet import dwt2, idwt2

DEFAULT_TOLERANCE = 1e-4


def _t(rng, shape, grad=True, low=None, high=None):
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, high, shape)
    return Tensor(data.astype(np.float64), requires_grad=grad)


def _probe_sum(out: Tensor, rng) -> Callable:
    probe = rng.standard_normal(out.shape)
    return lambda t: weighted_sum(t, probe)


def check_conv2d(rng, tol):
    x, w, b = _t(rng, (2, 3, 5, 4)), _t(rng, (4, 3, 3, 3)), _t(rng, (4,))
    reduce = _probe_sum(conv2d(x, w, b), rng)
    return finite_diff_check(lambda x, w, b: reduce(conv2d(x, w, b)), [x, w, b], tolerance=tol)


def check_batch_norm(rng, tol):
    x = _t(rng, (3, 4, 3, 3))
    gamma, beta = _t(rng, (4,), low=0.5, high=1.5), _t(rng, (4,), low=-0.5, high=0.5)
    reports = []
    for training in (True, False):
        mean = Tensor(rng.uniform(-0.5, 0.5, 4))
        var = Tensor(rng.uniform(0.5, 2.0, 4))

        def fn(x, g, b, training=training, mean=mean, var=var):
            # running stats are restored so every evaluation sees the same state
            saved = mean.data.copy(), var.data.copy()
            out = batch_norm(x, g, b, mean, var, training)
            mean.data[...], var.data[...] = saved
            return reduce(out)

        reduce = _probe_sum(x, rng)
        reports.append(finite_diff_check(fn, [x, gamma, beta], tolerance=tol))
    return _worst(reports)


def check_relu(rng, tol):
    # keep values away from the kink so no perturbation crosses it
    x = Tensor(rng.choice([-1.0, 1.0], (2, 3, 4, 4)) * rng.uniform(0.1, 1.0, (2, 3, 4, 4)), requires_grad=True)
    reduce = _probe_sum(x, rng)
    return finite_diff_check(lambda x: reduce(relu(x)), [x], tolerance=tol)


def check_elementwise_add(rng, tol):
    a, b = _t(rng, (2, 3, 4, 4)), _t(rng, (2, 3, 4, 4))
    reduce = _probe_sum(a, rng)
    return finite_diff_check(lambda a, b: reduce(elementwise_add(a, b)), [a, b], tolerance=tol)


def check_channel_concat(rng, tol):
    a, b = _t(rng, (2, 3, 4, 4)), _t(rng, (2, 2, 4, 4))
    reduce = _probe_sum(channel_concat(a, b), rng)
    return finite_diff_check(lambda a, b: reduce(channel_concat(a, b)), [a, b], tolerance=tol)


def check_mse_half(rng, tol):
    pred, target = _t(rng, (3, 2, 4, 4)), _t(rng, (3, 2, 4, 4))
    return finite_diff_check(mse_half, [pred, target], tolerance=tol)


def check_wavelets(rng, tol):
    x = _t(rng, (2, 2, 4, 6))
    forward_probe = _probe_sum(dwt2(x), rng)
    y = _t(rng, (2, 8, 2, 3))
    inverse_probe = _probe_sum(idwt2(y), rng)
    return _worst(
        [
            finite_diff_check(lambda x: forward_probe(dwt2(x)), [x], tolerance=tol),
            finite_diff_check(lambda y: inverse_probe(idwt2(y)), [y], tolerance=tol),
        ]
    )


def check_residual_block(rng, tol):
    width = 4
    params = {}
    for conv in ("conv1", "conv2"):
        params[f"{conv}.weight"] = _t(rng, (width, width, 3, 3))
        params[f"{conv}.weight"].data *= 0.3
        params[f"{conv}.bias"] = _t(rng, (width,))
        params[f"{conv}.bn.gamma"] = _t(rng, (width,), low=0.5, high=1.5)
        params[f"{conv}.bn.beta"] = _t(rng, (width,), low=-0.1, high=0.1)
        params[f"{conv}.bn.running_mean"] = Tensor(np.zeros(width))
        params[f"{conv}.bn.running_var"] = Tensor(np.ones(width))
    x = _t(rng, (2, width, 4, 4))
    reduce = _probe_sum(x, rng)
    trainable = [x] + [v for v in params.values() if v.requires_grad]
    return finite_diff_check(lambda *_: reduce(residual_block(x, params, True)), trainable, step=1e-6, tolerance=tol)


def check_stage3_network(rng, tol):
    cfg = MwrnConfig(widths=(8, 8, 8), rb_per_side=1, dtype="float64", head_init="fan_in")
    net = build_stage(3, cfg, seed=int(rng.integers(2**31)))
    for name, p in net.params.items():
        if name.endswith("bn.gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith("bn.beta"):
            p.data[...] = rng.uniform(-0.2, 0.2, p.shape)
    x = Tensor(rng.random((2, 1, 8, 8)), requires_grad=True)
    probes = {"image": rng.standard_normal((2, 1, 8, 8)), 2: rng.standard_normal((2, 16, 2, 2)),
              3: rng.standard_normal((2, 64, 1, 1))}

    def fn(*_):
        out = forward(net, x, training=True)
        total = weighted_sum(out.image, probes["image"])
        for level in (2, 3):
            total = elementwise_add(total, weighted_sum(out.heads[level], probes[level]))
        return total

    return finite_diff_check(fn, [x] + net.parameters(), step=1e-6, tolerance=tol, max_coords=3, rng=rng)


def _worst(reports) -> GradCheckReport:
    worst = max(reports, key=lambda r: r.max_rel_error)
    return GradCheckReport(
        worst.max_rel_error,
        worst.tolerance,
        sum(r.checked for r in reports),
        sum(r.skipped_kinks for r in reports),
        [e for r in reports for e in r.per_input],
    )


CHECKS: Dict[str, Callable] = {
    "conv2d": check_conv2d,
    "batch_norm": check_batch_norm,
    "relu": check_relu,
    "elementwise_add": check_elementwise_add,
    "channel_concat": check_channel_concat,
    "mse_half": check_mse_half,
    "dwt2/idwt2": check_wavelets,
    "residual_block": check_residual_block,
    "stage3_network": check_stage3_network,
}


def run_suite(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE, only: Optional[list] = None) -> Dict[str, GradCheckReport]:
    """Run every check (or the named subset) with NaN/Inf checking on."""
    names = list(CHECKS) if only is None else list(only)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise KeyError(f"unknown checks: {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    results = {}
    with checked():
        for name in names:
            results[name] = CHECKS[name](rng, tolerance)
    return results
