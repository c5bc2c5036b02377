"""Central finite-difference checks of the hand-written backward passes.

Each check contracts a layer's output with a fixed random cotangent ``r``
so the scalar ``L(x) = sum(r * f(x))`` has gradient ``backward(r)``; that
analytic gradient is compared against ``(L(x + h) - L(x - h)) / 2h`` with
``h = 1e-4 * max(1, |x|)``, all in float64.
"""
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .models import NetworkSpec, build_network

REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    passed: bool
    n_checked: int
    n_excluded: int = 0
    message: str = ""
    details: dict = field(default_factory=dict)


def finite_diff_check(loss_fn, point, analytic, tol=1e-4, exclude=None, probes=None, rng=None, name="op",
                      kink_pattern=None):
    """Compare ``analytic`` against central differences of ``loss_fn`` at ``point``.

    ``loss_fn`` maps an array shaped like ``point`` to a scalar. ``exclude``
    is a boolean mask of coordinates to skip (e.g. kinks); skipped points
    are counted, never failed. ``kink_pattern``, if given, is called after
    each loss evaluation and returns the on/off pattern of every piecewise
    linear unit; a probe whose +h and -h patterns differ straddles a kink
    and is excluded as well. ``probes`` limits the check to that many
    randomly chosen coordinates. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    point = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        return GradCheckReport(name, np.inf, False, 0, message=f"gradient shape {analytic.shape} != {point.shape}")
    if not (np.all(np.isfinite(point)) and np.all(np.isfinite(analytic))):
        return GradCheckReport(name, np.inf, False, 0, message="non-finite input or analytic gradient")
    flat_ok = np.ones(point.size, dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool).ravel()
    candidates = np.flatnonzero(flat_ok)
    n_excluded = point.size - candidates.size
    if probes is not None and probes < candidates.size:
        rng = rng or np.random.default_rng(0)
        candidates = np.sort(rng.choice(candidates, size=probes, replace=False))
    worst = 0.0
    checked = 0
    work = point.copy()
    flat = work.reshape(-1)
    for idx in candidates:
        x0 = flat[idx]
        h = 1e-4 * max(1.0, abs(x0))
        flat[idx] = x0 + h
        up = loss_fn(work)
        up_pattern = kink_pattern() if kink_pattern else None
        flat[idx] = x0 - h
        down = loss_fn(work)
        down_pattern = kink_pattern() if kink_pattern else None
        flat[idx] = x0
        if not (np.isfinite(up) and np.isfinite(down)):
            return GradCheckReport(name, np.inf, False, checked, n_excluded,
                                   f"non-finite loss while probing index {idx}")
        if kink_pattern and not np.array_equal(up_pattern, down_pattern):
            n_excluded += 1
            continue
        checked += 1
        numeric = (up - down) / (2.0 * h)
        a = analytic.reshape(-1)[idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
        worst = max(worst, rel)
    return GradCheckReport(name, float(worst), bool(worst <= tol), checked, n_excluded)


def _merge(name, reports, tol):
    worst = max(r.max_rel_error for r in reports)
    msg = "; ".join(f"{r.name}: {r.message}" for r in reports if r.message)
    return GradCheckReport(
        name, worst, all(r.passed for r in reports) and worst <= tol,
        sum(r.n_checked for r in reports), sum(r.n_excluded for r in reports), msg,
        {r.name: r.max_rel_error for r in reports},
    )


# --------------------------------------------------------------------------
# per-primitive checks; ``corrupt`` scales one analytic gradient by 1.1

def check_conv2d(rng, tol=1e-4, corrupt=False, shape=(1, 2, 5, 5), out_ch=3):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((out_ch, shape[1], 3, 3))
    b = rng.standard_normal(out_ch)
    r = rng.standard_normal((shape[0], out_ch, shape[2], shape[3]))
    dx, dw, db = L.conv2d_backward(r, x, w)
    if corrupt:
        dw = dw * 1.1
    reports = [
        finite_diff_check(lambda v: np.sum(r * L.conv2d_forward(v, w, b)), x, dx, tol, name="input"),
        finite_diff_check(lambda v: np.sum(r * L.conv2d_forward(x, v, b)), w, dw, tol, name="kernels"),
        finite_diff_check(lambda v: np.sum(r * L.conv2d_forward(x, w, v)), b, db, tol, name="bias"),
    ]
    return _merge("conv2d", reports, tol)


def check_batchnorm(rng, tol=1e-4, corrupt=False, shape=(2, 2, 3, 3)):
    x = rng.standard_normal(shape) * 2.0 + 0.5
    state = L.BatchNormState.create(shape[1], dtype=np.float64)
    state.gamma.value = rng.uniform(0.5, 1.5, shape[1])
    state.beta.value = rng.standard_normal(shape[1])
    r = rng.standard_normal(shape)

    def run(xv, g, b):
        s = L.BatchNormState(L.Parameter("g", g), L.Parameter("b", b))
        return np.sum(r * L.batchnorm_forward(xv, s, True)[0])

    _, cache = L.batchnorm_forward(x, state, True)
    dx, dg, db = L.batchnorm_backward(r, cache, state)
    if corrupt:
        dx = dx * 1.1
    g0, b0 = state.gamma.value, state.beta.value
    reports = [
        finite_diff_check(lambda v: run(v, g0, b0), x, dx, tol, name="input"),
        finite_diff_check(lambda v: run(x, v, b0), g0, dg, tol, name="gamma"),
        finite_diff_check(lambda v: run(x, g0, v), b0, db, tol, name="beta"),
    ]
    return _merge("batchnorm", reports, tol)


def check_relu(rng, tol=1e-4, corrupt=False, shape=(2, 3, 4, 4)):
    x = rng.standard_normal(shape)
    x.reshape(-1)[0] = 0.0  # one exact kink, must be reported as excluded
    r = rng.standard_normal(shape)
    dx = L.relu_backward(r, x)
    if corrupt:
        dx = dx * 1.1
    # within one step of the kink the central difference straddles it
    kink = np.abs(x) <= 1e-4 * np.maximum(1.0, np.abs(x))
    return finite_diff_check(lambda v: np.sum(r * L.relu_forward(v)), x, dx, tol, exclude=kink, name="relu")


def check_linear(rng, tol=1e-4, corrupt=False, batch=2, n_in=5, n_out=3):
    x = rng.standard_normal((batch, n_in))
    w = rng.standard_normal((n_out, n_in))
    b = rng.standard_normal(n_out)
    r = rng.standard_normal((batch, n_out))
    dx, dw, db = L.linear_backward(r, x, w)
    if corrupt:
        dw = dw * 1.1
    reports = [
        finite_diff_check(lambda v: np.sum(r * L.linear_forward(v, w, b)), x, dx, tol, name="input"),
        finite_diff_check(lambda v: np.sum(r * L.linear_forward(x, v, b)), w, dw, tol, name="weights"),
        finite_diff_check(lambda v: np.sum(r * L.linear_forward(x, w, v)), b, db, tol, name="bias"),
    ]
    return _merge("linear", reports, tol)


def check_l2(rng, tol=1e-4, corrupt=False, shape=(2, 1, 4, 4)):
    p = rng.standard_normal(shape)
    t = rng.standard_normal(shape)
    _, g = L.l2_loss(p, t)
    if corrupt:
        g = g * 1.1
    return finite_diff_check(lambda v: L.l2_loss(v, t)[0], p, g, tol, name="l2_loss")


def check_network(rng, tol=1e-4, corrupt=False, depth=3, features=64, shape=(2, 1, 8, 8), probes=12):
    """Whole dncnn (BN in training mode) against finite differences of its L2 loss."""
    spec = NetworkSpec("dncnn", depth_modules=depth, in_channels=shape[1], feature_channels=features)
    net = build_network(spec, rng, dtype=np.float64)
    # non-trivial BN parameters so their gradients are exercised
    for bn in net.bn_layers():
        bn.state.gamma.value[...] = rng.uniform(0.5, 1.5, bn.state.channels)
        bn.state.beta.value[...] = rng.normal(0.0, 0.1, bn.state.channels)
    x = rng.standard_normal(shape)
    t = rng.standard_normal((shape[0], 1) + shape[2:]) * 0.1

    relus = [layer for layer in net.layers if isinstance(layer, L.ReLU)]

    def loss_at(xv):
        return L.l2_loss(net.forward(xv, training=True), t)[0]

    def pattern():
        return np.concatenate([(layer._cache > 0).ravel() for layer in relus])

    net.zero_grad()
    out = net.forward(x, training=True)
    _, g = L.l2_loss(out, t)
    dx = net.backward(g)
    grads = {p.name: p.grad.copy() for p in net.parameters()}
    if corrupt:
        dx = dx * 1.1
    reports = [finite_diff_check(loss_at, x, dx, tol, probes=probes, rng=rng, name="input", kink_pattern=pattern)]
    for p in net.parameters():
        original = p.value

        def loss_param(v, p=p):
            p.value = v
            try:
                return loss_at(x)
            finally:
                p.value = original

        reports.append(finite_diff_check(loss_param, original, grads[p.name], tol, probes=probes, rng=rng,
                                         name=p.name, kink_pattern=pattern))
    return _merge(f"cnn{depth}", reports, tol)


CHECKS = {
    "conv": check_conv2d,
    "bn": check_batchnorm,
    "relu": check_relu,
    "linear": check_linear,
    "l2": check_l2,
    "cnn": check_network,
}


def run_suite(seeds=(0,), tol=1e-4, corrupt=None):
    """Run every primitive check for every seed; returns one merged report per primitive."""
    results = []
    for key, check in CHECKS.items():
        reports = [check(np.random.default_rng([seed, len(key)]), tol, corrupt == key) for seed in seeds]
        worst = max(reports, key=lambda r: r.max_rel_error)
        results.append(GradCheckReport(
            key, worst.max_rel_error, all(r.passed for r in reports),
            sum(r.n_checked for r in reports), sum(r.n_excluded for r in reports),
            worst.message, {"seeds": len(reports)},
        ))
    return results
