"""Finite-difference verification of every analytic gradient path.

Each suite builds a tiny random instance, computes analytic gradients
through the recorded trace, and compares them against central differences
of an independently evaluated scalar objective (h = 1e-5, float64).  The
``fault`` hook flips the sign of one analytic gradient so callers can prove
the checker actually detects wrong gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rl
from .networks import NetworkConfig, actor_apply, init_parameters, policy_prob, siamese_score

FD_STEP = 1e-5
DEFAULT_TOL = 1e-4
ZERO_FLOOR = 1e-10


@dataclass
class SuiteResult:
    name: str
    max_rel_err: float
    tol: float
    passed: bool


def rel_error(analytic, fd):
    """Worst-case relative disagreement; entries where both vanish count as 0."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    diff = np.abs(analytic - fd)
    denom = np.maximum(np.abs(analytic), np.abs(fd))
    err = np.where(denom < ZERO_FLOOR, 0.0, diff / np.maximum(denom, ZERO_FLOOR))
    return float(np.max(err)) if err.size else 0.0


def fd_gradient(objective, arr, h=FD_STEP):
    """Central-difference gradient of ``objective()`` w.r.t. every entry of ``arr``."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = objective()
        flat[i] = orig - h
        dn = objective()
        flat[i] = orig
        gflat[i] = (up - dn) / (2.0 * h)
    return grad


def fd_gradients(objective, arrays: dict, h=FD_STEP):
    return {name: fd_gradient(objective, arr, h) for name, arr in arrays.items()}


def _max_err_over(analytic: dict, fd: dict):
    return max(rel_error(analytic[n], fd[n]) for n in analytic)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def check_primitives(seed):
    """conv2d / leaky_relu / sigmoid / inner_product, alone and composed."""
    rng = np.random.default_rng(seed)
    errs = []

    x = rng.standard_normal((5, 5, 2))
    w = rng.standard_normal((3, 3, 2, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    g = rng.standard_normal((5, 5, 3))

    xv, wv, bv = ad.Var(x), ad.Var(w), ad.Var(b)
    out = ad.conv2d(xv, wv, bv)
    ad.backward(out, g)
    for var, arr in ((xv, x), (wv, w), (bv, b)):
        fd = fd_gradient(lambda: float(np.sum(ad.conv2d_raw(x, w, b) * g)), arr)
        errs.append(rel_error(var.grad, fd))

    y = rng.standard_normal((4, 4, 2))
    gy = rng.standard_normal((4, 4, 2))
    yv = ad.Var(y)
    ad.backward(ad.leaky_relu(yv, 0.1), gy)
    errs.append(rel_error(
        yv.grad, fd_gradient(lambda: float(np.sum(ad.leaky_relu_raw(y, 0.1) * gy)), y)))

    z = np.array(0.37)
    zv = ad.Var(z)
    ad.backward(ad.sigmoid(zv), 1.0)
    errs.append(rel_error(zv.grad, fd_gradient(lambda: ad.sigmoid_raw(float(z)), z)))

    a2 = rng.standard_normal((4, 4, 3))
    b2 = rng.standard_normal((4, 4, 3))
    av, bv2 = ad.Var(a2), ad.Var(b2)
    ad.backward(ad.inner_product(av, bv2), 1.0)
    errs.append(rel_error(av.grad, fd_gradient(lambda: ad.inner_product_raw(a2, b2), a2)))
    errs.append(rel_error(bv2.grad, fd_gradient(lambda: ad.inner_product_raw(a2, b2), b2)))

    # six-layer composition ending in a scalar
    ws = [rng.standard_normal((3, 3, 2, 2)) * 0.4 for _ in range(3)]
    bs = [rng.standard_normal(2) * 0.1 for _ in range(3)]
    ref = rng.standard_normal((6, 6, 2))
    x6 = rng.uniform(0, 1, (6, 6, 2))

    def forward6(inp):
        h6 = inp
        for wi, bi in zip(ws, bs):
            h6 = ad.leaky_relu_raw(ad.conv2d_raw(h6, wi, bi), 0.1)
        return ad.sigmoid_raw(ad.inner_product_raw(h6, ref))

    wvars = [ad.Var(wi) for wi in ws]
    bvars = [ad.Var(bi) for bi in bs]
    xv6 = ad.Var(x6)
    node = xv6
    for wv6, bv6 in zip(wvars, bvars):
        node = ad.leaky_relu(ad.conv2d(node, wv6, bv6), 0.1)
    root = ad.sigmoid(ad.inner_product(node, ad.Var(ref)))
    ad.backward(root, 1.0)
    for var, arr in list(zip(wvars, ws)) + list(zip(bvars, bs)) + [(xv6, x6)]:
        errs.append(rel_error(var.grad, fd_gradient(lambda: forward6(x6), arr)))

    return max(errs)


def _tiny_instance(seed, n_states=2):
    cfg = NetworkConfig(in_channels=1, feature_channels=4, n_fe=2, n_rb=2, n_tb=2,
                        n_policy_blocks=2)
    params = init_parameters(cfg, seed)
    rng = np.random.default_rng([seed, 17])
    pairs = [rl.StatePair(rng.uniform(0, 1, (8, 8, 1)), rng.uniform(0, 1, (8, 8, 1)), i)
             for i in range(n_states)]
    return cfg, params, pairs


def check_actor_gradient(seed, fault=None):
    """Raw actor gradient vs finite differences of half the buffer-mean reward."""
    _, params, pairs = _tiny_instance(seed)
    s0, s_star = rl._stack(pairs)
    grads, _ = rl.actor_raw_gradient(params, s0, s_star)
    if fault == "sign_flip":
        grads = {n: -g for n, g in grads.items()}

    def objective():
        s_hat = actor_apply(s0, params)
        return 0.5 * float(rl._per_item_rewards(s_hat, s_star).mean())

    fd = fd_gradients(objective, params.subset(params.theta_fa))
    return _max_err_over(grads, fd)


def check_policy_gradient(seed, fault=None):
    """log-confidence gradient vs finite differences, then the reward scaling."""
    _, params, pairs = _tiny_instance(seed, n_states=1)
    s0, s_star = rl._stack(pairs)
    s_hat = actor_apply(s0, params)
    grads, rewards, _ = rl.policy_raw_gradient(params, s_hat, s_star)
    if fault == "sign_flip":
        grads = {n: -g for n, g in grads.items()}

    def log_pi():
        return float(np.log(policy_prob(s_hat[0], s_star[0], params)))

    fd = fd_gradients(log_pi, params.subset(params.theta_p))
    scaled = {n: rewards[0] * g for n, g in fd.items()}
    return _max_err_over(grads, scaled)


def check_combined_identity(seed):
    """Combined raw gradient == concatenation of the two parts, elementwise."""
    _, params, pairs = _tiny_instance(seed)
    adam_fa, adam_p = _fresh_adams()
    combined = rl.spoa_update(pairs, params.copy(), adam_fa, adam_p, 1e-4, 1e-7)

    frozen = params.copy()
    ga = rl.actor_update(pairs, frozen.copy(), _fresh_adams()[0], 1e-4)
    gp = rl.policy_update(pairs, frozen.copy(), _fresh_adams()[1], 1e-7)
    parts = {**gp, **ga}
    return max(rel_error(combined[n], parts[n]) for n in parts)


def _fresh_adams():
    from .optim import AdamState
    return AdamState(), AdamState()


def run_all(seeds=(0, 1, 2, 3, 4), tol=DEFAULT_TOL, fault=None):
    """Every suite across several seeds; returns one result per (suite, seed)."""
    results = []
    for seed in seeds:
        results.append(_result(f"primitives[seed={seed}]", check_primitives(seed), tol))
        results.append(_result(f"actor-gradient[seed={seed}]",
                               check_actor_gradient(seed, fault), tol))
        results.append(_result(f"policy-gradient[seed={seed}]",
                               check_policy_gradient(seed, fault), tol))
        results.append(_result(f"combined-identity[seed={seed}]",
                               check_combined_identity(seed), 1e-12))
    return results


def _result(name, err, tol):
    return SuiteResult(name=name, max_rel_err=err, tol=tol, passed=err < tol)
