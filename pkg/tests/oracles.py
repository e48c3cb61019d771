"""Independent oracles shared by the unit and acceptance tests.

Each one is written from the model definition, not from the package code.
"""
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from hingebeat import tensorcore as tc
from hingebeat.postprocess import DbnConfig
from hingebeat.tensorcore import Tensor

from helpers import assert_grad_close, numerical_grad


def brute_force_best(activation, cfg: DbnConfig) -> float:
    """Enumerate every valid state path and return the best joint log-probability.

    Written from the model definition, independent of the decoder's tables.
    """
    tempi = list(range(cfg.tau_min, cfg.tau_max + 1))
    n_states = sum(tempi)
    eps = cfg.observation_epsilon

    def emit(t, phase):
        a = activation[t]
        return math.log(max(a if phase == 0 else 1.0 - a, eps))

    def trans(tau, nxt):
        w = [math.exp(-cfg.tempo_change_lambda * abs(u / tau - 1.0)) for u in tempi]
        return math.log(math.exp(-cfg.tempo_change_lambda * abs(nxt / tau - 1.0)) / sum(w))

    best = -math.inf

    def walk(t, phase, tau, lp):
        nonlocal best
        if t == len(activation):
            best = max(best, lp)
            return
        if phase < tau - 1:
            walk(t + 1, phase + 1, tau, lp + emit(t, phase + 1))
        else:
            for nxt in tempi:
                walk(t + 1, 0, nxt, lp + trans(tau, nxt) + emit(t, 0))

    for tau in tempi:
        for phase in range(tau):
            walk(1, phase, tau, -math.log(n_states) + emit(0, phase))
    return best


def brute_matching(est, ref, tol):
    """Maximum bipartite matching via the assignment solver."""
    if len(est) == 0 or len(ref) == 0:
        return 0
    ok = np.abs(np.subtract.outer(est, ref)) <= tol
    rows, cols = linear_sum_assignment(-ok.astype(float))
    return int(ok[rows, cols].sum())


def brute_continuity(est, ref, theta):
    """Loop-based reference of the variation-set continuity metrics."""
    est, ref = list(est), list(ref)
    mids = [(a + b) / 2 for a, b in zip(ref, ref[1:])]
    double = sorted(ref + mids)
    variations = [ref, mids, double, ref[0::2], ref[1::2]]
    results = []
    for var in variations:
        if len(var) < 2 or len(est) < 2:
            results.append((0.0, 0.0))
            continue
        flags = []
        for j, e in enumerate(est):
            dists = [abs(v - e) for v in var]
            i = dists.index(min(dists))
            local = var[i + 1] - var[i] if i + 1 < len(var) else var[i] - var[i - 1]
            period = est[j] - est[j - 1] if j > 0 else est[1] - est[0]
            flags.append(dists[i] <= theta * local and abs(period - local) <= theta * local)
        run = best = 0
        for f in flags:
            run = run + 1 if f else 0
            best = max(best, run)
        n = max(len(est), len(var))
        results.append((best / n, sum(flags) / n))
    return (results[0][0], results[0][1],
            max(c for c, _ in results), max(t for _, t in results))


def check_op_grads(build, arrays):
    """Gradient of sum(w * build(*tensors)) against central differences."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    weights = np.random.default_rng(7).uniform(-1, 1, size=out.shape)
    loss = tc.mul(out, Tensor(weights))
    total = loss.data.sum()
    loss.backward(np.ones_like(loss.data))
    assert np.isfinite(total)
    for t in tensors:
        def f(t=t):
            return float((build(*[Tensor(u.data) for u in tensors]).data * weights).sum())
        assert_grad_close(t.grad, numerical_grad(f, t.data))
