"""Fast oracle checks: gradients, parameter counts, LQR equivalence, equilibria.

Every check returns ``(ok, detail)``; :func:`run_all` runs them in order and
collects :class:`CheckResult` records.  Runs in a few seconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List

import numpy as np

from . import residual_net as rn
from .learner import Adam, LearnerConfig, OnlineResidualLearner, ResidualRegressor
from .mpc import Q_DIAG, R_DIAG, LinearModel, OcpProblem, solve
from .plant import (QuadParams, hover_state, nominal_discrete, nominal_jacobians, rk4_jacobians)
from .time_embedding import embed


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def riccati_first_control(a, b, q, r, qf, horizon, dx0):
    """First feedback control of the finite-horizon discrete LQR from ``dx0``."""
    p = qf
    gains = []
    for _ in range(horizon):
        k = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
        p = q + a.T @ p @ (a - b @ k)
        gains.append(k)
    return -gains[-1] @ dx0


def check_param_counts(seed=0):
    full = rn.init_params(seed, 40)
    reduced = rn.init_params(seed, 8)
    computed = rn.count_params(rn.layer_sizes(40))
    ok = (computed == rn.FULL_PARAM_COUNT == 6979 and full.n_fast == rn.FAST_PARAM_COUNT == 195
          and full.n_slow == rn.SLOW_PARAM_COUNT == 6784 and reduced.n_params == rn.REDUCED_PARAM_COUNT == 4931)
    return ok, f"full={full.n_params} (fast {full.n_fast}, slow {full.n_slow}) reduced={reduced.n_params}"


def _random_net(rng, input_dim=40):
    p = rn.init_params(int(rng.integers(1 << 31)), input_dim)
    p.weights[-1][:] = rng.normal(0, 0.3, p.weights[-1].shape)
    p.biases[-1][:] = rng.normal(0, 0.1, p.biases[-1].shape)
    for b in p.biases[:-1]:
        b[:] = rng.normal(0, 0.1, b.shape)
    return p


def _away_from_kinks(p, z, margin=1e-3):
    _, (_, pre) = rn.forward(p, z)
    return all(np.min(np.abs(a)) > margin for a in pre)


def check_gradients(seed=0, n=50, h=1e-6):
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    while done < n:
        p = _random_net(rng)
        z = rng.normal(size=40)
        if not _away_from_kinks(p, z, 10 * h):
            continue
        g_out = rng.normal(size=3)
        out, cache = rn.forward(p, z)
        g_fast, g_slow = rn.backward_params(p, cache, g_out)
        analytic = g_slow + g_fast
        # one random parameter per array, central differences
        for arr, g in zip(p.arrays("all"), analytic):
            idx = tuple(rng.integers(s) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            fp = rn.forward(p, z)[0] @ g_out
            arr[idx] = old - h
            fm = rn.forward(p, z)[0] @ g_out
            arr[idx] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
        jac = rn.input_jacobian(p, z)
        fd_jac = np.empty((3, 8))
        for j in range(8):
            e = np.zeros(40)
            e[j] = h
            fd_jac[:, j] = (rn.forward(p, z + e)[0] - rn.forward(p, z - e)[0]) / (2 * h)
        worst = max(worst, _rel_err(jac, fd_jac))
        done += 1
    return worst < 1e-4, f"max relative error {worst:.2e} over {n} instances"


def check_rk4_jacobians(seed=0, h=1e-6):
    rng = np.random.default_rng(seed)
    quad = QuadParams()
    worst = 0.0
    for _ in range(10):
        s = hover_state() + rng.normal(0, 0.1, 6)
        u = quad.hover_control() + rng.normal(0, 0.01, 2)
        a, b = nominal_jacobians(s, u, quad, 0.02)
        fa = np.column_stack([(nominal_discrete(s + h * e, u, quad, 0.02) - nominal_discrete(s - h * e, u, quad, 0.02))
                              / (2 * h) for e in np.eye(6)])
        fb = np.column_stack([(nominal_discrete(s, u + h * e, quad, 0.02) - nominal_discrete(s, u - h * e, quad, 0.02))
                              / (2 * h) for e in np.eye(2)])
        worst = max(worst, _rel_err(a, fa), _rel_err(b, fb))
    return worst < 1e-6, f"max relative error {worst:.2e}"


def check_hover(seed=0):
    quad = QuadParams()
    s = hover_state()
    nxt = nominal_discrete(s, quad.hover_control(), quad, 0.02)
    dev = float(np.max(np.abs(nxt - s)))
    return dev < 1e-12, f"max deviation {dev:.1e}"


def check_lqr_oracle(seed=0):
    quad = QuadParams()
    dt, horizon = 0.02, 20
    xh, uh = hover_state(), quad.hover_control()
    a, b = rk4_jacobians(xh, uh, quad, dt)
    c = nominal_discrete(xh, uh, quad, dt) - a @ xh - b @ uh
    model = LinearModel(a, b, c)
    rng = np.random.default_rng(seed)
    dx0 = rng.normal(0, [0.003, 0.003, 0.003, 0.003, 0.003, 0.003])
    q, r = np.diag(Q_DIAG), np.diag(R_DIAG)
    problem = OcpProblem(x0=xh + dx0, x_ref=np.tile(xh, (horizon + 1, 1)), model=model, q_diag=Q_DIAG,
                         r_diag=R_DIAG, qf_diag=Q_DIAG, u_min=np.full(2, -10.0), u_max=np.full(2, 10.0), u_ref=uh)
    sol = solve(problem)
    expected = uh + riccati_first_control(a, b, 2 * q, 2 * r, 2 * q, horizon, dx0)
    err = float(np.max(np.abs(sol.controls[0] - expected)))
    return err < 1e-6, f"first-control difference {err:.2e}"


def check_adam(seed=0):
    theta = np.array([1.0])
    opt = Adam([theta], lr=0.1)
    opt.step([theta], [2 * (theta - 3.0)])
    g = 2 * (1.0 - 3.0)
    m, v = 0.1 * g, 0.001 * g * g
    expected = 1.0 - 0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    err = abs(theta[0] - expected)
    return err < 1e-12, f"|theta - expected| = {err:.1e}"


def check_scheduler(seed=0):
    rng = np.random.default_rng(seed)
    quad = QuadParams()
    learner = OnlineResidualLearner(LearnerConfig(), quad, 0.02, seed=seed)
    counts = {"fast": 0, "slow": 0}
    isolated = True
    for i in range(1000):
        x = hover_state() + rng.normal(0, 0.01, 6)
        u = quad.hover_control()
        row = np.concatenate([x, u, [i * 0.02]])
        learner.buffer.push(None, row, rng.normal(0, 0.003, 3))
        learner.n_pushed += 1
        before = [a.copy() for a in learner.params.arrays("all")]
        rep = learner.maybe_update()
        counts["fast"] += rep.fired_fast
        counts["slow"] += rep.fired_slow
        after = learner.params.arrays("all")
        slow_same = all(np.array_equal(x0, x1) for x0, x1 in zip(before[:4], after[:4]))
        fast_same = all(np.array_equal(x0, x1) for x0, x1 in zip(before[4:], after[4:]))
        if rep.fired_fast and not rep.fired_slow and not slow_same:
            isolated = False
        if rep.fired_slow and not rep.fired_fast and not fast_same:
            isolated = False
        if rep.noop and not (slow_same and fast_same):
            isolated = False
    ok = counts == {"fast": 100, "slow": 40} and isolated
    return ok, f"fast={counts['fast']} slow={counts['slow']} isolated={isolated}"


def check_embedding(seed=0):
    e = embed(np.array([0.0, 1.0, 2.5]))
    ok = e.shape == (3, 32) and np.allclose(e[0, :16], 0) and np.allclose(e[0, 16:], 1)
    ok = ok and np.allclose(np.sum(e[..., :16] ** 2 + e[..., 16:] ** 2, axis=-1), 16)
    return ok, f"shape {e.shape}"


def check_zero_init(seed=0):
    reg = ResidualRegressor(random_state=seed).initialize()
    X = np.concatenate([hover_state(), QuadParams().hover_control(), [0.3]])[None]
    out = reg.predict(X)
    return bool(np.all(out == 0.0)), f"prediction {out.ravel().tolist()}"


CHECKS: List[tuple] = [
    ("param_count_6979", check_param_counts),
    ("mlp_gradients_fd", check_gradients),
    ("rk4_jacobians_fd", check_rk4_jacobians),
    ("hover_fixed_point", check_hover),
    ("lqr_riccati_oracle", check_lqr_oracle),
    ("adam_scalar_oracle", check_adam),
    ("scheduler_counts", check_scheduler),
    ("time_embedding", check_embedding),
    ("zero_init_residual", check_zero_init),
]


def run_all(seed: int = 0, checks=None) -> List[CheckResult]:
    results = []
    for name, fn in (checks or CHECKS):
        start = time.perf_counter()
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - start))
    return results
