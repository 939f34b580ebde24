"""Acceptance gate: criteria 1-14, one pass/fail line each.

Criteria 8-11 run 10 seeded 20 s closed-loop simulations per cell and take
roughly half an hour on one core.  Cells shared between criteria are run
once.  Run standalone with ``python tests/test_acceptance.py`` or through
pytest; either way a ``CRITERION n: PASS|FAIL`` line is printed per
criterion (pytest prints them in the terminal summary).
"""

import sys
import time

import numpy as np

from t2s_mpc import residual_net as rn
from t2s_mpc.harness import (ExperimentConfig, SuiteConfig, run_once, run_suite, timing_report)
from t2s_mpc.learner import Adam, LearnerConfig, OnlineResidualLearner, feature_row
from t2s_mpc.mpc import Q_DIAG, R_DIAG, ComposedModel, OcpProblem, solve
from t2s_mpc.plant import DisturbanceSpec, QuadParams, hover_state, nominal_discrete, rk4_jacobians
from t2s_mpc.selfcheck import check_gradients, riccati_first_control

RESULTS = {}

PERIODIC = DisturbanceSpec("periodic", amplitude=0.003, period=2.0)
DRIFT = DisturbanceSpec("linear_drift", kappa=5e-4)
GRID = [DisturbanceSpec("periodic", amplitude=a, period=p) for a in (0.001, 0.003, 0.005) for p in (2.0, 4.0)]
N_RUNS = 10

_cells = {}


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    assert ok, line


def cell(task, method, dist):
    """Mean error list of a (task, method, disturbance) cell over N_RUNS seeds, cached."""
    key = (task, method, dist)
    if key not in _cells:
        suite = SuiteConfig(base=ExperimentConfig(task=task, n_runs=N_RUNS), tasks=(task,),
                            disturbances=(dist,), methods=(method,))
        (res,) = run_suite(suite).cells
        _cells[key] = res
    return _cells[key]


def means(task, dist, methods):
    return {m: cell(task, m, dist).mean for m in methods}


def fmt(d):
    return ", ".join(f"{k}={v:.5f}" for k, v in d.items())


# -- property / oracle suite --------------------------------------------------

def test_criterion_01_parameter_counts():
    full, reduced = rn.init_params(0, 40), rn.init_params(0, 8)
    ok = (full.n_params, full.n_fast, full.n_slow, reduced.n_params) == (6979, 195, 6784, 4931)
    record(1, ok, f"full={full.n_params} fast={full.n_fast} slow={full.n_slow} reduced={reduced.n_params}")


def test_criterion_02_gradients():
    ok, detail = check_gradients(seed=2024, n=50)
    record(2, ok, detail + " (tolerance 1e-4)")


def test_criterion_03_lqr_oracle():
    quad = QuadParams()
    dt, horizon = 0.02, 20
    xh, uh = hover_state(), quad.hover_control()
    x0 = xh.copy()
    x0[2] = 0.999
    problem = OcpProblem(x0=x0, x_ref=np.tile(xh, (horizon + 1, 1)), model=ComposedModel(quad, dt),
                         q_diag=Q_DIAG, r_diag=R_DIAG, qf_diag=Q_DIAG, u_min=np.zeros(2),
                         u_max=np.full(2, quad.t_max), u_ref=uh)
    sol = solve(problem)
    inactive = bool(np.all(sol.controls > 0) and np.all(sol.controls < quad.t_max))
    a, b = rk4_jacobians(xh, uh, quad, dt)
    q, r = np.diag(Q_DIAG), np.diag(R_DIAG)
    expected = uh + riccati_first_control(a, b, q, r, q, horizon, x0 - xh)
    err = float(np.max(np.abs(sol.controls[0] - expected)))
    record(3, inactive and err < 1e-6, f"|u0 - u0_riccati| = {err:.2e} (tolerance 1e-6), bounds inactive={inactive}")


def test_criterion_04_equilibrium_and_determinism():
    quad = QuadParams()
    dev = float(np.max(np.abs(nominal_discrete(hover_state(), quad.hover_control(), quad, 0.02) - hover_state())))
    cfg = ExperimentConfig(method="t2s", duration=2.0)
    same = run_once(cfg, 11).to_csv().encode() == run_once(cfg, 11).to_csv().encode()
    record(4, dev < 1e-12 and same, f"hover deviation {dev:.1e} (tolerance 1e-12), run logs byte-identical={same}")


def test_criterion_05_scheduler():
    quad = QuadParams()
    rng = np.random.default_rng(0)
    learner = OnlineResidualLearner(LearnerConfig(t_f=10, t_s=25), quad, 0.02, seed=0)
    n_fast = n_slow = 0
    isolated = True
    for i in range(1000):
        row = np.concatenate([hover_state() + rng.normal(0, 0.01, 6), quad.hover_control(), [i * 0.02]])
        learner.buffer.push(None, row, rng.normal(0, 0.003, 3))
        learner.n_pushed += 1
        before = [a.copy() for a in learner.params.arrays("all")]
        rep = learner.maybe_update()
        after = learner.params.arrays("all")
        n_fast += rep.fired_fast
        n_slow += rep.fired_slow
        slow_same = all(np.array_equal(x, y) for x, y in zip(before[:4], after[:4]))
        fast_same = all(np.array_equal(x, y) for x, y in zip(before[4:], after[4:]))
        if (rep.fired_fast and not rep.fired_slow and not slow_same) or \
           (rep.fired_slow and not rep.fired_fast and not fast_same) or (rep.noop and not (slow_same and fast_same)):
            isolated = False
    record(5, (n_fast, n_slow) == (100, 40) and isolated,
           f"fast={n_fast} slow={n_slow} (expected 100/40), partition isolation bit-wise={isolated}")


def test_criterion_06_adam():
    theta = np.array([1.0])
    Adam([theta], lr=0.1).step([theta], [2 * (theta - 3.0)])
    g = -4.0
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    expected = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    err = abs(theta[0] - expected)
    record(6, err < 1e-12, f"|theta - hand recursion| = {err:.1e} (tolerance 1e-12)")


def test_criterion_07_residual_learning():
    a = 0.003
    spec = DisturbanceSpec("polynomial", poly_coeffs=(a,), noise_sigma=0.0)
    errs = []
    for seed in range(3):
        log = run_once(ExperimentConfig(method="t2s", disturbance=spec, duration=4.0), seed)
        row = log.rows[-1]
        x, u = np.array(row[2:8]), np.array(row[8:10])
        pred = log.learner.regressor.predict(feature_row(4.0, x, u)[None])[0]
        errs.append(float(np.linalg.norm(pred - [a, 0.0, 0.0])))
    worst = max(errs)
    record(7, worst < 0.2 * a, f"one-step residual error after 200 steps, worst of 3 seeds {worst:.2e} "
                               f"(< {0.2 * a:.1e})")


# -- desk-scale reproduction ---------------------------------------------------

FIVE = ("nominal_mpc", "neural_mpc", "t2s_no_time_emb", "t2s_no_two_scale", "t2s")
THREE = ("nominal_mpc", "neural_mpc", "t2s")


def test_criterion_08_periodic_ordering():
    m = means("stabilize", PERIODIC, FIVE)
    ok = (m["t2s"] < m["neural_mpc"] < m["nominal_mpc"] and m["t2s"] < m["t2s_no_time_emb"]
          and m["t2s"] < m["t2s_no_two_scale"])
    record(8, ok, f"stabilize periodic(A=0.003,T=2): {fmt(m)}")


def test_criterion_09_drift_ordering():
    m = means("stabilize", DRIFT, THREE)
    ok = m["t2s"] < m["neural_mpc"] < m["nominal_mpc"]
    record(9, ok, f"stabilize linear drift: {fmt(m)}")


def test_criterion_10_tracking_ordering():
    parts, ok = [], True
    for task in ("track_circle", "track_fig8"):
        for name, dist in (("drift", DRIFT), ("periodic", PERIODIC)):
            m = means(task, dist, THREE)
            good = m["t2s"] < m["neural_mpc"] <= m["nominal_mpc"]
            ok &= good
            parts.append(f"[{task}/{name} {'ok' if good else 'violated'}: {fmt(m)}]")
    record(10, ok, " ".join(parts))


def test_criterion_11_grid():
    parts, ok = [], True
    for dist in GRID:
        m = means("stabilize", dist, THREE)
        good = m["t2s"] < min(m["nominal_mpc"], m["neural_mpc"])
        ok &= good
        parts.append(f"[A={dist.amplitude:g},T={dist.period:g} {'ok' if good else 'violated'}: {fmt(m)}]")
    record(11, ok, " ".join(parts))


def test_criterion_12_update_cost():
    rep = timing_report(ExperimentConfig(), seed=0, check=False)
    record(12, rep.fast_mean < rep.full_mean,
           f"fast {1e3 * rep.fast_mean:.3f} ms (n={len(rep.fast)}) vs full {1e3 * rep.full_mean:.3f} ms "
           f"(n={len(rep.full)}); slow {1e3 * rep.slow_mean:.3f} ms")


def test_criterion_13_zero_init_equivalence():
    same = []
    for seed in range(5):
        a = run_once(ExperimentConfig(method="nominal_mpc", duration=0.02), seed)
        b = run_once(ExperimentConfig(method="t2s", duration=0.02), seed)
        same.append(a.rows[0][8:10] == b.rows[0][8:10])
    record(13, all(same), f"step-0 controls bit-identical on {sum(same)}/5 seeds")


def test_criterion_14_realtime_budget():
    start = time.perf_counter()
    log = run_once(ExperimentConfig(method="t2s"), 0)
    wall = time.perf_counter() - start
    record(14, wall < 300.0 and len(log.rows) == 1000 and not log.failed,
           f"20 s T2S run ({len(log.rows)} solves + updates) took {wall:.1f} s (< 300 s)")


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    failed = 0
    for t in tests:
        try:
            t()
        except AssertionError:
            failed += 1
    print(f"{len(tests) - failed}/{len(tests)} criteria passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
