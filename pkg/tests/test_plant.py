import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t2s_mpc.plant import (DisturbanceSpec, QuadParams, SimulationFault, continuous_derivative,
                           disturbance_accel, disturbance_mean, hover_state, nominal_discrete,
                           nominal_jacobians, residual_step, rk4_jacobians, rk4_step)

DT = 0.02


def test_hover_thrust_value(quad):
    assert quad.hover_thrust == pytest.approx(0.027 * 9.81 / 2)
    assert quad.hover_thrust == pytest.approx(0.132435, abs=1e-6)


def test_hover_is_fixed_point(quad):
    s = hover_state()
    nxt = nominal_discrete(s, quad.hover_control(), quad, DT)
    assert np.max(np.abs(nxt - s)) < 1e-12


@pytest.mark.parametrize("name", ["mass", "iyy", "arm_d", "gravity", "t_max"])
def test_params_must_be_positive(name):
    with pytest.raises(ValueError, match=name):
        QuadParams(**{name: 0.0})


def test_free_fall_matches_closed_form(quad):
    # zero thrust: z(t) = z0 - g t^2 / 2 exactly for a polynomial of degree 2
    s = hover_state()
    nxt = nominal_discrete(s, np.zeros(2), quad, DT)
    assert nxt[2] == pytest.approx(1.0 - 0.5 * 9.81 * DT ** 2, abs=1e-15)
    assert nxt[3] == pytest.approx(-9.81 * DT, abs=1e-15)


def test_rk4_fourth_order_convergence(quad):
    # error of one step scales like dt^5; halving dt cuts the global error ~16x
    s0 = np.array([0.0, 0.1, 1.0, 0.0, 0.3, 1.0])
    u = np.array([0.12, 0.14])

    def integrate(dt, t_end=0.2):
        s = s0.copy()
        for _ in range(int(round(t_end / dt))):
            s = nominal_discrete(s, u, quad, dt)
        return s

    ref = integrate(0.02 / 64)
    errs = [np.linalg.norm(integrate(dt) - ref) for dt in (0.02, 0.01, 0.005)]
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(13.0 < r < 19.0 for r in ratios), ratios


def test_continuous_derivative_components(quad):
    s = np.array([0.0, 0.5, 1.0, -0.2, 0.1, 0.3])
    u = np.array([0.1, 0.12])
    f = continuous_derivative(s, u, quad)
    assert f[0] == 0.5 and f[2] == -0.2 and f[4] == 0.3
    assert f[1] == pytest.approx(math.sin(0.1) * 0.22 / quad.mass)
    assert f[3] == pytest.approx(math.cos(0.1) * 0.22 / quad.mass - 9.81)
    assert f[5] == pytest.approx(0.02 * quad.arm_d / quad.iyy)


def test_disturbance_forms():
    assert disturbance_mean(DisturbanceSpec("linear_drift", kappa=5e-4), 4.0) == pytest.approx(2e-3)
    per = DisturbanceSpec("periodic", amplitude=0.003, period=2.0)
    assert disturbance_mean(per, 0.5) == pytest.approx(0.003)
    assert disturbance_mean(per, 1.0) == pytest.approx(0.0, abs=1e-15)
    poly = DisturbanceSpec("polynomial", poly_coeffs=(1.0, 2.0, 3.0))
    assert disturbance_mean(poly, 2.0) == pytest.approx(1 + 4 + 12)
    step = DisturbanceSpec("linear_with_step", kappa=1e-3, step_time=5.0, step_offset=0.01)
    assert disturbance_mean(step, 4.99) == pytest.approx(4.99e-3)
    assert disturbance_mean(step, 5.0) == pytest.approx(0.015)
    assert disturbance_accel(DisturbanceSpec("none"), 3.0, np.random.default_rng(0)) == 0.0


def test_disturbance_validation():
    with pytest.raises(ValueError, match="kind"):
        DisturbanceSpec("gusty")
    with pytest.raises(ValueError, match="period"):
        DisturbanceSpec("periodic", period=0.0)
    with pytest.raises(ValueError):
        disturbance_accel(DisturbanceSpec("periodic"), -1.0)


def test_noise_held_constant_across_stages(quad):
    # an explicit noise value must equal adding a constant acceleration eps on top of the mean
    spec = DisturbanceSpec("linear_drift", kappa=0.0, noise_sigma=1.0)
    s, u = hover_state(), quad.hover_control()
    out = rk4_step(s, u, quad, spec, 0.0, DT, noise=0.05)
    expected = residual_step(s, u, quad, DT, [0.05, 0.0, 0.0])
    np.testing.assert_array_equal(out, expected)


def test_rk4_step_deterministic_with_seed(quad):
    spec = DisturbanceSpec("periodic")
    a = rk4_step(hover_state(), quad.hover_control(), quad, spec, 1.0, DT, rng=np.random.default_rng(5))
    b = rk4_step(hover_state(), quad.hover_control(), quad, spec, 1.0, DT, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_simulation_fault_on_nonfinite(quad):
    s = hover_state()
    s[1] = np.inf
    with pytest.raises(SimulationFault):
        rk4_step(s, quad.hover_control(), quad, DisturbanceSpec("none"), 0.0, DT)


def _fd_jac(fun, x, h=1e-6):
    cols = []
    for e in np.eye(x.size):
        cols.append((fun(x + h * e) - fun(x - h * e)) / (2 * h))
    return np.column_stack(cols)


def test_jacobians_match_finite_differences(quad, rng):
    for _ in range(100):
        s = hover_state() + rng.normal(0, 0.2, 6)
        u = quad.hover_control() + rng.normal(0, 0.02, 2)
        a, b = nominal_jacobians(s, u, quad, DT)
        np.testing.assert_allclose(a, _fd_jac(lambda x: nominal_discrete(x, u, quad, DT), s), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(b, _fd_jac(lambda v: nominal_discrete(s, v, quad, DT), u), rtol=1e-6, atol=1e-7)


def test_residual_jacobians_match_finite_differences(quad, rng):
    # state/control dependent extra acceleration r(s, u) = G s + H u + c
    g_mat = rng.normal(0, 0.5, (3, 6))
    h_mat = rng.normal(0, 0.5, (3, 2))
    c = rng.normal(0, 0.1, 3)
    s = hover_state() + rng.normal(0, 0.1, 6)
    u = quad.hover_control() + rng.normal(0, 0.01, 2)

    def step(x, v):
        return residual_step(x, v, quad, DT, g_mat @ x + h_mat @ v + c)

    a, b = rk4_jacobians(s, u, quad, DT, g_mat @ s + h_mat @ u + c, g_mat, h_mat)
    np.testing.assert_allclose(a, _fd_jac(lambda x: step(x, u), s), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(b, _fd_jac(lambda v: step(s, v), u), rtol=1e-6, atol=1e-7)


def test_jacobians_batched_equal_single(quad, rng):
    s = hover_state() + rng.normal(0, 0.1, (4, 6))
    u = quad.hover_control() + rng.normal(0, 0.01, (4, 2))
    a, b = nominal_jacobians(s, u, quad, DT)
    for i in range(4):
        ai, bi = nominal_jacobians(s[i], u[i], quad, DT)
        np.testing.assert_allclose(a[i], ai, rtol=0, atol=1e-15)
        np.testing.assert_allclose(b[i], bi, rtol=0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(0.0, 0.15), st.floats(0.0, 0.15))
def test_symmetric_thrust_keeps_attitude(phi, t_a, t_b):
    quad = QuadParams()
    thrust = 0.5 * (t_a + t_b)
    s = np.array([0.0, 0.0, 1.0, 0.0, phi, 0.0])
    nxt = nominal_discrete(s, [thrust, thrust], quad, DT)
    assert nxt[4] == pytest.approx(phi, abs=1e-15)
    assert nxt[5] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_horizontal_translation_invariance(x0, vx0):
    quad = QuadParams()
    u = np.array([0.13, 0.135])
    base = np.array([0.0, vx0, 1.0, 0.0, 0.05, 0.0])
    shifted = base.copy()
    shifted[0] = x0
    d = nominal_discrete(shifted, u, quad, DT) - nominal_discrete(base, u, quad, DT)
    assert d[0] == pytest.approx(x0, abs=1e-12)
    np.testing.assert_allclose(d[1:], 0.0, atol=1e-12)


def test_noiseless_disturbance_is_pure_function_of_time():
    spec = DisturbanceSpec("periodic", noise_sigma=0.0)
    a = disturbance_accel(spec, 1.234, np.random.default_rng(1))
    b = disturbance_accel(spec, 1.234, np.random.default_rng(99))
    assert a == b == disturbance_mean(spec, 1.234)
