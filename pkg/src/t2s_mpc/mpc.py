"""Receding-horizon MPC over the nominal model plus a learned residual.

The optimal control problem is solved with box-constrained iLQR: a Riccati
backward pass whose feedforward term solves the per-step box QP exactly (the
control is two-dimensional, so every active set is enumerated), followed by
a clamped forward rollout with backtracking on the true cost.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator

from .plant import CONTROL_DIM, STATE_DIM, QuadParams, nominal_discrete, residual_step, rk4_jacobians
from .residual_net import STATE_CONTROL_DIM, forward, input_jacobian
from .time_embedding import embed

logger = logging.getLogger(__name__)

Q_DIAG = (5.0, 0.1, 5.0, 0.1, 0.1, 0.1)
R_DIAG = (0.1, 0.1)
ALPHAS = 0.5 ** np.arange(10)


class ComposedModel:
    """One-step map ``x' = RK4(f + r)`` where ``r`` is the learned residual.

    The residual is evaluated at the start of step ``k`` with the time
    embedding at ``t0 + k*dt`` (or ``t0`` for every step when
    ``time_varying`` is off) and held constant over the RK4 stages.  Without a
    regressor the map is exactly :func:`nominal_discrete`.
    """

    def __init__(self, quad: QuadParams, dt: float, regressor=None, t0: float = 0.0,
                 horizon: int = 20, time_varying: bool = True):
        self.quad = quad
        self.dt = dt
        self.t0 = t0
        self.horizon = horizon
        self.time_varying = time_varying
        self.regressor = regressor
        if regressor is None:
            return
        params = regressor.params_.copy()
        self._scale = regressor.output_scale
        self._emb_dim = regressor.time_embedding_dim
        self._params = params
        w1 = params.weights[0]
        self._w1_sc = w1[:, :STATE_CONTROL_DIM]
        self._hidden = list(zip(params.weights[1:-1], params.biases[1:-1]))
        self._w_out, self._b_out = params.weights[-1], params.biases[-1]
        if self._emb_dim:
            self._emb = self.embeddings()
            self._pre_time = self._emb @ w1[:, STATE_CONTROL_DIM:].T + params.biases[0]
        else:
            self._pre_time = np.broadcast_to(params.biases[0], (horizon, w1.shape[0]))

    def step_times(self) -> np.ndarray:
        k = np.arange(self.horizon) if self.time_varying else np.zeros(self.horizon)
        return self.t0 + k * self.dt

    def embeddings(self) -> np.ndarray:
        return embed(self.step_times(), self._emb_dim)

    def residual(self, x, u, k: int) -> np.ndarray:
        if self.regressor is None:
            return np.zeros(3)
        h = np.maximum(self._w1_sc @ np.concatenate((x, u)) + self._pre_time[k], 0.0)
        for w, b in self._hidden:
            h = np.maximum(w @ h + b, 0.0)
        return self._scale * (self._w_out @ h + self._b_out)

    def step(self, x, u, k: int = 0) -> np.ndarray:
        if self.regressor is None:
            return nominal_discrete(x, u, self.quad, self.dt)
        return residual_step(x, u, self.quad, self.dt, self.residual(x, u, k))

    def linearize(self, xs, us):
        """Per-step Jacobians ``A (n, 6, 6)`` and ``B (n, 6, 2)`` of :meth:`step`."""
        if self.regressor is None:
            return rk4_jacobians(xs, us, self.quad, self.dt)
        z = np.column_stack([xs, us])
        if self._emb_dim:
            z = np.column_stack([z, self._emb[:len(xs)]])
        out, _ = forward(self._params, z)
        jac = self._scale * input_jacobian(self._params, z)
        return rk4_jacobians(xs, us, self.quad, self.dt, self._scale * out,
                             jac[:, :, :STATE_DIM], jac[:, :, STATE_DIM:])


class LinearModel:
    """Time-invariant affine model ``x' = A x + B u + c`` (testing and oracles)."""

    def __init__(self, a, b, c=None):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.c = np.zeros(self.a.shape[0]) if c is None else np.asarray(c, dtype=float)

    def step(self, x, u, k=0):
        return self.a @ x + self.b @ u + self.c

    def linearize(self, xs, us):
        n = len(xs)
        return np.broadcast_to(self.a, (n,) + self.a.shape), np.broadcast_to(self.b, (n,) + self.b.shape)


@dataclass
class OcpProblem:
    x0: np.ndarray
    x_ref: np.ndarray           # (N + 1, n)
    model: object
    q_diag: np.ndarray
    r_diag: np.ndarray
    qf_diag: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    u_ref: np.ndarray

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.x_ref = np.atleast_2d(np.asarray(self.x_ref, dtype=float))
        for name in ("q_diag", "r_diag", "qf_diag", "u_min", "u_max", "u_ref"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if np.any(self.q_diag < 0) or np.any(self.qf_diag < 0) or np.any(self.r_diag <= 0):
            raise ValueError("need Q, Qf >= 0 and R > 0")
        if np.any(self.u_min > self.u_max):
            raise ValueError("u_min must not exceed u_max")

    @property
    def horizon(self) -> int:
        return self.x_ref.shape[0] - 1


@dataclass
class OcpSolution:
    controls: np.ndarray        # (N, m)
    states: np.ndarray          # (N + 1, n), states[0] == x0
    cost: float
    iterations: int
    converged: bool
    diagnostic: str = ""

    def shifted(self) -> np.ndarray:
        """Controls advanced one step, last control repeated (warm start)."""
        return np.vstack([self.controls[1:], self.controls[-1:]])


def rollout(problem: OcpProblem, controls) -> np.ndarray:
    xs = np.empty((problem.horizon + 1, problem.x0.size))
    xs[0] = problem.x0
    step = problem.model.step
    for k in range(problem.horizon):
        xs[k + 1] = step(xs[k], controls[k], k)
    return xs


def trajectory_cost(problem: OcpProblem, xs, us) -> float:
    dx = xs - problem.x_ref
    du = us - problem.u_ref
    cost = np.sum(dx[:-1] ** 2 @ problem.q_diag) + np.sum(du ** 2 @ problem.r_diag) + dx[-1] ** 2 @ problem.qf_diag
    return float(cost) if np.isfinite(cost) else float("inf")


def box_qp(h, g, lo, hi):
    """Minimize ``0.5 d'Hd + g'd`` over ``lo <= d <= hi`` for small positive-definite ``H``.

    Returns ``(d, free)`` where ``free`` marks coordinates not at a bound.
    """
    d = -np.linalg.solve(h, g)
    if np.all(d >= lo) and np.all(d <= hi):
        return d, np.ones(d.size, dtype=bool)
    best, best_val, best_free = None, np.inf, None
    for pattern in itertools.product((0, -1, 1), repeat=d.size):
        pattern = np.array(pattern)
        free = pattern == 0
        cand = np.where(pattern < 0, lo, hi).astype(float)
        if free.any():
            fixed = ~free
            rhs = g[free] + h[np.ix_(free, fixed)] @ cand[fixed]
            cand[free] = -np.linalg.solve(h[np.ix_(free, free)], rhs)
            if np.any(cand[free] < lo[free] - 1e-12) or np.any(cand[free] > hi[free] + 1e-12):
                continue
        val = 0.5 * cand @ h @ cand + g @ cand
        if val < best_val:
            best, best_val, best_free = cand, val, free
    return best, best_free


def _inv_pd(m):
    """Inverse of a positive-definite matrix, or None if it is not PD."""
    if m.shape == (2, 2):
        a, b, c, d = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
        det = a * d - b * c
        if a <= 0 or det <= 0:
            return None
        return np.array(((d, -b), (-c, a))) / det
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return None
    return np.linalg.inv(m)


def _backward_pass(problem, xs, us, a_mats, b_mats, mu):
    n_u = us.shape[1]
    dx = xs - problem.x_ref
    du = us - problem.u_ref
    q2 = 2.0 * problem.q_diag
    r2 = 2.0 * problem.r_diag
    q2_mat = np.diag(q2)
    r2_mat = np.diag(r2) + mu * np.eye(n_u)
    lo_all = problem.u_min - us
    hi_all = problem.u_max - us
    vx = 2.0 * problem.qf_diag * dx[-1]
    vxx = np.diag(2.0 * problem.qf_diag)
    horizon = problem.horizon
    kff = np.zeros((horizon, n_u))
    gains = np.zeros((horizon, n_u, xs.shape[1]))
    dv1 = dv2 = 0.0
    for k in range(horizon - 1, -1, -1):
        a, b = a_mats[k], b_mats[k]
        at_vxx = a.T @ vxx
        bt_vxx = b.T @ vxx
        qx = q2 * dx[k] + a.T @ vx
        qu = r2 * du[k] + b.T @ vx
        qxx = q2_mat + at_vxx @ a
        quu = r2_mat + bt_vxx @ b            # regularized
        qux = bt_vxx @ a
        quu_inv = _inv_pd(quu)
        if quu_inv is None:
            return None
        d = -quu_inv @ qu
        lo, hi = lo_all[k], hi_all[k]
        if np.all(d >= lo) and np.all(d <= hi):
            gain = -quu_inv @ qux
        else:
            d, free = box_qp(quu, qu, lo, hi)
            gain = np.zeros((n_u, xs.shape[1]))
            if free.any():
                gain[free] = -np.linalg.solve(quu[np.ix_(free, free)], qux[free])
        kff[k], gains[k] = d, gain
        quu_d = quu @ d
        dv1 += d @ qu
        dv2 += 0.5 * d @ quu_d
        vx = qx + gain.T @ (quu_d + qu) + qux.T @ d
        vxx = qxx + gain.T @ (quu @ gain + qux) + qux.T @ gain
        vxx = 0.5 * (vxx + vxx.T)
    return kff, gains, dv1, dv2


def solve(problem: OcpProblem, warm_start=None, max_iter: int = 50, tol: float = 1e-8) -> OcpSolution:
    """Box-constrained iLQR.

    ``warm_start`` is an ``(N, m)`` control array or an :class:`OcpSolution`
    (used as-is; call :meth:`OcpSolution.shifted` for receding-horizon
    warm starts).  Defaults to ``u_ref`` on every step.
    """
    horizon = problem.horizon
    if warm_start is None:
        us = np.tile(problem.u_ref, (horizon, 1))
    else:
        us = warm_start.controls if isinstance(warm_start, OcpSolution) else np.asarray(warm_start, dtype=float)
        us = np.array(us[:horizon], dtype=float)
    us = np.clip(us, problem.u_min, problem.u_max)
    xs = rollout(problem, us)
    cost = trajectory_cost(problem, xs, us)
    if not np.isfinite(cost):
        return OcpSolution(us, xs, cost, 0, False, "non-finite cost at initialization")

    mu, converged, diagnostic = 0.0, False, ""
    iterations = 0
    model_step = problem.model.step
    while iterations < max_iter:
        iterations += 1
        a_mats, b_mats = problem.model.linearize(xs[:-1], us)
        result = _backward_pass(problem, xs, us, a_mats, b_mats, mu)
        if result is None:
            mu = max(10.0 * mu, 1e-6)
            if mu > 1e8:
                diagnostic = "regularization limit in backward pass"
                break
            continue
        kff, gains, dv1, dv2 = result
        if -(dv1 + dv2) < tol:
            converged = True
            break
        accepted = False
        for alpha in ALPHAS:
            new_us = np.empty_like(us)
            new_xs = np.empty_like(xs)
            new_xs[0] = problem.x0
            for k in range(horizon):
                u = us[k] + alpha * kff[k] + gains[k] @ (new_xs[k] - xs[k])
                new_us[k] = np.minimum(np.maximum(u, problem.u_min), problem.u_max)
                new_xs[k + 1] = model_step(new_xs[k], new_us[k], k)
            new_cost = trajectory_cost(problem, new_xs, new_us)
            if new_cost < cost:
                accepted = True
                break
        if not accepted:
            mu = max(10.0 * mu, 1e-6)
            if mu > 1e8:
                diagnostic = "line search failed"
                break
            continue
        decrease = cost - new_cost
        xs, us, cost = new_xs, new_us, new_cost
        mu = 0.0 if mu <= 1e-6 else mu / 10.0
        if decrease < tol:
            converged = True
            break
    else:
        diagnostic = "iteration limit"
    return OcpSolution(us, xs, cost, iterations, converged, diagnostic)


class MPCController(BaseEstimator):
    """Receding-horizon controller; applies the first optimal control each step.

    ``residual`` is an optional fitted :class:`~t2s_mpc.learner.ResidualRegressor`
    whose current parameters are snapshotted at every solve.  ``reference``
    maps an array of times to reference states of shape ``(len(times), 6)``.
    """

    def __init__(self, horizon=20, dt=0.02, q_diag=Q_DIAG, r_diag=R_DIAG, qf_diag=None,
                 quad=None, max_iter=50, tol=1e-8, time_varying_embedding=True):
        self.horizon = horizon
        self.dt = dt
        self.q_diag = q_diag
        self.r_diag = r_diag
        self.qf_diag = qf_diag
        self.quad = quad
        self.max_iter = max_iter
        self.tol = tol
        self.time_varying_embedding = time_varying_embedding

    def reset(self):
        self.previous_ = None
        quad = self.quad_params
        self.last_control_ = quad.hover_control()
        return self

    @property
    def quad_params(self) -> QuadParams:
        return self.quad if self.quad is not None else QuadParams()

    def build_problem(self, x_now, t_now: float, reference: Callable, residual=None) -> OcpProblem:
        quad = self.quad_params
        times = t_now + self.dt * np.arange(self.horizon + 1)
        model = ComposedModel(quad, self.dt, residual, t0=t_now, horizon=self.horizon,
                              time_varying=self.time_varying_embedding)
        qf = self.q_diag if self.qf_diag is None else self.qf_diag
        return OcpProblem(
            x0=x_now, x_ref=reference(times), model=model, q_diag=self.q_diag, r_diag=self.r_diag,
            qf_diag=qf, u_min=np.zeros(CONTROL_DIM), u_max=np.full(CONTROL_DIM, quad.t_max),
            u_ref=quad.hover_control(),
        )

    def act(self, x_now, t_now: float, reference: Callable, residual=None):
        """Solve at ``(x_now, t_now)`` and return ``(control, solution, failed)``."""
        if not hasattr(self, "previous_"):
            self.reset()
        problem = self.build_problem(x_now, t_now, reference, residual)
        warm = None if self.previous_ is None else self.previous_.shifted()
        try:
            sol = solve(problem, warm, self.max_iter, self.tol)
        except (np.linalg.LinAlgError, FloatingPointError) as exc:
            logger.warning("MPC solve failed at t=%.3f: %s", t_now, exc)
            sol = None
        if sol is None or not np.isfinite(sol.cost) or not np.all(np.isfinite(sol.controls)):
            return self.last_control_.copy(), sol, True
        self.previous_ = sol
        u = np.clip(sol.controls[0], problem.u_min, problem.u_max)
        self.last_control_ = u
        return u.copy(), sol, False
