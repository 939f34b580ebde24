"""Online residual learning: regressor, sample buffer and two-timescale updates."""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import residual_net as rn
from .plant import ACCEL_SLOTS, CONTROL_DIM, STATE_DIM, QuadParams, nominal_discrete
from .time_embedding import embed

TARGET_MODES = ("nominal_mismatch_accel", "raw_state_diff")
SCHEDULES = ("two_scale", "single")

# feature matrix columns: state (6), control (2), time in seconds (1)
N_FEATURES = STATE_DIM + CONTROL_DIM + 1


class Adam:
    """Adam over a fixed list of arrays, updated in place."""

    def __init__(self, arrays, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    @property
    def n_tracked(self) -> int:
        return sum(m.size for m in self.m)


class ResidualRegressor(RegressorMixin, BaseEstimator):
    """MLP regressor for acceleration residuals with an optional time embedding.

    ``X`` has columns ``[state (6), control (2), t]``; the network input is
    ``[state, control, embed(t)]`` or just ``[state, control]`` when
    ``time_embedding_dim`` is 0.  Predictions are in m/s^2 (rad/s^2 for the
    pitch slot): the raw network output is multiplied by ``output_scale``.
    """

    def __init__(self, time_embedding_dim=32, hidden_dim=64, output_scale=0.003,
                 lr_fast=1e-2, lr_slow=1e-3, betas=(0.9, 0.999), eps=1e-8, random_state=0):
        self.time_embedding_dim = time_embedding_dim
        self.hidden_dim = hidden_dim
        self.output_scale = output_scale
        self.lr_fast = lr_fast
        self.lr_slow = lr_slow
        self.betas = betas
        self.eps = eps
        self.random_state = random_state

    # -- setup -------------------------------------------------------------
    @property
    def input_dim(self) -> int:
        return rn.STATE_CONTROL_DIM + self.time_embedding_dim

    def initialize(self):
        if self.time_embedding_dim and self.time_embedding_dim % 2:
            raise ValueError("time_embedding_dim must be even")
        self.params_ = rn.init_params(self.random_state, self.input_dim, self.hidden_dim)
        self.optimizers_ = {}
        self.n_features_in_ = N_FEATURES
        return self

    def _optimizer(self, partition):
        opt = self.optimizers_.get(partition)
        if opt is None:
            lr = self.lr_slow if partition == "slow" else self.lr_fast
            opt = Adam(self.params_.arrays(partition), lr, self.betas, self.eps)
            self.optimizers_[partition] = opt
        return opt

    # -- features ----------------------------------------------------------
    def network_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        sc = X[..., :rn.STATE_CONTROL_DIM]
        if not self.time_embedding_dim:
            return sc
        return np.concatenate([sc, embed(X[..., -1], self.time_embedding_dim)], axis=-1)

    # -- inference ---------------------------------------------------------
    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, ensure_2d=True)
        out, _ = rn.forward(self.params_, self.network_input(X))
        return self.output_scale * out

    def input_jacobian(self, X):
        """d(prediction)/d[state, control], shape ``(n, 3, 8)``."""
        check_is_fitted(self, "params_")
        X = check_array(X, ensure_2d=True)
        return self.output_scale * rn.input_jacobian(self.params_, self.network_input(X))

    def loss(self, X, y) -> float:
        """Mean over rows of the squared L2 prediction error."""
        err = np.asarray(y, dtype=float) - self.predict(X)
        return float(np.mean(np.sum(err * err, axis=-1)))

    # -- training ----------------------------------------------------------
    def loss_gradient(self, X, y, partition="all"):
        z = self.network_input(X)
        out, cache = rn.forward(self.params_, z)
        err = self.output_scale * out - np.asarray(y, dtype=float)
        n = z.shape[0]
        loss = float(np.mean(np.sum(err * err, axis=-1)))
        grad_out = (2.0 / n) * self.output_scale * err
        g_fast, g_slow = rn.backward_params(self.params_, cache, grad_out, partition)
        grads = {"fast": g_fast, "slow": g_slow, "all": (g_slow or []) + (g_fast or [])}[partition]
        return loss, grads

    def partial_fit(self, X, y, partition="all"):
        """One Adam step on the chosen partition; returns the pre-step batch loss."""
        if not hasattr(self, "params_"):
            self.initialize()
        return self._update(check_array(X, ensure_2d=True), check_array(y, ensure_2d=True), partition)

    def _update(self, X, y, partition):
        # unvalidated path for the online learner, which builds X and y itself
        loss, grads = self.loss_gradient(X, y, partition)
        self._optimizer(partition).step(self.params_.arrays(partition), grads)
        self.last_loss_ = loss
        return self

    def fit(self, X, y, n_steps=200):
        """Full-batch training from a fresh initialization."""
        self.initialize()
        for _ in range(n_steps):
            self.partial_fit(X, y, "all")
        return self


@dataclass(frozen=True)
class Sample:
    t: float
    state: np.ndarray
    control: np.ndarray
    next_state: np.ndarray


class SampleBuffer:
    """Ring buffer of samples with their feature rows and residual targets."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def push(self, sample: Sample, features=None, target=None) -> None:
        self._items.append((sample, features, target))

    def __len__(self):
        return len(self._items)

    def samples(self) -> List[Sample]:
        return [item[0] for item in self._items]

    def latest(self, n: int):
        n = min(n, len(self._items))
        return [self._items[i] for i in range(len(self._items) - n, len(self._items))]

    def pick(self, indices):
        return [self._items[i] for i in indices]


def feature_row(t: float, state, control) -> np.ndarray:
    return np.concatenate([state, control, [t]])


def residual_target(sample: Sample, p: QuadParams, dt: float, mode: str = "nominal_mismatch_accel") -> np.ndarray:
    """Acceleration-level mismatch between the observed and nominal next state.

    ``raw_state_diff`` instead returns the literal observed change of the three
    velocity coordinates, ``next_state - state``.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    slots = list(ACCEL_SLOTS)
    if mode == "nominal_mismatch_accel":
        predicted = nominal_discrete(sample.state, sample.control, p, dt)
        return (np.asarray(sample.next_state)[slots] - predicted[slots]) / dt
    if mode == "raw_state_diff":
        return np.asarray(sample.next_state)[slots] - np.asarray(sample.state)[slots]
    raise ValueError(f"unknown target_mode {mode!r}; expected one of {TARGET_MODES}")


def loss(batch, regressor: ResidualRegressor, p: QuadParams, dt: float,
         mode: str = "nominal_mismatch_accel") -> float:
    """Mean squared residual-prediction error over a list of samples."""
    if not batch:
        raise ValueError("empty batch")
    X = np.stack([feature_row(s.t, s.state, s.control) for s in batch])
    y = np.stack([residual_target(s, p, dt, mode) for s in batch])
    return regressor.loss(X, y)


@dataclass(frozen=True)
class LearnerConfig:
    t_f: int = 10
    t_s: int = 25
    lr_f: float = 1e-2
    lr_s: float = 1e-3
    batch_f: int = 16
    batch_s: int = 64
    buffer_capacity: int = 5000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "two_scale"
    time_embedding_dim: int = 32
    output_scale: float = 0.003
    target_mode: str = "nominal_mismatch_accel"

    def __post_init__(self):
        if not self.t_f >= 1:
            raise ValueError("t_f: must be >= 1")
        if not self.t_s > self.t_f:
            raise ValueError("t_s: need t_s > t_f")
        for name in ("batch_f", "batch_s", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        for name in ("lr_f", "lr_s", "output_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be > 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule: unknown value {self.schedule!r}; expected one of {SCHEDULES}")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"target_mode: unknown value {self.target_mode!r}; expected one of {TARGET_MODES}")
        object.__setattr__(self, "betas", tuple(self.betas))


@dataclass
class UpdateReport:
    step: int
    fired_fast: bool = False
    fired_slow: bool = False
    fired_full: bool = False
    loss_f: float = float("nan")
    loss_s: float = float("nan")
    seconds: dict = field(default_factory=dict)

    @property
    def noop(self) -> bool:
        return not (self.fired_fast or self.fired_slow or self.fired_full)


class OnlineResidualLearner:
    """Streaming dataset plus the update schedule.

    ``schedule="two_scale"`` steps the output layer every ``t_f`` samples on
    the most recent ``batch_f`` samples and the hidden layers every ``t_s``
    samples on a random ``batch_s`` draw from the whole buffer.
    ``schedule="single"`` steps every parameter every ``t_f`` samples on the
    recent batch with ``lr_f``.
    """

    def __init__(self, config: LearnerConfig, quad: QuadParams, dt: float, seed=0):
        self.config = config
        self.quad = quad
        self.dt = dt
        self.regressor = ResidualRegressor(
            time_embedding_dim=config.time_embedding_dim, output_scale=config.output_scale,
            lr_fast=config.lr_f, lr_slow=config.lr_s, betas=config.betas, eps=config.eps,
            random_state=seed,
        ).initialize()
        self.buffer = SampleBuffer(config.buffer_capacity)
        self.rng = np.random.default_rng(seed)
        self.n_pushed = 0

    @property
    def params(self) -> rn.MlpParams:
        return self.regressor.params_

    def push(self, sample: Sample) -> None:
        target = residual_target(sample, self.quad, self.dt, self.config.target_mode)
        self.buffer.push(sample, feature_row(sample.t, sample.state, sample.control), target)
        self.n_pushed += 1

    def _step(self, items, partition):
        X = np.stack([it[1] for it in items])
        y = np.stack([it[2] for it in items])
        start = time.perf_counter()
        self.regressor._update(X, y, partition)
        return self.regressor.last_loss_, time.perf_counter() - start

    def maybe_update(self, step_index: Optional[int] = None) -> UpdateReport:
        """Run whichever updates are due at ``step_index``.

        ``step_index`` defaults to the number of samples pushed so far, so over
        S steps the fast update fires exactly floor(S / t_f) times and the slow
        one floor(S / t_s) times.
        """
        cfg = self.config
        step = self.n_pushed if step_index is None else step_index
        report = UpdateReport(step)
        if len(self.buffer) == 0 or step <= 0:
            return report
        if step % cfg.t_f == 0:
            recent = self.buffer.latest(cfg.batch_f)
            if cfg.schedule == "single":
                report.loss_f, report.seconds["full"] = self._step(recent, "all")
                report.fired_full = True
            else:
                report.loss_f, report.seconds["fast"] = self._step(recent, "fast")
                report.fired_fast = True
        if cfg.schedule == "two_scale" and step % cfg.t_s == 0:
            n = len(self.buffer)
            idx = self.rng.choice(n, size=cfg.batch_s, replace=n < cfg.batch_s)
            report.loss_s, report.seconds["slow"] = self._step(self.buffer.pick(idx), "slow")
            report.fired_slow = True
        return report
