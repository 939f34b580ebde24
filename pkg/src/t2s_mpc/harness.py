"""Closed-loop experiments: references, method matrix, seeded runs and summaries."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .learner import LearnerConfig, OnlineResidualLearner, Sample
from .mpc import Q_DIAG, R_DIAG, MPCController
from .plant import (CONTROL_NAMES, STATE_DIM, STATE_NAMES, DisturbanceSpec, QuadParams, SimulationFault,
                    disturbance_mean, rk4_step, sample_noise)

logger = logging.getLogger(__name__)

TASKS = ("stabilize", "track_circle", "track_fig8")
METHODS = ("nominal_mpc", "neural_mpc", "t2s_no_time_emb", "t2s_no_two_scale", "t2s")
METHOD_LABELS = {
    "nominal_mpc": "Nominal MPC",
    "neural_mpc": "Neural MPC",
    "t2s_no_time_emb": "T2S-MPC w/o time emb",
    "t2s_no_two_scale": "T2S-MPC w/o two scales",
    "t2s": "T2S-MPC",
}

# method -> (uses learner, time embedding, two-timescale)
METHOD_MATRIX = {
    "nominal_mpc": (False, False, False),
    "neural_mpc": (True, False, False),
    "t2s_no_time_emb": (True, False, True),
    "t2s_no_two_scale": (True, True, False),
    "t2s": (True, True, True),
}


@dataclass(frozen=True)
class ReferenceTrajectory:
    kind: str = "stabilize"
    center: tuple = (0.0, 1.0)
    radius: float = 0.3
    period: float = 6.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("stabilize", "circle", "fig8"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.kind != "stabilize" and not (self.radius > 0 and self.period > 0):
            raise ValueError("tracking references need radius > 0 and period > 0")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def states(self, t) -> np.ndarray:
        """Full reference states, shape ``(len(t), 6)`` (or ``(6,)`` for scalar t)."""
        t_arr = np.asarray(t, dtype=float)
        out = np.zeros(t_arr.shape + (STATE_DIM,))
        cx, cz = self.center
        if self.kind == "stabilize":
            out[..., 0], out[..., 2] = cx, cz
            return out
        w = 2.0 * math.pi / self.period
        arg = w * t_arr + self.phase
        r = self.radius
        if self.kind == "circle":
            out[..., 0] = cx + r * np.cos(arg)
            out[..., 1] = -r * w * np.sin(arg)
            out[..., 2] = cz + r * np.sin(arg)
            out[..., 3] = r * w * np.cos(arg)
        else:
            out[..., 0] = cx + r * np.sin(arg)
            out[..., 1] = r * w * np.cos(arg)
            out[..., 2] = cz + 0.5 * r * np.sin(2.0 * arg)
            out[..., 3] = r * w * np.cos(2.0 * arg)
        return out

    __call__ = states


def reference_at(traj: ReferenceTrajectory, t: float):
    """``(x_ref, z_ref, full_state)`` at time ``t``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    s = traj.states(t)
    return float(s[0]), float(s[2]), s


def default_reference(task: str) -> ReferenceTrajectory:
    if task == "stabilize":
        return ReferenceTrajectory("stabilize", center=(0.0, 1.0))
    if task == "track_circle":
        return ReferenceTrajectory("circle", center=(0.0, 1.0), radius=0.3, period=6.0)
    if task == "track_fig8":
        return ReferenceTrajectory("fig8", center=(0.0, 1.0), radius=0.3, period=8.0)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    q_diag: tuple = Q_DIAG
    r_diag: tuple = R_DIAG
    qf_diag: Optional[tuple] = None
    max_iter: int = 50
    tol: float = 1e-8
    time_varying_embedding: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "stabilize"
    method: str = "t2s"
    disturbance: DisturbanceSpec = DisturbanceSpec("periodic")
    duration: float = 20.0
    control_rate: float = 50.0
    n_runs: int = 10
    base_seed: int = 0
    init_pos_std: float = 0.02
    init_vel_std: float = 0.01
    reference: Optional[ReferenceTrajectory] = None
    quad: QuadParams = QuadParams()
    mpc: MpcConfig = MpcConfig()
    learner: LearnerConfig = LearnerConfig()

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task: unknown value {self.task!r}; expected one of {TASKS}")
        if self.method not in METHODS:
            raise ValueError(f"method: unknown value {self.method!r}; expected one of {METHODS}")
        if self.n_runs < 1:
            raise ValueError("n_runs: must be >= 1")
        if not (self.duration > 0 and self.control_rate > 0):
            raise ValueError("duration and control_rate must be > 0")
        steps = self.duration * self.control_rate
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("duration * control_rate must be an integral number of steps")
        if self.reference is None:
            object.__setattr__(self, "reference", default_reference(self.task))

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate

    @property
    def n_steps(self) -> int:
        return int(round(self.duration * self.control_rate))

    def learner_config(self) -> Optional[LearnerConfig]:
        uses, emb, two_scale = METHOD_MATRIX[self.method]
        if not uses:
            return None
        return replace(self.learner,
                       time_embedding_dim=self.learner.time_embedding_dim if emb else 0,
                       schedule="two_scale" if two_scale else "single")


LOG_COLUMNS = (
    ["step", "t"] + list(STATE_NAMES) + list(CONTROL_NAMES) + ["x_ref", "z_ref", "error", "disturbance",
     "solver_iterations", "solver_cost", "solver_converged", "solver_failed",
     "fired_fast", "fired_slow", "fired_full", "loss_f", "loss_s"]
)


@dataclass
class RunLog:
    """Per-step record of one closed-loop run.

    Row ``i`` describes control step ``i``: ``t`` is the end of the step,
    the state is the one reached at ``t`` and ``error`` is its position
    distance to the reference at ``t``.
    """

    config: ExperimentConfig
    seed: int
    rows: List[tuple] = field(default_factory=list)
    failed: bool = False
    message: str = ""
    update_seconds: Dict[str, List[float]] = field(default_factory=dict)
    wall_seconds: float = 0.0
    # final learner of the run (not serialized); None for nominal_mpc
    learner: Optional[OnlineResidualLearner] = field(default=None, repr=False, compare=False)

    @property
    def errors(self) -> np.ndarray:
        col = LOG_COLUMNS.index("error")
        return np.array([r[col] for r in self.rows], dtype=float)

    @property
    def mean_error(self) -> float:
        e = self.errors
        return float(np.mean(e)) if e.size else float("nan")

    def column(self, name: str) -> np.ndarray:
        col = LOG_COLUMNS.index(name)
        return np.array([r[col] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.rows:
            writer.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return repr(float(v))


def initial_state(cfg: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    x0 = cfg.reference.states(0.0).copy()
    x0[[0, 2]] += rng.normal(0.0, cfg.init_pos_std, size=2)
    x0[[1, 3]] += rng.normal(0.0, cfg.init_vel_std, size=2)
    return x0


def run_once(cfg: ExperimentConfig, seed: int) -> RunLog:
    """One closed-loop simulation of ``cfg.method`` on ``cfg.task``."""
    started = time.perf_counter()
    # init and disturbance streams are shared by every method for a given seed
    init_ss, noise_ss, learn_ss = np.random.SeedSequence([seed, cfg.disturbance.seed]).spawn(3)
    init_rng = np.random.default_rng(init_ss)
    noise_rng = np.random.default_rng(noise_ss)
    dt, quad, spec, ref = cfg.dt, cfg.quad, cfg.disturbance, cfg.reference
    m = cfg.mpc
    controller = MPCController(horizon=m.horizon, dt=dt, q_diag=m.q_diag, r_diag=m.r_diag, qf_diag=m.qf_diag,
                               quad=quad, max_iter=m.max_iter, tol=m.tol,
                               time_varying_embedding=m.time_varying_embedding).reset()
    lcfg = cfg.learner_config()
    learner = None
    if lcfg is not None:
        learner = OnlineResidualLearner(lcfg, quad, dt, seed=int(learn_ss.generate_state(1)[0]))

    log = RunLog(cfg, seed)
    x = initial_state(cfg, init_rng)
    for i in range(cfg.n_steps):
        t = i * dt
        regressor = learner.regressor if learner is not None else None
        u, sol, failed = controller.act(x, t, ref, regressor)
        eps = sample_noise(spec, noise_rng)
        dist = disturbance_mean(spec, t) + eps
        try:
            x_next = rk4_step(x, u, quad, spec, t, dt, noise=eps)
        except SimulationFault as exc:
            log.failed, log.message = True, str(exc)
            break
        report = None
        if learner is not None:
            learner.push(Sample(t, x, u, x_next))
            report = learner.maybe_update()
            for kind, sec in report.seconds.items():
                log.update_seconds.setdefault(kind, []).append(sec)
        t_next = (i + 1) * dt
        ref_next = ref.states(t_next)
        err = math.hypot(x_next[0] - ref_next[0], x_next[2] - ref_next[2])
        log.rows.append((
            i, t_next, *x_next, *u, ref_next[0], ref_next[2], err, dist,
            sol.iterations if sol is not None else 0,
            sol.cost if sol is not None else float("nan"),
            bool(sol.converged) if sol is not None else False,
            bool(failed),
            bool(report.fired_fast) if report else False,
            bool(report.fired_slow) if report else False,
            bool(report.fired_full) if report else False,
            report.loss_f if report else float("nan"),
            report.loss_s if report else float("nan"),
        ))
        x = x_next
    log.wall_seconds = time.perf_counter() - started
    log.learner = learner
    return log


# -- suites ------------------------------------------------------------------

# Standard grid: periodic magnitude x period, plus the two drift forms
GRID_AMPLITUDES = (0.001, 0.003, 0.005)
GRID_PERIODS = (2.0, 4.0)


def standard_grid_disturbances(noise_sigma: float = 1e-4, seed: int = 0) -> List[DisturbanceSpec]:
    out = [DisturbanceSpec("periodic", amplitude=a, period=p, noise_sigma=noise_sigma, seed=seed)
           for a in GRID_AMPLITUDES for p in GRID_PERIODS]
    out.append(DisturbanceSpec("polynomial", noise_sigma=noise_sigma, seed=seed))
    out.append(DisturbanceSpec("linear_with_step", noise_sigma=noise_sigma, seed=seed))
    return out


@dataclass(frozen=True)
class SuiteConfig:
    """A grid of (task x disturbance x method) cells sharing one base config."""

    base: ExperimentConfig = ExperimentConfig()
    tasks: tuple = ("stabilize",)
    disturbances: tuple = ()
    methods: tuple = METHODS

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"methods: unknown value {m!r}; expected one of {METHODS}")
        for t in self.tasks:
            if t not in TASKS:
                raise ValueError(f"tasks: unknown value {t!r}; expected one of {TASKS}")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "disturbances", tuple(self.disturbances))

    def cells(self) -> List[ExperimentConfig]:
        out = []
        for task in self.tasks:
            ref = self.base.reference if task == self.base.task else None
            for dist in self.disturbances:
                for method in self.methods:
                    out.append(replace(self.base, task=task, method=method, disturbance=dist, reference=ref))
        return out


@dataclass
class CellResult:
    task: str
    method: str
    disturbance: DisturbanceSpec
    errors: List[float]
    seeds: List[int]
    n_failed: int = 0

    @property
    def n(self) -> int:
        return len(self.errors)

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors)) if self.errors else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.errors)) if self.errors else float("nan")


SUMMARY_COLUMNS = ("task", "method", "disturbance", "kind", "amplitude", "period", "kappa",
                   "mean", "std", "n", "n_failed")


@dataclass
class SummaryTable:
    cells: List[CellResult]

    def get(self, task: str, method: str, disturbance: DisturbanceSpec) -> CellResult:
        for c in self.cells:
            if c.task == task and c.method == method and c.disturbance == disturbance:
                return c
        raise KeyError((task, method, disturbance.label()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for c in self.cells:
            d = c.disturbance
            writer.writerow([c.task, c.method, d.label(), d.kind, repr(d.amplitude), repr(d.period),
                             repr(d.kappa), repr(c.mean), repr(c.std), c.n, c.n_failed])
        return buf.getvalue()

    def format(self) -> str:
        """Text table: one block per task, methods as rows, disturbances as columns."""
        lines = []
        tasks = list(dict.fromkeys(c.task for c in self.cells))
        for task in tasks:
            cells = [c for c in self.cells if c.task == task]
            dists = list(dict.fromkeys(c.disturbance for c in cells))
            methods = list(dict.fromkeys(c.method for c in cells))
            header = ["Method"] + [d.label() for d in dists]
            rows = []
            for m in methods:
                row = [METHOD_LABELS[m]]
                for d in dists:
                    c = next((c for c in cells if c.method == m and c.disturbance == d), None)
                    row.append("-" if c is None or not c.n else f"{c.mean:.4f} ± {c.std:.4f}")
                rows.append(row)
            widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
            lines.append(f"[{task}]")
            for r in [header] + rows:
                lines.append("  ".join(s.ljust(w) for s, w in zip(r, widths)).rstrip())
            lines.append("")
        return "\n".join(lines)


def run_seeds(cfg: ExperimentConfig) -> List[int]:
    return [cfg.base_seed + k for k in range(cfg.n_runs)]


def _run_job(args):
    cfg, seed = args
    return run_once(cfg, seed)


def run_suite(suite: SuiteConfig, jobs: int = 1, keep_logs: bool = False):
    """Run every cell ``n_runs`` times; returns a :class:`SummaryTable`.

    With ``keep_logs`` the second return value maps ``(cell index, seed)`` to
    its :class:`RunLog`.  Seeds are shared across cells, so methods in the
    same cell see identical initial states and noise.
    """
    cells = suite.cells()
    if not cells:
        raise ValueError("no cells: the grid is empty")
    jobs_list = [(cfg, seed) for cfg in cells for seed in run_seeds(cfg)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            logs = list(pool.map(_run_job, jobs_list))
    else:
        logs = [_run_job(j) for j in jobs_list]
    results, kept, pos = [], {}, 0
    for ci, cfg in enumerate(cells):
        res = CellResult(cfg.task, cfg.method, cfg.disturbance, [], [])
        for seed in run_seeds(cfg):
            log = logs[pos]
            pos += 1
            if keep_logs:
                kept[(ci, seed)] = log
            if log.failed:
                res.n_failed += 1
                warnings.warn(f"{cfg.method}/{cfg.task}/{cfg.disturbance.label()} seed {seed} failed: "
                              f"{log.message}; excluded from the mean")
                continue
            res.errors.append(log.mean_error)
            res.seeds.append(seed)
        results.append(res)
    table = SummaryTable(results)
    return (table, kept) if keep_logs else table


# -- timing ------------------------------------------------------------------

@dataclass
class TimingReport:
    fast: List[float]
    slow: List[float]
    full: List[float]

    @staticmethod
    def _mean(xs):
        return float(np.mean(xs)) if xs else float("nan")

    @property
    def fast_mean(self) -> float:
        return self._mean(self.fast)

    @property
    def slow_mean(self) -> float:
        return self._mean(self.slow)

    @property
    def full_mean(self) -> float:
        return self._mean(self.full)

    @property
    def fast_cheaper(self) -> bool:
        return self.fast_mean < self.full_mean

    def format(self) -> str:
        return (f"fast update: {1e3 * self.fast_mean:.3f} ms (n={len(self.fast)})\n"
                f"slow update: {1e3 * self.slow_mean:.3f} ms (n={len(self.slow)})\n"
                f"full update: {1e3 * self.full_mean:.3f} ms (n={len(self.full)})")


def timing_report(cfg: ExperimentConfig, seed: int = 0, check: bool = True) -> TimingReport:
    """Per-update wall time of T2S (fast, slow) and Neural MPC (full) over one run each.

    Only steps where an update actually ran are timed.
    """
    t2s = run_once(replace(cfg, method="t2s"), seed)
    neural = run_once(replace(cfg, method="neural_mpc"), seed)
    rep = TimingReport(t2s.update_seconds.get("fast", []), t2s.update_seconds.get("slow", []),
                       neural.update_seconds.get("full", []))
    if check and not rep.fast_cheaper:
        raise AssertionError(f"fast update ({rep.fast_mean:.3e} s) not cheaper than full ({rep.full_mean:.3e} s)")
    return rep


# -- plots -------------------------------------------------------------------

def _log_label(log: RunLog) -> str:
    if log.config is None:
        return getattr(log, "label", "run")
    return f"{METHOD_LABELS[log.config.method]} (seed {log.seed})"


def emit_plots(logs: Sequence[RunLog], out_dir, stem: str = "run") -> List[str]:
    """Write an error-curve SVG and an x-z trajectory SVG, each with its source CSV.

    Output is byte-deterministic for identical logs.
    """
    import os

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    logs = list(logs)
    if not logs:
        raise ValueError("emit_plots needs at least one log")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    with matplotlib.rc_context({"svg.hashsalt": "t2s-mpc", "svg.fonttype": "none"}):
        # error curves
        path = os.path.join(out_dir, f"{stem}_error")
        with open(path + ".csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "t", "error"])
            for log in logs:
                for t, e in zip(log.column("t"), log.errors):
                    w.writerow([_log_label(log), repr(float(t)), repr(float(e))])
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for log in logs:
            ax.plot(log.column("t"), log.errors, lw=1.0, label=_log_label(log))
        ax.set_xlabel("t [s]")
        ax.set_ylabel("position error [m]")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path + ".svg", metadata={"Date": None})
        plt.close(fig)
        written += [path + ".svg", path + ".csv"]

        # trajectories
        path = os.path.join(out_dir, f"{stem}_trajectory")
        with open(path + ".csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "t", "x", "z", "x_ref", "z_ref"])
            for log in logs:
                cols = [log.column(c) for c in ("t", "x", "z", "x_ref", "z_ref")]
                for vals in zip(*cols):
                    w.writerow([_log_label(log)] + [repr(float(v)) for v in vals])
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ref = logs[0]
        ax.plot(ref.column("x_ref"), ref.column("z_ref"), "k--", lw=0.8, label="reference")
        for log in logs:
            ax.plot(log.column("x"), log.column("z"), lw=1.0, label=_log_label(log))
        ax.set_xlabel("x [m]")
        ax.set_ylabel("z [m]")
        ax.set_aspect("equal", adjustable="datalim")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path + ".svg", metadata={"Date": None})
        plt.close(fig)
        written += [path + ".svg", path + ".csv"]
    return written
