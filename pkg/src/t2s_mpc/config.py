"""YAML experiment configs: schema, presets and line-numbered diagnostics.

Layout (every section optional, defaults in parentheses)::

    schema_version: 1
    experiment: {task, method, duration, control_rate, n_runs, base_seed,
                 init_pos_std, init_vel_std}
    disturbance: {kind, kappa, amplitude, period, poly_coeffs, step_time,
                  step_offset, noise_sigma, seed}
    reference: {kind, center, radius, period, phase}
    quad: {mass, inertia, arm, gravity, t_max}
    mpc: {horizon, q_diag, r_diag, qf_diag, max_iter, tol, time_varying_embedding}
    learner: {t_f, t_s, lr_f, lr_s, batch_f, batch_s, buffer_capacity, betas,
              eps, time_embedding_dim, output_scale, target_mode}
    grid: {tasks, methods, disturbances}

``grid.disturbances`` is a list of disturbance mappings or the string
``standard_grid`` (the six periodic cells plus the two drift forms).  A bare name
such as ``stabilize_periodic`` resolves to a preset shipped with the package.
"""

from __future__ import annotations

import dataclasses
import os
from importlib import resources
from typing import Any, Dict, Optional, Tuple

import yaml

from .harness import ExperimentConfig, MpcConfig, ReferenceTrajectory, SuiteConfig, standard_grid_disturbances
from .learner import LearnerConfig
from .plant import DisturbanceSpec, QuadParams

SCHEMA_VERSION = 1

SECTIONS = {
    "disturbance": DisturbanceSpec,
    "reference": ReferenceTrajectory,
    "quad": QuadParams,
    "mpc": MpcConfig,
    "learner": LearnerConfig,
}
EXPERIMENT_KEYS = ("task", "method", "duration", "control_rate", "n_runs", "base_seed",
                   "init_pos_std", "init_vel_std")
GRID_KEYS = ("tasks", "methods", "disturbances")
TOP_KEYS = ("schema_version", "experiment", "grid") + tuple(SECTIONS)


class ConfigError(ValueError):
    """Invalid config; ``str()`` is a ``source:line: field: problem`` diagnostic."""

    def __init__(self, source: str, line: Optional[int], field: str, problem: str):
        self.source, self.line, self.field, self.problem = source, line, field, problem
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {field}: {problem}")


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("t2s_mpc.configs").iterdir() if p.name.endswith(".yaml"))


def resolve(name_or_path: str) -> Tuple[str, str]:
    """``(source label, text)`` for a file path or a preset name."""
    if os.path.exists(name_or_path):
        with open(name_or_path) as fh:
            return name_or_path, fh.read()
    stem = name_or_path[:-5] if name_or_path.endswith(".yaml") else name_or_path
    res = resources.files("t2s_mpc.configs") / f"{stem}.yaml"
    if res.is_file():
        return f"preset:{stem}", res.read_text()
    raise ConfigError(name_or_path, None, "config",
                      f"no such file or preset (presets: {', '.join(preset_names())})")


def _line_map(node, path=(), out=None) -> Dict[tuple, int]:
    """Map key paths to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            out[p] = k.start_mark.line + 1
            _line_map(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            p = path + (i,)
            out[p] = v.start_mark.line + 1
            _line_map(v, p, out)
    return out


class _Ctx:
    def __init__(self, source: str, lines: Dict[tuple, int]):
        self.source, self.lines = source, lines

    def error(self, path: tuple, problem: str) -> ConfigError:
        line = None
        for k in range(len(path), 0, -1):
            line = self.lines.get(path[:k])
            if line:
                break
        return ConfigError(self.source, line, ".".join(str(p) for p in path), problem)

    def mapping(self, data, path, allowed) -> Dict[str, Any]:
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise self.error(path, "expected a mapping")
        for k in data:
            if k not in allowed:
                raise self.error(path + (k,), f"unknown field (allowed: {', '.join(allowed)})")
        return data

    def build(self, cls, data, path):
        names = [f.name for f in dataclasses.fields(cls)]
        data = self.mapping(data, path, names)
        kwargs = {}
        for k, v in data.items():
            if isinstance(v, list):
                v = tuple(v)
            kwargs[k] = v
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            msg = str(exc)
            bad = next((k for k in kwargs if msg.startswith(k + ":")), None)
            bad = bad or next((k for k in kwargs if f".{k} " in msg or f" {k} " in f" {msg} "), None)
            raise self.error(path + ((bad,) if bad else ()), msg) from None


def parse(text: str, source: str = "<string>"):
    """Parse config text into ``(ExperimentConfig, Optional[SuiteConfig])``."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(source, mark.line + 1 if mark else None, "syntax",
                          str(getattr(exc, "problem", exc))) from None
    ctx = _Ctx(source, _line_map(node) if node is not None else {})
    data = ctx.mapping(data if data is not None else {}, (), TOP_KEYS)
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ctx.error(("schema_version",), f"expected {SCHEMA_VERSION}, got {version!r}")

    parts = {name: ctx.build(cls, data[name], (name,)) for name, cls in SECTIONS.items() if name in data}
    exp = ctx.mapping(data.get("experiment"), ("experiment",), EXPERIMENT_KEYS)
    try:
        cfg = ExperimentConfig(**exp, **parts)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        field = msg.split(":", 1)[0] if ":" in msg else ""
        path = ("experiment", field) if field in EXPERIMENT_KEYS else ("experiment",)
        raise ctx.error(path, msg) from None

    suite = None
    if "grid" in data:
        grid = ctx.mapping(data["grid"], ("grid",), GRID_KEYS)
        dists = grid.get("disturbances", [dataclasses.asdict(cfg.disturbance)])
        if dists == "standard_grid":
            dists = standard_grid_disturbances(cfg.disturbance.noise_sigma, cfg.disturbance.seed)
        elif isinstance(dists, list):
            dists = [ctx.build(DisturbanceSpec, d, ("grid", "disturbances", i)) for i, d in enumerate(dists)]
        else:
            raise ctx.error(("grid", "disturbances"), "expected a list of disturbances or 'standard_grid'")
        for key in ("tasks", "methods"):
            if key in grid and not isinstance(grid[key], list):
                raise ctx.error(("grid", key), "expected a list")
        try:
            suite = SuiteConfig(base=cfg, tasks=tuple(grid.get("tasks", [cfg.task])),
                                disturbances=tuple(dists), methods=tuple(grid.get("methods", [cfg.method])))
        except ValueError as exc:
            key = str(exc).split(":", 1)[0]
            raise ctx.error(("grid", key), str(exc)) from None
    return cfg, suite


def load(name_or_path: str):
    source, text = resolve(name_or_path)
    return parse(text, source)


def dump(cfg: ExperimentConfig) -> str:
    """Serialize a config (without grid) in the same schema."""
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    out = {"schema_version": SCHEMA_VERSION,
           "experiment": {k: getattr(cfg, k) for k in EXPERIMENT_KEYS}}
    for name in SECTIONS:
        obj = getattr(cfg, name)
        out[name] = {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    return yaml.safe_dump(out, sort_keys=False)
