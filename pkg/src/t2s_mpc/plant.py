"""Planar quadrotor dynamics, acceleration disturbances and RK4 integration.

State layout (``numpy`` vector of length 6)::

    [x, vx, z, vz, phi, phidot]

Control layout (length 2): ``[t1, t2]``, left and right rotor thrust in N.

The same integrator serves as the simulated plant (with a disturbance on the
horizontal acceleration) and as the nominal model inside the controller, so
model mismatch only ever comes from the injected disturbance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

STATE_DIM = 6
CONTROL_DIM = 2

X, VX, Z, VZ, PHI, PHIDOT = range(STATE_DIM)
STATE_NAMES = ("x", "vx", "z", "vz", "phi", "phidot")
CONTROL_NAMES = ("t1", "t2")

# velocity coordinates whose time derivative carries an acceleration residual
ACCEL_SLOTS = (VX, VZ, PHIDOT)

DISTURBANCE_KINDS = ("none", "linear_drift", "periodic", "polynomial", "linear_with_step")


class SimulationFault(RuntimeError):
    """Raised when integration produces a non-finite state."""


@dataclass(frozen=True)
class QuadParams:
    mass: float = 0.027
    iyy: float = 1.4e-5
    arm_d: float = 0.0397
    gravity: float = 9.81
    t_max: float = 0.15

    def __post_init__(self):
        for name in ("mass", "iyy", "arm_d", "gravity", "t_max"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"QuadParams.{name} must be strictly positive, got {value!r}")

    @property
    def hover_thrust(self) -> float:
        """Per-rotor thrust that balances gravity."""
        return 0.5 * self.mass * self.gravity

    def hover_control(self) -> np.ndarray:
        return np.full(CONTROL_DIM, self.hover_thrust)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Time-varying acceleration disturbance applied to the horizontal axis.

    ``kappa`` is in m/s^3, ``amplitude`` and ``step_offset`` in m/s^2,
    ``period`` and ``step_time`` in s, ``poly_coeffs[k]`` multiplies ``t**k``.
    """

    kind: str = "none"
    kappa: float = 5e-4
    amplitude: float = 0.003
    period: float = 2.0
    poly_coeffs: tuple = (0.0, 2e-4, 5e-5)
    step_time: float = 10.0
    step_offset: float = 0.002
    noise_sigma: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}; expected one of {DISTURBANCE_KINDS}")
        if self.kind == "periodic" and not self.period > 0:
            raise ValueError("periodic disturbance needs period > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "poly_coeffs", tuple(float(c) for c in self.poly_coeffs))

    def label(self) -> str:
        if self.kind == "periodic":
            return f"periodic(A={self.amplitude:g},T={self.period:g})"
        if self.kind == "linear_drift":
            return f"linear_drift(kappa={self.kappa:g})"
        if self.kind == "polynomial":
            return "polynomial(" + ",".join(f"{c:g}" for c in self.poly_coeffs) + ")"
        if self.kind == "linear_with_step":
            return f"linear_with_step(kappa={self.kappa:g},step={self.step_offset:g}@{self.step_time:g})"
        return "none"


def disturbance_mean(spec: DisturbanceSpec, t: float) -> float:
    """Deterministic part of the disturbance at time ``t`` (no noise)."""
    kind = spec.kind
    if kind == "none":
        return 0.0
    if kind == "linear_drift":
        return spec.kappa * t
    if kind == "periodic":
        return spec.amplitude * math.sin(2.0 * math.pi * t / spec.period)
    if kind == "polynomial":
        acc = 0.0
        for c in reversed(spec.poly_coeffs):
            acc = acc * t + c
        return acc
    # linear_with_step
    return spec.kappa * t + (spec.step_offset if t >= spec.step_time else 0.0)


def sample_noise(spec: DisturbanceSpec, rng: Optional[np.random.Generator]) -> float:
    """Draw one noise value ``eps``; exactly 0.0 when the spec is noiseless."""
    if spec.kind == "none" or spec.noise_sigma == 0.0 or rng is None:
        return 0.0
    return float(rng.normal(0.0, spec.noise_sigma))


def disturbance_accel(spec: DisturbanceSpec, t: float, rng: Optional[np.random.Generator] = None) -> float:
    """Horizontal disturbance acceleration (m/s^2) at time ``t``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if spec.kind == "none":
        return 0.0
    return disturbance_mean(spec, t) + sample_noise(spec, rng)


def continuous_derivative(s, u, p: QuadParams) -> np.ndarray:
    """Continuous-time state derivative; broadcasts over leading axes."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    thrust = u[..., 0] + u[..., 1]
    phi = s[..., PHI]
    out = np.empty(np.broadcast_shapes(s.shape, u.shape[:-1] + (STATE_DIM,)))
    out[..., X] = s[..., VX]
    out[..., VX] = np.sin(phi) * thrust / p.mass
    out[..., Z] = s[..., VZ]
    out[..., VZ] = np.cos(phi) * thrust / p.mass - p.gravity
    out[..., PHI] = s[..., PHIDOT]
    out[..., PHIDOT] = (u[..., 1] - u[..., 0]) * p.arm_d / p.iyy
    return out


def _rk4(s: Sequence[float], t1: float, t2: float, p: QuadParams, dt: float,
         ax: tuple = (0.0, 0.0, 0.0), az: float = 0.0, aphi: float = 0.0) -> np.ndarray:
    # Scalar RK4 on python floats: ~10x faster than numpy for a single 6-vector.
    # ax holds the horizontal extra acceleration at stage times (t, t+dt/2, t+dt).
    inv_m = 1.0 / p.mass
    thrust = t1 + t2
    g = p.gravity
    torque = (t2 - t1) * p.arm_d / p.iyy + aphi
    x, vx, z, vz, phi, w = (float(v) for v in s)
    h = 0.5 * dt

    k1x, k1vx, k1z, k1vz, k1p, k1w = (
        vx, math.sin(phi) * thrust * inv_m + ax[0], vz, math.cos(phi) * thrust * inv_m - g + az, w, torque)
    p2 = phi + h * k1p
    k2x, k2vx, k2z, k2vz, k2p, k2w = (
        vx + h * k1vx, math.sin(p2) * thrust * inv_m + ax[1], vz + h * k1vz,
        math.cos(p2) * thrust * inv_m - g + az, w + h * k1w, torque)
    p3 = phi + h * k2p
    k3x, k3vx, k3z, k3vz, k3p, k3w = (
        vx + h * k2vx, math.sin(p3) * thrust * inv_m + ax[1], vz + h * k2vz,
        math.cos(p3) * thrust * inv_m - g + az, w + h * k2w, torque)
    p4 = phi + dt * k3p
    k4x, k4vx, k4z, k4vz, k4p, k4w = (
        vx + dt * k3vx, math.sin(p4) * thrust * inv_m + ax[2], vz + dt * k3vz,
        math.cos(p4) * thrust * inv_m - g + az, w + dt * k3w, torque)

    c = dt / 6.0
    return np.array((
        x + c * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        vx + c * (k1vx + 2.0 * k2vx + 2.0 * k3vx + k4vx),
        z + c * (k1z + 2.0 * k2z + 2.0 * k3z + k4z),
        vz + c * (k1vz + 2.0 * k2vz + 2.0 * k3vz + k4vz),
        phi + c * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
        w + c * (k1w + 2.0 * k2w + 2.0 * k3w + k4w),
    ))


def rk4_step(s, u, p: QuadParams, spec: DisturbanceSpec, t: float, dt: float,
             rng: Optional[np.random.Generator] = None, noise: Optional[float] = None) -> np.ndarray:
    """One plant step of length ``dt`` starting at time ``t``.

    The noise term is drawn once (or taken from ``noise``) and held constant
    across the four stages; the deterministic part is evaluated at the stage
    times.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if spec.kind == "none":
        ax = (0.0, 0.0, 0.0)
    else:
        eps = sample_noise(spec, rng) if noise is None else float(noise)
        ax = (disturbance_mean(spec, t) + eps,
              disturbance_mean(spec, t + 0.5 * dt) + eps,
              disturbance_mean(spec, t + dt) + eps)
    out = _rk4(s, float(u[0]), float(u[1]), p, dt, ax)
    if not np.all(np.isfinite(out)):
        raise SimulationFault(f"non-finite state at t={t:.4f}: {out}")
    return out


def nominal_discrete(s, u, p: QuadParams, dt: float) -> np.ndarray:
    """Disturbance-free RK4 step: the nominal discrete model."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    return _rk4(s, float(u[0]), float(u[1]), p, dt)


def residual_step(s, u, p: QuadParams, dt: float, accel) -> np.ndarray:
    """RK4 step with a constant extra acceleration on (vx, vz, phidot)."""
    a = accel
    return _rk4(s, float(u[0]), float(u[1]), p, dt, (float(a[0]),) * 3, float(a[1]), float(a[2]))


def _derivative_jacobians(s: np.ndarray, u: np.ndarray, p: QuadParams):
    """Batched df/ds (..., 6, 6) and df/du (..., 6, 2) of the continuous dynamics."""
    lead = s.shape[:-1]
    phi = s[..., PHI]
    sin, cos = np.sin(phi), np.cos(phi)
    thrust = u[..., 0] + u[..., 1]
    fx = np.zeros(lead + (STATE_DIM, STATE_DIM))
    fx[..., X, VX] = 1.0
    fx[..., VX, PHI] = cos * thrust / p.mass
    fx[..., Z, VZ] = 1.0
    fx[..., VZ, PHI] = -sin * thrust / p.mass
    fx[..., PHI, PHIDOT] = 1.0
    fu = np.zeros(lead + (STATE_DIM, CONTROL_DIM))
    fu[..., VX, :] = (sin / p.mass)[..., None]
    fu[..., VZ, :] = (cos / p.mass)[..., None]
    fu[..., PHIDOT, 0] = -p.arm_d / p.iyy
    fu[..., PHIDOT, 1] = p.arm_d / p.iyy
    return fx, fu


def rk4_jacobians(s, u, p: QuadParams, dt: float, accel=None, daccel_ds=None, daccel_du=None):
    """Exact Jacobians of one RK4 step by forward sensitivity propagation.

    ``accel`` (..., 3) is an extra acceleration held constant across the
    stages; ``daccel_ds`` (..., 3, 6) and ``daccel_du`` (..., 3, 2) are its
    derivatives with respect to the step's initial state and control.
    Returns ``A`` (..., 6, 6) and ``B`` (..., 6, 2).
    """
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    lead = s.shape[:-1]
    eye = np.eye(STATE_DIM)

    # the extra acceleration feeds every stage through the same initial-point sensitivity
    gx = np.zeros(lead + (STATE_DIM, STATE_DIM))
    gu = np.zeros(lead + (STATE_DIM, CONTROL_DIM))
    extra = np.zeros(lead + (STATE_DIM,))
    if accel is not None:
        slots = list(ACCEL_SLOTS)
        extra[..., slots] = accel
        if daccel_ds is not None:
            gx[..., slots, :] = daccel_ds
        if daccel_du is not None:
            gu[..., slots, :] = daccel_du

    def stage(point):
        k = continuous_derivative(point, u, p) + extra
        fx, fu = _derivative_jacobians(point, u, p)
        return k, fx, fu

    h = 0.5 * dt
    k1, fx, fu = stage(s)
    d1x = fx + gx
    d1u = fu + gu
    k2, fx, fu = stage(s + h * k1)
    d2x = fx @ (eye + h * d1x) + gx
    d2u = fx @ (h * d1u) + fu + gu
    k3, fx, fu = stage(s + h * k2)
    d3x = fx @ (eye + h * d2x) + gx
    d3u = fx @ (h * d2u) + fu + gu
    _, fx, fu = stage(s + dt * k3)
    d4x = fx @ (eye + dt * d3x) + gx
    d4u = fx @ (dt * d3u) + fu + gu

    c = dt / 6.0
    a_mat = eye + c * (d1x + 2.0 * d2x + 2.0 * d3x + d4x)
    b_mat = c * (d1u + 2.0 * d2u + 2.0 * d3u + d4u)
    return a_mat, b_mat


def nominal_jacobians(s, u, p: QuadParams, dt: float):
    """Jacobians ``(A, B)`` of :func:`nominal_discrete`; batched over leading axes."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    return rk4_jacobians(s, u, p, dt)


def hover_state(z: float = 1.0) -> np.ndarray:
    s = np.zeros(STATE_DIM)
    s[Z] = z
    return s
