"""Muscle force production and activation dynamics.

Force is ``-FLV(L, V, a) * f0`` with ``FLV = FL(L) * FV(V) * a + FP(L)``.
The curve shapes are fixed by their anchors rather than by a particular
published fit:

* FL(L) = (1 - s^2)^2 with s = (L - 1) / 0.5, zero outside |s| < 1. Peaks at
  1 for L = 1 and vanishes at L = 0.5 and 1.5 with zero slope.
* FV(v), v = V / v_max: zero for v <= -1, ``(1 + v)^2 / (1 - v / k)`` on the
  shortening side and ``FV_MAX - (FV_MAX - 1) / (1 + b v)`` when lengthening,
  with ``b`` matching slopes at v = 0. FV(-1) = 0, FV(0) = 1, FV(inf) = 1.35.
* FP(L) = 0.5 * k_p * max(0, L - 1)^2.

All three are C1. Activation uses either the switched time constant
``tau_switched`` or its logistic blend ``tau_smoothed``; ``mode`` selects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FL_HALF_WIDTH = 0.5
FV_CURVATURE = 0.5
FV_MAX = 1.35
FV_SLOPE0 = 2.0 + 1.0 / FV_CURVATURE
FV_LENGTHEN_RATE = FV_SLOPE0 / (FV_MAX - 1.0)
PASSIVE_STIFFNESS = 1.0

MODES = ("smoothed", "switched")


class MuscleError(ValueError):
    pass


@dataclass(frozen=True)
class MuscleParams:
    f0: float = 100.0
    l_opt: float = 1.0
    v_max: float = 10.0
    tau_a: float = 0.01
    tau_d: float = 0.04
    tau_smooth: float = 0.02

    def __post_init__(self):
        if self.f0 <= 0:
            raise MuscleError("f0 must be positive")
        if self.tau_a <= 0 or self.tau_d <= 0:
            raise MuscleError("time constants must be positive")
        if self.tau_smooth < 0:
            raise MuscleError("tau_smooth must be non-negative")
        if self.v_max <= 0:
            raise MuscleError("v_max must be positive")


@dataclass(frozen=True)
class MuscleState:
    a: float = 0.0
    L: float = 1.0
    V: float = 0.0


# -- force-length-velocity ------------------------------------------------------


def force_length(L):
    s = (np.asarray(L, dtype=float) - 1.0) / FL_HALF_WIDTH
    inner = np.clip(1.0 - s * s, 0.0, None)
    return inner * inner


def force_length_deriv(L):
    s = (np.asarray(L, dtype=float) - 1.0) / FL_HALF_WIDTH
    inside = np.abs(s) < 1.0
    return np.where(inside, -4.0 * s * (1.0 - s * s) / FL_HALF_WIDTH, 0.0)


def force_velocity(V, v_max=10.0):
    v = np.asarray(V, dtype=float) / v_max
    vs = np.clip(v, -1.0, 0.0)
    short = (1.0 + vs) ** 2 / (1.0 - vs / FV_CURVATURE)
    vl = np.clip(v, 0.0, None)
    lengthen = FV_MAX - (FV_MAX - 1.0) / (1.0 + FV_LENGTHEN_RATE * vl)
    return np.where(v <= 0.0, short, lengthen)


def force_velocity_deriv(V, v_max=10.0):
    v = np.asarray(V, dtype=float) / v_max
    vs = np.clip(v, -1.0, 0.0)
    den = 1.0 - vs / FV_CURVATURE
    d_short = (2.0 * (1.0 + vs) * den + (1.0 + vs) ** 2 / FV_CURVATURE) / den**2
    vl = np.clip(v, 0.0, None)
    d_len = (FV_MAX - 1.0) * FV_LENGTHEN_RATE / (1.0 + FV_LENGTHEN_RATE * vl) ** 2
    d = np.where(v <= 0.0, np.where(v <= -1.0, 0.0, d_short), d_len)
    return d / v_max


def force_passive(L):
    x = np.clip(np.asarray(L, dtype=float) - 1.0, 0.0, None)
    return 0.5 * PASSIVE_STIFFNESS * x * x


def force_passive_deriv(L):
    return PASSIVE_STIFFNESS * np.clip(np.asarray(L, dtype=float) - 1.0, 0.0, None)


def flv(L, V, a, v_max=10.0):
    """Scaled (dimensionless) muscle force; broadcasts over arrays."""
    return force_length(L) * force_velocity(V, v_max) * a + force_passive(L)


def flv_grad(L, V, a, v_max=10.0):
    """Partial derivatives of :func:`flv` with respect to (L, V, a)."""
    fl = force_length(L)
    fv = force_velocity(V, v_max)
    dL = force_length_deriv(L) * fv * a + force_passive_deriv(L)
    dV = fl * force_velocity_deriv(V, v_max) * a
    da = fl * fv
    return dL, dV, da


def actuator_force(params: MuscleParams, state: MuscleState) -> float:
    """Actuator force in newtons; negative values pull."""
    return -float(flv(state.L, state.V, state.a, params.v_max)) * params.f0


def estimate_f0(scale: float, actuator_acc0: float) -> float:
    """Peak force from a scale constant and the acceleration produced by unit force."""
    if not actuator_acc0 > 0:
        raise MuscleError("non-positive unit-force acceleration")
    return scale / actuator_acc0


# -- activation dynamics --------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    # two-branch form avoids overflow in exp
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tau_switched(u, a, params: MuscleParams):
    u = np.asarray(u, dtype=float)
    a = np.asarray(a, dtype=float)
    k = 0.5 + 1.5 * a
    return np.where(u > a, params.tau_a * k, params.tau_d / k)


def tau_smoothed(u, a, params: MuscleParams):
    """Logistic blend of tau_d and tau_a in x = u - a.

    The logistic argument is ``x / tau_smooth + 0.5``, so the midpoint sits at
    x = -0.5 * tau_smooth. With ``tau_smooth == 0`` this degrades to a hard
    switch at x = 0 (tau_a for x > 0, tau_d otherwise).
    """
    x = np.asarray(u, dtype=float) - np.asarray(a, dtype=float)
    if params.tau_smooth == 0:
        return np.where(x > 0, params.tau_a, params.tau_d)
    return params.tau_d + (params.tau_a - params.tau_d) * sigmoid(x / params.tau_smooth + 0.5)


def tau_smoothed_dx(u, a, params: MuscleParams):
    """Derivative of :func:`tau_smoothed` with respect to x = u - a."""
    x = np.asarray(u, dtype=float) - np.asarray(a, dtype=float)
    if params.tau_smooth == 0:
        return np.zeros_like(x)
    s = sigmoid(x / params.tau_smooth + 0.5)
    return (params.tau_a - params.tau_d) * s * (1.0 - s) / params.tau_smooth


def time_constant(u, a, params: MuscleParams, mode: str = "smoothed"):
    if mode == "smoothed":
        return tau_smoothed(u, a, params)
    if mode == "switched":
        return tau_switched(u, a, params)
    raise MuscleError(f"unknown activation mode {mode!r}")


def activation_rate(u, a, params: MuscleParams, mode: str = "smoothed"):
    """da/dt = (u - a) / tau(u, a)."""
    return (np.asarray(u, dtype=float) - a) / time_constant(u, a, params, mode)


def step_activation(u, a, dt: float, params: MuscleParams, mode: str = "smoothed"):
    """One Euler step of the activation ODE, clamped to [0, 1]."""
    if dt <= 0:
        raise MuscleError("dt must be positive")
    out = np.clip(a + dt * activation_rate(u, a, params, mode), 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out
