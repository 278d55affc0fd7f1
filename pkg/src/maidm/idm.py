"""Intelligent Driver Model dynamics: acceleration law, desired gap, time stepping.

All functions accept scalars or numpy arrays and broadcast elementwise, so the
same code path serves single-vehicle rollouts, vectorized likelihoods, and
replicate ensembles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

THETA_NAMES = ("v0", "s0", "T", "alpha", "beta")

# Widely-used recommended values for [v0, s0, T, alpha, beta].
RECOMMENDED_THETA = (33.3, 2.0, 1.6, 0.73, 1.67)


def _check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class IdmParams:
    """IDM parameters.

    v0: desired (free-flow) speed, m/s
    s0: jam spacing, m
    T: safe time headway, s
    alpha: maximum acceleration, m/s^2
    beta: comfortable deceleration, m/s^2
    delta: acceleration exponent, fixed at 4 unless overridden
    s1: gap coefficient for the sqrt(v/v0) term, fixed at 0 unless overridden

    Fields may be scalars or same-shaped arrays (parameter ensembles).
    """

    v0: float
    s0: float
    T: float
    alpha: float
    beta: float
    delta: float = 4.0
    s1: float = 0.0

    def __post_init__(self):
        for name in THETA_NAMES:
            value = getattr(self, name)
            _check_finite(name, value)
            if not np.all(np.asarray(value) > 0):
                raise ValueError(f"{name} must be strictly positive, got {value!r}")
        _check_finite("delta", self.delta)
        _check_finite("s1", self.s1)

    @classmethod
    def recommended(cls, **overrides) -> "IdmParams":
        kwargs = dict(zip(THETA_NAMES, RECOMMENDED_THETA))
        kwargs.update(overrides)
        return cls(**kwargs)

    @classmethod
    def from_theta(cls, theta, delta: float = 4.0, s1: float = 0.0) -> "IdmParams":
        """Build from a length-5 vector (or 5 arrays) ordered as THETA_NAMES."""
        v0, s0, T, alpha, beta = theta
        return cls(v0=v0, s0=s0, T=T, alpha=alpha, beta=beta, delta=delta, s1=s1)

    def theta(self) -> np.ndarray:
        return np.asarray([getattr(self, name) for name in THETA_NAMES])


@dataclass(frozen=True)
class KinematicState:
    """Longitudinal position (m) and non-negative speed (m/s)."""

    x: float
    v: float

    def __post_init__(self):
        _check_finite("x", self.x)
        _check_finite("v", self.v)
        if not np.all(np.asarray(self.v) >= 0):
            raise ValueError(f"speed must be non-negative, got {self.v!r}")


@dataclass(frozen=True)
class CfInput:
    """Car-following stimulus: gap s (m, > 0), speed v (m/s), approach rate dv = v - v_lead (m/s)."""

    s: float
    v: float
    dv: float

    def __post_init__(self):
        for name in ("s", "v", "dv"):
            _check_finite(name, getattr(self, name))
        if not np.all(np.asarray(self.s) > 0):
            raise ValueError(f"gap must be strictly positive, got {self.s!r}")


def _desired_gap_raw(v, dv, params: IdmParams):
    dyn = v * dv / (2.0 * np.sqrt(params.alpha * params.beta))
    return params.s0 + params.s1 * np.sqrt(v / params.v0) + v * params.T + dyn


def _accel_raw(s, v, dv, params: IdmParams):
    # shared formula for the validated public entry point and the hot
    # simulation loops (which validate state once, not per step)
    s_star = _desired_gap_raw(v, dv, params)
    return params.alpha * (1.0 - (v / params.v0) ** params.delta - (s_star / s) ** 2)


def desired_gap(inp: CfInput, params: IdmParams):
    """Speed- and approach-dependent target spacing s*.

    May be negative for strongly negative dv; it is returned as-is because the
    acceleration law consumes it squared.
    """
    return _desired_gap_raw(inp.v, inp.dv, params)


def idm_acceleration(inp: CfInput, params: IdmParams):
    """IDM acceleration: alpha * (1 - (v/v0)^delta - (s*/s)^2)."""
    return _accel_raw(inp.s, inp.v, inp.dv, params)


def step(state: KinematicState, accel, dt: float) -> KinematicState:
    """Advance one time step with the trapezoidal (ballistic) update.

    Speed is clamped at zero; the clamped speed enters the position update so
    a stopping vehicle does not roll backwards.
    """
    if not np.all(np.asarray(dt) > 0):
        raise ValueError(f"dt must be positive, got {dt!r}")
    _check_finite("accel", accel)
    v_next = np.maximum(0.0, state.v + accel * dt)
    x_next = state.x + 0.5 * (state.v + v_next) * dt
    return KinematicState(x=x_next, v=v_next)


@dataclass(frozen=True)
class Rollout:
    """Simulated follower trajectory on the leader's time grid.

    Arrays are truncated at the first non-positive gap when `collided` is set;
    `collision_step` is the leader-grid index where the gap closed.
    """

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    gap: np.ndarray
    collided: bool = False
    collision_step: int | None = None


def rollout_deterministic(
    x_lead: np.ndarray,
    v_lead: np.ndarray,
    leader_length: float,
    init: KinematicState,
    params: IdmParams,
    dt: float,
) -> Rollout:
    """Closed-loop deterministic IDM rollout against a recorded leader.

    Each step evaluates the acceleration law on the simulated follower state
    against the recorded leader state, then applies `step`. A non-positive gap
    ends the rollout with a collision flag instead of raising.
    """
    x_lead = np.asarray(x_lead, dtype=float)
    v_lead = np.asarray(v_lead, dtype=float)
    if x_lead.shape != v_lead.shape or x_lead.ndim != 1 or x_lead.size == 0:
        raise ValueError("leader channels must be equal-length 1-D arrays")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    n = x_lead.size
    x = np.empty(n)
    v = np.empty(n)
    a = np.empty(n)
    gap = np.empty(n)
    x[0], v[0] = init.x, init.v
    collided = False
    collision_step = None
    for i in range(n):
        s = x_lead[i] - x[i] - leader_length
        if s <= 0.0:
            collided = True
            collision_step = i
            n = i
            break
        gap[i] = s
        a[i] = idm_acceleration(CfInput(s=s, v=v[i], dv=v[i] - v_lead[i]), params)
        if i + 1 < x_lead.size:
            nxt = step(KinematicState(x=x[i], v=v[i]), a[i], dt)
            x[i + 1], v[i + 1] = nxt.x, nxt.v
    t = np.arange(x_lead.size) * dt
    return Rollout(
        t=t[:n],
        x=x[:n],
        v=v[:n],
        a=a[:n],
        gap=gap[:n],
        collided=collided,
        collision_step=collision_step,
    )


def equilibrium_gap(v: float, params: IdmParams) -> float:
    """Gap at which acceleration vanishes for steady following at speed v < v0."""
    deficit = 1.0 - (v / params.v0) ** params.delta
    if np.any(np.asarray(deficit) <= 0):
        raise ValueError("no equilibrium gap at or above the desired speed")
    s_star = desired_gap(CfInput(s=1.0, v=v, dv=0.0), params)
    return s_star / np.sqrt(deficit)
