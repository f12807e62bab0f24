"""Two-mass thermal model of the insulated vaccine chamber.

The chamber air (plus shelving and interior surfaces) and the
representative vaccine pouch are each a lumped heat capacity, coupled to
one another and to ambient:

    c_air   * dT_a/dt = ua_wall*(T_amb - T_a) + ua_pouch*(T_p - T_a) - duty*q_pelt_max
    c_pouch * dT_p/dt = ua_pouch*(T_a - T_p)

ua_wall switches between its door-closed and door-open value; the Peltier
is modelled as constant-effectiveness heat removal (duty*q_pelt_max),
ignoring the COP dependence on temperature lift.  Integration is
fixed-step classical RK4 with inputs held constant across the step, so a
trajectory is a pure function of (state, inputs, params, dt) and is bit
reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple


def _clamp(v: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, v))


class ModelError(ValueError):
    """Non-physical state or input fed to the plant."""


@dataclass(frozen=True)
class PlantParams:
    """Chamber geometry and Peltier envelope.

    Defaults are sized so that full duty can hold 2 degC under a 24 degC
    room and the door-open time constant is a few hundred seconds:
    cooling floor 24 - 60/1.0 = -36 degC (clamped at t_min_c), door-open
    tau = c_air/(ua_wall_open + ua_pouch) ~ 294 s.
    """

    c_air: float = 5000.0          # J/K, chamber air + internals
    c_pouch: float = 2000.0        # J/K, representative vaccine pouch
    ua_wall_closed: float = 1.0    # W/K
    ua_wall_open: float = 15.0     # W/K
    ua_pouch: float = 2.0          # W/K, air <-> pouch coupling
    q_pelt_max: float = 60.0       # W net heat removal at full duty
    t_min_c: float = 2.0           # achievable envelope
    t_max_c: float = 98.0

    def __post_init__(self) -> None:
        for name in ("c_air", "c_pouch", "ua_wall_closed", "ua_wall_open",
                     "ua_pouch", "q_pelt_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.ua_wall_open <= self.ua_wall_closed:
            raise ValueError("ua_wall_open must exceed ua_wall_closed")
        if self.t_min_c >= self.t_max_c:
            raise ValueError("t_min_c must be below t_max_c")


@dataclass(frozen=True)
class ThermalState:
    """Simulated physical truth. `clamped` notes an envelope clamp in the
    step that produced this state; it is diagnostic, not a physical DOF."""

    t_air_c: float
    t_pouch_c: float
    door_open: bool = False
    t_ambient_c: float = 24.0
    clamped: bool = False


@dataclass(frozen=True)
class PlantInput:
    duty: float = 0.0              # Peltier duty fraction, clamped to [0, 1]
    door_open: bool = False
    t_ambient_c: float = 24.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "duty", _clamp(float(self.duty), 0.0, 1.0))


class Equilibrium(NamedTuple):
    t_air_c: float
    t_pouch_c: float
    clamped: bool


def _derivs(t_air: float, t_pouch: float, ua_wall: float, t_amb: float,
            duty: float, p: PlantParams) -> tuple[float, float]:
    d_air = (ua_wall * (t_amb - t_air)
             + p.ua_pouch * (t_pouch - t_air)
             - duty * p.q_pelt_max) / p.c_air
    d_pouch = p.ua_pouch * (t_air - t_pouch) / p.c_pouch
    return d_air, d_pouch


def plant_step(state: ThermalState, inp: PlantInput, params: PlantParams,
               dt: float) -> ThermalState:
    """Advance the chamber by dt seconds under constant inputs (RK4).

    dt must lie in (0, 5] so a single step stays well inside the model's
    fastest time constant.  The air node is clamped to the achievable
    envelope [t_min_c, t_max_c]; a clamp is flagged on the returned state.
    """
    if not (0.0 < dt <= 5.0):
        raise ValueError(f"dt must be in (0, 5] seconds, got {dt}")
    if not (math.isfinite(state.t_air_c) and math.isfinite(state.t_pouch_c)
            and math.isfinite(inp.t_ambient_c)):
        raise ModelError("non-finite temperature in plant state or input")

    ua_wall = params.ua_wall_open if inp.door_open else params.ua_wall_closed
    ta, tp = state.t_air_c, state.t_pouch_c
    amb, duty = inp.t_ambient_c, inp.duty

    k1a, k1p = _derivs(ta, tp, ua_wall, amb, duty, params)
    k2a, k2p = _derivs(ta + 0.5 * dt * k1a, tp + 0.5 * dt * k1p, ua_wall, amb, duty, params)
    k3a, k3p = _derivs(ta + 0.5 * dt * k2a, tp + 0.5 * dt * k2p, ua_wall, amb, duty, params)
    k4a, k4p = _derivs(ta + dt * k3a, tp + dt * k3p, ua_wall, amb, duty, params)

    t_air = ta + dt / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
    t_pouch = tp + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)

    clamped = False
    if not params.t_min_c <= t_air <= params.t_max_c:
        # envelope floor/ceiling binds: pin the air node there and let the
        # pouch relax against the pinned air instead of chasing the
        # unclamped excursion (exact single-pole solution)
        t_air = _clamp(t_air, params.t_min_c, params.t_max_c)
        clamped = True
        decay = math.exp(-params.ua_pouch * dt / params.c_pouch)
        t_pouch = t_air + (tp - t_air) * decay

    return ThermalState(t_air_c=t_air, t_pouch_c=t_pouch,
                        door_open=inp.door_open, t_ambient_c=amb,
                        clamped=clamped)


def equilibrium(params: PlantParams, duty: float, t_ambient_c: float,
                door_open: bool = False) -> Equilibrium:
    """Unique fixed point of the ODE: T_p = T_a = T_amb - duty*q/ua_wall,
    clamped to the achievable envelope."""
    if not 0.0 <= duty <= 1.0:
        raise ValueError(f"duty must be in [0, 1], got {duty}")
    ua_wall = params.ua_wall_open if door_open else params.ua_wall_closed
    raw = t_ambient_c - duty * params.q_pelt_max / ua_wall
    t = _clamp(raw, params.t_min_c, params.t_max_c)
    return Equilibrium(t_air_c=t, t_pouch_c=t, clamped=(t != raw))


def with_context(state: ThermalState, door_open: bool,
                 t_ambient_c: float) -> ThermalState:
    """State with updated door/ambient context (temperatures untouched)."""
    return replace(state, door_open=door_open, t_ambient_c=t_ambient_c)
