"""Relay-feedback auto-tuning with Ziegler-Nichols ultimate-cycle gains.

The tuner drives the plant with an on/off relay around the target
temperature until a sustained limit cycle appears, measures its amplitude
and period, and maps the ultimate gain Ku = 4d/(pi*a) through the classic
Ziegler-Nichols table: kp = 0.6*Ku, ki = 2*kp/Pu, kd = kp*Pu/8.

Needs no model knowledge, so it suits in-place retuning when a chamber is
reconfigured.  A small hysteresis band keeps the relay from chattering on
sensor noise; it is kept well below the observed amplitude so the ideal
relay describing function stays accurate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

from .pid import PidGains
from .thermal import PlantInput, PlantParams, ThermalState, plant_step


class TuningFailed(RuntimeError):
    """No sustained oscillation within the observation horizon; the caller
    should keep its prior gains."""


class RelayPlant(Protocol):
    """Minimal loop surface the tuner needs."""

    def measure(self) -> float: ...
    def apply(self, duty_frac: float) -> None: ...
    def advance(self, dt: float) -> None: ...


class ThermalLoop:
    """Adapter exposing the chamber model to the tuner (and to scripted
    closed-loop tests): measurement is the chamber air temperature."""

    def __init__(self, params: PlantParams, state: ThermalState):
        self.params = params
        self.state = state
        self._duty = 0.0

    def measure(self) -> float:
        return self.state.t_air_c

    def apply(self, duty_frac: float) -> None:
        self._duty = duty_frac

    def advance(self, dt: float) -> None:
        inp = PlantInput(duty=self._duty, door_open=self.state.door_open,
                         t_ambient_c=self.state.t_ambient_c)
        self.state = plant_step(self.state, inp, self.params, dt)


@dataclass(frozen=True)
class AutotuneResult:
    gains: PidGains
    amplitude_c: float      # half peak-to-peak of the limit cycle
    period_s: float         # Pu
    ultimate_gain: float    # Ku


def gains_from_ultimate(ku: float, pu: float) -> PidGains:
    """Ziegler-Nichols ultimate-cycle PID table."""
    kp = 0.6 * ku
    return PidGains(kp=kp, ki=2.0 * kp / pu, kd=kp * pu / 8.0)


def relay_autotune(plant: RelayPlant, relay_amplitude_pct: float,
                   observation_horizon_s: float, setpoint_c: float = 15.0,
                   hysteresis_c: float = 0.3, dt: float = 1.0,
                   min_periods: int = 3,
                   max_period_variation: float = 0.10) -> AutotuneResult:
    """Run the relay experiment and return tuned gains plus diagnostics.

    The relay switches the duty between 0 and relay_amplitude_pct on the
    sign of (measurement - setpoint) with +-hysteresis_c of slack.  The
    first two cycles are discarded as transient; at least min_periods full
    periods with period spread below max_period_variation must remain or
    TuningFailed is raised.
    """
    if not 0.0 < relay_amplitude_pct <= 100.0:
        raise ValueError("relay_amplitude_pct must be in (0, 100]")
    d = relay_amplitude_pct

    relay_on = plant.measure() > setpoint_c
    rise_times: list[float] = []   # OFF -> ON switch instants
    cycle_high: list[float] = []   # extrema of completed cycles
    cycle_low: list[float] = []
    cur_high = -math.inf
    cur_low = math.inf

    steps = int(round(observation_horizon_s / dt))
    for k in range(steps):
        t = k * dt
        m = plant.measure()
        e = m - setpoint_c
        if not relay_on and e > hysteresis_c:
            relay_on = True
            rise_times.append(t)
            if len(rise_times) > 1:
                cycle_high.append(cur_high)
                cycle_low.append(cur_low)
            cur_high, cur_low = -math.inf, math.inf
        elif relay_on and e < -hysteresis_c:
            relay_on = False
        cur_high = max(cur_high, m)
        cur_low = min(cur_low, m)
        plant.apply(d / 100.0 if relay_on else 0.0)
        plant.advance(dt)

    # Discard the two start-up cycles, keep the rest.
    periods = [b - a for a, b in zip(rise_times, rise_times[1:])][2:]
    highs, lows = cycle_high[2:], cycle_low[2:]
    if len(periods) < min_periods:
        raise TuningFailed(
            f"only {len(periods)} full periods observed, need {min_periods}")
    pu = sum(periods) / len(periods)
    spread = (max(periods) - min(periods)) / pu
    if spread >= max_period_variation:
        raise TuningFailed(
            f"period variation {spread:.1%} exceeds {max_period_variation:.0%}")

    amp = sum((h - l) for h, l in zip(highs, lows)) / (2.0 * len(highs))
    if amp <= 0:
        raise TuningFailed("limit cycle has no measurable amplitude")
    ku = 4.0 * d / (math.pi * amp)
    return AutotuneResult(gains=gains_from_ultimate(ku, pu),
                          amplitude_c=amp, period_s=pu, ultimate_gain=ku)
