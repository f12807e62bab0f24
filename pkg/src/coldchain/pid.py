"""Discrete PID regulator and day/night setpoint scheduling.

Cooling convention: error = measurement - setpoint, so a chamber running
hot produces a positive output that drives the Peltier harder.  The
output is a percentage in [0, 100] which the time-proportioning stage
converts to an ON interval inside a fixed window.

Anti-windup is integral clamping; the derivative acts on the (filtered)
measurement so twice-daily setpoint steps cause no derivative kick.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


def _clamp(v: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, v))


class ControllerError(ValueError):
    """Non-finite measurement reached the controller."""


@dataclass(frozen=True)
class PidGains:
    kp: float = 0.0   # %duty per degC
    ki: float = 0.0   # %duty per degC*s
    kd: float = 0.0   # %duty per degC/s

    def __post_init__(self) -> None:
        if self.kp < 0 or self.ki < 0 or self.kd < 0:
            raise ValueError("gains must be non-negative")
        if self.kp == self.ki == self.kd == 0.0:
            raise ValueError("at least one gain must be positive")


@dataclass(frozen=True)
class PidState:
    """Controller memory.  deriv_filtered_c_s is the filter state needed
    by the derivative-on-measurement low-pass."""

    integral: float = 0.0            # degC*s
    last_measurement_c: float = 0.0
    deriv_filtered_c_s: float = 0.0
    last_output_pct: float = 0.0
    initialized: bool = False


@dataclass(frozen=True)
class ControlConfig:
    sample_period_s: float = 1.0
    window_s: float = 10.0           # time-proportioning window
    integral_min: float = -300.0     # degC*s
    integral_max: float = 300.0
    derivative_filter_alpha: float = 0.2   # (0, 1]; 1 = unfiltered
    heating_mode: bool = False       # negate the error for heating loops

    def __post_init__(self) -> None:
        if self.sample_period_s <= 0:
            raise ValueError("sample_period_s must be positive")
        ratio = self.window_s / self.sample_period_s
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("window_s must be an integer multiple of sample_period_s")
        if not 0.0 < self.derivative_filter_alpha <= 1.0:
            raise ValueError("derivative_filter_alpha must be in (0, 1]")
        if self.integral_min > self.integral_max:
            raise ValueError("integral_min must not exceed integral_max")


@dataclass(frozen=True)
class SetpointSchedule:
    """Day/night program; times are seconds since midnight."""

    day_start_s: int = 8 * 3600
    night_start_s: int = 20 * 3600
    day_setpoint_c: float = 15.0
    night_setpoint_c: float = 20.0

    def __post_init__(self) -> None:
        if self.day_start_s == self.night_start_s:
            raise ValueError("day_start and night_start must differ")
        for t in (self.day_start_s, self.night_start_s):
            if not 0 <= t < 86400:
                raise ValueError("schedule times must be within one day")


def pid_update(gains: PidGains, state: PidState, setpoint_c: float,
               measurement_c: float, dt: float,
               config: ControlConfig) -> tuple[float, PidState]:
    """One controller step; returns (output %, new state).

    output = clamp(kp*e + ki*integral' + kd*deriv, 0, 100) with
    integral' = clamp(integral + e*dt, min, max) and deriv the low-pass
    filtered measurement slope.  The first call uses deriv = 0.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not math.isfinite(measurement_c):
        raise ControllerError(f"non-finite measurement: {measurement_c}")

    sense = -1.0 if config.heating_mode else 1.0
    error = sense * (measurement_c - setpoint_c)
    integral = _clamp(state.integral + error * dt,
                      config.integral_min, config.integral_max)

    if state.initialized:
        raw = sense * (measurement_c - state.last_measurement_c) / dt
        alpha = config.derivative_filter_alpha
        deriv = (1.0 - alpha) * state.deriv_filtered_c_s + alpha * raw
    else:
        deriv = 0.0

    output = _clamp(gains.kp * error + gains.ki * integral + gains.kd * deriv,
                    0.0, 100.0)
    new_state = PidState(integral=integral, last_measurement_c=measurement_c,
                         deriv_filtered_c_s=deriv, last_output_pct=output,
                         initialized=True)
    return output, new_state


def freeze_measurement(state: PidState) -> PidState:
    """State to carry across a faulted sample: memory untouched, so the
    integral and derivative history do not see the gap."""
    return state


def reset_integral(state: PidState) -> PidState:
    return replace(state, integral=0.0)


def duty_to_activation(pid_value_pct: float, config: ControlConfig) -> float:
    """ON time (s) at the start of each window, quantized to whole sample
    periods with round-half-up."""
    if not 0.0 <= pid_value_pct <= 100.0:
        raise ValueError("pid_value_pct must be in [0, 100]")
    periods = math.floor(pid_value_pct / 100.0
                         * config.window_s / config.sample_period_s + 0.5)
    return periods * config.sample_period_s


def schedule_setpoint(schedule: SetpointSchedule, time_of_day_s: float) -> float:
    """Day setpoint on [day_start, night_start) in wall-clock order,
    wrapping at midnight; night setpoint otherwise."""
    t = time_of_day_s % 86400
    d, n = schedule.day_start_s, schedule.night_start_s
    if d < n:
        is_day = d <= t < n
    else:
        is_day = t >= d or t < n
    return schedule.day_setpoint_c if is_day else schedule.night_setpoint_c


def parse_time_of_day(text: str) -> int:
    """'HH:MM' or 'HH:MM:SS' -> seconds since midnight."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ValueError(f"expected HH:MM[:SS], got {text!r}")
    h, m = int(parts[0]), int(parts[1])
    s = int(parts[2]) if len(parts) == 3 else 0
    if not (0 <= h < 24 and 0 <= m < 60 and 0 <= s < 60):
        raise ValueError(f"invalid time of day: {text!r}")
    return h * 3600 + m * 60 + s
