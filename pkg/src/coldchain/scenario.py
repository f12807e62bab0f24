"""Declarative experiment descriptions and their loader.

A scenario is a JSON document; every field has a default so the minimal
file is `{"duration_s": 600}`.  Times of day accept "HH:MM[:SS]" strings
or bare seconds.  See docs/scenario-format.md for the full schema and
scenarios/fig4.scenario for the day/night cycling experiment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Optional

from .device import GpsRoute, PowerModel, SensorModel
from .pid import ControlConfig, PidGains, SetpointSchedule, parse_time_of_day
from .thermal import PlantParams

# frozen so a given scenario file always lands on the same timeline
DEFAULT_START_EPOCH_MS = 1735689600000   # 2025-01-01T00:00:00Z


class ScenarioError(ValueError):
    """Scenario file failed to parse or validate; message names the field."""


@dataclass(frozen=True)
class AutotuneSpec:
    relay_amplitude_pct: float = 50.0
    observation_horizon_s: float = 9000.0
    hysteresis_c: float = 0.3
    setpoint_c: Optional[float] = None   # None -> the schedule's day setpoint


@dataclass(frozen=True)
class TransientSpec:
    """Windows excluded from steady-state statistics."""

    post_setpoint_s: float = 900.0
    post_door_close_s: float = 300.0


@dataclass(frozen=True)
class ScenarioSpec:
    duration_s: float
    dt_s: float = 1.0
    seed: int = 0
    start_time_of_day_s: int = 0
    start_epoch_ms: int = DEFAULT_START_EPOCH_MS
    acceleration: float = 0.0            # sim seconds per wall second; 0 = free run
    device_id: str = "dev01"
    device_token: str = "token-dev01"
    plant: PlantParams = field(default_factory=PlantParams)
    t_init_c: Optional[float] = None     # None -> ambient at t=0
    schedule: SetpointSchedule = field(default_factory=SetpointSchedule)
    control: ControlConfig = field(default_factory=ControlConfig)
    telemetry_every_s: float = 10.0
    gains: Optional[PidGains] = None     # None -> autotune
    autotune: AutotuneSpec = field(default_factory=AutotuneSpec)
    sensor: SensorModel = field(default_factory=SensorModel)
    power: PowerModel = field(default_factory=PowerModel)
    gps_route: GpsRoute = field(default_factory=GpsRoute)
    ambient_profile: tuple = ((0.0, 24.0),)     # (time_s, degC)
    humidity_profile: tuple = ((0.0, 55.0),)    # (time_s, %RH)
    door_events: tuple = ()              # ((open_s, close_s), ...)
    outage_windows: tuple = ()
    sensor_fault_windows: tuple = ()
    buffer_capacity: int = 10000
    transients: TransientSpec = field(default_factory=TransientSpec)

    def mode_at(self, t_s: float) -> str:
        from .pid import schedule_setpoint
        tod = (self.start_time_of_day_s + t_s) % 86400
        sp = schedule_setpoint(self.schedule, tod)
        return "day" if sp == self.schedule.day_setpoint_c else "night"

    def setpoint_changes(self) -> list[float]:
        """Times (including t=0) where the scheduled setpoint switches."""
        changes = [0.0]
        step = self.control.sample_period_s
        n = int(round(self.duration_s / step))
        prev = self.mode_at(0.0)
        for k in range(1, n):
            mode = self.mode_at(k * step)
            if mode != prev:
                changes.append(k * step)
                prev = mode
        return changes


def _interp(profile, t_s: float) -> float:
    """Piecewise-linear lookup with flat extrapolation."""
    pts = profile
    if t_s <= pts[0][0]:
        return pts[0][1]
    for (t0, v0), (t1, v1) in zip(pts, pts[1:]):
        if t_s <= t1:
            return v0 + (v1 - v0) * (t_s - t0) / (t1 - t0)
    return pts[-1][1]


def ambient_at(spec: ScenarioSpec, t_s: float) -> float:
    return _interp(spec.ambient_profile, t_s)


def humidity_at(spec: ScenarioSpec, t_s: float) -> float:
    return _interp(spec.humidity_profile, t_s)


def door_open_at(spec: ScenarioSpec, t_s: float) -> bool:
    return any(a <= t_s < b for a, b in spec.door_events)


def link_up_at(spec: ScenarioSpec, t_s: float) -> bool:
    return not any(a <= t_s < b for a, b in spec.outage_windows)


def _time_of_day(value, where: str) -> int:
    if isinstance(value, str):
        try:
            return parse_time_of_day(value)
        except ValueError as exc:
            raise ScenarioError(f"{where}: {exc}") from exc
    if isinstance(value, (int, float)) and 0 <= value < 86400:
        return int(value)
    raise ScenarioError(f"{where}: expected HH:MM or seconds in [0, 86400)")


def _windows(raw, where: str, duration: float, allow_overlap: bool) -> tuple:
    if not isinstance(raw, list):
        raise ScenarioError(f"{where}: expected a list of [start, end] pairs")
    out = []
    for i, pair in enumerate(raw):
        if (not isinstance(pair, (list, tuple)) or len(pair) != 2
                or not all(isinstance(x, (int, float)) for x in pair)):
            raise ScenarioError(f"{where}[{i}]: expected [start_s, end_s]")
        a, b = float(pair[0]), float(pair[1])
        if not 0 <= a < b <= duration:
            raise ScenarioError(
                f"{where}[{i}]: [{a}, {b}] must be ordered and within "
                f"[0, {duration}]")
        out.append((a, b))
    out.sort()
    if not allow_overlap:
        for (a0, b0), (a1, b1) in zip(out, out[1:]):
            if a1 < b0:
                raise ScenarioError(
                    f"{where}: intervals [{a0}, {b0}] and [{a1}, {b1}] overlap")
    return tuple(out)


def _build(raw: dict, cls, where: str, **extra):
    """Construct a config dataclass from a JSON object, catching both
    unknown keys and the dataclass's own validation errors."""
    if not isinstance(raw, dict):
        raise ScenarioError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    bad = set(raw) - known
    if bad:
        raise ScenarioError(f"{where}: unknown field(s) {sorted(bad)}")
    try:
        return cls(**{**raw, **extra})
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def scenario_from_dict(data: dict) -> ScenarioSpec:
    if not isinstance(data, dict):
        raise ScenarioError("scenario root must be an object")
    if "duration_s" not in data:
        raise ScenarioError("duration_s is required")
    duration = data["duration_s"]
    if not isinstance(duration, (int, float)) or duration <= 0:
        raise ScenarioError("duration_s must be a positive number")
    duration = float(duration)

    dt = float(data.get("dt_s", 1.0))
    if not 0.0 < dt <= 5.0:
        raise ScenarioError("dt_s must be in (0, 5]")
    steps = duration / dt
    if abs(steps - round(steps)) > 1e-9:
        raise ScenarioError("dt_s must divide duration_s")

    control = _build(data.get("control", {}), ControlConfig, "control")
    ratio = control.sample_period_s / dt
    if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
        raise ScenarioError("control.sample_period_s must be a multiple of dt_s")

    schedule_raw = dict(data.get("schedule", {}))
    for key in ("day_start_s", "night_start_s"):
        if key in schedule_raw:
            schedule_raw[key] = _time_of_day(schedule_raw[key], f"schedule.{key}")
    schedule = _build(schedule_raw, SetpointSchedule, "schedule")

    gains_raw = data.get("gains")
    gains = _build(gains_raw, PidGains, "gains") if gains_raw is not None else None
    autotune = _build(data.get("autotune", {}), AutotuneSpec, "autotune")

    device = data.get("device", {})
    if not isinstance(device, dict):
        raise ScenarioError("device: expected an object")

    route_raw = data.get("gps_route")
    if route_raw is None:
        route = GpsRoute()
    else:
        if not isinstance(route_raw, list) or not route_raw:
            raise ScenarioError("gps_route: expected a non-empty list of "
                                "[time_s, lat, lon]")
        try:
            route = GpsRoute(waypoints=tuple(
                (float(t), float(lat), float(lon)) for t, lat, lon in route_raw))
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"gps_route: {exc}") from exc

    sensor_raw = dict(data.get("sensor", {}))
    if "fault_windows" in sensor_raw:
        raise ScenarioError("sensor.fault_windows: use top-level "
                            "sensor_fault_windows")
    fault_windows = _windows(data.get("sensor_fault_windows", []),
                             "sensor_fault_windows", duration, False)
    sensor = _build(sensor_raw, SensorModel, "sensor",
                    fault_windows=fault_windows)

    for profile_key in ("ambient_profile", "humidity_profile"):
        raw = data.get(profile_key)
        if raw is not None:
            if (not isinstance(raw, list) or not raw
                    or not all(isinstance(p, (list, tuple)) and len(p) == 2
                               for p in raw)):
                raise ScenarioError(f"{profile_key}: expected a non-empty list "
                                    "of [time_s, value] pairs")
            times = [p[0] for p in raw]
            if times != sorted(times):
                raise ScenarioError(f"{profile_key}: times must be ascending")

    known = {"duration_s", "dt_s", "seed", "start_time_of_day",
             "start_epoch_ms", "acceleration", "device", "plant", "t_init_c",
             "schedule", "control", "telemetry_every_s", "gains", "autotune",
             "sensor", "power", "gps_route", "ambient_profile",
             "humidity_profile", "door_events", "outage_windows",
             "sensor_fault_windows", "buffer_capacity", "transients"}
    bad = set(data) - known
    if bad:
        raise ScenarioError(f"unknown top-level field(s): {sorted(bad)}")

    try:
        return ScenarioSpec(
            duration_s=duration,
            dt_s=dt,
            seed=int(data.get("seed", 0)),
            start_time_of_day_s=_time_of_day(data.get("start_time_of_day", 0),
                                             "start_time_of_day"),
            start_epoch_ms=int(data.get("start_epoch_ms",
                                        DEFAULT_START_EPOCH_MS)),
            acceleration=float(data.get("acceleration", 0.0)),
            device_id=str(device.get("id", "dev01")),
            device_token=str(device.get("token", "token-dev01")),
            plant=_build(data.get("plant", {}), PlantParams, "plant"),
            t_init_c=(None if data.get("t_init_c") is None
                      else float(data["t_init_c"])),
            schedule=schedule,
            control=control,
            telemetry_every_s=float(data.get("telemetry_every_s", 10.0)),
            gains=gains,
            autotune=autotune,
            sensor=sensor,
            power=_build(data.get("power", {}), PowerModel, "power"),
            gps_route=route,
            ambient_profile=tuple((float(t), float(v))
                                  for t, v in data.get("ambient_profile",
                                                       [[0.0, 24.0]])),
            humidity_profile=tuple((float(t), float(v))
                                   for t, v in data.get("humidity_profile",
                                                        [[0.0, 55.0]])),
            door_events=_windows(data.get("door_events", []), "door_events",
                                 duration, False),
            outage_windows=_windows(data.get("outage_windows", []),
                                    "outage_windows", duration, True),
            sensor_fault_windows=fault_windows,
            buffer_capacity=int(data.get("buffer_capacity", 10000)),
            transients=_build(data.get("transients", {}), TransientSpec,
                              "transients"),
        )
    except ScenarioError:
        raise
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path: str) -> ScenarioSpec:
    """Parse and validate a scenario file; all errors carry the offending
    field name (and the parser's line/column for syntax trouble)."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from exc
    try:
        return scenario_from_dict(data)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
