"""Per-device control loop: the firmware analogue.

One agent owns one chamber: it reads the simulated sensors, runs the PID
schedule, time-proportions the Peltier, books battery energy, tracks the
GPS route, logs every emitted frame locally (the micro-SD analogue) and
queues it for uplink.  All timing is driven by an injected logical clock,
so accelerated simulation and live operation share this code path.

Sensor faults are data, not errors: a read inside a fault window returns
the in-band -1 sentinel on every affected field plus an explicit fault
flag, the activation plan is held and the integral frozen until readings
return.
"""

from __future__ import annotations

import math
import random
from bisect import bisect_right
from dataclasses import dataclass, replace
from typing import Optional

from .pid import (ControlConfig, PidGains, PidState, SetpointSchedule,
                  duty_to_activation, pid_update, reset_integral,
                  schedule_setpoint)
from .protocol import (ACTUATOR_BITS, ACTUATOR_NAMES, FAULT_SENTINEL,
                       FLAG_BATTERY_DEAD, FLAG_CLAMPED, FLAG_LOG_DEGRADED,
                       FLAG_SENSOR_FAULT, Command, CommandAck, SendBuffer,
                       TelemetrySample, encode_frame)
from .thermal import PlantInput, ThermalState


@dataclass(frozen=True)
class SensorModel:
    noise_sigma_c: float = 0.0
    noise_sigma_rh: float = 0.0
    quantum: float = 0.01            # reading quantization, degC
    fault_windows: tuple = ()        # ((start_s, end_s), ...), half-open

    def __post_init__(self) -> None:
        if self.noise_sigma_c < 0 or self.noise_sigma_rh < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.quantum <= 0:
            raise ValueError("quantum must be positive")

    def faulted_at(self, time_s: float) -> bool:
        return any(a <= time_s < b for a, b in self.fault_windows)


@dataclass(frozen=True)
class SensorReading:
    t_chamber_c: float
    t_pouch_c: float
    rh_pct: float
    faulted: bool = False


def _quantize(value: float, quantum: float) -> float:
    return round(round(value / quantum) * quantum, 9)


def read_sensors(truth: ThermalState, model: SensorModel,
                 rng: random.Random, time_s: float,
                 rh_true_pct: float = 55.0) -> SensorReading:
    """Quantized noisy snapshot of the chamber; -1 everywhere plus the
    fault flag while time_s sits inside a fault window."""
    if model.faulted_at(time_s):
        return SensorReading(FAULT_SENTINEL, FAULT_SENTINEL, FAULT_SENTINEL,
                             faulted=True)
    t_chamber = _quantize(truth.t_air_c + rng.gauss(0.0, model.noise_sigma_c),
                          model.quantum)
    t_pouch = _quantize(truth.t_pouch_c + rng.gauss(0.0, model.noise_sigma_c),
                        model.quantum)
    rh = _quantize(rh_true_pct + rng.gauss(0.0, model.noise_sigma_rh),
                   model.quantum)
    return SensorReading(t_chamber, t_pouch, rh)


@dataclass(frozen=True)
class PowerModel:
    """12 V x 6 A = 72 W electrical draw when the Peltier is on (the
    nameplate says ~100 W but the stated volts and amps say 72; the
    measured figures win here)."""

    bus_voltage_v: float = 12.0
    peltier_current_a: float = 6.0
    idle_power_w: float = 3.0
    battery_capacity_wh: float = 380.0
    on_grid: bool = True

    def __post_init__(self) -> None:
        for name in ("bus_voltage_v", "peltier_current_a", "idle_power_w",
                     "battery_capacity_wh"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def peltier_power_w(self) -> float:
        return self.bus_voltage_v * self.peltier_current_a

    def draw_w(self, peltier_on: bool) -> float:
        return self.idle_power_w + (self.peltier_power_w if peltier_on else 0.0)


def battery_step(power: PowerModel, soc_pct: float, peltier_on: bool,
                 dt: float) -> float:
    """State of charge after dt seconds; on grid power the battery idles.
    Floors at 0, where the caller must force the Peltier off."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if power.on_grid:
        return soc_pct
    drained = 100.0 * power.draw_w(peltier_on) * dt / (3600.0 * power.battery_capacity_wh)
    return max(0.0, soc_pct - drained)


@dataclass(frozen=True)
class GpsRoute:
    waypoints: tuple = ((0.0, 22.5726, 88.3639),)   # (time_s, lat, lon)

    def __post_init__(self) -> None:
        for i, (t, lat, lon) in enumerate(self.waypoints):
            if abs(lat) > 90 or abs(lon) > 180:
                raise ValueError(f"waypoint {i} out of range: ({lat}, {lon})")
            if i and t <= self.waypoints[i - 1][0]:
                raise ValueError("waypoint timestamps must strictly increase")


def position_at(route: GpsRoute, time_s: float) -> tuple[float, float]:
    """Piecewise-linear position along the route, held flat past the ends."""
    pts = route.waypoints
    if not pts:
        raise ValueError("route has no waypoints")
    times = [p[0] for p in pts]
    if time_s <= times[0]:
        return pts[0][1], pts[0][2]
    if time_s >= times[-1]:
        return pts[-1][1], pts[-1][2]
    i = bisect_right(times, time_s)
    t0, lat0, lon0 = pts[i - 1]
    t1, lat1, lon1 = pts[i]
    f = (time_s - t0) / (t1 - t0)
    return lat0 + f * (lat1 - lat0), lon0 + f * (lon1 - lon0)


class WireLog:
    """Append-only local log of exact wire frames.  A file is optional;
    the in-memory copy always exists so replay and tests can read it."""

    def __init__(self, path=None):
        self.lines: list[str] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def append(self, line: str) -> None:
        if self._fh is not None:
            self._fh.write(line)
            self._fh.flush()
        self.lines.append(line)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class DeviceAgent:
    """State machine for one device, advanced once per sample period."""

    def __init__(self, device_id: str, gains: PidGains,
                 schedule: SetpointSchedule,
                 control: ControlConfig = ControlConfig(),
                 sensor: SensorModel = SensorModel(),
                 power: PowerModel = PowerModel(),
                 route: GpsRoute = GpsRoute(),
                 seed: int = 0,
                 envelope_c: tuple[float, float] = (2.0, 98.0),
                 telemetry_every_s: float = 10.0,
                 buffer_capacity: int = 10000,
                 log: Optional[WireLog] = None,
                 start_epoch_ms: int = 0,
                 start_time_of_day_s: int = 0,
                 initial_soc_pct: float = 100.0):
        ratio = telemetry_every_s / control.sample_period_s
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
            raise ValueError("telemetry_every_s must be a multiple of the sample period")
        self.device_id = device_id
        self.gains = gains
        self.schedule = schedule
        self.control = control
        self.sensor = sensor
        self.power = power
        self.route = route
        self.envelope_c = envelope_c
        self.telemetry_every_s = telemetry_every_s
        self.rng = random.Random(seed)
        self.log = log if log is not None else WireLog()
        self.buffer = SendBuffer(capacity=buffer_capacity)
        self.start_epoch_ms = start_epoch_ms
        self.start_time_of_day_s = start_time_of_day_s

        self.pid_state = PidState()
        self.override_setpoint_c: Optional[float] = None
        self.actuators = {name: False for name in ACTUATOR_NAMES}
        self.soc_pct = initial_soc_pct
        self.window_phase_s = 0.0
        self.on_time_s = 0.0
        self.last_pid_value_pct = 0.0
        self.seq_next = 1
        self.peltier_on = False
        self.on_cycles = 0
        self.energy_wh = 0.0
        self.battery_dead = False
        self._cycle = 0
        self._uplink_every = int(round(ratio))
        self._in_fault = False

    # -- clock helpers -------------------------------------------------

    def time_of_day_s(self, t_s: float) -> float:
        return (self.start_time_of_day_s + t_s) % 86400.0

    def epoch_ms(self, t_s: float) -> int:
        return self.start_epoch_ms + int(round(t_s * 1000.0))

    def current_setpoint_c(self, t_s: float) -> float:
        if self.override_setpoint_c is not None:
            return self.override_setpoint_c
        return schedule_setpoint(self.schedule, self.time_of_day_s(t_s))

    @property
    def current_seq(self) -> int:
        return self.seq_next - 1

    # -- the loop ------------------------------------------------------

    def control_cycle(self, reading: SensorReading, truth: ThermalState,
                      t_s: float) -> tuple[PlantInput, Optional[TelemetrySample]]:
        """One sample period: regulate, actuate, book power, maybe emit a
        telemetry frame.  Returns the plant input to hold until the next
        cycle and the emitted sample, if this was an uplink tick."""
        dt = self.control.sample_period_s
        setpoint = self.current_setpoint_c(t_s)

        if reading.faulted:
            # hold the previous activation plan; integral and derivative
            # memory stay frozen so recovery resumes where it left off
            pid_value = self.last_pid_value_pct
            self._in_fault = True
        else:
            if self._in_fault:
                # the measurement memory spans the whole gap; restart the
                # derivative path so recovery carries no spike
                self.pid_state = replace(self.pid_state, initialized=False,
                                         deriv_filtered_c_s=0.0)
                self._in_fault = False
            pid_value, self.pid_state = pid_update(
                self.gains, self.pid_state, setpoint, reading.t_chamber_c,
                dt, self.control)
            self.last_pid_value_pct = pid_value
            if self.window_phase_s == 0.0:
                self.on_time_s = duty_to_activation(pid_value, self.control)

        peltier_on = self.window_phase_s < self.on_time_s
        if not self.power.on_grid and self.soc_pct <= 0.0:
            peltier_on = False
            self.battery_dead = True
        self.peltier_on = peltier_on
        if peltier_on:
            self.on_cycles += 1
        self.soc_pct = battery_step(self.power, self.soc_pct, peltier_on, dt)
        self.energy_wh += self.power.draw_w(peltier_on) * dt / 3600.0
        self.window_phase_s = (self.window_phase_s + dt) % self.control.window_s

        sample: Optional[TelemetrySample] = None
        if self._cycle % self._uplink_every == 0:
            sample = self._emit(reading, truth, t_s, setpoint, peltier_on)
        self._cycle += 1

        return (PlantInput(duty=1.0 if peltier_on else 0.0,
                           door_open=truth.door_open,
                           t_ambient_c=truth.t_ambient_c), sample)

    def _emit(self, reading: SensorReading, truth: ThermalState, t_s: float,
              setpoint: float, peltier_on: bool) -> TelemetrySample:
        flags = 0
        if reading.faulted:
            flags |= FLAG_SENSOR_FAULT
        if truth.clamped:
            flags |= FLAG_CLAMPED
        if self.battery_dead:
            flags |= FLAG_BATTERY_DEAD

        i_bus = round(self.power.draw_w(peltier_on) / self.power.bus_voltage_v, 6)
        p_w = round(self.power.bus_voltage_v * i_bus, 6)
        lat, lon = position_at(self.route, t_s)
        act = sum(ACTUATOR_BITS[n] for n, on in self.actuators.items() if on)
        duty_pct = 100.0 * self.on_time_s / self.control.window_s

        seq = self.seq_next
        self.seq_next += 1
        sample = TelemetrySample(
            dev=self.device_id, seq=seq, t_ms=self.epoch_ms(t_s),
            t_chamber_c=reading.t_chamber_c, t_pouch_c=reading.t_pouch_c,
            rh_pct=reading.rh_pct, v_bus_v=self.power.bus_voltage_v,
            i_bus_a=i_bus, p_w=p_w, lat=lat, lon=lon, setpoint_c=setpoint,
            duty_pct=duty_pct, soc_pct=self.soc_pct, act=act, flags=flags)
        line = encode_frame(sample)
        try:
            self.log.append(line)
        except OSError:
            # local storage trouble must not silence the uplink
            sample = replace(sample, flags=flags | FLAG_LOG_DEGRADED)
            line = encode_frame(sample)
        self.buffer.push(seq, line)
        return sample

    # -- remote control ------------------------------------------------

    def handle_command(self, cmd: Command) -> CommandAck:
        """Apply an operator command; every command is acknowledged with
        applied/rejected plus the device's current sequence number."""
        try:
            self._apply_command(cmd)
        except (KeyError, TypeError, ValueError) as exc:
            return CommandAck(cmd_id=cmd.cmd_id, status="rejected",
                              seq=self.current_seq, reason=str(exc))
        return CommandAck(cmd_id=cmd.cmd_id, status="applied",
                          seq=self.current_seq)

    def _apply_command(self, cmd: Command) -> None:
        payload = cmd.payload
        if cmd.kind == "set_setpoint":
            value = float(payload["setpoint_c"])
            lo, hi = self.envelope_c
            if not (math.isfinite(value) and lo <= value <= hi):
                raise ValueError(
                    f"setpoint {value} outside achievable range [{lo}, {hi}]")
            self.override_setpoint_c = value
        elif cmd.kind == "clear_override":
            self.override_setpoint_c = None
        elif cmd.kind == "set_gains":
            self.gains = PidGains(kp=float(payload["kp"]),
                                  ki=float(payload["ki"]),
                                  kd=float(payload["kd"]))
            self.pid_state = reset_integral(self.pid_state)
        elif cmd.kind == "set_schedule":
            self.schedule = SetpointSchedule(
                day_start_s=int(payload["day_start_s"]),
                night_start_s=int(payload["night_start_s"]),
                day_setpoint_c=float(payload["day_setpoint_c"]),
                night_setpoint_c=float(payload["night_setpoint_c"]))
        elif cmd.kind == "actuate":
            name = payload["name"]
            if name not in self.actuators:
                raise ValueError(f"unknown actuator {name!r}")
            self.actuators[name] = bool(payload["on"])
        else:
            raise ValueError(f"unknown command kind {cmd.kind!r}")
