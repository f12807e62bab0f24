"""Experiment driver: wires plant, agent, and control plane together on a
logical clock, injects scenario events, and writes the trace and stats.

The simulation is logical-time driven end to end; the acceleration factor
only paces the loop against the wall clock (0 = free run), so results are
identical at any speed.  With no external server the control plane runs
embedded and frames flow through an in-process link that honors the
scenario's outage windows; with --server the same loop talks real TCP.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .autotune import AutotuneResult, ThermalLoop, relay_autotune
from .device import DeviceAgent, WireLog, read_sensors
from .protocol import (FLAG_SENSOR_FAULT, CommandAck, DataAck, SendBuffer,
                       TelemetrySample, decode_frame, encode_frame, flush,
                       _num)
from .scenario import (ScenarioSpec, ambient_at, door_open_at, humidity_at,
                       link_up_at)
from .server import ControlPlane
from .thermal import PlantInput, ThermalState, plant_step

CSV_COLUMNS = ("time_s", "mode", "setpoint_c", "t_ambient_c", "t_air_c",
               "t_pouch_c", "rh_pct", "duty_pct", "pelt_on", "soc_pct",
               "lat", "lon", "flags")


@dataclass(frozen=True)
class TraceRow:
    time_s: float
    mode: str
    setpoint_c: float
    t_ambient_c: float
    t_air_c: float          # as transmitted: measured, -1 under fault
    t_pouch_c: float
    rh_pct: float
    duty_pct: float
    pelt_on: int
    soc_pct: float
    lat: float
    lon: float
    flags: int

    def to_csv(self) -> str:
        vals = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            vals.append(v if isinstance(v, str) else _num(v))
        return ",".join(vals) + "\n"


@dataclass(frozen=True)
class ModeStats:
    mode: str
    n: int
    mean_c: Optional[float]
    sd_c: Optional[float]
    min_c: Optional[float]
    max_c: Optional[float]


@dataclass(frozen=True)
class SummaryStats:
    modes: dict
    energy_wh: float
    duty_avg_pct: float
    frames_sent: int
    frames_acked: int
    frames_dropped: int
    frames_in_buffer: int

    def format(self) -> str:
        lines = []
        for mode in ("day", "night"):
            ms = self.modes.get(mode)
            if ms is None or ms.n == 0:
                lines.append(f"{mode}: not covered by this scenario")
            elif ms.sd_c is None:
                lines.append(f"{mode}: not computable "
                             f"(only {ms.n} steady samples)")
            else:
                lines.append(
                    f"{mode}: n={ms.n} mean={_num(round(ms.mean_c, 6))} "
                    f"sd={_num(round(ms.sd_c, 6))} "
                    f"min={_num(round(ms.min_c, 6))} "
                    f"max={_num(round(ms.max_c, 6))}")
        lines.append(f"energy_wh={_num(round(self.energy_wh, 6))}")
        lines.append(f"duty_avg_pct={_num(round(self.duty_avg_pct, 6))}")
        lines.append(f"frames_sent={self.frames_sent}")
        lines.append(f"frames_acked={self.frames_acked}")
        lines.append(f"frames_dropped={self.frames_dropped}")
        lines.append(f"frames_in_buffer={self.frames_in_buffer}")
        return "\n".join(lines) + "\n"


class LogicalClock:
    def __init__(self, epoch0_ms: int):
        self.epoch0_ms = epoch0_ms
        self.t_s = 0.0

    def now_ms(self) -> int:
        return self.epoch0_ms + int(round(self.t_s * 1000.0))


class SimLink:
    """In-process device<->plane link driven by the logical clock.  Frames
    are delivered synchronously while the link is up; outage windows take
    it down and kill the session, so reconnection replays the handshake."""

    def __init__(self, plane: ControlPlane, device_id: str, token: str,
                 outage_windows=()):
        self.plane = plane
        self.device_id = device_id
        self.token = token
        self.outage_windows = outage_windows
        self.t_s = 0.0
        self._session_live = False
        self._inbox: list[str] = []

    def set_time(self, t_s: float) -> None:
        self.t_s = t_s

    def up(self) -> bool:
        live = not any(a <= self.t_s < b for a, b in self.outage_windows)
        if not live and self._session_live:
            self._session_live = False
            self.plane.disconnect(self.device_id)
        return live

    def ensure_session(self, oldest_seq: int) -> None:
        if self._session_live:
            return
        self.plane.authenticate(self.device_id, self.token)
        self.plane.declare_resume(self.device_id, oldest_seq)
        self._session_live = True
        for cmd in self.plane.poll_commands(self.device_id, redeliver=True):
            self._inbox.append(encode_frame(cmd))

    def send(self, line: str) -> None:
        frame = decode_frame(line)
        if isinstance(frame, TelemetrySample):
            ack = self.plane.ingest_line(self.device_id, line)
            if ack is not None:
                self._inbox.append(encode_frame(
                    DataAck(dev=self.device_id, ack_seq=ack)))
        elif isinstance(frame, CommandAck):
            self.plane.resolve_command(frame.cmd_id, frame.status,
                                       frame.reason)

    def receive(self) -> list[str]:
        if self._session_live:
            for cmd in self.plane.poll_commands(self.device_id):
                self._inbox.append(encode_frame(cmd))
        out, self._inbox = self._inbox, []
        return out


@dataclass
class RunResult:
    rows: list
    stats: SummaryStats
    tuning: Optional[AutotuneResult]
    agent: DeviceAgent
    plane: Optional[ControlPlane]
    csv_path: Optional[Path] = None
    stats_path: Optional[Path] = None
    wirelog_path: Optional[Path] = None


def autotune_for(spec: ScenarioSpec) -> AutotuneResult:
    """Relay-tune gains against the scenario's plant, starting from the
    ambient equilibrium the run itself starts from."""
    amb = ambient_at(spec, 0.0)
    t0 = spec.t_init_c if spec.t_init_c is not None else amb
    loop = ThermalLoop(spec.plant, ThermalState(
        t_air_c=t0, t_pouch_c=t0, t_ambient_c=amb))
    target = (spec.autotune.setpoint_c if spec.autotune.setpoint_c is not None
              else spec.schedule.day_setpoint_c)
    return relay_autotune(loop, spec.autotune.relay_amplitude_pct,
                          spec.autotune.observation_horizon_s,
                          setpoint_c=target,
                          hysteresis_c=spec.autotune.hysteresis_c,
                          dt=spec.control.sample_period_s)


def run(spec: ScenarioSpec, out_dir: Optional[str] = None,
        link=None, plane: Optional[ControlPlane] = None,
        on_cycle: Optional[Callable[[float, "object"], None]] = None,
        accel: Optional[float] = None) -> RunResult:
    """Execute one scenario.  With neither link nor plane given, an
    embedded control plane is created (persisting under out_dir).  The
    optional on_cycle(t_s, sim) hook runs after every control tick; tests
    use it to inject commands or restart the plane mid-run."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    tuning: Optional[AutotuneResult] = None
    gains = spec.gains
    if gains is None:
        tuning = autotune_for(spec)
        gains = tuning.gains

    clock = LogicalClock(spec.start_epoch_ms)
    if link is None:
        if plane is None:
            plane = ControlPlane(
                data_dir=str(out / "server_data") if out else None,
                now_ms=clock.now_ms)
        plane.register_device(spec.device_id, spec.device_token)
        link = SimLink(plane, spec.device_id, spec.device_token,
                       spec.outage_windows)

    wirelog_path = out / f"{spec.device_id}.wirelog" if out else None
    agent = DeviceAgent(
        spec.device_id, gains=gains, schedule=spec.schedule,
        control=spec.control, sensor=spec.sensor, power=spec.power,
        route=spec.gps_route, seed=spec.seed,
        envelope_c=(spec.plant.t_min_c, spec.plant.t_max_c),
        telemetry_every_s=spec.telemetry_every_s,
        buffer_capacity=spec.buffer_capacity,
        log=WireLog(wirelog_path),
        start_epoch_ms=spec.start_epoch_ms,
        start_time_of_day_s=spec.start_time_of_day_s)

    amb0 = ambient_at(spec, 0.0)
    t0 = spec.t_init_c if spec.t_init_c is not None else amb0
    truth = ThermalState(t_air_c=t0, t_pouch_c=t0,
                         door_open=door_open_at(spec, 0.0), t_ambient_c=amb0)
    plant_in = PlantInput(duty=0.0, door_open=truth.door_open,
                          t_ambient_c=amb0)

    csv_path = out / "trace.csv" if out else None
    csv_fh = open(csv_path, "w", encoding="utf-8", newline="") if csv_path else None
    if csv_fh:
        csv_fh.write(",".join(CSV_COLUMNS) + "\n")

    sim = _SimContext(spec=spec, agent=agent, link=link, plane=plane,
                      clock=clock, truth=truth)

    rows: list[TraceRow] = []
    n_steps = int(round(spec.duration_s / spec.dt_s))
    control_every = int(round(spec.control.sample_period_s / spec.dt_s))
    pace = accel if accel is not None else spec.acceleration
    wall0 = time.monotonic()
    try:
        for k in range(n_steps):
            t = k * spec.dt_s
            clock.t_s = t
            if hasattr(link, "set_time"):
                link.set_time(t)
            sim.truth = truth

            if k % control_every == 0:
                # drain the uplink and take commands before the control
                # step, so a reconnect empties the backlog before a new
                # frame can evict anything
                for cmd in flush(agent.buffer, link, t, agent.seq_next):
                    ack = agent.handle_command(cmd)
                    link.send(encode_frame(ack))
                reading = read_sensors(truth, spec.sensor, agent.rng, t,
                                       humidity_at(spec, t))
                plant_in, sample = agent.control_cycle(reading, truth, t)
                if sample is not None:
                    row = _trace_row(spec, truth, agent, sample, t)
                    rows.append(row)
                    if csv_fh:
                        csv_fh.write(row.to_csv())
                        csv_fh.flush()
                if on_cycle is not None:
                    on_cycle(t, sim)
                    link = sim.link   # the hook may swap transports

            step_in = PlantInput(duty=plant_in.duty,
                                 door_open=door_open_at(spec, t),
                                 t_ambient_c=ambient_at(spec, t))
            truth = plant_step(truth, step_in, spec.plant, spec.dt_s)

            if pace and pace > 0:
                target = wall0 + (t + spec.dt_s) / pace
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)

        # drain whatever the buffer still holds at end of run
        clock.t_s = spec.duration_s
        if hasattr(link, "set_time"):
            link.set_time(spec.duration_s)
        flush(agent.buffer, link, spec.duration_s, agent.seq_next)
    finally:
        if csv_fh:
            csv_fh.close()
        agent.log.close()

    stats = summarize(rows, spec, agent=agent)
    stats_path = None
    if out:
        stats_path = out / "stats.txt"
        stats_path.write_text(stats.format(), encoding="utf-8")
    return RunResult(rows=rows, stats=stats, tuning=tuning, agent=agent,
                     plane=plane, csv_path=csv_path, stats_path=stats_path,
                     wirelog_path=wirelog_path)


@dataclass
class _SimContext:
    spec: ScenarioSpec
    agent: DeviceAgent
    link: object
    plane: Optional[ControlPlane]
    clock: LogicalClock
    truth: ThermalState


def _trace_row(spec: ScenarioSpec, truth: ThermalState, agent: DeviceAgent,
               sample: TelemetrySample, t: float) -> TraceRow:
    return TraceRow(
        time_s=t, mode=spec.mode_at(t), setpoint_c=sample.setpoint_c,
        t_ambient_c=truth.t_ambient_c, t_air_c=sample.t_chamber_c,
        t_pouch_c=sample.t_pouch_c, rh_pct=sample.rh_pct,
        duty_pct=sample.duty_pct, pelt_on=int(agent.peltier_on),
        soc_pct=sample.soc_pct, lat=sample.lat, lon=sample.lon,
        flags=sample.flags)


def steady_exclusions(spec: ScenarioSpec) -> list[tuple[float, float]]:
    """Transient windows excluded from steady statistics: a stretch after
    every setpoint change (the run start counts as one) and after every
    door closing."""
    excl = [(c, c + spec.transients.post_setpoint_s)
            for c in spec.setpoint_changes()]
    excl += [(close, close + spec.transients.post_door_close_s)
             for _, close in spec.door_events]
    return excl


def summarize(rows, spec: ScenarioSpec,
              agent: Optional[DeviceAgent] = None) -> SummaryStats:
    """Per-mode steady-window statistics of the pouch temperature, sample
    SD with the n-1 denominator.  Faulted rows and transient windows are
    excluded; a mode whose window ends up empty reports sd=None."""
    if not rows:
        raise ValueError("empty trace")
    excl = steady_exclusions(spec)
    modes = {}
    for mode in ("day", "night"):
        sel = [r.t_pouch_c for r in rows
               if r.mode == mode
               and not (r.flags & FLAG_SENSOR_FAULT)
               and not any(a <= r.time_s < b for a, b in excl)]
        if not sel:
            modes[mode] = ModeStats(mode, 0, None, None, None, None)
            continue
        sd = statistics.stdev(sel) if len(sel) > 1 else None
        modes[mode] = ModeStats(mode=mode, n=len(sel),
                                mean_c=statistics.fmean(sel), sd_c=sd,
                                min_c=min(sel), max_c=max(sel))

    energy = agent.energy_wh if agent else 0.0
    if agent is not None and agent._cycle:
        duty_avg = 100.0 * agent.on_cycles / agent._cycle
    else:
        duty_avg = 0.0
    buf: Optional[SendBuffer] = agent.buffer if agent is not None else None
    return SummaryStats(
        modes=modes, energy_wh=energy, duty_avg_pct=duty_avg,
        frames_sent=buf.pushed_count if buf is not None else 0,
        frames_acked=buf.acked_count if buf is not None else 0,
        frames_dropped=buf.dropped_count if buf is not None else 0,
        frames_in_buffer=len(buf) if buf is not None else 0)


def read_trace(csv_path) -> list[TraceRow]:
    rows = []
    with open(csv_path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        assert tuple(header) == CSV_COLUMNS, "unexpected trace columns"
        for line in fh:
            vals = line.rstrip("\n").split(",")
            kw = dict(zip(CSV_COLUMNS, vals))
            rows.append(TraceRow(
                time_s=float(kw["time_s"]), mode=kw["mode"],
                setpoint_c=float(kw["setpoint_c"]),
                t_ambient_c=float(kw["t_ambient_c"]),
                t_air_c=float(kw["t_air_c"]),
                t_pouch_c=float(kw["t_pouch_c"]),
                rh_pct=float(kw["rh_pct"]), duty_pct=float(kw["duty_pct"]),
                pelt_on=int(kw["pelt_on"]), soc_pct=float(kw["soc_pct"]),
                lat=float(kw["lat"]), lon=float(kw["lon"]),
                flags=int(kw["flags"])))
    return rows
