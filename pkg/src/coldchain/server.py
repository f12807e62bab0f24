"""Control-plane core: registry, telemetry store, command dispatch, fan-out.

This is the transport-free heart of the central service.  The embedded
simulation calls it directly in logical time; the network front end
(netserver) wraps the same object with a TCP device port and an HTTP
operator API.  A single re-entrant lock serializes mutation, which is
plenty at fleet sizes where one laptop is the cloud.

Persistence is an append-only file of exact wire frames per device;
restart replays the files to rebuild the in-memory index, so anything
acked before a crash is served identically after it.
"""

from __future__ import annotations

import hmac
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from time import time as _wall_time
from typing import Callable, Optional

from .protocol import (Command, ProtocolError, TelemetrySample, decode_frame,
                       encode_frame)


class AuthError(Exception):
    """Unknown principal or bad token."""


class NotFound(KeyError):
    """Unknown device or command id."""


CMD_QUEUED = "queued"
CMD_DELIVERED = "delivered"
CMD_APPLIED = "applied"
CMD_REJECTED = "rejected"
CMD_EXPIRED = "expired"


@dataclass
class DeviceRecord:
    device_id: str
    token: str
    last_seen_ms: int = 0
    highest_seq: int = 0                       # cumulative ack watermark
    connection_established_at: Optional[int] = None
    connected: bool = False


@dataclass
class CommandRecord:
    command: Command
    status: str = CMD_QUEUED
    expires_at_ms: int = 0
    reason: str = ""
    delivered_at_ms: Optional[int] = None
    resolved_at_ms: Optional[int] = None


@dataclass
class Subscription:
    """Bounded live feed of encoded sample lines for one device.  When the
    consumer lags past the backlog limit the subscription is closed
    rather than letting it stall ingest."""

    device_id: str
    limit: int
    frames: deque = field(default_factory=deque)
    closed: bool = False
    close_reason: str = ""

    def pop_all(self) -> list[str]:
        out = []
        while self.frames:
            out.append(self.frames.popleft())
        return out


def _now_wall_ms() -> int:
    return int(_wall_time() * 1000)


class ControlPlane:
    def __init__(self, data_dir: Optional[str] = None,
                 now_ms: Callable[[], int] = _now_wall_ms,
                 command_ttl_s: float = 60.0,
                 subscriber_backlog: int = 256):
        self.now_ms = now_ms
        self.command_ttl_s = command_ttl_s
        self.subscriber_backlog = subscriber_backlog
        self.protocol_errors = 0
        self.on_command_dispatched: Optional[Callable[[Command], None]] = None

        self._lock = threading.RLock()
        self._devices: dict[str, DeviceRecord] = {}
        self._operators: dict[str, str] = {}       # name -> token
        self._samples: dict[str, list[TelemetrySample]] = {}
        self._seqs: dict[str, set[int]] = {}
        self._commands: dict[str, CommandRecord] = {}
        self._queues: dict[str, list[str]] = {}    # device -> pending cmd_ids
        self._subs: dict[str, list[Subscription]] = {}
        self._cmd_counter = 0

        self._data_dir = Path(data_dir) if data_dir else None
        self._files: dict[str, object] = {}
        if self._data_dir is not None:
            self._data_dir.mkdir(parents=True, exist_ok=True)
            self._replay()

    # -- registry ------------------------------------------------------

    def register_device(self, device_id: str, token: str) -> DeviceRecord:
        if not token:
            raise ValueError("device token must be non-empty")
        with self._lock:
            rec = self._devices.get(device_id)
            if rec is None:
                rec = DeviceRecord(device_id=device_id, token=token)
                self._devices[device_id] = rec
                self._samples.setdefault(device_id, [])
                self._seqs.setdefault(device_id, set())
                self._queues.setdefault(device_id, [])
                self._subs.setdefault(device_id, [])
            else:
                rec.token = token
            return rec

    def register_operator(self, name: str, token: str) -> None:
        if not token:
            raise ValueError("operator token must be non-empty")
        with self._lock:
            self._operators[name] = token

    def load_token_file(self, path: str) -> None:
        """JSON {"devices": {id: token}, "operators": {name: token}}."""
        import json
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        for dev, token in data.get("devices", {}).items():
            self.register_device(dev, token)
        for name, token in data.get("operators", {}).items():
            self.register_operator(name, token)

    def device_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._devices)

    def device_record(self, device_id: str) -> DeviceRecord:
        with self._lock:
            try:
                return self._devices[device_id]
            except KeyError:
                raise NotFound(device_id) from None

    # -- sessions ------------------------------------------------------

    def authenticate(self, device_id: str, token: str) -> DeviceRecord:
        """Constant-time token check; success stamps a fresh connection
        establishment time (connection duration restarts on reconnect)."""
        with self._lock:
            rec = self._devices.get(device_id)
            if rec is None or not hmac.compare_digest(rec.token, token):
                raise AuthError(f"authentication failed for {device_id!r}")
            rec.connection_established_at = self.now_ms()
            rec.connected = True
            return rec

    def authenticate_operator(self, token: str) -> str:
        with self._lock:
            for name, expected in sorted(self._operators.items()):
                if hmac.compare_digest(expected, token):
                    return name
        raise AuthError("operator authentication failed")

    def disconnect(self, device_id: str) -> None:
        with self._lock:
            rec = self._devices.get(device_id)
            if rec is not None:
                rec.connected = False

    def declare_resume(self, device_id: str, oldest_seq: int) -> int:
        """Device (re)joined and can replay nothing older than oldest_seq:
        frames below it were dropped on the device and will never arrive,
        so the ack watermark may jump over the gap.  Returns the watermark."""
        with self._lock:
            rec = self.device_record(device_id)
            if oldest_seq - 1 > rec.highest_seq:
                rec.highest_seq = oldest_seq - 1
                self._advance(rec)
            return rec.highest_seq

    # -- telemetry -----------------------------------------------------

    def ingest_line(self, device_id: str, line: str) -> Optional[int]:
        """Decode and ingest one sample line; malformed input bumps the
        error counter and is skipped without killing the session."""
        try:
            frame = decode_frame(line)
            if not isinstance(frame, TelemetrySample) or frame.dev != device_id:
                raise ProtocolError("expected a sample frame from this device")
        except ProtocolError:
            with self._lock:
                self.protocol_errors += 1
            return None
        return self.ingest(frame)

    def ingest(self, sample: TelemetrySample) -> int:
        """Store a sample exactly once per (dev, seq), advance the
        cumulative ack, and fan out to live subscribers.  Returns the
        watermark to ack."""
        with self._lock:
            rec = self.device_record(sample.dev)
            rec.last_seen_ms = self.now_ms()
            seqs = self._seqs[sample.dev]
            if sample.seq not in seqs and sample.seq > 0:
                seqs.add(sample.seq)
                self._samples[sample.dev].append(sample)
                self._persist(sample)
                self._advance(rec)
                self._fan_out(sample.dev, encode_frame(sample))
            return rec.highest_seq

    def _advance(self, rec: DeviceRecord) -> None:
        seqs = self._seqs[rec.device_id]
        while rec.highest_seq + 1 in seqs:
            rec.highest_seq += 1

    def _fan_out(self, device_id: str, line: str) -> None:
        keep = []
        for sub in self._subs[device_id]:
            if sub.closed:
                continue
            if len(sub.frames) >= sub.limit:
                sub.closed = True
                sub.close_reason = ("subscriber backlog exceeded "
                                    f"({sub.limit} frames)")
                continue
            sub.frames.append(line)
            keep.append(sub)
        self._subs[device_id] = keep

    def query_range(self, device_id: str, from_ms: int,
                    to_ms: int) -> list[TelemetrySample]:
        """Samples with t_ms in [from_ms, to_ms], ascending by time."""
        if from_ms > to_ms:
            raise ValueError("from_ms must not exceed to_ms")
        with self._lock:
            if device_id not in self._devices:
                raise NotFound(device_id)
            rows = [s for s in self._samples[device_id]
                    if from_ms <= s.t_ms <= to_ms]
        return sorted(rows, key=lambda s: s.t_ms)

    def latest_sample(self, device_id: str) -> Optional[TelemetrySample]:
        with self._lock:
            if device_id not in self._devices:
                raise NotFound(device_id)
            rows = self._samples[device_id]
            return rows[-1] if rows else None

    def sample_count(self, device_id: str) -> int:
        with self._lock:
            return len(self._samples.get(device_id, ()))

    # -- commands ------------------------------------------------------

    def dispatch_command(self, issuer: str, device_id: str, kind: str,
                         payload: dict, ttl_s: Optional[float] = None,
                         cmd_id: Optional[str] = None) -> CommandRecord:
        """Queue a command for the device; it rides the telemetry stream
        on the next flush.  Undelivered commands expire after the TTL."""
        with self._lock:
            if device_id not in self._devices:
                raise NotFound(device_id)
            self._cmd_counter += 1
            cmd_id = cmd_id or f"c{self._cmd_counter}"
            if cmd_id in self._commands:
                raise ValueError(f"duplicate cmd_id {cmd_id!r}")
            now = self.now_ms()
            ttl = self.command_ttl_s if ttl_s is None else ttl_s
            cmd = Command(cmd_id=cmd_id, dev=device_id, kind=kind,
                          payload=payload, issued_at=now, issuer=issuer)
            encode_frame(cmd)   # reject unencodable commands at the door
            record = CommandRecord(command=cmd,
                                   expires_at_ms=now + int(ttl * 1000))
            self._commands[cmd_id] = record
            self._queues[device_id].append(cmd_id)
            hook = self.on_command_dispatched
        if hook is not None:
            hook(cmd)
        return record

    def _expire_stale(self, record: CommandRecord) -> None:
        if (record.status in (CMD_QUEUED, CMD_DELIVERED)
                and self.now_ms() > record.expires_at_ms):
            record.status = CMD_EXPIRED
            record.resolved_at_ms = self.now_ms()

    def poll_commands(self, device_id: str,
                      redeliver: bool = False) -> list[Command]:
        """Pending commands for a device session, marking them delivered.
        With redeliver=True (fresh session) unresolved delivered commands
        go out again: delivery is at-least-once, application is idempotent
        per cmd_id on the device side."""
        with self._lock:
            if device_id not in self._devices:
                raise NotFound(device_id)
            out = []
            still = []
            for cmd_id in self._queues[device_id]:
                record = self._commands[cmd_id]
                self._expire_stale(record)
                if record.status == CMD_QUEUED or (
                        redeliver and record.status == CMD_DELIVERED):
                    record.status = CMD_DELIVERED
                    record.delivered_at_ms = self.now_ms()
                    out.append(record.command)
                if record.status == CMD_DELIVERED:
                    still.append(cmd_id)
            self._queues[device_id] = still
            return out

    def resolve_command(self, cmd_id: str, status: str,
                        reason: str = "") -> None:
        if status not in (CMD_APPLIED, CMD_REJECTED):
            raise ValueError(f"bad resolution status {status!r}")
        with self._lock:
            record = self._commands.get(cmd_id)
            if record is None:
                return   # ack for a command we never issued; ignore
            if record.status in (CMD_APPLIED, CMD_REJECTED):
                return   # duplicate ack
            record.status = status
            record.reason = reason
            record.resolved_at_ms = self.now_ms()

    def command_status(self, device_id: str, cmd_id: str) -> CommandRecord:
        with self._lock:
            record = self._commands.get(cmd_id)
            if record is None or record.command.dev != device_id:
                raise NotFound(cmd_id)
            self._expire_stale(record)
            return record

    # -- live fan-out ----------------------------------------------------

    def subscribe_live(self, device_id: str,
                       backlog: Optional[int] = None) -> Subscription:
        with self._lock:
            if device_id not in self._devices:
                raise NotFound(device_id)
            sub = Subscription(device_id=device_id,
                               limit=backlog or self.subscriber_backlog)
            self._subs[device_id].append(sub)
            return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subs.get(sub.device_id, [])
            if sub in subs:
                subs.remove(sub)
            sub.closed = True
            if not sub.close_reason:
                sub.close_reason = "unsubscribed"

    # -- persistence -----------------------------------------------------

    def _persist(self, sample: TelemetrySample) -> None:
        if self._data_dir is None:
            return
        fh = self._files.get(sample.dev)
        if fh is None:
            fh = open(self._data_dir / f"{sample.dev}.frames", "a",
                      encoding="utf-8")
            self._files[sample.dev] = fh
        fh.write(encode_frame(sample))
        fh.flush()

    def _replay(self) -> None:
        for path in sorted(self._data_dir.glob("*.frames")):
            device_id = path.stem
            rec = self._devices.get(device_id)
            if rec is None:
                rec = DeviceRecord(device_id=device_id, token="")
                self._devices[device_id] = rec
            self._samples.setdefault(device_id, [])
            self._seqs.setdefault(device_id, set())
            self._queues.setdefault(device_id, [])
            self._subs.setdefault(device_id, [])
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    try:
                        frame = decode_frame(line)
                    except ProtocolError:
                        self.protocol_errors += 1
                        continue
                    if isinstance(frame, TelemetrySample) and \
                            frame.seq not in self._seqs[device_id]:
                        self._seqs[device_id].add(frame.seq)
                        self._samples[device_id].append(frame)
            if self._seqs[device_id]:
                # watermark restarts at the lowest contiguous run; a
                # device hello with its replay floor lifts it further
                rec.highest_seq = min(self._seqs[device_id]) - 1
                self._advance(rec)

    def close(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.close()
            self._files.clear()
