"""Wire format and reliability layer between device and control plane.

Frames are single lines of canonical JSON: fixed key order per frame
type, floats rendered with at most 6 decimals and no trailing zeros, no
whitespace, newline terminated.  Encoding the same message twice yields
identical bytes, and decode(encode(x)) is a fixed point after one round
trip, so logs can be replayed and compared byte for byte.

Frame types share one stream and are told apart by their keys:

    hello        {v, dev, token, oldest}        device -> server, on (re)connect
    sample       {v, dev, seq, t_ms, ...}       device -> server
    data ack     {v, dev, ack_seq}              server -> device, cumulative
    command      {v, cmd_id, dev, kind, ...}    server -> device
    command ack  {v, cmd_id, status, seq[, reason]}  device -> server

Delivery is at-least-once: samples stay in the device's ring buffer until
a cumulative ack covers them; the server deduplicates on (dev, seq).  The
hello frame declares the oldest sequence the device can still replay so
the server can advance its ack watermark past frames that were evicted
from an over-full buffer during an outage.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Union

PROTOCOL_VERSION = 1

FLAG_SENSOR_FAULT = 1
FLAG_CLAMPED = 2
FLAG_BATTERY_DEAD = 4
FLAG_LOG_DEGRADED = 8

ACTUATOR_NAMES = ("led1", "led2", "led3", "lock", "lid")
ACTUATOR_BITS = {name: 1 << i for i, name in enumerate(ACTUATOR_NAMES)}

COMMAND_KINDS = ("set_setpoint", "clear_override", "set_schedule",
                 "set_gains", "actuate")

FAULT_SENTINEL = -1.0   # in-band marker for failed sensor acquisition


class ProtocolError(ValueError):
    """Malformed or non-encodable frame."""


@dataclass(frozen=True)
class TelemetrySample:
    dev: str
    seq: int
    t_ms: int
    t_chamber_c: float
    t_pouch_c: float
    rh_pct: float
    v_bus_v: float
    i_bus_a: float
    p_w: float
    lat: float
    lon: float
    setpoint_c: float
    duty_pct: float
    soc_pct: float
    act: int = 0
    flags: int = 0
    v: int = PROTOCOL_VERSION

    def flag(self, bit: int) -> bool:
        return bool(self.flags & bit)

    def actuator(self, name: str) -> bool:
        return bool(self.act & ACTUATOR_BITS[name])


@dataclass(frozen=True)
class Command:
    cmd_id: str
    dev: str
    kind: str
    payload: dict
    issued_at: int
    issuer: str
    v: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class DataAck:
    dev: str
    ack_seq: int
    v: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class CommandAck:
    cmd_id: str
    status: str          # "applied" | "rejected"
    seq: int             # device's current sequence watermark
    reason: str = ""
    v: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class Hello:
    dev: str
    token: str
    oldest: int          # oldest seq the device can still replay
    v: int = PROTOCOL_VERSION


Frame = Union[TelemetrySample, Command, DataAck, CommandAck, Hello]


def _num(x) -> str:
    """Canonical number rendering: ints verbatim, floats with at most six
    decimals and trailing zeros stripped."""
    if isinstance(x, bool):
        raise ProtocolError("booleans are not bare numbers on the wire")
    if isinstance(x, int):
        return str(x)
    if not math.isfinite(x):
        raise ProtocolError(f"non-finite number in frame: {x}")
    s = f"{x:.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("", "-0") else s


def _value(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, float)):
        return _num(x)
    if isinstance(x, str):
        return json.dumps(x)
    raise ProtocolError(f"unsupported value type in frame: {type(x).__name__}")


def _obj(pairs: Iterable[tuple[str, str]]) -> str:
    return "{" + ",".join(f'"{k}":{v}' for k, v in pairs) + "}"


_SAMPLE_FIELDS = ("v", "dev", "seq", "t_ms", "t_chamber_c", "t_pouch_c",
                  "rh_pct", "v_bus_v", "i_bus_a", "p_w", "lat", "lon",
                  "setpoint_c", "duty_pct", "soc_pct", "act", "flags")


def encode_frame(frame: Frame) -> str:
    """Frame -> canonical newline-terminated line."""
    if isinstance(frame, TelemetrySample):
        pairs = [(k, _value(getattr(frame, k))) for k in _SAMPLE_FIELDS]
    elif isinstance(frame, Command):
        if frame.kind not in COMMAND_KINDS:
            raise ProtocolError(f"unknown command kind: {frame.kind}")
        payload = _obj((k, _value(frame.payload[k]))
                       for k in sorted(frame.payload))
        pairs = [("v", _value(frame.v)), ("cmd_id", _value(frame.cmd_id)),
                 ("dev", _value(frame.dev)), ("kind", _value(frame.kind)),
                 ("payload", payload), ("issued_at", _value(frame.issued_at)),
                 ("issuer", _value(frame.issuer))]
    elif isinstance(frame, DataAck):
        pairs = [("v", _value(frame.v)), ("dev", _value(frame.dev)),
                 ("ack_seq", _value(frame.ack_seq))]
    elif isinstance(frame, CommandAck):
        pairs = [("v", _value(frame.v)), ("cmd_id", _value(frame.cmd_id)),
                 ("status", _value(frame.status)), ("seq", _value(frame.seq))]
        if frame.reason:
            pairs.append(("reason", _value(frame.reason)))
    elif isinstance(frame, Hello):
        pairs = [("v", _value(frame.v)), ("dev", _value(frame.dev)),
                 ("token", _value(frame.token)), ("oldest", _value(frame.oldest))]
    else:
        raise ProtocolError(f"not a frame: {type(frame).__name__}")
    return _obj(pairs) + "\n"


def _require(obj: dict, key: str, types) -> object:
    if key not in obj:
        raise ProtocolError(f"missing field {key!r}")
    val = obj[key]
    if not isinstance(val, types) or isinstance(val, bool):
        raise ProtocolError(f"field {key!r} has wrong type")
    return val


def decode_frame(line: str) -> Frame:
    """Canonical line -> frame; raises ProtocolError on anything off."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame is not an object")
    v = _require(obj, "v", int)
    if v != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {v}")

    if "token" in obj:
        return Hello(dev=str(_require(obj, "dev", str)),
                     token=str(_require(obj, "token", str)),
                     oldest=int(_require(obj, "oldest", int)))
    if "ack_seq" in obj:
        return DataAck(dev=str(_require(obj, "dev", str)),
                       ack_seq=int(_require(obj, "ack_seq", int)))
    if "status" in obj:
        return CommandAck(cmd_id=str(_require(obj, "cmd_id", str)),
                          status=str(_require(obj, "status", str)),
                          seq=int(_require(obj, "seq", int)),
                          reason=str(obj.get("reason", "")))
    if "kind" in obj:
        kind = str(_require(obj, "kind", str))
        if kind not in COMMAND_KINDS:
            raise ProtocolError(f"unknown command kind: {kind}")
        payload = obj.get("payload")
        if not isinstance(payload, dict):
            raise ProtocolError("command payload must be an object")
        return Command(cmd_id=str(_require(obj, "cmd_id", str)),
                       dev=str(_require(obj, "dev", str)), kind=kind,
                       payload=payload,
                       issued_at=int(_require(obj, "issued_at", int)),
                       issuer=str(_require(obj, "issuer", str)))
    if "seq" in obj and "t_ms" in obj:
        kwargs = {}
        for name in _SAMPLE_FIELDS:
            if name in ("v", "dev"):
                continue
            typ = int if name in ("seq", "t_ms", "act", "flags") else (int, float)
            kwargs[name] = _require(obj, name, typ)
        return TelemetrySample(dev=str(_require(obj, "dev", str)), **kwargs)
    raise ProtocolError("unrecognized frame shape")


def sample_to_dict(sample: TelemetrySample) -> dict:
    """Sample as a plain dict in wire key order (for the HTTP API)."""
    return {k: getattr(sample, k) for k in _SAMPLE_FIELDS}


@dataclass
class _Buffered:
    seq: int
    line: str
    last_sent_s: float = -math.inf


@dataclass
class SendBuffer:
    """Ring of unacked sample frames (the micro-SD card's uplink side).

    Pushing past capacity evicts the oldest frame and counts it as
    dropped; acked frames are removed.  Frames are kept in seq order.
    """

    capacity: int = 10000
    dropped_count: int = 0
    pushed_count: int = 0
    acked_count: int = 0
    sent_count: int = 0      # transmissions, retries included
    _frames: deque = field(default_factory=deque, repr=False)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")

    def __len__(self) -> int:
        return len(self._frames)

    def push(self, seq: int, line: str) -> None:
        if self._frames and seq <= self._frames[-1].seq:
            raise ValueError("pushed seq must increase")
        self._frames.append(_Buffered(seq=seq, line=line))
        self.pushed_count += 1
        if len(self._frames) > self.capacity:
            self._frames.popleft()
            self.dropped_count += 1

    def ack(self, upto_seq: int) -> None:
        """Cumulative ack: drop every buffered frame with seq <= upto_seq."""
        while self._frames and self._frames[0].seq <= upto_seq:
            self._frames.popleft()
            self.acked_count += 1

    @property
    def oldest_seq(self) -> int | None:
        return self._frames[0].seq if self._frames else None

    def unsent_or_stale(self, now_s: float, retry_after_s: float):
        for bf in self._frames:
            if now_s - bf.last_sent_s >= retry_after_s:
                yield bf


class Link(Protocol):
    """Transport below the buffer: an in-process shim for simulation or a
    TCP client in live mode.  ensure_session is called with the oldest
    replayable seq whenever the link reports up; implementations perform
    the hello/auth handshake on fresh sessions."""

    def up(self) -> bool: ...
    def ensure_session(self, oldest_seq: int) -> None: ...
    def send(self, line: str) -> None: ...
    def receive(self) -> list[str]: ...


def flush(buf: SendBuffer, link: Link, now_s: float, next_seq: int,
          retry_after_s: float = 5.0) -> list[Command]:
    """Drive one store-and-forward round: replay unacked frames oldest
    first while the link is up, consume inbound acks, and hand inbound
    commands back to the caller.  A down link is a no-op (retry later)."""
    if link.up():
        link.ensure_session(buf.oldest_seq if buf.oldest_seq is not None
                            else next_seq)
        for bf in buf.unsent_or_stale(now_s, retry_after_s):
            link.send(bf.line)
            bf.last_sent_s = now_s
            buf.sent_count += 1
    commands: list[Command] = []
    for line in link.receive():
        frame = decode_frame(line)
        if isinstance(frame, DataAck):
            buf.ack(frame.ack_seq)
        elif isinstance(frame, Command):
            commands.append(frame)
        # anything else from the server side is ignored at the device
    return commands
