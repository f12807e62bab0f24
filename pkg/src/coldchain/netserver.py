"""Network front end: TCP device port, HTTP operator API, live streams.

Wraps the transport-free ControlPlane with real sockets.  Devices speak
the newline-delimited frame protocol over a persistent TCP connection
(hello, then samples up / acks and commands down).  Operators use the
HTTP API:

    GET  /api/devices
    GET  /api/devices/{id}
    GET  /api/devices/{id}/samples?from=&to=
    POST /api/devices/{id}/commands          body {kind, payload[, ttl_s]}
    GET  /api/devices/{id}/commands/{cmd_id}
    GET  /api/devices/{id}/live               ndjson push stream

Auth is bearer-token: devices authenticate in the hello frame, operators
via the Authorization header (or ?token= for stream clients that cannot
set headers).  The server runs its own event loop in a daemon thread so
the synchronous harness and tests can drive it without an async runtime.
"""

from __future__ import annotations

import asyncio
import json
import socket
import threading
import time
from typing import Optional

from fastapi import Depends, FastAPI, HTTPException, Query, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import StreamingResponse
from fastapi.staticfiles import StaticFiles
import uvicorn

from .protocol import (Command, CommandAck, DataAck, Hello, ProtocolError,
                       TelemetrySample, decode_frame, encode_frame,
                       sample_to_dict)
from .server import AuthError, ControlPlane, NotFound


def build_app(plane: ControlPlane, sessions: "SessionRegistry",
              ui_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="coldchain control plane", docs_url=None,
                  redoc_url=None)
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    def operator(request: Request) -> str:
        header = request.headers.get("authorization", "")
        token = header[7:] if header.lower().startswith("bearer ") else ""
        token = token or request.query_params.get("token", "")
        try:
            return plane.authenticate_operator(token)
        except AuthError:
            raise HTTPException(status_code=401,
                                detail="valid operator token required")

    def device_summary(device_id: str) -> dict:
        rec = plane.device_record(device_id)
        latest = plane.latest_sample(device_id)
        duration = None
        if rec.connected and rec.connection_established_at is not None:
            duration = plane.now_ms() - rec.connection_established_at
        return {
            "device_id": rec.device_id,
            "connected": rec.connected,
            "last_seen_ms": rec.last_seen_ms,
            "connection_established_at": rec.connection_established_at,
            "connection_duration_ms": duration,
            "highest_seq": rec.highest_seq,
            "sample_count": plane.sample_count(device_id),
            "latest": sample_to_dict(latest) if latest else None,
        }

    @app.get("/api/devices")
    def list_devices(op: str = Depends(operator)):
        return {"devices": [device_summary(d) for d in plane.device_ids()]}

    @app.get("/api/devices/{device_id}")
    def get_device(device_id: str, op: str = Depends(operator)):
        try:
            return device_summary(device_id)
        except NotFound:
            raise HTTPException(status_code=404, detail="unknown device")

    @app.get("/api/devices/{device_id}/samples")
    def get_samples(device_id: str,
                    from_ms: int = Query(default=0, alias="from"),
                    to_ms: int = Query(default=2**62, alias="to"),
                    op: str = Depends(operator)):
        try:
            rows = plane.query_range(device_id, from_ms, to_ms)
        except NotFound:
            raise HTTPException(status_code=404, detail="unknown device")
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"samples": [sample_to_dict(s) for s in rows]}

    @app.post("/api/devices/{device_id}/commands")
    def post_command(device_id: str, body: dict,
                     op: str = Depends(operator)):
        kind = body.get("kind")
        payload = body.get("payload", {})
        ttl_s = body.get("ttl_s")
        if not isinstance(kind, str) or not isinstance(payload, dict):
            raise HTTPException(status_code=400,
                                detail="body needs kind and payload")
        try:
            record = plane.dispatch_command(op, device_id, kind, payload,
                                            ttl_s=ttl_s)
        except NotFound:
            raise HTTPException(status_code=404, detail="unknown device")
        except (ValueError, ProtocolError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"cmd_id": record.command.cmd_id, "status": record.status}

    @app.get("/api/devices/{device_id}/commands/{cmd_id}")
    def get_command(device_id: str, cmd_id: str, op: str = Depends(operator)):
        try:
            record = plane.command_status(device_id, cmd_id)
        except NotFound:
            raise HTTPException(status_code=404, detail="unknown command")
        return {"cmd_id": cmd_id, "status": record.status,
                "reason": record.reason,
                "issued_at": record.command.issued_at,
                "kind": record.command.kind}

    @app.get("/api/devices/{device_id}/live")
    async def live(device_id: str, request: Request,
                   op: str = Depends(operator)):
        try:
            sub = plane.subscribe_live(device_id)
        except NotFound:
            raise HTTPException(status_code=404, detail="unknown device")

        async def stream():
            try:
                while True:
                    if await request.is_disconnected():
                        break
                    lines = sub.pop_all()
                    for line in lines:
                        yield line
                    if sub.closed:
                        yield json.dumps(
                            {"close_reason": sub.close_reason}) + "\n"
                        break
                    if not lines:
                        await asyncio.sleep(0.05)
            finally:
                plane.unsubscribe(sub)

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    if ui_dir:
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app


class SessionRegistry:
    """Connected device sessions; lets command dispatch push immediately."""

    def __init__(self):
        self._lock = threading.Lock()
        self._writers: dict[str, asyncio.StreamWriter] = {}
        self.loop: Optional[asyncio.AbstractEventLoop] = None

    def attach(self, device_id: str, writer: asyncio.StreamWriter) -> None:
        with self._lock:
            self._writers[device_id] = writer

    def detach(self, device_id: str, writer: asyncio.StreamWriter) -> None:
        with self._lock:
            if self._writers.get(device_id) is writer:
                del self._writers[device_id]

    def writer_for(self, device_id: str):
        with self._lock:
            return self._writers.get(device_id)


class TelemetryServer:
    """Runs the device TCP listener and the HTTP API on one event loop in
    a daemon thread.  Ports of 0 bind ephemerally; the bound addresses are
    available after start() returns."""

    def __init__(self, plane: ControlPlane, host: str = "127.0.0.1",
                 device_port: int = 0, http_port: int = 0,
                 ui_dir: Optional[str] = None):
        self.plane = plane
        self.host = host
        self._device_port = device_port
        self._http_port = http_port
        self.sessions = SessionRegistry()
        self.app = build_app(plane, self.sessions, ui_dir=ui_dir)
        self.device_addr: Optional[tuple[str, int]] = None
        self.http_addr: Optional[tuple[str, int]] = None
        self._ready = threading.Event()
        self._startup_error: Optional[BaseException] = None
        self._thread: Optional[threading.Thread] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._stop: Optional[asyncio.Event] = None
        plane.on_command_dispatched = self._push_command

    # -- device wire protocol -------------------------------------------

    async def _handle_device(self, reader: asyncio.StreamReader,
                             writer: asyncio.StreamWriter) -> None:
        device_id = None
        try:
            raw = await reader.readline()
            if not raw:
                return
            try:
                hello = decode_frame(raw.decode("utf-8"))
            except ProtocolError:
                return
            if not isinstance(hello, Hello):
                return
            try:
                rec = self.plane.authenticate(hello.dev, hello.token)
            except AuthError:
                return
            device_id = hello.dev
            self.plane.declare_resume(device_id, hello.oldest)
            self.sessions.attach(device_id, writer)
            writer.write(encode_frame(DataAck(
                dev=device_id, ack_seq=rec.highest_seq)).encode("utf-8"))
            for cmd in self.plane.poll_commands(device_id, redeliver=True):
                writer.write(encode_frame(cmd).encode("utf-8"))
            await writer.drain()

            while True:
                raw = await reader.readline()
                if not raw:
                    break
                line = raw.decode("utf-8")
                try:
                    frame = decode_frame(line)
                except ProtocolError:
                    self.plane.protocol_errors += 1
                    continue
                if isinstance(frame, TelemetrySample):
                    ack = self.plane.ingest_line(device_id, line)
                    if ack is not None:
                        writer.write(encode_frame(DataAck(
                            dev=device_id, ack_seq=ack)).encode("utf-8"))
                        await writer.drain()
                elif isinstance(frame, CommandAck):
                    self.plane.resolve_command(frame.cmd_id, frame.status,
                                               frame.reason)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            if device_id is not None:
                self.sessions.detach(device_id, writer)
                self.plane.disconnect(device_id)
            writer.close()

    def _push_command(self, cmd: Command) -> None:
        loop = self.sessions.loop
        if loop is None:
            return
        writer = self.sessions.writer_for(cmd.dev)
        if writer is None:
            return

        def _deliver():
            for pending in self.plane.poll_commands(cmd.dev):
                writer.write(encode_frame(pending).encode("utf-8"))

        loop.call_soon_threadsafe(_deliver)

    # -- lifecycle --------------------------------------------------------

    async def _main(self) -> None:
        self._stop = asyncio.Event()
        self.sessions.loop = asyncio.get_running_loop()
        tcp = await asyncio.start_server(self._handle_device, self.host,
                                         self._device_port)
        self.device_addr = tcp.sockets[0].getsockname()[:2]

        config = uvicorn.Config(self.app, host=self.host,
                                port=self._http_port, log_level="warning")
        http = uvicorn.Server(config)
        serve_task = asyncio.create_task(http.serve())
        while not http.started and not serve_task.done():
            await asyncio.sleep(0.01)
        if serve_task.done():
            self._startup_error = serve_task.exception() or RuntimeError(
                "http server exited during startup")
            tcp.close()
            self._ready.set()
            return
        self.http_addr = http.servers[0].sockets[0].getsockname()[:2]

        self._ready.set()
        await self._stop.wait()
        http.should_exit = True
        await serve_task
        tcp.close()
        await tcp.wait_closed()

    def _run(self) -> None:
        self._loop = asyncio.new_event_loop()
        asyncio.set_event_loop(self._loop)
        try:
            self._loop.run_until_complete(self._main())
        finally:
            self._loop.close()

    def start(self) -> "TelemetryServer":
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name="coldchain-server")
        self._thread.start()
        if not self._ready.wait(timeout=15.0):
            raise RuntimeError("server failed to start in time")
        if self._startup_error is not None:
            raise RuntimeError("server startup failed") from self._startup_error
        return self

    def stop(self) -> None:
        if self._loop is None or self._stop is None:
            return
        self._loop.call_soon_threadsafe(self._stop.set)
        if self._thread is not None:
            self._thread.join(timeout=10.0)


class NetLink:
    """Device-side TCP transport implementing the Link protocol: connects
    lazily, helloes on every fresh connection, and reads acks/commands
    without blocking the control loop."""

    def __init__(self, host: str, port: int, device_id: str, token: str,
                 connect_timeout_s: float = 1.0,
                 reconnect_backoff_s: float = 0.5):
        self.host = host
        self.port = port
        self.device_id = device_id
        self.token = token
        self.connect_timeout_s = connect_timeout_s
        self.reconnect_backoff_s = reconnect_backoff_s
        self._sock: Optional[socket.socket] = None
        self._rx = b""
        self._session = False
        self._last_attempt = 0.0

    def up(self) -> bool:
        if self._sock is not None:
            return True
        now = time.monotonic()
        if now - self._last_attempt < self.reconnect_backoff_s:
            return False
        self._last_attempt = now
        try:
            sock = socket.create_connection((self.host, self.port),
                                            timeout=self.connect_timeout_s)
        except OSError:
            return False
        sock.setblocking(False)
        self._sock = sock
        self._session = False
        self._rx = b""
        return True

    def _down(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
        self._sock = None
        self._session = False

    def ensure_session(self, oldest_seq: int) -> None:
        if self._sock is None or self._session:
            return
        self._session = True
        self.send(encode_frame(Hello(dev=self.device_id, token=self.token,
                                     oldest=oldest_seq)))

    def send(self, line: str) -> None:
        if self._sock is None:
            return
        try:
            self._sock.sendall(line.encode("utf-8"))
        except OSError:
            self._down()

    def receive(self) -> list[str]:
        if self._sock is None:
            return []
        while True:
            try:
                chunk = self._sock.recv(65536)
            except BlockingIOError:
                break
            except InterruptedError:
                continue
            except OSError:
                self._down()
                break
            if not chunk:          # server closed (EOF)
                self._down()
                break
            self._rx += chunk
        lines = []
        while b"\n" in self._rx:
            raw, self._rx = self._rx.split(b"\n", 1)
            if raw.strip():
                lines.append(raw.decode("utf-8") + "\n")
        return lines

    def close(self) -> None:
        self._down()
