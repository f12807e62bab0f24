"""Network front end: TCP sessions, HTTP API, live streaming."""

import json
import socket
import threading
import time

import httpx
import pytest

from coldchain.netserver import NetLink, TelemetryServer
from coldchain.protocol import (DataAck, Hello, SendBuffer, decode_frame,
                                encode_frame, flush)
from coldchain.server import ControlPlane
from test_protocol import make_sample


@pytest.fixture()
def live_server():
    plane = ControlPlane(command_ttl_s=60.0)
    plane.register_device("dev01", "tok1")
    plane.register_operator("ops", "optok")
    server = TelemetryServer(plane).start()
    yield plane, server
    server.stop()
    plane.close()


def http_base(server):
    return f"http://{server.http_addr[0]}:{server.http_addr[1]}"


AUTH = {"Authorization": "Bearer optok"}


def raw_device_conn(server, hello=True, token="tok1", oldest=1):
    sock = socket.create_connection(server.device_addr, timeout=5.0)
    fh = sock.makefile("rwb")
    if hello:
        fh.write(encode_frame(Hello(dev="dev01", token=token,
                                    oldest=oldest)).encode())
        fh.flush()
    return sock, fh


class TestDevicePort:
    def test_session_ingests_and_acks(self, live_server):
        plane, server = live_server
        sock, fh = raw_device_conn(server)
        first = decode_frame(fh.readline().decode())
        assert first == DataAck(dev="dev01", ack_seq=0)
        fh.write(encode_frame(make_sample(1)).encode())
        fh.flush()
        ack = decode_frame(fh.readline().decode())
        assert ack == DataAck(dev="dev01", ack_seq=1)
        assert plane.sample_count("dev01") == 1
        sock.close()

    def test_bad_token_closes_connection(self, live_server):
        plane, server = live_server
        sock, fh = raw_device_conn(server, token="wrong")
        assert fh.readline() == b""      # server hung up
        sock.close()

    def test_malformed_line_skipped_session_survives(self, live_server):
        plane, server = live_server
        sock, fh = raw_device_conn(server)
        fh.readline()
        fh.write(b"garbage that is not a frame\n")
        fh.write(encode_frame(make_sample(1)).encode())
        fh.flush()
        ack = decode_frame(fh.readline().decode())
        assert ack.ack_seq == 1
        assert plane.protocol_errors == 1
        sock.close()

    def test_connection_flag_tracks_session(self, live_server):
        plane, server = live_server
        sock, fh = raw_device_conn(server)
        fh.readline()
        deadline = time.monotonic() + 5
        while not plane.device_record("dev01").connected:
            assert time.monotonic() < deadline
            time.sleep(0.01)
        fh.close()
        sock.close()
        deadline = time.monotonic() + 5
        while plane.device_record("dev01").connected:
            assert time.monotonic() < deadline
            time.sleep(0.01)


class TestNetLink:
    def test_flush_over_tcp_round_trip(self, live_server):
        plane, server = live_server
        link = NetLink(*server.device_addr, "dev01", "tok1")
        buf = SendBuffer(capacity=100)
        for seq in (1, 2, 3):
            buf.push(seq, encode_frame(make_sample(seq)))
        deadline = time.monotonic() + 5
        while len(buf) and time.monotonic() < deadline:
            flush(buf, link, time.monotonic(), next_seq=4)
            time.sleep(0.02)
        assert len(buf) == 0
        assert plane.sample_count("dev01") == 3
        link.close()

    def test_down_when_nothing_listens(self):
        link = NetLink("127.0.0.1", 1, "dev01", "tok1",
                       connect_timeout_s=0.1, reconnect_backoff_s=0.0)
        assert not link.up()


class TestHttpApi:
    def test_requires_operator_token(self, live_server):
        _, server = live_server
        assert httpx.get(f"{http_base(server)}/api/devices").status_code == 401
        r = httpx.get(f"{http_base(server)}/api/devices", headers=AUTH)
        assert r.status_code == 200
        assert r.json()["devices"][0]["device_id"] == "dev01"

    def test_query_token_accepted_for_streams(self, live_server):
        _, server = live_server
        r = httpx.get(f"{http_base(server)}/api/devices?token=optok")
        assert r.status_code == 200

    def test_samples_range(self, live_server):
        plane, server = live_server
        samples = [make_sample(s) for s in (1, 2, 3)]
        for s in samples:
            plane.ingest(s)
        r = httpx.get(
            f"{http_base(server)}/api/devices/dev01/samples"
            f"?from={samples[1].t_ms}&to={samples[2].t_ms}", headers=AUTH)
        got = r.json()["samples"]
        assert [s["seq"] for s in got] == [2, 3]

    def test_unknown_device_404(self, live_server):
        _, server = live_server
        r = httpx.get(f"{http_base(server)}/api/devices/ghost", headers=AUTH)
        assert r.status_code == 404

    def test_bad_command_400(self, live_server):
        _, server = live_server
        r = httpx.post(f"{http_base(server)}/api/devices/dev01/commands",
                       headers=AUTH, json={"kind": "reboot", "payload": {}})
        assert r.status_code == 400

    def test_command_roundtrip_to_connected_device(self, live_server):
        plane, server = live_server
        sock, fh = raw_device_conn(server)
        fh.readline()                         # initial ack
        r = httpx.post(f"{http_base(server)}/api/devices/dev01/commands",
                       headers=AUTH,
                       json={"kind": "actuate",
                             "payload": {"name": "led1", "on": True}})
        cmd_id = r.json()["cmd_id"]
        cmd = decode_frame(fh.readline().decode())   # pushed immediately
        assert cmd.cmd_id == cmd_id
        from coldchain.protocol import CommandAck
        fh.write(encode_frame(CommandAck(cmd_id=cmd_id, status="applied",
                                         seq=0)).encode())
        fh.flush()
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            r = httpx.get(f"{http_base(server)}/api/devices/dev01/"
                          f"commands/{cmd_id}", headers=AUTH)
            if r.json()["status"] == "applied":
                break
            time.sleep(0.02)
        assert r.json()["status"] == "applied"
        sock.close()

    def test_live_stream_delivers_within_a_second(self, live_server):
        plane, server = live_server
        got = []
        seen = threading.Event()

        def consume():
            with httpx.stream("GET",
                              f"{http_base(server)}/api/devices/dev01/live",
                              headers=AUTH, timeout=10.0) as resp:
                for line in resp.iter_lines():
                    got.append(json.loads(line))
                    seen.set()
                    break

        t = threading.Thread(target=consume, daemon=True)
        t.start()
        time.sleep(0.3)                      # let the subscription attach
        t_ingest = time.monotonic()
        plane.ingest(make_sample(1))
        assert seen.wait(timeout=1.0)
        assert time.monotonic() - t_ingest < 1.0
        assert got[0]["seq"] == 1
        t.join(timeout=5.0)
