"""Wire format canonicality, ring buffer, and store-and-forward flush."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldchain.protocol import (FLAG_SENSOR_FAULT, Command, CommandAck,
                                DataAck, Hello, ProtocolError, SendBuffer,
                                TelemetrySample, decode_frame, encode_frame,
                                flush)


def make_sample(seq=1, **over):
    base = dict(dev="dev01", seq=seq, t_ms=1735689600000 + seq * 10000,
                t_chamber_c=15.02, t_pouch_c=15.11, rh_pct=54.3,
                v_bus_v=12.0, i_bus_a=6.25, p_w=75.0, lat=22.5726,
                lon=88.3639, setpoint_c=15.0, duty_pct=20.0, soc_pct=98.5,
                act=0, flags=0)
    base.update(over)
    return TelemetrySample(**base)


finite = st.floats(min_value=-1000, max_value=1000)


class TestEncoding:
    def test_sample_line_shape(self):
        line = encode_frame(make_sample())
        assert line.endswith("\n")
        assert line.startswith('{"v":1,"dev":"dev01","seq":1,')
        assert " " not in line

    def test_two_encodings_byte_identical(self):
        s = make_sample()
        assert encode_frame(s) == encode_frame(s)

    def test_decode_encode_fixed_point(self):
        line = encode_frame(make_sample())
        assert encode_frame(decode_frame(line)) == line

    def test_fault_sentinel_round_trip(self):
        s = make_sample(t_chamber_c=-1, t_pouch_c=-1, rh_pct=-1,
                        flags=FLAG_SENSOR_FAULT)
        out = decode_frame(encode_frame(s))
        assert out.t_chamber_c == -1
        assert out.flag(FLAG_SENSOR_FAULT)

    def test_six_decimal_cap(self):
        s = make_sample(t_chamber_c=15.123456789)
        out = decode_frame(encode_frame(s))
        assert out.t_chamber_c == 15.123457
        assert '"t_chamber_c":15.123457' in encode_frame(s)

    def test_non_finite_rejected(self):
        with pytest.raises(ProtocolError):
            encode_frame(make_sample(t_chamber_c=float("nan")))

    @settings(max_examples=200, deadline=None)
    @given(seq=st.integers(1, 2**63), chamber=finite, pouch=finite,
           rh=finite, duty=st.floats(0, 100), soc=st.floats(0, 100),
           lat=st.floats(-90, 90), lon=st.floats(-180, 180),
           act=st.integers(0, 31), flags=st.integers(0, 15))
    def test_round_trip_identity(self, seq, chamber, pouch, rh, duty, soc,
                                 lat, lon, act, flags):
        s = make_sample(seq=seq, t_chamber_c=chamber, t_pouch_c=pouch,
                        rh_pct=rh, duty_pct=duty, soc_pct=soc, lat=lat,
                        lon=lon, act=act, flags=flags)
        once = encode_frame(s)
        twice = encode_frame(decode_frame(once))
        assert once == twice

    def test_command_round_trip(self):
        cmd = Command(cmd_id="c7", dev="dev01", kind="set_setpoint",
                      payload={"setpoint_c": 12.0}, issued_at=1735689600000,
                      issuer="ops")
        out = decode_frame(encode_frame(cmd))
        assert out == cmd
        assert encode_frame(out) == encode_frame(cmd)

    def test_actuate_command_with_bool_payload(self):
        cmd = Command(cmd_id="c8", dev="dev01", kind="actuate",
                      payload={"name": "led2", "on": True},
                      issued_at=0, issuer="ops")
        out = decode_frame(encode_frame(cmd))
        assert out.payload == {"name": "led2", "on": True}

    def test_ack_frames_round_trip(self):
        for frame in (DataAck(dev="dev01", ack_seq=41),
                      CommandAck(cmd_id="c1", status="applied", seq=12),
                      CommandAck(cmd_id="c2", status="rejected", seq=12,
                                 reason="setpoint 120.0 outside achievable "
                                        "range [2.0, 98.0]"),
                      Hello(dev="dev01", token="t0k", oldest=5)):
            assert decode_frame(encode_frame(frame)) == frame

    def test_malformed_lines_rejected(self):
        for line in ("not json\n", "[1,2]\n", '{"v":1}\n',
                     '{"v":9,"dev":"d","ack_seq":1}\n',
                     '{"v":1,"dev":"d","kind":"reboot","cmd_id":"c",'
                     '"payload":{},"issued_at":0,"issuer":"x"}\n'):
            with pytest.raises(ProtocolError):
                decode_frame(line)


class TestSendBuffer:
    def test_ring_eviction_counts_drops(self):
        buf = SendBuffer(capacity=3)
        for seq in range(1, 5):
            buf.push(seq, f"frame{seq}\n")
        assert len(buf) == 3
        assert buf.oldest_seq == 2
        assert buf.dropped_count == 1

    def test_ack_clears(self):
        buf = SendBuffer(capacity=10)
        buf.push(1, "a\n")
        buf.ack(1)
        assert len(buf) == 0
        assert buf.acked_count == 1

    def test_unknown_ack_is_idempotent(self):
        buf = SendBuffer(capacity=10)
        buf.push(5, "a\n")
        buf.ack(3)          # nothing at or below 3
        assert len(buf) == 1
        buf.ack(99)
        buf.ack(99)
        assert len(buf) == 0
        assert buf.acked_count == 1

    def test_cumulative_ack(self):
        buf = SendBuffer(capacity=10)
        for seq in (1, 2, 3, 4):
            buf.push(seq, f"{seq}\n")
        buf.ack(3)
        assert buf.oldest_seq == 4

    def test_seq_must_increase(self):
        buf = SendBuffer(capacity=10)
        buf.push(2, "a\n")
        with pytest.raises(ValueError):
            buf.push(2, "b\n")


class ScriptedLink:
    """Link double: scriptable up/down, records sends, feeds back acks."""

    def __init__(self):
        self.is_up = True
        self.sent = []
        self.inbox = []
        self.sessions = 0
        self.session_live = False
        self.auto_ack = True
        self.drop_acks = False

    def up(self):
        if not self.is_up:
            self.session_live = False
        return self.is_up

    def ensure_session(self, oldest_seq):
        if not self.session_live:
            self.sessions += 1
            self.session_live = True
            self.session_oldest = oldest_seq

    def send(self, line):
        self.sent.append(line)
        if self.auto_ack and not self.drop_acks:
            frame = decode_frame(line)
            if isinstance(frame, TelemetrySample):
                self.inbox.append(encode_frame(
                    DataAck(dev=frame.dev, ack_seq=frame.seq)))

    def receive(self):
        out, self.inbox = self.inbox, []
        return out


class TestFlush:
    def test_down_link_is_noop(self):
        buf = SendBuffer(capacity=10)
        buf.push(1, encode_frame(make_sample(1)))
        link = ScriptedLink()
        link.is_up = False
        flush(buf, link, 0.0, next_seq=2)
        assert link.sent == []
        assert len(buf) == 1

    def test_sends_oldest_first_and_acks_clear(self):
        buf = SendBuffer(capacity=10)
        lines = [encode_frame(make_sample(s)) for s in (1, 2, 3)]
        for s, line in zip((1, 2, 3), lines):
            buf.push(s, line)
        link = ScriptedLink()
        flush(buf, link, 0.0, next_seq=4)
        assert link.sent == lines
        assert len(buf) == 0

    def test_outage_replay_resumes_from_oldest(self):
        buf = SendBuffer(capacity=100)
        link = ScriptedLink()
        buf.push(1, encode_frame(make_sample(1)))
        flush(buf, link, 0.0, next_seq=2)
        link.is_up = False
        for s in (2, 3, 4):
            buf.push(s, encode_frame(make_sample(s)))
            flush(buf, link, float(s), next_seq=s + 1)
        link.is_up = True
        flush(buf, link, 10.0, next_seq=5)
        assert len(buf) == 0
        assert link.sessions == 2
        assert link.session_oldest == 2
        sent_seqs = [decode_frame(l).seq for l in link.sent]
        assert sent_seqs == [1, 2, 3, 4]

    def test_unacked_frames_retry_after_timeout(self):
        buf = SendBuffer(capacity=10)
        buf.push(1, encode_frame(make_sample(1)))
        link = ScriptedLink()
        link.drop_acks = True
        flush(buf, link, 0.0, next_seq=2)
        flush(buf, link, 1.0, next_seq=2)    # too soon to retry
        assert len(link.sent) == 1
        flush(buf, link, 5.0, next_seq=2)    # past the retry window
        assert len(link.sent) == 2
        assert len(buf) == 1                 # still unacked

    def test_commands_are_returned_to_caller(self):
        buf = SendBuffer(capacity=10)
        link = ScriptedLink()
        cmd = Command(cmd_id="c1", dev="dev01", kind="actuate",
                      payload={"name": "led1", "on": True},
                      issued_at=0, issuer="ops")
        link.inbox.append(encode_frame(cmd))
        got = flush(buf, link, 0.0, next_seq=1)
        assert got == [cmd]
