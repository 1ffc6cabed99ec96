import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdsonify.mapping import NoteCluster
from mdsonify.oscstream import (EncodingError, OscMessage, StreamSession,
                                encode, frame_message, send_static,
                                static_messages, stream_frames)
from mdsonify.sonparams import DynamicFrame, StaticParams


def decode(data: bytes):
    """Independent minimal OSC 1.0 decoder used as the round-trip oracle."""
    def read_string(buf, off):
        end = buf.index(b"\x00", off)
        s = buf[off:end].decode("ascii")
        off = end + 1
        off += -off % 4
        return s, off

    address, off = read_string(data, 0)
    tags, off = read_string(data, off)
    assert tags.startswith(",")
    args = []
    for t in tags[1:]:
        if t == "i":
            (v,) = struct.unpack_from(">i", data, off)
            off += 4
        elif t == "f":
            (v,) = struct.unpack_from(">f", data, off)
            off += 4
        elif t == "s":
            v, off = read_string(data, off)
        else:
            raise AssertionError(f"unknown tag {t}")
        args.append(v)
    assert off == len(data)
    return address, args


class TestEncodeGolden:
    def test_no_args(self):
        assert encode(OscMessage("/a")) == bytes.fromhex("2F6100002C000000")

    def test_single_float(self):
        got = encode(OscMessage("/f", (1.0,)))
        assert got == bytes.fromhex("2F6600002C6600003F800000")

    def test_negative_int_payload(self):
        got = encode(OscMessage("/i", (-1,)))
        assert got.endswith(b"\xff\xff\xff\xff")
        assert b",i\x00\x00" in got

    def test_string_argument(self):
        addr, args = decode(encode(OscMessage("/s", ("abc",))))
        assert addr == "/s" and args == ["abc"]


class TestEncodeValidation:
    def test_bool_rejected(self):
        with pytest.raises(EncodingError, match="bool"):
            encode(OscMessage("/x", (True,)))

    def test_unsupported_type(self):
        with pytest.raises(EncodingError, match="list"):
            encode(OscMessage("/x", ([1, 2],)))

    def test_bad_address(self):
        with pytest.raises(EncodingError):
            OscMessage("no-slash")
        with pytest.raises(EncodingError):
            OscMessage("/tél")

    def test_numpy_scalars_accepted(self):
        addr, args = decode(encode(OscMessage("/n", (np.int32(7), np.float64(0.5)))))
        assert args == [7, 0.5]


@settings(max_examples=1000, deadline=None)
@given(
    st.text(alphabet=st.characters(min_codepoint=33, max_codepoint=126,
                                   exclude_characters="\x00"),
            min_size=0, max_size=12),
    st.lists(st.one_of(
        st.integers(-2**31, 2**31 - 1),
        st.floats(width=32, allow_nan=False, allow_infinity=False),
        st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126),
                max_size=10),
    ), max_size=6),
)
def test_roundtrip_and_alignment(suffix, args):
    msg = OscMessage("/" + suffix, tuple(args))
    data = encode(msg)
    assert len(data) % 4 == 0
    addr, back = decode(data)
    assert addr == msg.address
    assert len(back) == len(args)
    for orig, dec in zip(args, back):
        if isinstance(orig, float):
            assert dec == struct.unpack(">f", struct.pack(">f", orig))[0]
        else:
            assert dec == orig


def make_static():
    return StaticParams(lb=np.array([0.2, 0.0]), ub=np.array([0.4, 1.0]),
                        area=np.array([12.0, 4.0]), bins=32,
                        assignment=np.zeros(4, dtype=int),
                        histograms=np.zeros((2, 32)))


def make_clusters():
    return [NoteCluster(low_note=55.0, high_note=62.0, count=3),
            NoteCluster(low_note=48.0, high_note=84.0, count=3)]


def make_frame():
    return DynamicFrame(memberships=np.array([1.0, 0.0, 0.0, 0.0]),
                        entropy=0.0, free_energy=0.2,
                        projections=np.zeros(5), t_ps=0.0)


class TestMessages:
    def test_static_field_order(self):
        msgs = static_messages(make_static(), make_clusters())
        assert len(msgs) == 2
        addr, args = decode(encode(msgs[0]))
        assert addr == "/sonify/static/0"
        assert args[0] == pytest.approx(0.2)
        assert args[1] == pytest.approx(0.4)
        assert args[2] == 12.0
        assert args[3] == 3
        assert args[4:] == [55, 59, 62]  # 58.5 rounds half-up

    def test_static_deterministic(self):
        a = [encode(m) for m in static_messages(make_static(), make_clusters())]
        b = [encode(m) for m in static_messages(make_static(), make_clusters())]
        assert a == b

    def test_frame_arity_eleven_floats(self):
        msg = frame_message(make_frame())
        addr, args = decode(encode(msg))
        assert addr == "/sonify/frame"
        assert len(args) == 11
        assert all(isinstance(a, float) for a in args)
        assert args == [1, 0, 0, 0, 0, pytest.approx(0.2), 0, 0, 0, 0, 0]


class TestStreaming:
    def _receiver(self):
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(("127.0.0.1", 0))
        sock.settimeout(2.0)
        return sock, sock.getsockname()[1]

    def test_send_static_over_udp(self):
        sock, port = self._receiver()
        session = StreamSession(host="127.0.0.1", port=port)
        try:
            n = send_static(make_static(), make_clusters(), session)
            assert n == 2
            got = [decode(sock.recv(4096))[0] for _ in range(2)]
            assert got == ["/sonify/static/0", "/sonify/static/1"]
        finally:
            session.close()
            sock.close()

    def test_stream_frames_scheduling(self):
        # injected clock/sleep: no wall-clock dependence, exact schedule math
        now = [0.0]

        def clock():
            return now[0]

        def sleep(dt):
            now[0] += dt

        sock, port = self._receiver()
        session = StreamSession(host="127.0.0.1", port=port, fps=20.0)
        try:
            stats = stream_frames([make_frame()] * 10, session,
                                  sleep=sleep, clock=clock)
        finally:
            session.close()
            sock.close()
        assert stats.sent == 10
        assert stats.overruns == 0
        assert stats.max_scheduling_error_s == 0.0
        assert stats.duration_s == pytest.approx(9 / 20)

    def test_stream_counts_overruns(self):
        # a slow consumer: the clock jumps a full period on every send
        now = [0.0]

        def clock():
            return now[0]

        def sleep(dt):
            now[0] += dt + 0.2  # always oversleeps by 4 periods

        sock, port = self._receiver()
        session = StreamSession(host="127.0.0.1", port=port, fps=20.0)
        try:
            stats = stream_frames([make_frame()] * 5, session,
                                  sleep=sleep, clock=clock)
        finally:
            session.close()
            sock.close()
        assert stats.sent == 5  # overruns logged, never fatal
        assert stats.overruns > 0
        assert stats.max_scheduling_error_s > 1 / 20

    def test_fps_validation(self):
        with pytest.raises(ValueError):
            StreamSession(fps=0.0)
