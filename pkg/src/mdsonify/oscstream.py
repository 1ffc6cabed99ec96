"""OSC 1.0 message encoding and timed UDP streaming of parameter frames.

Address scheme (normative for this artifact):
  /sonify/static/<A>  lb, ub, area (f32), count (i32), notes... (i32)
  /sonify/frame       m1..m4, H, F, p5..p9 (11 f32)

Dynamic frames are sent at ``fps`` with drift-corrected scheduling against
the stream start time.
"""

from __future__ import annotations

import socket
import struct
import time
from dataclasses import dataclass, field

import numpy as np


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class OscMessage:
    address: str
    args: tuple = ()

    def __post_init__(self):
        if not self.address.startswith("/") or not self.address.isascii():
            raise EncodingError(f"address must be ASCII starting with '/': {self.address!r}")
        object.__setattr__(self, "args", tuple(self.args))


def _pad_string(data: bytes) -> bytes:
    # OSC strings are null-terminated, then zero-padded to 4-byte alignment
    data += b"\x00"
    return data + b"\x00" * (-len(data) % 4)


def encode(msg: OscMessage) -> bytes:
    """Encode as OSC 1.0 binary: big-endian, every section 4-byte aligned."""
    tags = ","
    payload = b""
    for arg in msg.args:
        if isinstance(arg, bool):
            raise EncodingError("bool arguments are not supported")
        if isinstance(arg, (int, np.integer)):
            tags += "i"
            payload += struct.pack(">i", int(arg))
        elif isinstance(arg, (float, np.floating)):
            tags += "f"
            payload += struct.pack(">f", float(arg))
        elif isinstance(arg, str):
            tags += "s"
            payload += _pad_string(arg.encode("ascii"))
        else:
            raise EncodingError(f"unsupported argument type {type(arg).__name__}")
    return _pad_string(msg.address.encode("ascii")) + _pad_string(tags.encode("ascii")) + payload


@dataclass
class StreamSession:
    """UDP endpoint plus the frame clock for one streaming run."""

    host: str = "127.0.0.1"
    port: int = 9000
    fps: float = 20.0
    sent: int = 0
    start_time: float | None = None
    _sock: socket.socket = field(default=None, repr=False)

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be > 0")
        if self._sock is None:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def send(self, msg: OscMessage) -> None:
        self._sock.sendto(encode(msg), (self.host, self.port))
        self.sent += 1

    def close(self) -> None:
        self._sock.close()


def static_messages(static, clusters) -> list[OscMessage]:
    """One message per metastable state: /sonify/static/<A>."""
    msgs = []
    for A in range(static.m):
        c = clusters[A]
        args = (float(static.lb[A]), float(static.ub[A]), float(static.area[A]),
                int(c.count), *(int(n) for n in c.semitones))
        msgs.append(OscMessage(address=f"/sonify/static/{A}", args=args))
    return msgs


def frame_message(frame) -> OscMessage:
    """/sonify/frame with the 11 dynamic parameters as f32."""
    args = tuple(float(v) for v in (*frame.memberships, frame.entropy,
                                    frame.free_energy, *frame.projections))
    return OscMessage(address="/sonify/frame", args=args)


def send_static(static, clusters, session: StreamSession) -> int:
    for msg in static_messages(static, clusters):
        session.send(msg)
    return static.m


@dataclass(frozen=True)
class StreamStats:
    sent: int
    duration_s: float
    max_scheduling_error_s: float
    overruns: int


def stream_frames(frames, session: StreamSession,
                  sleep=time.sleep, clock=time.monotonic) -> StreamStats:
    """Send one /sonify/frame message per frame at 1/fps intervals.

    Scheduling is absolute against the stream start, so timing error does
    not accumulate. Overruns (> one frame period late) are counted, not
    fatal.
    """
    period = 1.0 / session.fps
    start = clock()
    session.start_time = start
    max_err = 0.0
    overruns = 0
    sent = 0
    for i, frame in enumerate(frames):
        target = start + i * period
        now = clock()
        if now < target:
            sleep(target - now)
        err = abs(clock() - target)
        if err > period:
            overruns += 1
        max_err = max(max_err, err)
        session.send(frame_message(frame))
        sent += 1
    return StreamStats(sent=sent, duration_s=clock() - start,
                       max_scheduling_error_s=max_err, overruns=overruns)
