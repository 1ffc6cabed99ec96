"""Trajectory ingestion: periodic feature time series and discrete state chains.

File formats are self-describing. Text files use ``#`` comments and
``key=value`` header lines (``dt``, ``dim`` or ``n_states``); the binary
feature format starts with magic ``MDSF``, a little-endian u16 version,
then a fixed preamble and a row-major f64 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC_FEATURES = b"MDSF"
FORMAT_VERSION = 1


class ParseError(ValueError):
    """Malformed input file; message names the offending line or offset."""


def wrap_degrees(x):
    """Wrap angles (degrees) into [-180, 180)."""
    return (np.asarray(x, dtype=float) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class FeatureSeries:
    """Time series of periodic feature vectors (angles in degrees)."""

    frames: np.ndarray  # (n_frames, dim), each component in [-180, 180)
    dt: float  # picoseconds between frames
    labels: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 2 or frames.shape[1] < 1:
            raise ValueError("frames must be a 2-D array with >= 1 column")
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if np.any(frames < -180.0) or np.any(frames >= 180.0):
            raise ValueError("feature components must lie in [-180, 180)")
        object.__setattr__(self, "frames", frames)
        labels = self.labels or tuple(f"f{i}" for i in range(frames.shape[1]))
        if len(labels) != frames.shape[1]:
            raise ValueError("labels length must match feature dimension")
        object.__setattr__(self, "labels", tuple(labels))

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class ObservedChain:
    """Time-ordered chain of discrete observed-state indices."""

    states: np.ndarray  # (n_frames,) int
    n_states: int
    dt: float  # picoseconds

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        if states.ndim != 1 or states.size < 2:
            raise ValueError("chain must contain at least 2 frames")
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        if np.any(states < 0) or np.any(states >= self.n_states):
            bad = int(np.argmax((states < 0) | (states >= self.n_states)))
            raise ValueError(
                f"state index {int(states[bad])} at frame {bad} out of range "
                f"[0, {self.n_states})"
            )
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return self.states.size


def _parse_header_tokens(line: str, lineno: int, header: dict) -> None:
    for tok in line.split():
        if "=" not in tok:
            raise ParseError(f"line {lineno}: expected key=value header token, got {tok!r}")
        key, _, val = tok.partition("=")
        header[key.strip()] = val.strip()


def _read_text_sections(path: Path):
    """Split a text file into header dict and (lineno, line) body rows."""
    header: dict[str, str] = {}
    body: list[tuple[int, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" in line and not body:
                _parse_header_tokens(line, lineno, header)
            else:
                body.append((lineno, line))
    return header, body


def load_features(path, format: str = "csv") -> FeatureSeries:
    """Load a FeatureSeries; angles are wrapped into [-180, 180)."""
    path = Path(path)
    if format == "csv":
        return _load_features_csv(path)
    if format == "binary":
        return _load_features_binary(path)
    raise ValueError(f"unknown feature format {format!r}")


def _load_features_csv(path: Path) -> FeatureSeries:
    header, body = _read_text_sections(path)
    if "dt" not in header:
        raise ParseError(f"{path}: missing dt header")
    try:
        dt = float(header["dt"])
    except ValueError:
        raise ParseError(f"{path}: dt={header['dt']!r} is not numeric") from None
    dim = int(header["dim"]) if "dim" in header else None
    rows = []
    for lineno, line in body:
        fields = [f.strip() for f in line.split(",")]
        if dim is None:
            dim = len(fields)
        if len(fields) != dim:
            raise ParseError(
                f"line {lineno}: expected {dim} fields, got {len(fields)}"
            )
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric field in {line!r}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    labels = tuple(header["labels"].split(",")) if "labels" in header else ()
    return FeatureSeries(frames=wrap_degrees(rows), dt=dt, labels=labels)


_PREAMBLE = struct.Struct("<4sHIQd")  # magic, version, dim, n_frames, dt


def _load_features_binary(path: Path) -> FeatureSeries:
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise ParseError(f"{path}: truncated preamble at offset {len(raw)}")
    magic, version, dim, n_frames, dt = _PREAMBLE.unpack_from(raw, 0)
    if magic != MAGIC_FEATURES:
        raise ParseError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    if dt <= 0:
        raise ParseError(f"{path}: missing or invalid dt in preamble")
    expect = _PREAMBLE.size + 8 * dim * n_frames
    if len(raw) != expect:
        raise ParseError(f"{path}: payload length {len(raw)} != expected {expect}")
    frames = np.frombuffer(raw, dtype="<f8", offset=_PREAMBLE.size).reshape(n_frames, dim)
    return FeatureSeries(frames=wrap_degrees(frames), dt=dt)


def save_features(series: FeatureSeries, path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"dt={series.dt!r} dim={series.dim}\n")
            fh.write(f"labels={','.join(series.labels)}\n")
            for row in series.frames:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    elif format == "binary":
        with open(path, "wb") as fh:
            fh.write(_PREAMBLE.pack(MAGIC_FEATURES, FORMAT_VERSION,
                                    series.dim, series.n_frames, series.dt))
            fh.write(np.ascontiguousarray(series.frames, dtype="<f8").tobytes())
    else:
        raise ValueError(f"unknown feature format {format!r}")


def load_chain(path) -> ObservedChain:
    """Load an ObservedChain from a text file with n_states/dt header."""
    path = Path(path)
    header, body = _read_text_sections(path)
    if "n_states" not in header:
        raise ParseError(f"{path}: missing n_states header")
    if "dt" not in header:
        raise ParseError(f"{path}: missing dt header")
    n_states = int(header["n_states"])
    dt = float(header["dt"])
    states: list[int] = []
    for lineno, line in body:
        for tok in line.split():
            try:
                idx = int(tok)
            except ValueError:
                raise ParseError(f"line {lineno}: non-integer state {tok!r}") from None
            if idx < 0 or idx >= n_states:
                raise ParseError(
                    f"line {lineno}: state {idx} out of range [0, {n_states})"
                )
            states.append(idx)
    if len(states) < 2:
        raise ParseError(f"{path}: chain needs >= 2 frames, got {len(states)}")
    return ObservedChain(states=np.array(states), n_states=n_states, dt=dt)


def write_chain(chain: ObservedChain, path, per_line: int = 20) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"n_states={chain.n_states} dt={chain.dt!r}\n")
        states = chain.states
        for i in range(0, states.size, per_line):
            fh.write(" ".join(str(int(s)) for s in states[i:i + per_line]) + "\n")
