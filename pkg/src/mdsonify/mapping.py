"""Mapping from sonification parameters to concrete control signals.

Note clusters per metastable state (bounds from the free-energy well limits,
note count from relative well areas), membership-interpolated effective
clusters, asymmetric attack/decay entropy smoothing, free-energy-driven
pulse tempo/brightness, and the five panned scanned-synthesis channels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mdsonify.sonparams import StaticParams

NOTE_RANGE_SEMITONES = 36  # three octaves
MIN_CLUSTER_NOTES = 3  # smallest-area state gets this many notes
SCAN_PANS = (-1.0, -0.5, 0.0, 0.5, 1.0)  # modes 5..9, hard left to hard right


@dataclass(frozen=True)
class MappingConfig:
    root_note: float = 48.0  # MIDI C3
    tempo_min: float = 60.0
    tempo_max: float = 180.0
    cutoff_min: float = 500.0
    cutoff_max: float = 8000.0
    decay_tau_s: float = 0.5
    voice_cap: int = 10

    @classmethod
    def load(cls, path) -> "MappingConfig":
        """Read key=value overrides from a text config file."""
        kwargs = {}
        casts = {f: (int if f == "voice_cap" else float)
                 for f in cls.__dataclass_fields__}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in casts:
                raise ValueError(f"line {lineno}: unknown mapping key {key!r}")
            kwargs[key] = casts[key](val.strip())
        return cls(**kwargs)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for name in self.__dataclass_fields__:
                fh.write(f"{name}={getattr(self, name)}\n")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class NoteCluster:
    """Evenly spaced pitches in [low_note, high_note], MIDI-note units.

    ``notes`` keeps the continuous pitches (used for interpolation);
    ``semitones`` is the rounded, deduplicated keyboard rendering.
    """

    low_note: float
    high_note: float
    count: int
    notes: tuple[float, ...] = ()
    semitones: tuple[int, ...] = ()
    degenerate: bool = False

    def __post_init__(self):
        if self.low_note > self.high_note:
            raise ValueError("low_note must be <= high_note")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not self.notes:
            if self.count == 1:
                notes = (self.low_note,)
            else:
                notes = tuple(np.linspace(self.low_note, self.high_note, self.count))
            object.__setattr__(self, "notes", notes)
        if not self.semitones:
            rounded = [_round_half_up(p) for p in self.notes]
            object.__setattr__(self, "semitones", tuple(sorted(set(rounded))))


def build_clusters(static: StaticParams, config: MappingConfig = MappingConfig()):
    """One NoteCluster per metastable state from its static parameters.

    Well bounds map onto a three-octave range above the root note; note
    counts scale with relative well area so the smallest state gets 3 notes
    (a 3:1 area ratio yields 9:3 notes).
    """
    root = config.root_note
    min_area = static.area.min()
    degenerate = bool(np.all(static.lb == static.ub)
                      and np.all(static.area == static.area[0]))
    if degenerate:
        warnings.warn("degenerate static parameters; clusters collapse to single notes")
    clusters = []
    for A in range(static.m):
        low = root + NOTE_RANGE_SEMITONES * static.lb[A]
        high = root + NOTE_RANGE_SEMITONES * static.ub[A]
        count = max(1, _round_half_up(MIN_CLUSTER_NOTES * static.area[A] / min_area))
        clusters.append(NoteCluster(low_note=low, high_note=high, count=count,
                                    degenerate=degenerate))
    return clusters


def interpolate(clusters, memberships) -> NoteCluster:
    """Membership-weighted effective cluster; exact at indicator memberships."""
    w = np.asarray(memberships, dtype=float)
    low = float(sum(wa * c.low_note for wa, c in zip(w, clusters)))
    high = float(sum(wa * c.high_note for wa, c in zip(w, clusters)))
    count = max(1, _round_half_up(sum(wa * c.count for wa, c in zip(w, clusters))))
    return NoteCluster(low_note=low, high_note=high, count=count)


def smooth_entropy(current: float, incoming: float, dt_s: float,
                   decay_tau_s: float) -> float:
    """Asymmetric smoother: rises instantly, decays exponentially."""
    if decay_tau_s <= 0:
        raise ValueError("decay_tau_s must be > 0")
    if incoming >= current:
        return incoming
    return incoming + (current - incoming) * math.exp(-dt_s / decay_tau_s)


@dataclass(frozen=True)
class PulseParams:
    tempo_bpm: float
    brightness_hz: float


def pulse(free_energy: float, config: MappingConfig = MappingConfig()) -> PulseParams:
    """Reversed-polarity map: low free energy -> fast, bright pulse."""
    if not 0.0 <= free_energy <= 1.0:
        raise ValueError("free_energy must lie in [0, 1]")
    tempo = config.tempo_max - free_energy * (config.tempo_max - config.tempo_min)
    cutoff = config.cutoff_max - free_energy * (config.cutoff_max - config.cutoff_min)
    return PulseParams(tempo_bpm=tempo, brightness_hz=cutoff)


def midi_to_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69.0) / 12.0)


@dataclass(frozen=True)
class ScanChannel:
    mode_index: int  # 5..9
    scan_freq_hz: float
    pan: float


def scan_channels(effective: NoteCluster) -> tuple[ScanChannel, ...]:
    """Five scan channels from the first five cluster notes (cycled when the
    cluster is smaller), panned hard left (mode 5) to hard right (mode 9)."""
    notes = effective.semitones
    if not notes:
        raise ValueError("effective cluster has no notes")
    return tuple(
        ScanChannel(mode_index=5 + i,
                    scan_freq_hz=midi_to_hz(notes[i % len(notes)]),
                    pan=SCAN_PANS[i])
        for i in range(5)
    )
