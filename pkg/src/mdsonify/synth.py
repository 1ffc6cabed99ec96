"""Offline audio renderer: pad, pulse and scanned-synthesis layers.

Parameter frames arrive at ``fps`` (default 20) and every control value is
ramped linearly per sample across each frame interval. The pad layer runs
one FM voice per cluster note (entropy drives modulation depth/rate, filter
bandwidth and noise mix), the pulse layer is a free-energy-driven kick
train, and the scan layer treats a rolling window of each fast-mode
projection as a single-cycle wavetable read at the cluster note frequency.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from mdsonify.mapping import (MappingConfig, NoteCluster, SCAN_PANS,
                              build_clusters, interpolate, midi_to_hz, pulse,
                              smooth_entropy)
from mdsonify.sonparams import StaticParams

LN4 = float(np.log(4.0))


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    sample_rate_hz: int = 44100
    fps: int = 20
    seed: int = 0
    scan_window: int = 64  # parameter frames per wavetable
    pad_gain: float = 0.25
    pulse_gain: float = 0.5
    scan_gain: float = 0.25
    mapping: MappingConfig = field(default_factory=MappingConfig)
    # pad voice constants (documented defaults; the mapping shape is fixed,
    # the absolute values are configurable)
    fm_depth_max: float = 0.05  # fractional FM depth at max entropy
    fm_rate_min_hz: float = 0.5
    fm_rate_max_hz: float = 12.0
    noise_mix_max: float = 0.5
    filter_q_max: float = 20.0  # at zero entropy
    filter_q_min: float = 0.7  # at max entropy
    kick_freq_hz: float = 70.0
    kick_decay_s: float = 0.08
    limiter_knee: float = 0.9

    def __post_init__(self):
        if self.sample_rate_hz % self.fps != 0:
            raise ValueError("sample_rate_hz must be divisible by fps")
        if self.scan_window < 2:
            raise ValueError("scan_window must be >= 2")
        if self.mapping.voice_cap < 1:
            raise ValueError("voice_cap must be >= 1")

    @property
    def samples_per_frame(self) -> int:
        return self.sample_rate_hz // self.fps


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray  # (n, 2) float32
    sample_rate_hz: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim != 2 or s.shape[1] != 2:
            raise ValueError("samples must be (n, 2)")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.shape[0]


def _ramp(prev: float, cur: float, n: int) -> np.ndarray:
    """Per-sample linear ramp ending exactly at ``cur`` after n samples."""
    return prev + (cur - prev) * (np.arange(1, n + 1) / n)


def _bandpass_coeffs(freq_hz: float, q: float, sr: int):
    """RBJ constant 0 dB peak gain band-pass biquad."""
    f = min(max(freq_hz, 20.0), 0.45 * sr)
    w0 = 2.0 * np.pi * f / sr
    alpha = np.sin(w0) / (2.0 * q)
    b = np.array([alpha, 0.0, -alpha])
    a = np.array([1.0 + alpha, -2.0 * np.cos(w0), 1.0 - alpha])
    return b / a[0], a / a[0]


class _PadVoice:
    """One FM voice with carried oscillator phase and filter state."""

    def __init__(self, sr: int):
        self.sr = sr
        self.phase = 0.0
        self.mod_phase = 0.0
        self.zi = np.zeros(2)
        self.freq = 0.0
        self.amp = 0.0

    def render(self, freq: float, amp: float, depth: float, rate: float,
               noise_mix: float, q: float, noise: np.ndarray) -> np.ndarray:
        n = noise.size
        if self.freq == 0.0:
            self.freq = freq
        freq_t = _ramp(self.freq, freq, n)
        amp_t = _ramp(self.amp, amp, n)
        rate_t = np.full(n, rate)
        mod_phase = self.mod_phase + 2.0 * np.pi * np.cumsum(rate_t) / self.sr
        inst = freq_t * (1.0 + depth * np.sin(mod_phase))
        phase = self.phase + 2.0 * np.pi * np.cumsum(inst) / self.sr
        tone = np.sin(phase)
        x = (1.0 - noise_mix) * tone + noise_mix * noise
        b, a = _bandpass_coeffs(freq, q, self.sr)
        y, self.zi = signal.lfilter(b, a, x, zi=self.zi)
        self.phase = phase[-1] % (2.0 * np.pi)
        self.mod_phase = mod_phase[-1] % (2.0 * np.pi)
        self.freq = freq
        self.amp = amp
        return y * amp_t


def pad_voice(note_freq_hz: float, smoothed_entropy: float, n_samples: int,
              cfg: RenderConfig = RenderConfig(), seed: int = 0) -> np.ndarray:
    """Render one pad voice with constant controls (mono)."""
    h = min(max(smoothed_entropy, 0.0), LN4) / LN4
    voice = _PadVoice(cfg.sample_rate_hz)
    voice.freq = note_freq_hz
    voice.amp = 1.0
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-1.0, 1.0, n_samples)
    return voice.render(
        freq=note_freq_hz, amp=1.0,
        depth=cfg.fm_depth_max * h,
        rate=cfg.fm_rate_min_hz + h * (cfg.fm_rate_max_hz - cfg.fm_rate_min_hz),
        noise_mix=cfg.noise_mix_max * h,
        q=cfg.filter_q_max + h * (cfg.filter_q_min - cfg.filter_q_max),
        noise=noise,
    )


def _pad_layer(clusters_per_frame, entropy_per_frame, cfg: RenderConfig,
               rng: np.random.Generator) -> np.ndarray:
    sr, spf = cfg.sample_rate_hz, cfg.samples_per_frame
    cap = cfg.mapping.voice_cap
    voices = [_PadVoice(sr) for _ in range(cap)]
    out = np.empty(len(clusters_per_frame) * spf)
    for i, (cluster, h_raw) in enumerate(zip(clusters_per_frame, entropy_per_frame)):
        h = min(max(h_raw, 0.0), LN4) / LN4
        depth = cfg.fm_depth_max * h
        rate = cfg.fm_rate_min_hz + h * (cfg.fm_rate_max_hz - cfg.fm_rate_min_hz)
        mix = cfg.noise_mix_max * h
        q = cfg.filter_q_max + h * (cfg.filter_q_min - cfg.filter_q_max)
        notes = cluster.notes[:cap]
        block = np.zeros(spf)
        for v, voice in enumerate(voices):
            if v < len(notes):
                freq, amp = midi_to_hz(notes[v]), 1.0 / cap
            else:
                freq, amp = voice.freq, 0.0
                if freq == 0.0:
                    continue
            noise = rng.uniform(-1.0, 1.0, spf) if mix > 0.0 else np.zeros(spf)
            block += voice.render(freq, amp, depth, rate, mix, q, noise)
        out[i * spf:(i + 1) * spf] = block
    return out


def pulse_layer(pulse_stream, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Kick train (mono): onsets at the running tempo, each event an
    exponentially decaying sine low-passed at the brightness cutoff."""
    sr, spf = cfg.sample_rate_hz, cfg.samples_per_frame
    pulse_stream = list(pulse_stream)
    out = np.empty(len(pulse_stream) * spf)
    beat_phase = 0.0
    last_onset = 0  # global sample index of the most recent onset
    prev_tempo = pulse_stream[0].tempo_bpm
    zi = signal.lfilter_zi(*_lowpass_coeffs(pulse_stream[0].brightness_hz, sr)) * 0.0
    for i, p in enumerate(pulse_stream):
        tempo_t = _ramp(prev_tempo, p.tempo_bpm, spf)
        prev_tempo = p.tempo_bpm
        ph = beat_phase + np.cumsum(tempo_t / 60.0 / sr)
        ticks = np.floor(ph)
        onsets = np.flatnonzero(np.diff(np.concatenate(([np.floor(beat_phase)], ticks))) > 0)
        beat_phase = ph[-1]
        base = i * spf
        idx = np.arange(base, base + spf)
        last = np.full(spf, last_onset)
        for o in onsets:
            last[o:] = base + o
        if onsets.size:
            last_onset = base + int(onsets[-1])
        t_since = (idx - last) / sr
        env = np.exp(-t_since / cfg.kick_decay_s)
        raw = env * np.sin(2.0 * np.pi * cfg.kick_freq_hz * t_since)
        b, a = _lowpass_coeffs(p.brightness_hz, sr)
        out[base:base + spf], zi = signal.lfilter(b, a, raw, zi=zi)
    return out


def _lowpass_coeffs(cutoff_hz: float, sr: int):
    c = min(max(cutoff_hz, 20.0), 0.45 * sr)
    return signal.butter(2, c / (sr / 2.0), btype="low")


def scan_layer(projection_frames: np.ndarray, scan_freqs: np.ndarray,
               cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Scanned synthesis (stereo): per mode, the last ``scan_window``
    projection values form a single-cycle wavetable read at the channel's
    scan frequency; amplitude follows the window RMS, output equal-power
    panned hard left (mode 5) to hard right (mode 9)."""
    projection_frames = np.asarray(projection_frames, dtype=float)
    scan_freqs = np.asarray(scan_freqs, dtype=float)
    n_frames, n_modes = projection_frames.shape
    sr, spf, W = cfg.sample_rate_hz, cfg.samples_per_frame, cfg.scan_window
    out = np.zeros((n_frames * spf, 2))
    pan_l = np.cos((np.array(SCAN_PANS) + 1.0) * np.pi / 4.0)
    pan_r = np.sin((np.array(SCAN_PANS) + 1.0) * np.pi / 4.0)
    for j in range(n_modes):
        table = np.zeros(W)
        pos = 0.0
        prev_amp = 0.0
        prev_freq = scan_freqs[0, j]
        mono = np.empty(n_frames * spf)
        for i in range(n_frames):
            table = np.roll(table, -1)
            table[-1] = projection_frames[i, j]
            amp = float(np.sqrt(np.mean(table ** 2)))
            freq_t = _ramp(prev_freq, scan_freqs[i, j], spf)
            amp_t = _ramp(prev_amp, amp, spf)
            prev_freq, prev_amp = scan_freqs[i, j], amp
            p = pos + np.cumsum(freq_t * W / sr)
            pos = p[-1] % W
            pw = p % W
            i0 = pw.astype(np.int64)
            frac = pw - i0
            i1 = (i0 + 1) % W
            mono[i * spf:(i + 1) * spf] = (
                (1.0 - frac) * table[i0] + frac * table[i1]
            ) * amp_t
        out[:, 0] += mono * pan_l[j]
        out[:, 1] += mono * pan_r[j]
    return out


def _soft_limit(x: np.ndarray, knee: float) -> np.ndarray:
    """tanh limiter above the knee, exact identity below; peak <= 1."""
    y = x.copy()
    over = np.abs(x) > knee
    if np.any(over):
        mag = np.abs(x[over])
        y[over] = np.sign(x[over]) * (knee + (1.0 - knee) * np.tanh(
            (mag - knee) / (1.0 - knee)))
    return y


def _check_layer(name: str, x: np.ndarray, spf: int) -> None:
    bad = ~np.isfinite(x)
    if np.any(bad):
        frame = int(np.argmax(bad.any(axis=tuple(range(1, x.ndim))) if x.ndim > 1
                              else bad)) // spf
        raise RenderError(f"non-finite sample in {name} layer at frame {frame}")


def render(frames, static: StaticParams, cfg: RenderConfig = RenderConfig(),
           clusters: list[NoteCluster] | None = None) -> AudioBuffer:
    """Render DynamicFrames to a stereo buffer; deterministic given inputs."""
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    if clusters is None:
        clusters = build_clusters(static, cfg.mapping)
    rng = np.random.default_rng(cfg.seed)
    spf = cfg.samples_per_frame
    dt_s = 1.0 / cfg.fps

    effective = [interpolate(clusters, f.memberships) for f in frames]
    smoothed = []
    h = 0.0
    for f in frames:
        h = smooth_entropy(h, f.entropy, dt_s, cfg.mapping.decay_tau_s)
        smoothed.append(h)
    pulses = [pulse(f.free_energy, cfg.mapping) for f in frames]
    projections = np.array([f.projections for f in frames])
    scan_freqs = np.array([
        [midi_to_hz(c.semitones[i % len(c.semitones)]) for i in range(5)]
        for c in effective
    ])

    pad = _pad_layer(effective, smoothed, cfg, rng) if cfg.pad_gain else np.zeros(len(frames) * spf)
    _check_layer("pad", pad, spf)
    pls = pulse_layer(pulses, cfg) if cfg.pulse_gain else np.zeros(len(frames) * spf)
    _check_layer("pulse", pls, spf)
    scn = scan_layer(projections, scan_freqs, cfg) if cfg.scan_gain else np.zeros((len(frames) * spf, 2))
    _check_layer("scan", scn, spf)

    mix = np.empty((len(frames) * spf, 2))
    mono = cfg.pad_gain * pad + cfg.pulse_gain * pls
    mix[:, 0] = mono + cfg.scan_gain * scn[:, 0]
    mix[:, 1] = mono + cfg.scan_gain * scn[:, 1]
    return AudioBuffer(samples=_soft_limit(mix, cfg.limiter_knee).astype(np.float32),
                       sample_rate_hz=cfg.sample_rate_hz)


# ---------------------------------------------------------------------------
# WAV I/O (RIFF, IEEE-float 32-bit stereo)

def write_wav(buffer: AudioBuffer, path) -> None:
    data = np.ascontiguousarray(buffer.samples, dtype="<f4").tobytes()
    sr = buffer.sample_rate_hz
    n_channels, bits = 2, 32
    byte_rate = sr * n_channels * bits // 8
    block_align = n_channels * bits // 8
    fmt = struct.pack("<HHIIHHH", 3, n_channels, sr, byte_rate, block_align, bits, 0)
    fact = struct.pack("<I", len(buffer))
    chunks = (b"WAVE"
              + b"fmt " + struct.pack("<I", len(fmt)) + fmt
              + b"fact" + struct.pack("<I", len(fact)) + fact
              + b"data" + struct.pack("<I", len(data)) + data)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(chunks)) + chunks)


def read_wav(path) -> AudioBuffer:
    raw = Path(path).read_bytes()
    if raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")
    off = 12
    fmt = data = None
    while off + 8 <= len(raw):
        cid = raw[off:off + 4]
        (size,) = struct.unpack_from("<I", raw, off + 4)
        body = raw[off + 8:off + 8 + size]
        if cid == b"fmt ":
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        off += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise ValueError(f"{path}: missing fmt or data chunk")
    tag, channels, sr, _, _, bits = fmt
    if tag != 3 or bits != 32:
        raise ValueError(f"{path}: expected IEEE-float 32-bit, got tag={tag} bits={bits}")
    samples = np.frombuffer(data, dtype="<f4").reshape(-1, channels)
    return AudioBuffer(samples=samples.copy(), sample_rate_hz=sr)
