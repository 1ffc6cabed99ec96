import numpy as np
import pytest

from mdsonify.mapping import PulseParams, midi_to_hz
from mdsonify.sonparams import DynamicFrame, StaticParams
from mdsonify.synth import (AudioBuffer, RenderConfig, pad_voice, pulse_layer,
                            read_wav, render, scan_layer, write_wav)

SR = 44100


def make_static():
    return StaticParams(lb=np.array([0.0, 0.25, 0.5, 0.75]),
                        ub=np.array([0.2, 0.45, 0.7, 0.95]),
                        area=np.array([100.0, 100.0, 100.0, 100.0]),
                        bins=32, assignment=np.zeros(8, dtype=int),
                        histograms=np.zeros((4, 32)))


def make_frames(n, state=0, entropy=0.0, free_energy=0.5, proj_fn=None):
    frames = []
    for i in range(n):
        m = np.zeros(4)
        m[state] = 1.0
        proj = proj_fn(i) if proj_fn else np.zeros(5)
        frames.append(DynamicFrame(memberships=m, entropy=entropy,
                                   free_energy=free_energy, projections=proj,
                                   t_ps=float(i)))
    return frames


def dominant_bin_hz(mono, sr):
    spec = np.abs(np.fft.rfft(mono * np.hanning(mono.size)))
    return np.fft.rfftfreq(mono.size, 1.0 / sr)[np.argmax(spec)]


class TestRenderShape:
    def test_one_second_of_frames(self):
        buf = render(make_frames(20), make_static())
        assert len(buf) == SR
        assert buf.samples.shape == (SR, 2)
        assert buf.samples.dtype == np.float32
        assert buf.sample_rate_hz == SR

    def test_deterministic_bit_identical(self):
        a = render(make_frames(20, entropy=1.0), make_static())
        b = render(make_frames(20, entropy=1.0), make_static())
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_seed_changes_noise(self):
        frames = make_frames(20, entropy=1.0)
        a = render(frames, make_static(), RenderConfig(seed=0))
        b = render(frames, make_static(), RenderConfig(seed=1))
        assert np.any(a.samples != b.samples)

    def test_empty_frames_rejected(self):
        with pytest.raises(ValueError):
            render([], make_static())

    def test_rate_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            RenderConfig(sample_rate_hz=44100, fps=13)


class TestPadVoice:
    def test_zero_entropy_tone_dominance(self):
        y = pad_voice(220.0, 0.0, 2 * SR)
        y = y[SR:]  # skip filter/amp transient
        spec = np.abs(np.fft.rfft(y * np.hanning(y.size)))
        freqs = np.fft.rfftfreq(y.size, 1.0 / SR)
        near = np.abs(freqs - 220.0) < 10.0
        peak = spec[near].max()
        floor = spec[~near].max()
        assert 20 * np.log10(peak / floor) >= 40.0

    def test_entropy_widens_spectrum(self):
        clean = pad_voice(220.0, 0.0, SR)[SR // 2:]
        noisy = pad_voice(220.0, np.log(4.0), SR)[SR // 2:]

        def offband_fraction(y):
            spec = np.abs(np.fft.rfft(y)) ** 2
            freqs = np.fft.rfftfreq(y.size, 1.0 / SR)
            near = np.abs(freqs - 220.0) < 20.0
            return spec[~near].sum() / spec.sum()

        assert offband_fraction(noisy) > 10 * offband_fraction(clean)


class TestScanLayer:
    def test_silent_table_silent_output(self):
        proj = np.zeros((40, 5))
        freqs = np.full((40, 5), 300.0)
        out = scan_layer(proj, freqs)
        np.testing.assert_array_equal(out, 0.0)

    def test_sine_table_produces_tone(self):
        cfg = RenderConfig()
        W = cfg.scan_window
        n = 120
        proj = np.zeros((n, 5))
        proj[:, 2] = np.sin(2.0 * np.pi * np.arange(n) / W)
        freqs = np.full((n, 5), 300.0)
        out = scan_layer(proj, freqs, cfg)
        tail = out[-2 * SR:, 0]
        # tolerate spectral spread from the per-frame table shift
        assert abs(dominant_bin_hz(tail, SR) - 300.0) < cfg.fps
        # center pan: both channels equal
        np.testing.assert_allclose(out[:, 0], out[:, 1], atol=1e-12)

    def test_first_mode_hard_left(self):
        n = 80
        proj = np.zeros((n, 5))
        proj[:, 0] = np.sin(2.0 * np.pi * np.arange(n) / 64)
        freqs = np.full((n, 5), 200.0)
        out = scan_layer(proj, freqs)
        assert np.max(np.abs(out[:, 0])) > 0.01
        np.testing.assert_allclose(out[:, 1], 0.0, atol=1e-12)

    def test_last_mode_hard_right(self):
        n = 80
        proj = np.zeros((n, 5))
        proj[:, 4] = np.sin(2.0 * np.pi * np.arange(n) / 64)
        out = scan_layer(proj, np.full((n, 5), 200.0))
        np.testing.assert_allclose(out[:, 0], 0.0, atol=1e-12)
        assert np.max(np.abs(out[:, 1])) > 0.01


class TestPulseLayer:
    def test_onset_spacing_at_120_bpm(self):
        stream = [PulseParams(tempo_bpm=120.0, brightness_hz=8000.0)] * 80
        y = pulse_layer(stream)
        period = SR // 2  # 120 BPM -> one kick every 22050 samples
        for k in range(1, 7):
            onset = k * period
            after = np.sqrt(np.mean(y[onset:onset + 500] ** 2))
            before = np.sqrt(np.mean(y[onset - 600:onset - 100] ** 2))
            assert after > 20 * before

    def test_brightness_boosts_onset_click(self):
        bright = pulse_layer([PulseParams(120.0, 8000.0)] * 40)
        dark = pulse_layer([PulseParams(120.0, 500.0)] * 40)

        def hf_fraction(y, cut_hz=1000.0):
            spec = np.abs(np.fft.rfft(y)) ** 2
            freqs = np.fft.rfftfreq(y.size, 1.0 / SR)
            return spec[freqs > cut_hz].sum() / spec.sum()

        assert hf_fraction(bright) > 10 * hf_fraction(dark)

    def test_tempo_changes_spacing(self):
        slow = pulse_layer([PulseParams(60.0, 8000.0)] * 60)
        onset_energy = np.abs(slow) > 0.2
        # at 60 BPM onsets are one second apart; the envelope (80 ms decay)
        # is long gone half a second after the onset at t = 1 s
        assert not onset_energy[SR + SR // 2:2 * SR - 5000].any()


class TestMixAndLimit:
    def test_layer_superposition_below_knee(self):
        frames = make_frames(20, entropy=0.5, proj_fn=lambda i: np.full(5, 0.3))
        static = make_static()
        g = dict(pad_gain=0.1, pulse_gain=0.1, scan_gain=0.1)
        full = render(frames, static, RenderConfig(**g)).samples.astype(np.float64)
        pad = render(frames, static, RenderConfig(pad_gain=0.1, pulse_gain=0.0,
                                                  scan_gain=0.0)).samples
        pls = render(frames, static, RenderConfig(pad_gain=0.0, pulse_gain=0.1,
                                                  scan_gain=0.0)).samples
        scn = render(frames, static, RenderConfig(pad_gain=0.0, pulse_gain=0.0,
                                                  scan_gain=0.1)).samples
        total = pad.astype(np.float64) + pls + scn
        assert np.max(np.abs(full)) < 0.9  # below the limiter knee
        np.testing.assert_allclose(full, total, atol=2e-6)

    def test_limiter_peak_below_one(self):
        frames = make_frames(20, entropy=1.0, free_energy=0.0)
        buf = render(frames, make_static(),
                     RenderConfig(pad_gain=3.0, pulse_gain=3.0, scan_gain=3.0))
        assert np.max(np.abs(buf.samples)) <= 1.0

    def test_limiter_identity_below_knee(self):
        frames = make_frames(10)
        lo = render(frames, make_static(),
                    RenderConfig(pad_gain=0.05, pulse_gain=0.05, scan_gain=0.0))
        assert np.max(np.abs(lo.samples)) < 0.9


class TestWav:
    def test_file_size_arithmetic(self, tmp_path):
        buf = AudioBuffer(samples=np.zeros((SR, 2), dtype=np.float32),
                          sample_rate_hz=SR)
        path = tmp_path / "a.wav"
        write_wav(buf, path)
        # RIFF header 12 + fmt chunk 26 + fact chunk 12 + data header 8 + payload
        assert path.stat().st_size == 12 + 26 + 12 + 8 + SR * 2 * 4

    def test_roundtrip_bit_exact(self, tmp_path):
        buf = render(make_frames(20, entropy=0.8), make_static())
        path = tmp_path / "b.wav"
        write_wav(buf, path)
        back = read_wav(path)
        np.testing.assert_array_equal(back.samples, buf.samples)
        assert back.sample_rate_hz == SR

    def test_empty_buffer(self, tmp_path):
        buf = AudioBuffer(samples=np.zeros((0, 2), dtype=np.float32),
                          sample_rate_hz=SR)
        path = tmp_path / "c.wav"
        write_wav(buf, path)
        assert len(read_wav(path)) == 0

    def test_reject_non_wav(self, tmp_path):
        path = tmp_path / "d.wav"
        path.write_bytes(b"not a wave file at all")
        with pytest.raises(ValueError, match="RIFF"):
            read_wav(path)

    def test_buffer_validation(self):
        with pytest.raises(ValueError, match="finite"):
            AudioBuffer(samples=np.full((4, 2), np.nan), sample_rate_hz=SR)
        with pytest.raises(ValueError):
            AudioBuffer(samples=np.zeros(16), sample_rate_hz=SR)
