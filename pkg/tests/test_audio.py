"""Tests for the audio container, normalization, and STFT/log-mel front-end."""

import numpy as np
import pytest

from ampscribe.audio import (
    AudioClip,
    MelSpectrogram,
    hann_window,
    log_mel,
    mel_center_frequencies,
    mel_filterbank,
    normalize_dbfs,
    read_wav,
    stft,
    write_wav,
    LOG_FLOOR,
)
from ampscribe.errors import DegenerateSignal, EmptySignal, InvalidRange

TARGET_PEAK = 10.0 ** (-12.0 / 20.0)


# ---------------------------------------------------------------------------
# AudioClip
# ---------------------------------------------------------------------------


class TestAudioClip:
    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="finite"):
            AudioClip(np.array([0.0, np.nan]), 16000)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError, match="positive"):
            AudioClip(np.zeros(4), 0)

    def test_rejects_stereo(self):
        with pytest.raises(ValueError, match="mono"):
            AudioClip(np.zeros((2, 8)), 16000)

    def test_immutable(self):
        clip = AudioClip(np.zeros(4), 16000)
        with pytest.raises(ValueError):
            clip.samples[0] = 1.0

    def test_duration(self):
        assert AudioClip(np.zeros(8000), 16000).duration == 0.5


# ---------------------------------------------------------------------------
# normalize_dbfs
# ---------------------------------------------------------------------------


class TestNormalizeDbfs:
    def test_all_zero_raises(self):
        with pytest.raises(DegenerateSignal):
            normalize_dbfs(AudioClip(np.zeros(100), 16000), -12.0)

    def test_known_values(self):
        # frozen from a 50-digit mpmath evaluation of (x/0.5) * 10**(-0.6)
        clip = normalize_dbfs(AudioClip(np.array([0.5, -0.25, 0.1]), 16000), -12.0)
        expected = np.array(
            [0.25118864315095801, -0.12559432157547901, 0.05023772863019160]
        )
        np.testing.assert_allclose(clip.samples, expected, rtol=0, atol=1e-15)

    def test_already_at_target_unchanged(self):
        x = np.array([TARGET_PEAK, -TARGET_PEAK / 2, TARGET_PEAK / 4])
        out = normalize_dbfs(AudioClip(x, 16000), -12.0)
        np.testing.assert_allclose(out.samples, x, atol=1e-12)

    def test_peak_exact_on_random_buffers(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            x = rng.standard_normal(rng.integers(3, 400)) * rng.uniform(1e-4, 10)
            out = normalize_dbfs(AudioClip(x, 16000), -12.0)
            assert abs(np.max(np.abs(out.samples)) - TARGET_PEAK) <= 1e-12

    def test_idempotent(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = rng.standard_normal(256)
            once = normalize_dbfs(AudioClip(x, 16000), -12.0)
            twice = normalize_dbfs(once, -12.0)
            np.testing.assert_allclose(twice.samples, once.samples, atol=1e-12)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


class TestStft:
    def test_empty_signal(self):
        with pytest.raises(EmptySignal):
            stft(AudioClip(np.zeros(0), 16000))

    def test_zero_signal_frame_count(self):
        spec = stft(AudioClip(np.zeros(25600), 16000))
        assert spec.shape == (1025, 101)
        assert np.max(np.abs(spec)) == 0.0

    def test_frame_count_formula(self):
        for n in (25600, 1, 255, 256, 257, 40000):
            spec = stft(AudioClip(np.ones(n), 16000))
            assert spec.shape[1] == 1 + n // 256

    def test_bin_centered_sine_peak(self):
        sr = 16000
        k = 64  # bin index at fft_len 2048 -> 500 Hz
        f = k * sr / 2048
        t = np.arange(sr) / sr
        spec = stft(AudioClip(np.sin(2 * np.pi * f * t), sr))
        mag = np.abs(spec[:, 30])  # interior frame, no edge padding
        assert np.argmax(mag) == k
        peak_db = 20 * np.log10(mag[k])
        # Hann leakage is confined to +-1 bin; everything else sits >=20 dB down
        others = np.delete(mag, [k - 1, k, k + 1])
        assert peak_db - 20 * np.log10(np.max(others) + 1e-300) >= 20.0

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(4096)
        a = 3.7
        s1 = stft(AudioClip(a * x, 16000))
        s0 = stft(AudioClip(x, 16000))
        np.testing.assert_allclose(s1, a * s0, rtol=1e-9)

    def test_parseval_on_random_signals(self):
        rng = np.random.default_rng(5)
        win = hann_window(2048)
        for _ in range(5):
            x = rng.standard_normal(8192)
            spec = stft(AudioClip(x, 16000))
            padded = np.pad(x, (1024, 1024))
            for t in (4, 10, 20):
                frame = padded[t * 256 : t * 256 + 2048] * win
                time_energy = np.sum(frame**2)
                mag2 = np.abs(spec[:, t]) ** 2
                freq_energy = (2 * np.sum(mag2) - mag2[0] - mag2[-1]) / 2048
                assert abs(freq_energy - time_energy) <= 1e-6 * time_energy


# ---------------------------------------------------------------------------
# Mel filterbank
# ---------------------------------------------------------------------------


class TestMelFilterbank:
    def test_invalid_range(self):
        with pytest.raises(InvalidRange):
            mel_filterbank(8, 16000, f_min=4000, f_max=4000)

    def test_two_filter_hand_computed(self):
        # sr 8000, fft 16 -> bins at 0,500,...,4000 Hz; edges from the mel
        # formula: 0, 620.3, 1791.2, 4000 Hz (hand-derived breakpoints)
        fb = mel_filterbank(2, 8000, f_min=0.0, f_max=4000.0, fft_len=16)
        assert fb.shape == (2, 9)
        lo, c1, c2, hi = 0.0, 620.579788, 1791.329967, 4000.0
        np.testing.assert_allclose(fb[0, 1], (500 - lo) / (c1 - lo), atol=1e-5)
        np.testing.assert_allclose(fb[0, 2], (c2 - 1000) / (c2 - c1), atol=1e-5)
        np.testing.assert_allclose(fb[1, 2], (1000 - c1) / (c2 - c1), atol=1e-5)
        np.testing.assert_allclose(fb[1, 4], (hi - 2000) / (hi - c2), atol=1e-5)
        # overlapping support between adjacent triangles
        assert np.any((fb[0] > 0) & (fb[1] > 0))

    def test_nonnegative_and_nonzero_rows(self):
        fb = mel_filterbank(256, 16000)
        assert np.all(fb >= 0)
        assert np.all(fb.max(axis=1) > 0)

    def test_centers_strictly_increasing(self):
        centers = mel_center_frequencies(256, 16000)
        assert np.all(np.diff(centers) > 0)


# ---------------------------------------------------------------------------
# log_mel
# ---------------------------------------------------------------------------


class TestLogMel:
    def test_zero_signal_hits_floor(self):
        mel = log_mel(AudioClip(np.zeros(25600), 16000))
        assert mel.values.shape == (256, 101)
        np.testing.assert_allclose(mel.values, np.log(LOG_FLOOR), atol=1e-12)

    def test_shape_contract(self):
        rng = np.random.default_rng(0)
        mel = log_mel(AudioClip(rng.standard_normal(10000), 16000))
        assert mel.n_mels == 256
        assert mel.values.shape == (256, 1 + 10000 // 256)

    def test_scaling_monotone(self):
        rng = np.random.default_rng(1)
        clip = AudioClip(rng.standard_normal(8192) * 0.1, 16000)
        m1 = log_mel(clip).values
        m2 = log_mel(AudioClip(clip.samples * 2, 16000)).values
        diff = m2 - m1
        assert np.all(diff >= 0)
        assert np.all(diff <= np.log(2) + 1e-12)

    def test_sweep_follows_ascending_rows(self):
        sr = 16000
        t = np.arange(2 * sr) / sr
        f0, f1 = 100.0, 6000.0
        phase = 2 * np.pi * (f0 * t + (f1 - f0) * t**2 / 4.0)  # linear chirp
        mel = log_mel(AudioClip(np.sin(phase), sr)).values
        # average away frame-level jitter, skip edge-padded frames
        block = 10
        n_blocks = (mel.shape[1] - 8) // block
        rows = [
            np.argmax(mel[:, 4 + i * block : 4 + (i + 1) * block].mean(axis=1))
            for i in range(n_blocks)
        ]
        assert all(b >= a for a, b in zip(rows, rows[1:]))


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


class TestWavIO:
    def test_pcm16_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        clip = AudioClip(rng.uniform(-0.9, 0.9, 5000), 16000)
        path = tmp_path / "a.wav"
        write_wav(path, clip, "pcm16")
        back = read_wav(path)
        assert back.sample_rate == 16000
        np.testing.assert_allclose(back.samples, clip.samples, atol=1.0 / 32768)

    def test_float32_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        clip = AudioClip(rng.uniform(-1, 1, 3000), 22050)
        path = tmp_path / "b.wav"
        write_wav(path, clip, "float32")
        back = read_wav(path)
        assert back.sample_rate == 22050
        np.testing.assert_allclose(back.samples, clip.samples, atol=1e-7)

    def test_rejects_stereo_file(self, tmp_path):
        import struct

        payload = np.zeros(64, dtype="<i2").tobytes()
        path = tmp_path / "stereo.wav"
        with open(path, "wb") as fh:
            fh.write(b"RIFF")
            fh.write(struct.pack("<I", 36 + len(payload)))
            fh.write(b"WAVEfmt ")
            fh.write(struct.pack("<IHHIIHH", 16, 1, 2, 16000, 64000, 4, 16))
            fh.write(b"data")
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
        with pytest.raises(ValueError, match="mono"):
            read_wav(path)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "c.wav"
        path.write_bytes(b"not a wave file at all")
        with pytest.raises(ValueError, match="RIFF"):
            read_wav(path)
