"""Audio container, peak normalization, and the STFT -> log-mel front-end.

All samples are double precision internally; WAV I/O converts at the
boundary. Everything here is a pure function over immutable inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSignal, EmptySignal, InvalidRange

DEFAULT_SAMPLE_RATE = 16000
WINDOW_LEN = 2048
FFT_LEN = 2048
HOP = 256
N_MELS = 256
LOG_FLOOR = 1e-5  # added inside the log; bounds log-mel at ~-11.5 on silence
F_MIN = 20.0


def _as_samples(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a mono 1-D sample buffer, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("samples must be finite (no NaN/Inf)")
    return arr


@dataclass(frozen=True)
class AudioClip:
    """Mono sample buffer with its sample rate. Immutable."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        arr = _as_samples(self.samples)
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-compressed mel magnitudes, [n_mels x n_frames]."""

    values: np.ndarray
    n_mels: int
    hop: int
    sample_rate: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] != self.n_mels:
            raise ValueError(f"values must be [n_mels x n_frames], got {vals.shape}")
        if vals.size and not np.all(np.isfinite(vals)):
            raise ValueError("mel values must be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def duration(self) -> float:
        # frame t is centered on sample t*hop
        return self.n_frames * self.hop / self.sample_rate


def normalize_dbfs(clip: AudioClip, target_dbfs: float = -12.0) -> AudioClip:
    """Peak-normalize to `target_dbfs`, as the two-step divide-then-scale."""
    peak = np.max(np.abs(clip.samples)) if len(clip) else 0.0
    if peak == 0.0:
        raise DegenerateSignal("all-zero buffer cannot be peak-normalized")
    x = clip.samples / peak
    x = x * (10.0 ** (target_dbfs / 20.0))
    return AudioClip(x, clip.sample_rate)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames_for(n_samples: int, hop: int = HOP) -> int:
    return 1 + n_samples // hop


def stft(
    clip: AudioClip,
    window_len: int = WINDOW_LEN,
    fft_len: int = FFT_LEN,
    hop: int = HOP,
) -> np.ndarray:
    """Hann-windowed, center-padded (constant 0) STFT.

    Returns a complex matrix [fft_len//2 + 1 x n_frames] with
    n_frames = 1 + floor(len(x)/hop); frame t is centered on sample t*hop.
    """
    if len(clip) == 0:
        raise EmptySignal("cannot take the STFT of an empty signal")
    if window_len > fft_len:
        raise ValueError(f"window_len {window_len} must be <= fft_len {fft_len}")
    x = clip.samples
    half = window_len // 2
    padded = np.pad(x, (half, half), mode="constant")
    frames = np.lib.stride_tricks.sliding_window_view(padded, window_len)[::hop]
    frames = frames[: n_frames_for(len(clip), hop)]
    windowed = frames * hann_window(window_len)
    spec = np.fft.rfft(windowed, n=fft_len, axis=1)
    return spec.T.copy()


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    f_min: float = F_MIN,
    f_max: float | None = None,
    fft_len: int = FFT_LEN,
) -> np.ndarray:
    """Triangular mel filters, [n_mels x fft_len//2 + 1].

    Unit-peak triangles on the mel scale (no area normalization). A filter
    narrower than the FFT bin spacing would come out all-zero; such rows get
    weight 1 at the bin nearest their center frequency instead.
    """
    if f_max is None:
        f_max = sample_rate / 2.0
    if not (0.0 <= f_min < f_max <= sample_rate / 2.0):
        raise InvalidRange(f"need 0 <= f_min < f_max <= nyquist, got [{f_min}, {f_max}]")
    n_bins = fft_len // 2 + 1
    bin_hz = np.arange(n_bins) * (sample_rate / fft_len)
    edges_hz = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, center, hi = edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]
        rise = (bin_hz - lo) / (center - lo)
        fall = (hi - bin_hz) / (hi - center)
        fb[i] = np.maximum(0.0, np.minimum(rise, fall))
        if not fb[i].any():
            fb[i, np.argmin(np.abs(bin_hz - center))] = 1.0
    return fb


def mel_center_frequencies(
    n_mels: int = N_MELS,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    f_min: float = F_MIN,
    f_max: float | None = None,
) -> np.ndarray:
    if f_max is None:
        f_max = sample_rate / 2.0
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2))
    return edges[1:-1]


def standardize_log_mel(values: np.ndarray) -> np.ndarray:
    """Affine model-input conditioning: silence -> 0, loud content -> O(1)."""
    return (values - np.log(LOG_FLOOR)) / 10.0


def log_mel(
    clip: AudioClip,
    n_mels: int = N_MELS,
    window_len: int = WINDOW_LEN,
    fft_len: int = FFT_LEN,
    hop: int = HOP,
    f_min: float = F_MIN,
    f_max: float | None = None,
    filterbank: np.ndarray | None = None,
) -> MelSpectrogram:
    """log(filterbank . |STFT| + eps), natural log, shape [n_mels x n_frames].

    Pass a precomputed `filterbank` to amortize construction across clips.
    """
    mag = np.abs(stft(clip, window_len=window_len, fft_len=fft_len, hop=hop))
    if filterbank is None:
        filterbank = mel_filterbank(n_mels, clip.sample_rate, f_min, f_max, fft_len)
    values = np.log(filterbank @ mag + LOG_FLOOR)
    return MelSpectrogram(values, n_mels=n_mels, hop=hop, sample_rate=clip.sample_rate)


# --------------------------------------------------------------------------
# WAV I/O (PCM 16-bit and IEEE float 32-bit, mono only)
# --------------------------------------------------------------------------

_FMT_PCM = 1
_FMT_FLOAT = 3


def read_wav(path) -> AudioClip:
    """Read a mono PCM16 or float32 WAV file."""
    with open(path, "rb") as fh:
        riff = fh.read(12)
        if len(riff) < 12 or riff[:4] != b"RIFF" or riff[8:12] != b"WAVE":
            raise ValueError(f"{path}: not a RIFF/WAVE file")
        fmt = None
        data = None
        while True:
            head = fh.read(8)
            if len(head) < 8:
                break
            tag, size = head[:4], struct.unpack("<I", head[4:])[0]
            body = fh.read(size)
            if size % 2:
                fh.read(1)  # chunk padding byte
            if tag == b"fmt ":
                fmt = struct.unpack("<HHIIHH", body[:16])
            elif tag == b"data":
                data = body
        if fmt is None or data is None:
            raise ValueError(f"{path}: missing fmt or data chunk")
        audio_format, channels, sample_rate, _, _, bits = fmt
        if channels != 1:
            raise ValueError(f"{path}: only mono WAV is supported, got {channels} channels")
        if audio_format == _FMT_PCM and bits == 16:
            samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
        elif audio_format == _FMT_FLOAT and bits == 32:
            samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
        else:
            raise ValueError(
                f"{path}: unsupported WAV encoding (format={audio_format}, bits={bits}); "
                "only PCM16 and IEEE float32 are handled"
            )
        return AudioClip(samples, sample_rate)


def write_wav(path, clip: AudioClip, encoding: str = "pcm16") -> None:
    """Write a mono WAV file; encoding is 'pcm16' or 'float32'."""
    if encoding == "pcm16":
        fmt_tag, bits = _FMT_PCM, 16
        scaled = np.clip(np.round(clip.samples * 32768.0), -32768, 32767)
        payload = scaled.astype("<i2").tobytes()
    elif encoding == "float32":
        fmt_tag, bits = _FMT_FLOAT, 32
        payload = clip.samples.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    byte_rate = clip.sample_rate * bits // 8
    block_align = bits // 8
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + len(payload)))
        fh.write(b"WAVEfmt ")
        fh.write(struct.pack("<IHHIIHH", 16, fmt_tag, 1, clip.sample_rate, byte_rate, block_align, bits))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
