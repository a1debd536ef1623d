"""Parametric synthetic amplifier chain: gain stage -> waveshaper -> tone
stack -> cabinet IR, plus the seeded preset bank with its gain taxonomy.

The chain is a surrogate for proprietary amp plugins: smooth, odd,
parameter-monotone distortion with a 16x16 head/cabinet grid whose drive
allocation reproduces the 96/64/96 low/crunch/high split.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, fftconvolve, lfilter

from .audio import AudioClip
from .errors import EmptySignal

CAB_IR_LEN = 2048
CAB_LOWPASS_MAX_HZ = 6000.0

# drive thresholds for the gain taxonomy
LOW_GAIN_MAX = 0.3
CRUNCH_MAX = 0.6


class GainCategory(enum.Enum):
    LOW_GAIN = "low_gain"
    CRUNCH = "crunch"
    HIGH_GAIN = "high_gain"


@dataclass(frozen=True)
class ToneSettings:
    bass_db: float = 0.0
    mid_db: float = 0.0
    treble_db: float = 0.0

    def __post_init__(self):
        for name in ("bass_db", "mid_db", "treble_db"):
            v = getattr(self, name)
            if not -12.0 <= v <= 12.0:
                raise ValueError(f"{name}={v} outside [-12, +12] dB")


@dataclass(frozen=True)
class AmpPreset:
    head_id: int
    cab_id: int
    drive: float
    pre_gain: float
    tone: ToneSettings
    output_level: float
    cab_ir: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.drive <= 1.0:
            raise ValueError(f"drive={self.drive} outside [0, 1]")
        if self.pre_gain <= 0 or self.output_level <= 0:
            raise ValueError("pre_gain and output_level must be positive")
        ir = np.asarray(self.cab_ir, dtype=np.float64)
        if ir.size == 0 or ir.size > CAB_IR_LEN or not np.all(np.isfinite(ir)):
            raise ValueError(f"cab_ir must be non-empty, finite, <= {CAB_IR_LEN} taps")
        ir.flags.writeable = False
        object.__setattr__(self, "cab_ir", ir)

    @property
    def preset_id(self) -> str:
        return f"h{self.head_id:02d}c{self.cab_id:02d}"


@dataclass(frozen=True)
class PresetBank:
    presets: tuple
    seed: int
    n_heads: int
    n_cabs: int

    def __post_init__(self):
        if len(self.presets) != self.n_heads * self.n_cabs:
            raise ValueError("bank size must be n_heads * n_cabs")
        keys = {(p.head_id, p.cab_id) for p in self.presets}
        if len(keys) != len(self.presets):
            raise ValueError("(head_id, cab_id) pairs must be unique")

    def __len__(self) -> int:
        return len(self.presets)

    def by_id(self, preset_id: str) -> AmpPreset:
        for p in self.presets:
            if p.preset_id == preset_id:
                return p
        raise KeyError(preset_id)


def classify_gain(preset: AmpPreset) -> GainCategory:
    return classify_drive(preset.drive)


def classify_drive(drive: float) -> GainCategory:
    if drive < LOW_GAIN_MAX:
        return GainCategory.LOW_GAIN
    if drive < CRUNCH_MAX:
        return GainCategory.CRUNCH
    return GainCategory.HIGH_GAIN


def waveshape(x: np.ndarray, drive: float) -> np.ndarray:
    """tanh(g*x)/tanh(g) with g = 1 + 99*drive: odd, monotone, |y|<=1 on [-1,1]."""
    if not 0.0 <= drive <= 1.0:
        raise ValueError(f"drive={drive} outside [0, 1]")
    g = 1.0 + 99.0 * drive
    return np.tanh(g * np.asarray(x, dtype=np.float64)) / math.tanh(g)


def _low_shelf(gain_db: float, f0: float, sr: int, slope: float = 1.0):
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * math.pi * f0 / sr
    alpha = math.sin(w0) / 2.0 * math.sqrt((a_lin + 1 / a_lin) * (1 / slope - 1) + 2)
    cosw = math.cos(w0)
    sq = 2.0 * math.sqrt(a_lin) * alpha
    b = np.array([
        a_lin * ((a_lin + 1) - (a_lin - 1) * cosw + sq),
        2 * a_lin * ((a_lin - 1) - (a_lin + 1) * cosw),
        a_lin * ((a_lin + 1) - (a_lin - 1) * cosw - sq),
    ])
    a = np.array([
        (a_lin + 1) + (a_lin - 1) * cosw + sq,
        -2 * ((a_lin - 1) + (a_lin + 1) * cosw),
        (a_lin + 1) + (a_lin - 1) * cosw - sq,
    ])
    return b / a[0], a / a[0]


def _high_shelf(gain_db: float, f0: float, sr: int, slope: float = 1.0):
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * math.pi * f0 / sr
    alpha = math.sin(w0) / 2.0 * math.sqrt((a_lin + 1 / a_lin) * (1 / slope - 1) + 2)
    cosw = math.cos(w0)
    sq = 2.0 * math.sqrt(a_lin) * alpha
    b = np.array([
        a_lin * ((a_lin + 1) + (a_lin - 1) * cosw + sq),
        -2 * a_lin * ((a_lin - 1) + (a_lin + 1) * cosw),
        a_lin * ((a_lin + 1) + (a_lin - 1) * cosw - sq),
    ])
    a = np.array([
        (a_lin + 1) - (a_lin - 1) * cosw + sq,
        2 * ((a_lin - 1) - (a_lin + 1) * cosw),
        (a_lin + 1) - (a_lin - 1) * cosw - sq,
    ])
    return b / a[0], a / a[0]


def _peak_eq(gain_db: float, f0: float, sr: int, q: float):
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * math.pi * f0 / sr
    alpha = math.sin(w0) / (2.0 * q)
    cosw = math.cos(w0)
    b = np.array([1 + alpha * a_lin, -2 * cosw, 1 - alpha * a_lin])
    a = np.array([1 + alpha / a_lin, -2 * cosw, 1 - alpha / a_lin])
    return b / a[0], a / a[0]


def tonestack_coefficients(tone: ToneSettings, sample_rate: int):
    """The three biquads: low shelf @200 Hz, peak @800 Hz Q=0.7, high shelf @3 kHz."""
    return [
        _low_shelf(tone.bass_db, 200.0, sample_rate),
        _peak_eq(tone.mid_db, 800.0, sample_rate, 0.7),
        _high_shelf(tone.treble_db, 3000.0, sample_rate),
    ]


def tonestack(x: np.ndarray, tone: ToneSettings, sample_rate: int) -> np.ndarray:
    y = np.asarray(x, dtype=np.float64)
    for b, a in tonestack_coefficients(tone, sample_rate):
        y = lfilter(b, a, y)
    return y


def render(clip: AudioClip, preset: AmpPreset) -> AudioClip:
    """g(x, theta): pre-gain -> waveshape -> tone stack -> cabinet IR -> level.

    Output has the same length as the input (IR tail truncated) so labels
    stay aligned; deterministic given (clip, preset).
    """
    if len(clip) == 0:
        raise EmptySignal("cannot render an empty clip")
    y = waveshape(preset.pre_gain * clip.samples, preset.drive)
    y = tonestack(y, preset.tone, clip.sample_rate)
    y = fftconvolve(y, preset.cab_ir)[: len(clip)]
    return AudioClip(preset.output_level * y, clip.sample_rate)


def _category_counts(n_heads: int) -> tuple[int, int, int]:
    # 6/4/6 of 16 heads, proportionally rescaled (low, crunch, high)
    low = round(n_heads * 6 / 16)
    high = round(n_heads * 6 / 16)
    crunch = n_heads - low - high
    return low, crunch, high


_DRIVE_BANDS = {
    GainCategory.LOW_GAIN: (0.02, 0.28),
    GainCategory.CRUNCH: (0.32, 0.58),
    GainCategory.HIGH_GAIN: (0.62, 0.98),
}


def _make_cab_ir(rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    """Seeded decaying FIR, lowpassed below 6 kHz, unit peak frequency response."""
    n = CAB_IR_LEN
    tau_s = rng.uniform(0.005, 0.025)
    noise = rng.standard_normal(n)
    env = np.exp(-np.arange(n) / (tau_s * sample_rate))
    fc = rng.uniform(3000.0, CAB_LOWPASS_MAX_HZ)
    b, a = butter(4, fc / (sample_rate / 2.0))
    ir = lfilter(b, a, noise * env)
    return ir / np.max(np.abs(np.fft.rfft(ir, 2 * n)))


def build_preset_bank(
    n_heads: int = 16,
    n_cabs: int = 16,
    seed: int = 7,
    sample_rate: int = 16000,
) -> PresetBank:
    """Seeded head/cab grid; head drives are allocated so the default 16x16
    bank splits 96/64/96 across low-gain/crunch/high-gain."""
    if n_heads < 1 or n_cabs < 1:
        raise ValueError("need at least one head and one cabinet")
    rng = np.random.default_rng(seed)
    low, crunch, high = _category_counts(n_heads)
    cats = (
        [GainCategory.LOW_GAIN] * low
        + [GainCategory.CRUNCH] * crunch
        + [GainCategory.HIGH_GAIN] * high
    )
    heads = []
    for cat in cats:
        lo, hi = _DRIVE_BANDS[cat]
        heads.append(
            {
                "drive": rng.uniform(lo, hi),
                "pre_gain": math.exp(rng.uniform(math.log(0.5), math.log(2.0))),
                "tone": ToneSettings(
                    bass_db=rng.uniform(-9.0, 9.0),
                    mid_db=rng.uniform(-9.0, 9.0),
                    treble_db=rng.uniform(-9.0, 9.0),
                ),
            }
        )
    cab_irs = [_make_cab_ir(rng, sample_rate) for _ in range(n_cabs)]
    presets = []
    for h, head in enumerate(heads):
        for c in range(n_cabs):
            presets.append(
                AmpPreset(
                    head_id=h,
                    cab_id=c,
                    drive=head["drive"],
                    pre_gain=head["pre_gain"],
                    tone=head["tone"],
                    output_level=math.exp(rng.uniform(math.log(0.05), math.log(0.9))),
                    cab_ir=cab_irs[c],
                )
            )
    return PresetBank(tuple(presets), seed=seed, n_heads=n_heads, n_cabs=n_cabs)


def category_counts(bank: PresetBank) -> dict:
    counts = {cat: 0 for cat in GainCategory}
    for p in bank.presets:
        counts[classify_gain(p)] += 1
    return counts


def select_balanced_subset(bank: PresetBank, size: int, seed: int = 0) -> list:
    """Category-balanced preset subset (6/4/6 proportions), seeded.

    Returns preset ids; used by the pipeline's reduced desk bank.
    """
    low = round(size * 6 / 16)
    high = round(size * 6 / 16)
    want = {
        GainCategory.LOW_GAIN: low,
        GainCategory.CRUNCH: size - low - high,
        GainCategory.HIGH_GAIN: high,
    }
    rng = np.random.default_rng(seed)
    chosen = []
    for cat, n in want.items():
        pool = sorted(
            (p.preset_id for p in bank.presets if classify_gain(p) is cat)
        )
        if n > len(pool):
            raise ValueError(f"bank has only {len(pool)} {cat.value} presets, need {n}")
        idx = rng.choice(len(pool), size=n, replace=False)
        chosen.extend(pool[i] for i in sorted(idx))
    return chosen


# --------------------------------------------------------------------------
# JSON serialization (field names are part of the contract)
# --------------------------------------------------------------------------


def bank_to_json(bank: PresetBank) -> dict:
    return {
        "seed": bank.seed,
        "n_heads": bank.n_heads,
        "n_cabs": bank.n_cabs,
        "presets": [
            {
                "head_id": p.head_id,
                "cab_id": p.cab_id,
                "drive": p.drive,
                "pre_gain": p.pre_gain,
                "tone": {
                    "bass_db": p.tone.bass_db,
                    "mid_db": p.tone.mid_db,
                    "treble_db": p.tone.treble_db,
                },
                "output_level": p.output_level,
                "cab_ir": p.cab_ir.tolist(),
            }
            for p in bank.presets
        ],
    }


def bank_from_json(doc: dict) -> PresetBank:
    presets = tuple(
        AmpPreset(
            head_id=int(d["head_id"]),
            cab_id=int(d["cab_id"]),
            drive=float(d["drive"]),
            pre_gain=float(d["pre_gain"]),
            tone=ToneSettings(
                bass_db=float(d["tone"]["bass_db"]),
                mid_db=float(d["tone"]["mid_db"]),
                treble_db=float(d["tone"]["treble_db"]),
            ),
            output_level=float(d["output_level"]),
            cab_ir=np.array(d["cab_ir"], dtype=np.float64),
        )
        for d in doc["presets"]
    )
    return PresetBank(
        presets, seed=int(doc["seed"]), n_heads=int(doc["n_heads"]), n_cabs=int(doc["n_cabs"])
    )


def save_bank(path, bank: PresetBank) -> None:
    with open(path, "w") as fh:
        json.dump(bank_to_json(bank), fh)


def load_bank(path) -> PresetBank:
    with open(path) as fh:
        return bank_from_json(json.load(fh))
