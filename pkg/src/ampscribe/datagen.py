"""Synthetic DI guitar clips with exact note labels: plucked-string synthesis,
seeded random scores, piano-roll rasterization, and dataset manifests.

Two timbres share the same synthesis engine: the primary voice uses a
damped averaging loop and a softened excitation, the augmentation voice a
plain comb with white excitation and faster decay, so the pair is spectrally
distinguishable but label-identical.
"""
from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .audio import AudioClip
from .errors import InvalidPitch, NoteOutOfGridWarning

PITCH_LO = 40
PITCH_HI = 88
N_PITCHES = PITCH_HI - PITCH_LO + 1  # 49

PRIMARY_DECAY = 0.996
AUGMENTATION_DECAY = 0.985
NOTE_PEAK = 0.5  # per-note peak before velocity scaling
TIMBRES = ("primary", "augmentation")


def midi_to_hz(pitch: int) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    offset: float
    velocity: float = 1.0

    def __post_init__(self):
        if not PITCH_LO <= self.pitch <= PITCH_HI:
            raise InvalidPitch(f"pitch {self.pitch} outside [{PITCH_LO}, {PITCH_HI}]")
        if not self.offset > self.onset >= 0.0:
            raise ValueError(f"need 0 <= onset < offset, got [{self.onset}, {self.offset}]")
        if not 0.0 < self.velocity <= 1.0:
            raise ValueError(f"velocity {self.velocity} outside (0, 1]")


@dataclass(frozen=True)
class Score:
    notes: tuple
    duration: float

    def __post_init__(self):
        notes = tuple(sorted(self.notes, key=lambda n: (n.onset, n.pitch)))
        for n in notes:
            if n.offset > self.duration + 1e-9:
                raise ValueError(f"note ends at {n.offset} after duration {self.duration}")
        object.__setattr__(self, "notes", notes)

    def __len__(self) -> int:
        return len(self.notes)


@dataclass(frozen=True)
class PianoRollTargets:
    """Binary onset/offset/frame grids, each [49 x T]."""

    onset: np.ndarray
    offset: np.ndarray
    frame: np.ndarray
    hop: int
    sample_rate: int

    def __post_init__(self):
        for name in ("onset", "offset", "frame"):
            m = np.asarray(getattr(self, name), dtype=np.uint8)
            m.flags.writeable = False
            object.__setattr__(self, name, m)
        if not (self.onset.shape == self.offset.shape == self.frame.shape):
            raise ValueError("onset/offset/frame must share one shape")
        if np.any(self.onset & ~self.frame):
            raise ValueError("onset cells must also be frame cells")

    @property
    def n_frames(self) -> int:
        return self.onset.shape[1]


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def _note_seed(pitch: int, onset_samples: int, dur_samples: int, timbre: str) -> int:
    # stable per-note identity so a note synthesizes identically alone or in
    # a score (superposition property)
    payload = struct.pack("<iii", pitch, onset_samples, dur_samples) + timbre.encode()
    return zlib.crc32(payload)


def karplus_strong(
    pitch: int,
    duration: float,
    sample_rate: int = 16000,
    decay: float = PRIMARY_DECAY,
    *,
    bright: bool = False,
    seed: int = 0,
) -> AudioClip:
    """Plucked string: seeded noise burst into a tuned feedback delay line.

    The primary voice feeds back through a two-tap average (string damping);
    the bright voice uses a plain comb. Output is peak-normalized to 0.5.
    """
    if not PITCH_LO <= pitch <= PITCH_HI:
        raise InvalidPitch(f"pitch {pitch} outside [{PITCH_LO}, {PITCH_HI}]")
    if duration <= 0:
        raise ValueError("duration must be positive")
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must lie in (0, 1)")
    n = round(duration * sample_rate)
    delay = round(sample_rate / midi_to_hz(pitch))
    rng = np.random.default_rng(seed)
    burst = rng.uniform(-1.0, 1.0, delay)
    x = np.zeros(n)
    if not bright:
        burst = lfilter([0.5], [1.0, -0.5], burst)  # soften the attack
    x[: min(delay, n)] = burst[: min(delay, n)]
    a = np.zeros(delay + 2)
    a[0] = 1.0
    if bright:
        a[delay] = -decay
    else:
        a[delay] = -decay / 2.0
        a[delay + 1] = -decay / 2.0
    y = lfilter([1.0], a, x)
    peak = np.max(np.abs(y))
    if peak > 0:
        y = y * (NOTE_PEAK / peak)
    return AudioClip(y, sample_rate)


def synth_score(score: Score, timbre: str = "primary", sample_rate: int = 16000) -> AudioClip:
    """Sum of per-note plucks at their onsets; one global rescale keeps |x|<=1."""
    if timbre not in TIMBRES:
        raise ValueError(f"timbre must be one of {TIMBRES}, got {timbre!r}")
    n = round(score.duration * sample_rate)
    out = np.zeros(n)
    bright = timbre == "augmentation"
    decay = AUGMENTATION_DECAY if bright else PRIMARY_DECAY
    for note in score.notes:
        s_on = round(note.onset * sample_rate)
        dur = note.offset - note.onset
        dur_samples = round(dur * sample_rate)
        if s_on >= n or dur_samples == 0:
            continue
        seed = _note_seed(note.pitch, s_on, dur_samples, timbre)
        clip = karplus_strong(note.pitch, dur, sample_rate, decay, bright=bright, seed=seed)
        seg = clip.samples[: n - s_on] * note.velocity
        out[s_on : s_on + seg.size] += seg
    peak = np.max(np.abs(out)) if n else 0.0
    if peak > 1.0:
        out /= peak
    return AudioClip(out, sample_rate)


def random_score(
    seed: int,
    duration: float = 10.0,
    max_polyphony: int = 2,
    note_rate: float = 1.5,
    pitch_range: tuple = (PITCH_LO, PITCH_HI),
) -> Score:
    """Poisson-like onset process with uniform pitches and [0.2, 1.0] s lengths."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    if max_polyphony < 1:
        raise ValueError("max_polyphony must be >= 1")
    rng = np.random.default_rng(seed)
    notes = []
    if note_rate > 0:
        t = rng.exponential(1.0 / note_rate)
        while t < duration:
            active = sum(1 for m in notes if m.offset > t)
            if active < max_polyphony and duration - t > 0.02:
                length = min(rng.uniform(0.2, 1.0), duration - t)
                notes.append(
                    NoteEvent(
                        pitch=int(rng.integers(pitch_range[0], pitch_range[1] + 1)),
                        onset=float(t),
                        offset=float(t + length),
                        velocity=float(rng.uniform(0.5, 1.0)),
                    )
                )
            t += rng.exponential(1.0 / note_rate)
    return Score(tuple(notes), duration)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


def rasterize_labels(score: Score, hop: int, sample_rate: int, n_frames: int) -> PianoRollTargets:
    """Floor-quantized onset/offset/frame grids, [49 x n_frames].

    Notes entirely beyond the grid are dropped with a warning; notes running
    past it are truncated. The frame run always covers the onset cell.
    """
    onset = np.zeros((N_PITCHES, n_frames), dtype=np.uint8)
    offset = np.zeros((N_PITCHES, n_frames), dtype=np.uint8)
    frame = np.zeros((N_PITCHES, n_frames), dtype=np.uint8)
    for note in score.notes:
        t_on = int(note.onset * sample_rate) // hop
        t_off = int(note.offset * sample_rate) // hop
        if t_on >= n_frames:
            warnings.warn(
                f"note pitch={note.pitch} onset={note.onset:.3f}s lies beyond the "
                f"{n_frames}-frame grid; dropped",
                NoteOutOfGridWarning,
            )
            continue
        row = note.pitch - PITCH_LO
        onset[row, t_on] = 1
        offset[row, min(t_off, n_frames - 1)] = 1
        frame[row, t_on : min(max(t_off, t_on + 1), n_frames)] = 1
    return PianoRollTargets(onset, offset, frame, hop=hop, sample_rate=sample_rate)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    score_path: str
    di_audio_path: str
    preset_ids: tuple
    split: str
    timbre: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    seed: int

    def split_entries(self, split: str, timbre: str | None = None):
        return [
            e
            for e in self.entries
            if e.split == split and (timbre is None or e.timbre == timbre)
        ]


def split_counts(n_clips: int, ratio=(0.90, 0.05, 0.05)) -> tuple[int, int, int]:
    """Train/val/test counts within +-1 clip of the ratio; val/test >= 1."""
    n_val = max(1, round(n_clips * ratio[1]))
    n_test = max(1, round(n_clips * ratio[2]))
    return n_clips - n_val - n_test, n_val, n_test


def make_manifest(
    n_clips: int,
    clip_duration: float,
    preset_ids,
    seed: int = 0,
    ratio=(0.90, 0.05, 0.05),
    content_aug: bool = False,
    heldout_preset_ids=(),
) -> DatasetManifest:
    """Seeded split assignment at the clean-clip level.

    Every render of a clip inherits the clip's split; augmentation-timbre
    entries share the clip's score and split. Held-out presets are listed
    only for test clips.
    """
    if n_clips < 10:
        raise ValueError("need at least 10 clips for a meaningful split")
    seen = tuple(p for p in preset_ids if p not in set(heldout_preset_ids))
    heldout = tuple(heldout_preset_ids)
    n_train, n_val, n_test = split_counts(n_clips, ratio)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_clips)
    split_of = {}
    for i, clip_idx in enumerate(order):
        if i < n_train:
            split_of[clip_idx] = "train"
        elif i < n_train + n_val:
            split_of[clip_idx] = "val"
        else:
            split_of[clip_idx] = "test"
    entries = []
    timbres = TIMBRES if content_aug else ("primary",)
    for i in range(n_clips):
        clip_id = f"clip{i:04d}"
        split = split_of[i]
        presets = seen + heldout if split == "test" else seen
        for timbre in timbres:
            entries.append(
                ManifestEntry(
                    clip_id=clip_id,
                    score_path=f"scores/{clip_id}.json",
                    di_audio_path=f"di/{clip_id}_{timbre}.wav",
                    preset_ids=presets,
                    split=split,
                    timbre=timbre,
                )
            )
    return DatasetManifest(tuple(entries), seed=seed)


def render_path(clip_id: str, timbre: str, preset_id: str) -> str:
    return f"renders/{clip_id}_{timbre}_{preset_id}.wav"


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------


def score_to_json(score: Score) -> dict:
    return {
        "duration": score.duration,
        "notes": [
            {"pitch": n.pitch, "onset": n.onset, "offset": n.offset, "velocity": n.velocity}
            for n in score.notes
        ],
    }


def score_from_json(doc: dict) -> Score:
    return Score(
        tuple(
            NoteEvent(int(n["pitch"]), float(n["onset"]), float(n["offset"]), float(n["velocity"]))
            for n in doc["notes"]
        ),
        duration=float(doc["duration"]),
    )


def save_score(path, score: Score) -> None:
    with open(path, "w") as fh:
        json.dump(score_to_json(score), fh)


def load_score(path) -> Score:
    with open(path) as fh:
        return score_from_json(json.load(fh))


def manifest_to_json(manifest: DatasetManifest) -> dict:
    return {
        "seed": manifest.seed,
        "entries": [
            {
                "clip_id": e.clip_id,
                "score_path": e.score_path,
                "di_audio_path": e.di_audio_path,
                "preset_ids": list(e.preset_ids),
                "split": e.split,
                "timbre": e.timbre,
            }
            for e in manifest.entries
        ],
    }


def manifest_from_json(doc: dict) -> DatasetManifest:
    return DatasetManifest(
        tuple(
            ManifestEntry(
                clip_id=e["clip_id"],
                score_path=e["score_path"],
                di_audio_path=e["di_audio_path"],
                preset_ids=tuple(e["preset_ids"]),
                split=e["split"],
                timbre=e["timbre"],
            )
            for e in doc["entries"]
        ),
        seed=int(doc["seed"]),
    )


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w") as fh:
        json.dump(manifest_to_json(manifest), fh, indent=1)


def load_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        return manifest_from_json(json.load(fh))
