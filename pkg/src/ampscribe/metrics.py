"""Note decoding from posteriorgrams and onset/frame precision-recall-F1
with per-piece averaging.

Matching follows the onsets-and-frames convention: a reference and an
estimated note match when pitches agree and onsets differ by at most 50 ms;
matching is one-to-one, greedy over candidate pairs sorted by onset
distance. Offsets are decoded but never scored.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .datagen import NoteEvent
from .errors import EmptyInput, ShapeMismatch

ONSET_TOLERANCE_S = 0.05
MIN_NOTE_FRAMES = 2
DEFAULT_ONSET_THRESHOLD = 0.5
DEFAULT_FRAME_THRESHOLD = 0.5

CSV_COLUMNS = (
    "piece_id", "preset_id", "gain_category",
    "onset_p", "onset_r", "onset_f1",
    "frame_p", "frame_r", "frame_f1",
)


def extract_notes(
    onset_post: np.ndarray,
    frame_post: np.ndarray,
    onset_threshold: float = DEFAULT_ONSET_THRESHOLD,
    frame_threshold: float = DEFAULT_FRAME_THRESHOLD,
    hop: int = 256,
    sample_rate: int = 16000,
    pitch_lo: int = 40,
) -> list:
    """Decode notes per pitch row, independently.

    A note starts at each onset local maximum >= onset_threshold; it ends at
    the next onset (re-onset splits a run), at the first later frame whose
    frame posterior drops below frame_threshold, or at the segment end,
    whichever comes first, floored to a 2-frame minimum duration.
    """
    if onset_post.shape != frame_post.shape:
        raise ShapeMismatch(f"onset {onset_post.shape} vs frame {frame_post.shape}")
    if not (0.0 < onset_threshold < 1.0 and 0.0 < frame_threshold < 1.0):
        raise ValueError("thresholds must lie in (0, 1)")
    n_pitches, n_frames = onset_post.shape
    notes = []
    for row in range(n_pitches):
        o = onset_post[row]
        peaks = []
        for t in range(n_frames):
            if o[t] < onset_threshold:
                continue
            left_ok = t == 0 or o[t] > o[t - 1]
            right_ok = t == n_frames - 1 or o[t] >= o[t + 1]
            if left_ok and right_ok:
                peaks.append(t)
        low_frame = frame_post[row] < frame_threshold
        for i, t_on in enumerate(peaks):
            t_next = peaks[i + 1] if i + 1 < len(peaks) else n_frames
            t_off = t_next
            for t in range(t_on + 1, t_next):
                if low_frame[t]:
                    t_off = t
                    break
            t_off = min(max(t_off, t_on + MIN_NOTE_FRAMES), n_frames)
            notes.append(
                NoteEvent(
                    pitch=pitch_lo + row,
                    onset=t_on * hop / sample_rate,
                    offset=t_off * hop / sample_rate,
                    velocity=float(min(max(o[t_on], 1e-6), 1.0)),
                )
            )
    notes.sort(key=lambda n: (n.onset, n.pitch))
    return notes


# ---------------------------------------------------------------------------
# Note-level matching
# ---------------------------------------------------------------------------


def greedy_note_matching(ref, est, tolerance: float = ONSET_TOLERANCE_S) -> list:
    """One-to-one (ref_idx, est_idx) pairs, greedy over onset distance."""
    candidates = []
    for i, r in enumerate(ref):
        for j, e in enumerate(est):
            dist = abs(r.onset - e.onset)
            if r.pitch == e.pitch and dist <= tolerance:
                candidates.append((dist, i, j))
    candidates.sort()
    ref_used, est_used = set(), set()
    matches = []
    for _, i, j in candidates:
        if i in ref_used or j in est_used:
            continue
        ref_used.add(i)
        est_used.add(j)
        matches.append((i, j))
    return matches


def _prf(n_match: int, n_ref: int, n_est: int) -> dict:
    if n_est == 0 and n_ref == 0:
        return {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    p = n_match / n_est if n_est else 0.0
    r = n_match / n_ref if n_ref else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return {"precision": p, "recall": r, "f1": f1}


def note_onset_prf(ref, est, tolerance: float = ONSET_TOLERANCE_S) -> dict:
    """Onset-based note scores: equal pitch, onsets within `tolerance`."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    matches = greedy_note_matching(ref, est, tolerance)
    return _prf(len(matches), len(ref), len(est))


def frame_prf(ref: np.ndarray, est: np.ndarray) -> dict:
    """Cellwise frame scores over equal-shape binary grids."""
    ref = np.asarray(ref)
    est = np.asarray(est)
    if ref.shape != est.shape:
        raise ShapeMismatch(f"frame grids {ref.shape} vs {est.shape}")
    ref_b = ref > 0
    est_b = est > 0
    tp = int(np.sum(ref_b & est_b))
    return _prf(tp, int(ref_b.sum()), int(est_b.sum()))


# ---------------------------------------------------------------------------
# Per-piece reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PieceScore:
    piece_id: str
    preset_id: str
    gain_category: str
    onset: dict
    frame: dict

    def row(self) -> dict:
        return {
            "piece_id": self.piece_id,
            "preset_id": self.preset_id,
            "gain_category": self.gain_category,
            "onset_p": self.onset["precision"],
            "onset_r": self.onset["recall"],
            "onset_f1": self.onset["f1"],
            "frame_p": self.frame["precision"],
            "frame_r": self.frame["recall"],
            "frame_f1": self.frame["f1"],
        }


@dataclass(frozen=True)
class EvalReport:
    per_piece: tuple
    aggregated: dict


_METRIC_KEYS = ("onset_p", "onset_r", "onset_f1", "frame_p", "frame_r", "frame_f1")


def _mean_rows(rows) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in _METRIC_KEYS}


def aggregate(pieces) -> EvalReport:
    """Unweighted per-piece means, overall and per gain category."""
    pieces = tuple(pieces)
    if not pieces:
        raise EmptyInput("cannot aggregate zero pieces")
    rows = [p.row() for p in pieces]
    by_cat = {}
    for r in rows:
        by_cat.setdefault(r["gain_category"], []).append(r)
    aggregated = {
        "overall": _mean_rows(rows),
        "by_category": {cat: _mean_rows(cat_rows) for cat, cat_rows in sorted(by_cat.items())},
        "n_pieces": len(rows),
    }
    return EvalReport(per_piece=pieces, aggregated=aggregated)


def report_to_json(report: EvalReport) -> dict:
    return {
        "per_piece": [p.row() for p in report.per_piece],
        "aggregated": report.aggregated,
    }


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for piece in report.per_piece:
        row = piece.row()
        writer.writerow({k: f"{row[k]:.6f}" if isinstance(row[k], float) else row[k] for k in CSV_COLUMNS})
    return buf.getvalue()


def save_report(json_path, csv_path, report: EvalReport) -> None:
    with open(json_path, "w") as fh:
        json.dump(report_to_json(report), fh, indent=1)
    with open(csv_path, "w") as fh:
        fh.write(report_to_csv(report))
