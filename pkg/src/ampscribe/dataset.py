"""Read-side access to a generated dataset directory.

Layout written by the gen-data stage:

    <root>/bank.json        preset bank
    <root>/meta.json        generation config snapshot + per-file hashes
    <root>/manifest.json    entries (clip ids, splits, timbres, preset ids)
    <root>/scores/*.json    ground-truth scores
    <root>/di/*.wav         clean synthesized clips, one per (clip, timbre)
    <root>/renders/*.wav    wet clips, one per (clip, timbre, preset)
"""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .ampsim import PresetBank, load_bank
from .audio import AudioClip, read_wav
from .datagen import (
    DatasetManifest,
    ManifestEntry,
    Score,
    load_manifest,
    load_score,
    rasterize_labels,
    render_path,
)
from .errors import MissingDependency

DI_TONE_ID = "di"  # pseudo-preset id for the clean signal


class _LruCache(OrderedDict):
    def __init__(self, maxsize: int):
        super().__init__()
        self.maxsize = maxsize

    def get_or(self, key, make):
        if key in self:
            self.move_to_end(key)
            return self[key]
        value = make()
        self[key] = value
        if len(self) > self.maxsize:
            self.popitem(last=False)
        return value


class RenderedDataset:
    """Lazy, cached reader over a gen-data output directory."""

    def __init__(self, root, wav_cache: int = 192):
        self.root = Path(root)
        if not (self.root / "manifest.json").exists():
            raise MissingDependency(f"no dataset at {self.root} (manifest.json missing)")
        self.manifest: DatasetManifest = load_manifest(self.root / "manifest.json")
        self.bank: PresetBank = load_bank(self.root / "bank.json")
        with open(self.root / "meta.json") as fh:
            self.meta = json.load(fh)
        self.sample_rate: int = int(self.meta["sample_rate"])
        self._wavs = _LruCache(wav_cache)
        self._scores: dict = {}
        self._grids: dict = {}

    # -- manifest conveniences ---------------------------------------------
    @property
    def seen_presets(self) -> list:
        return list(self.meta["seen_preset_ids"])

    @property
    def heldout_presets(self) -> list:
        return list(self.meta["heldout_preset_ids"])

    def entries(self, split: str, timbre: str | None = None) -> list:
        return self.manifest.split_entries(split, timbre)

    # -- audio / labels ------------------------------------------------------
    def _wav(self, rel: str) -> AudioClip:
        return self._wavs.get_or(rel, lambda: read_wav(self.root / rel))

    def di_clip(self, entry: ManifestEntry) -> AudioClip:
        return self._wav(entry.di_audio_path)

    def wet_clip(self, entry: ManifestEntry, preset_id: str) -> AudioClip:
        if preset_id == DI_TONE_ID:
            return self.di_clip(entry)
        if preset_id not in entry.preset_ids:
            raise MissingDependency(
                f"{entry.clip_id}/{entry.timbre} has no render for preset {preset_id}"
            )
        return self._wav(render_path(entry.clip_id, entry.timbre, preset_id))

    def score(self, entry: ManifestEntry) -> Score:
        if entry.score_path not in self._scores:
            self._scores[entry.score_path] = load_score(self.root / entry.score_path)
        return self._scores[entry.score_path]

    def label_grid(self, entry: ManifestEntry, hop: int, n_frames: int):
        key = (entry.score_path, hop, n_frames)
        if key not in self._grids:
            self._grids[key] = rasterize_labels(
                self.score(entry), hop, self.sample_rate, n_frames
            )
        return self._grids[key]
