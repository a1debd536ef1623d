"""Pipeline stages: dataset generation, both training loops, evaluation,
and single-file transcription. Each stage writes a run manifest with
content hashes; gen-data is resumable (files whose recorded hash still
matches are skipped)."""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .ampsim import (
    GainCategory,
    build_preset_bank,
    classify_gain,
    load_bank,
    render,
    save_bank,
    select_balanced_subset,
)
from .audio import HOP, AudioClip, log_mel, mel_filterbank, normalize_dbfs, read_wav, write_wav
from .config import ExperimentConfig, config_fingerprint, sha256_file, write_run_manifest
from .datagen import (
    make_manifest,
    random_score,
    rasterize_labels,
    render_path,
    save_manifest,
    save_score,
    synth_score,
)
from .dataset import DI_TONE_ID, RenderedDataset
from .errors import DegenerateSignal, IoFailure, MissingDependency
from .metrics import PieceScore, aggregate, frame_prf, note_onset_prf, save_report
from .tit import MODEL_CONFIGS, TitModel, tit_loss, transcribe
from .tone import (
    TONE_WINDOW_SECONDS,
    ToneEncoder,
    ToneEncoderConfig,
    train_tone_encoder,
)

TONE_CKPT = "tone_encoder.ckpt"
TIT_CKPT = "tit.ckpt"


def _dataset_fingerprint(cfg: ExperimentConfig) -> str:
    data_cfg = {
        k: getattr(cfg, k)
        for k in (
            "seed", "sample_rate", "bank_heads", "bank_cabs", "bank_size",
            "heldout_presets", "n_clips", "clip_seconds", "note_rate",
            "max_polyphony", "pitch_lo", "pitch_hi", "content_aug",
        )
    }
    return json.dumps(data_cfg, sort_keys=True)


def _pick_heldout(bank, active_ids, n_heldout: int, seed: int) -> list:
    """Category-balanced held-out presets, seeded and deterministic."""
    if n_heldout == 0:
        return []
    rng = np.random.default_rng(seed + 1)
    pools = {cat: [] for cat in GainCategory}
    for pid in sorted(active_ids):
        pools[classify_gain(bank.by_id(pid))].append(pid)
    order = [GainCategory.LOW_GAIN, GainCategory.HIGH_GAIN, GainCategory.CRUNCH]
    chosen = []
    i = 0
    while len(chosen) < n_heldout:
        cat = order[i % len(order)]
        pool = [p for p in pools[cat] if p not in chosen]
        if pool:
            chosen.append(pool[int(rng.integers(0, len(pool)))])
        i += 1
        if i > 10 * n_heldout:
            raise IoFailure("cannot satisfy held-out preset count from this bank")
    return sorted(chosen)


def _write_wav_hashed(path: Path, clip: AudioClip) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_wav(path, clip, "float32")
    return sha256_file(path)


def _render_job(args):
    """Worker: render one (clip, timbre) DI file under a list of presets."""
    root, di_rel, entries = args
    root = Path(root)
    di = read_wav(root / di_rel)
    bank = load_bank(root / "bank.json")
    out = []
    for rel, preset_id in entries:
        wet = render(di, bank.by_id(preset_id))
        out.append((rel, _write_wav_hashed(root / rel, wet)))
    return out


def stage_gen_data(cfg: ExperimentConfig) -> dict:
    """Scores, DI audio, renders, manifest; resumable by per-file hash."""
    t0 = time.perf_counter()
    root = cfg.dataset_dir
    root.mkdir(parents=True, exist_ok=True)
    meta_path = root / "meta.json"
    fingerprint = _dataset_fingerprint(cfg)
    old_files = {}
    if meta_path.exists():
        with open(meta_path) as fh:
            old = json.load(fh)
        if old.get("dataset_fingerprint") != fingerprint:
            raise IoFailure(
                f"{root} holds a dataset generated from a different config; "
                "use a fresh out dir"
            )
        old_files = old.get("files", {})

    def fresh(rel: str) -> bool:
        return rel in old_files and (root / rel).exists() and sha256_file(root / rel) == old_files[rel]

    written = skipped = 0
    files = {}

    bank = build_preset_bank(cfg.bank_heads, cfg.bank_cabs, cfg.seed, cfg.sample_rate)
    active = select_balanced_subset(bank, cfg.bank_size, cfg.seed)
    heldout = _pick_heldout(bank, active, cfg.heldout_presets, cfg.seed)
    seen = [p for p in active if p not in heldout]
    if fresh("bank.json"):
        skipped += 1
        files["bank.json"] = old_files["bank.json"]
    else:
        save_bank(root / "bank.json", bank)
        files["bank.json"] = sha256_file(root / "bank.json")
        written += 1

    manifest = make_manifest(
        cfg.n_clips,
        cfg.clip_seconds,
        seen + heldout,
        seed=cfg.seed,
        content_aug=cfg.content_aug,
        heldout_preset_ids=heldout,
    )
    manifest_rel = "manifest.json"
    if fresh(manifest_rel):
        skipped += 1
        files[manifest_rel] = old_files[manifest_rel]
    else:
        save_manifest(root / manifest_rel, manifest)
        files[manifest_rel] = sha256_file(root / manifest_rel)
        written += 1

    # scores + DI audio
    by_clip = {}
    for entry in manifest.entries:
        by_clip.setdefault(entry.clip_id, []).append(entry)
    for i, (clip_id, entries) in enumerate(sorted(by_clip.items())):
        score_rel = entries[0].score_path
        score = random_score(
            cfg.seed * 100_003 + i,
            cfg.clip_seconds,
            cfg.max_polyphony,
            cfg.note_rate,
            (cfg.pitch_lo, cfg.pitch_hi),
        )
        if fresh(score_rel):
            skipped += 1
            files[score_rel] = old_files[score_rel]
        else:
            (root / score_rel).parent.mkdir(parents=True, exist_ok=True)
            save_score(root / score_rel, score)
            files[score_rel] = sha256_file(root / score_rel)
            written += 1
        for entry in entries:
            if fresh(entry.di_audio_path):
                skipped += 1
                files[entry.di_audio_path] = old_files[entry.di_audio_path]
                continue
            clip = synth_score(score, entry.timbre, cfg.sample_rate)
            files[entry.di_audio_path] = _write_wav_hashed(root / entry.di_audio_path, clip)
            written += 1

    # renders
    jobs = []
    for entry in manifest.entries:
        todo = []
        for preset_id in entry.preset_ids:
            rel = render_path(entry.clip_id, entry.timbre, preset_id)
            if fresh(rel):
                skipped += 1
                files[rel] = old_files[rel]
            else:
                todo.append((rel, preset_id))
        if todo:
            jobs.append((str(root), entry.di_audio_path, todo))
    if cfg.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            for result in pool.map(_render_job, jobs):
                for rel, digest in result:
                    files[rel] = digest
                    written += 1
    else:
        for job in jobs:
            for rel, digest in _render_job(job):
                files[rel] = digest
                written += 1

    meta = {
        "seed": cfg.seed,
        "sample_rate": cfg.sample_rate,
        "clip_seconds": cfg.clip_seconds,
        "content_aug": cfg.content_aug,
        "seen_preset_ids": seen,
        "heldout_preset_ids": heldout,
        "dataset_fingerprint": fingerprint,
        "files": {k: files[k] for k in sorted(files)},
    }
    meta_text = json.dumps(meta, indent=1)
    if not meta_path.exists() or meta_path.read_text() != meta_text:
        meta_path.write_text(meta_text)
    write_run_manifest(
        Path(cfg.out_dir) / "manifests" / "gen-data.json",
        "gen-data",
        cfg,
        inputs={},
        artifacts={
            str(root / "bank.json"): files["bank.json"],
            str(root / "manifest.json"): files["manifest.json"],
        },
        wall_seconds=time.perf_counter() - t0,
    )
    return {"written": written, "skipped": skipped, "root": str(root)}


# ---------------------------------------------------------------------------
# Tone-encoder training
# ---------------------------------------------------------------------------


def _tone_config(cfg: ExperimentConfig) -> ToneEncoderConfig:
    model_cfg = MODEL_CONFIGS[cfg.model]
    return ToneEncoderConfig(
        n_mels=model_cfg.n_mels,
        embed_dim=model_cfg.tone_dim,
        sample_rate=cfg.sample_rate,
        hop=HOP,
        seed=cfg.seed,
        dtype=model_cfg.dtype,
    )


def _write_loss_csv(path: Path, losses) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for step, loss in losses:
            fh.write(f"{step},{loss:.8f}\n")


def stage_train_tone(cfg: ExperimentConfig) -> Path:
    t0 = time.perf_counter()
    dataset = RenderedDataset(cfg.dataset_dir)
    encoder, losses = train_tone_encoder(
        dataset,
        _tone_config(cfg),
        steps=cfg.tone_steps,
        n_pairs=cfg.tone_pairs,
        lr=cfg.tone_lr,
        temperature=cfg.tone_temperature,
        seed=cfg.seed,
        warmup=cfg.tone_warmup,
    )
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.checkpoint_dir / TONE_CKPT
    encoder.save(ckpt)
    loss_csv = cfg.log_dir / "tone_loss.csv"
    _write_loss_csv(loss_csv, losses)
    write_run_manifest(
        Path(cfg.out_dir) / "manifests" / "train-tone.json",
        "train-tone",
        cfg,
        inputs={str(cfg.dataset_dir / "manifest.json"): sha256_file(cfg.dataset_dir / "manifest.json")},
        artifacts={str(ckpt): sha256_file(ckpt), str(loss_csv): sha256_file(loss_csv)},
        wall_seconds=time.perf_counter() - t0,
    )
    return ckpt


# ---------------------------------------------------------------------------
# TIT training
# ---------------------------------------------------------------------------


def tone_ids_for(cfg: ExperimentConfig, dataset: RenderedDataset) -> list:
    """Training tone set: DI only, DI + one preset per gain category, or
    DI + every seen preset."""
    if cfg.tone_count == 1:
        return [DI_TONE_ID]
    if cfg.tone_count == 4:
        per_cat = {cat: [] for cat in GainCategory}
        for pid in dataset.seen_presets:
            preset = dataset.bank.by_id(pid)
            per_cat[classify_gain(preset)].append((preset.drive, pid))
        reps = []
        for cat in (GainCategory.LOW_GAIN, GainCategory.CRUNCH, GainCategory.HIGH_GAIN):
            pool = sorted(per_cat[cat])
            if not pool:
                raise MissingDependency(f"no seen presets in category {cat.value}")
            reps.append(pool[len(pool) // 2][1])  # median drive
        return [DI_TONE_ID] + reps
    return [DI_TONE_ID] + list(dataset.seen_presets)


class TitBatchSampler:
    """Seeded sampler yielding (mel segments, tone embeddings, label grids)."""

    def __init__(self, cfg: ExperimentConfig, dataset: RenderedDataset, encoder: ToneEncoder):
        self.cfg = cfg
        self.dataset = dataset
        self.encoder = encoder
        self.model_cfg = MODEL_CONFIGS[cfg.model]
        timbres = ("primary", "augmentation") if cfg.content_aug else ("primary",)
        self.entries = [
            e for t in timbres for e in dataset.entries("train", t)
        ]
        if not self.entries:
            raise MissingDependency("no training entries for the requested timbres")
        if cfg.content_aug and not dataset.meta["content_aug"]:
            raise MissingDependency("dataset was generated without the augmentation timbre")
        self.tone_ids = tone_ids_for(cfg, dataset)
        self.rng = np.random.default_rng(cfg.seed * 9_176_849 + 11)
        self._fb = mel_filterbank(self.model_cfg.n_mels, cfg.sample_rate, fft_len=2048)
        # the encoder is frozen, so one deterministic window per (entry,
        # preset) pair is embedded once and reused
        self._tone_cache: dict = {}

    def _segment(self, entry, tone_id: str):
        sr = self.cfg.sample_rate
        mc = self.model_cfg
        wet = self.dataset.wet_clip(entry, tone_id)
        max_start = len(wet) // HOP - mc.frames
        f0 = int(self.rng.integers(0, max_start + 1))
        seg = AudioClip(wet.samples[f0 * HOP : (f0 + mc.frames) * HOP], sr)
        if self.cfg.normalize:
            try:
                seg = normalize_dbfs(seg, -12.0)
            except DegenerateSignal:
                pass
        mel = log_mel(seg, n_mels=mc.n_mels, filterbank=self._fb).values[:, : mc.frames]
        n_frames_full = 1 + len(wet) // HOP
        grid = self.dataset.label_grid(entry, HOP, n_frames_full)
        labels = {
            "onset": grid.onset[:, f0 : f0 + mc.frames],
            "offset": grid.offset[:, f0 : f0 + mc.frames],
            "frame": grid.frame[:, f0 : f0 + mc.frames],
        }
        return mel, labels, seg

    def _tone_embedding(self, entry, tone_id: str) -> np.ndarray:
        """Embedding of one deterministic 4 s window of the same wet clip,
        peak-normalized before the mel transform."""
        import zlib

        key = (entry.clip_id, entry.timbre, tone_id)
        if key in self._tone_cache:
            return self._tone_cache[key]
        sr = self.cfg.sample_rate
        wet = self.dataset.wet_clip(entry, tone_id)
        win = int(TONE_WINDOW_SECONDS * sr)
        span = max(len(wet) - win, 0) + 1
        start = zlib.crc32("/".join(key).encode()) % span
        piece = AudioClip(wet.samples[start : start + win], sr)
        try:
            piece = normalize_dbfs(piece, -12.0)
        except DegenerateSignal:
            pass
        with ad.no_grad():
            vec = self.encoder.forward_batch(self.encoder.mel_of(piece).values[None]).data[0]
        self._tone_cache[key] = vec
        return vec

    def next_batch(self):
        mels, tones, labels = [], [], {"onset": [], "offset": [], "frame": []}
        segments = []
        for _ in range(self.cfg.batch):
            entry = self.entries[int(self.rng.integers(0, len(self.entries)))]
            tone_id = self.tone_ids[int(self.rng.integers(0, len(self.tone_ids)))]
            mel, lab, seg = self._segment(entry, tone_id)
            mels.append(mel)
            tones.append(self._tone_embedding(entry, tone_id))
            for k in labels:
                labels[k].append(lab[k])
            segments.append(seg)
        return (
            np.stack(mels),
            np.stack(tones),
            {k: np.stack(v).astype(np.float64) for k, v in labels.items()},
            segments,
        )


def stage_train_tit(cfg: ExperimentConfig, encoder_path=None) -> Path:
    t0 = time.perf_counter()
    dataset = RenderedDataset(cfg.dataset_dir)
    encoder_path = Path(encoder_path or cfg.checkpoint_dir / TONE_CKPT)
    if not encoder_path.exists():
        raise MissingDependency(f"tone encoder checkpoint missing: {encoder_path}")
    encoder = ToneEncoder.load(encoder_path)
    model = TitModel(replace(MODEL_CONFIGS[cfg.model], seed=cfg.seed))
    sampler = TitBatchSampler(cfg, dataset, encoder)
    opt = ad.Adam(model.params(), lr=cfg.lr)
    losses = []
    micro = max(1, cfg.micro_batch)
    for step in range(cfg.steps):
        mels, tones, labels, _ = sampler.next_batch()
        opt.zero_grad()
        total = 0.0
        for lo in range(0, cfg.batch, micro):
            hi = min(lo + micro, cfg.batch)
            out = model.forward_batch(mels[lo:hi], tones[lo:hi])
            chunk = {k: v[lo:hi] for k, v in labels.items()}
            loss = ad.scale(tit_loss(out, chunk), (hi - lo) / cfg.batch)
            loss.backward()
            total += loss.item()
        opt.step(lr_scale=min(1.0, (step + 1) / max(cfg.warmup, 1)))
        if step % 10 == 0 or step == cfg.steps - 1:
            losses.append((step, total))
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.checkpoint_dir / TIT_CKPT
    model.save(ckpt)
    loss_csv = cfg.log_dir / "tit_loss.csv"
    _write_loss_csv(loss_csv, losses)
    write_run_manifest(
        Path(cfg.out_dir) / "manifests" / "train-tit.json",
        "train-tit",
        cfg,
        inputs={
            str(cfg.dataset_dir / "manifest.json"): sha256_file(cfg.dataset_dir / "manifest.json"),
            str(encoder_path): sha256_file(encoder_path),
        },
        artifacts={str(ckpt): sha256_file(ckpt), str(loss_csv): sha256_file(loss_csv)},
        wall_seconds=time.perf_counter() - t0,
    )
    return ckpt


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _eval_pieces(cfg: ExperimentConfig, dataset: RenderedDataset, presets: list) -> list:
    """(entry, preset_id) pieces, category-stratified down to eval_max_pieces."""
    entries = dataset.entries(cfg.eval_split, "primary")
    pieces = [
        (e, pid) for e in entries for pid in presets if pid in e.preset_ids
    ]
    if len(pieces) <= cfg.eval_max_pieces:
        return pieces
    rng = np.random.default_rng(cfg.seed + 999)
    by_cat = {}
    for piece in pieces:
        cat = classify_gain(dataset.bank.by_id(piece[1])).value
        by_cat.setdefault(cat, []).append(piece)
    for group in by_cat.values():
        rng.shuffle(group)
    picked = []
    while len(picked) < cfg.eval_max_pieces:
        for cat in sorted(by_cat):
            if by_cat[cat] and len(picked) < cfg.eval_max_pieces:
                picked.append(by_cat[cat].pop())
    return picked


def evaluate_group(cfg, dataset, model, encoder, presets) -> list:
    scores = []
    for entry, preset_id in _eval_pieces(cfg, dataset, presets):
        clip = dataset.wet_clip(entry, preset_id)
        result = transcribe(
            clip, model, encoder,
            onset_threshold=cfg.onset_threshold,
            frame_threshold=cfg.frame_threshold,
            normalize=cfg.normalize,
        )
        score = dataset.score(entry)
        ref_notes = list(score.notes)
        n_frames = result.posteriorgrams["frame"].shape[1]
        ref_grid = rasterize_labels(score, HOP, cfg.sample_rate, n_frames)
        est_frames = result.posteriorgrams["frame"] >= cfg.frame_threshold
        scores.append(
            PieceScore(
                piece_id=f"{entry.clip_id}:{preset_id}",
                preset_id=preset_id,
                gain_category=classify_gain(dataset.bank.by_id(preset_id)).value,
                onset=note_onset_prf(ref_notes, list(result.notes)),
                frame=frame_prf(ref_grid.frame, est_frames),
            )
        )
    return scores


def stage_evaluate(cfg: ExperimentConfig, model_path=None, encoder_path=None) -> dict:
    t0 = time.perf_counter()
    dataset = RenderedDataset(cfg.dataset_dir)
    model_path = Path(model_path or cfg.checkpoint_dir / TIT_CKPT)
    encoder_path = Path(encoder_path or cfg.checkpoint_dir / TONE_CKPT)
    for p in (model_path, encoder_path):
        if not p.exists():
            raise MissingDependency(f"checkpoint missing: {p}")
    model = TitModel.load(model_path)
    encoder = ToneEncoder.load(encoder_path)
    groups = {}
    if cfg.eval_presets in ("seen", "all"):
        groups["seen"] = dataset.seen_presets
    if cfg.eval_presets in ("heldout", "all"):
        if not dataset.heldout_presets:
            raise MissingDependency("dataset reserves no held-out presets")
        groups["heldout"] = dataset.heldout_presets
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    artifacts = {}
    for group, presets in groups.items():
        report = aggregate(evaluate_group(cfg, dataset, model, encoder, presets))
        json_path = cfg.report_dir / f"eval_{group}.json"
        csv_path = cfg.report_dir / f"eval_{group}.csv"
        save_report(json_path, csv_path, report)
        outputs[group] = {"json": json_path, "csv": csv_path, "report": report}
        artifacts[str(json_path)] = sha256_file(json_path)
        artifacts[str(csv_path)] = sha256_file(csv_path)
    write_run_manifest(
        Path(cfg.out_dir) / "manifests" / "evaluate.json",
        "evaluate",
        cfg,
        inputs={
            str(model_path): sha256_file(model_path),
            str(encoder_path): sha256_file(encoder_path),
        },
        artifacts=artifacts,
        wall_seconds=time.perf_counter() - t0,
    )
    return outputs


# ---------------------------------------------------------------------------
# Single-file transcription
# ---------------------------------------------------------------------------


def transcribe_file(
    input_wav,
    model_path,
    encoder_path,
    notes_out=None,
    onset_threshold: float = 0.5,
    frame_threshold: float = 0.5,
    normalize: bool = False,
) -> dict:
    clip = read_wav(input_wav)
    model = TitModel.load(model_path)
    encoder = ToneEncoder.load(encoder_path)
    result = transcribe(
        clip, model, encoder,
        onset_threshold=onset_threshold,
        frame_threshold=frame_threshold,
        normalize=normalize,
    )
    doc = {
        "input": str(input_wav),
        "n_frames": int(result.posteriorgrams["frame"].shape[1]),
        "notes": [
            {"pitch": n.pitch, "onset": n.onset, "offset": n.offset, "velocity": n.velocity}
            for n in result.notes
        ],
    }
    if notes_out is not None:
        Path(notes_out).parent.mkdir(parents=True, exist_ok=True)
        with open(notes_out, "w") as fh:
            json.dump(doc, fh, indent=1)
    return doc
