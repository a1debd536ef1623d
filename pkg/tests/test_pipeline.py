"""End-to-end pipeline tests on a tiny generated dataset."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from ampscribe.config import sha256_file, verify_run_manifest
from ampscribe.dataset import DI_TONE_ID, RenderedDataset
from ampscribe.errors import IoFailure, MissingDependency
from ampscribe.pipeline import (
    TitBatchSampler,
    stage_evaluate,
    stage_gen_data,
    stage_train_tit,
    stage_train_tone,
    tone_ids_for,
    transcribe_file,
)
from ampscribe.tone import ToneEncoder

from conftest import tiny_config

TARGET_PEAK = 10.0 ** (-12.0 / 20.0)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


class TestGenData:
    def test_file_bookkeeping(self, tmp_path):
        # 10 clips, 4 presets, one timbre: 10 scores + 10 DI + 40 renders + bank
        cfg = tiny_config(
            tmp_path / "run",
            n_clips=10,
            bank_heads=5,
            bank_cabs=1,
            bank_size=4,
            heldout_presets=0,
            content_aug=False,
        )
        stats = stage_gen_data(cfg)
        assert stats["written"] == 1 + 10 + 10 + 40 + 1  # bank+scores+di+renders+manifest
        root = Path(stats["root"])
        assert len(list((root / "renders").glob("*.wav"))) == 40
        assert len(list((root / "di").glob("*.wav"))) == 10
        assert len(list((root / "scores").glob("*.json"))) == 10

    def test_rerun_writes_nothing(self, tmp_path):
        cfg = tiny_config(
            tmp_path / "run", n_clips=10, bank_heads=5, bank_cabs=1,
            bank_size=4, heldout_presets=0, content_aug=False,
        )
        stage_gen_data(cfg)
        stats = stage_gen_data(cfg)
        assert stats["written"] == 0
        assert stats["skipped"] > 0

    def test_config_mismatch_refused(self, tmp_path):
        cfg = tiny_config(
            tmp_path / "run", n_clips=10, bank_heads=5, bank_cabs=1,
            bank_size=4, heldout_presets=0, content_aug=False,
        )
        stage_gen_data(cfg)
        other = tiny_config(
            tmp_path / "run", n_clips=11, bank_heads=5, bank_cabs=1,
            bank_size=4, heldout_presets=0, content_aug=False,
        )
        with pytest.raises(IoFailure, match="different config"):
            stage_gen_data(other)

    def test_content_aug_doubles_di_and_renders(self, tiny_run, tiny_dataset):
        # fixture: 12 clips, both timbres, 6 seen + 2 held-out presets
        root = tiny_run["cfg"].dataset_dir
        assert len(list((root / "di").glob("*.wav"))) == 24
        n_train_val = len(tiny_dataset.entries("train")) + len(tiny_dataset.entries("val"))
        n_test = len(tiny_dataset.entries("test"))
        expected = n_train_val * 6 + n_test * 8
        assert len(list((root / "renders").glob("*.wav"))) == expected

    def test_heldout_only_on_test_entries(self, tiny_dataset):
        heldout = set(tiny_dataset.heldout_presets)
        assert len(heldout) == 2
        for entry in tiny_dataset.entries("train") + tiny_dataset.entries("val"):
            assert not heldout & set(entry.preset_ids)
        for entry in tiny_dataset.entries("test"):
            assert heldout <= set(entry.preset_ids)

    def test_gen_manifest_validates(self, tiny_run):
        manifest_path = Path(tiny_run["cfg"].out_dir) / "manifests" / "gen-data.json"
        assert verify_run_manifest(manifest_path) == []


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


class TestBatchSampler:
    def test_normalize_peaks_exact(self, tiny_run, tiny_dataset):
        cfg = tiny_run["cfg"]
        encoder = ToneEncoder.load(tiny_run["tone_ckpt"])
        sampler = TitBatchSampler(cfg, tiny_dataset, encoder)
        for _ in range(3):
            _, _, _, segments = sampler.next_batch()
            for seg in segments:
                peak = np.max(np.abs(seg.samples))
                if peak > 0:
                    assert abs(peak - TARGET_PEAK) <= 1e-9

    def test_both_timbres_appear(self, tiny_run, tiny_dataset):
        cfg = tiny_run["cfg"]
        encoder = ToneEncoder.load(tiny_run["tone_ckpt"])
        sampler = TitBatchSampler(cfg, tiny_dataset, encoder)
        timbres = {e.timbre for e in sampler.entries}
        assert timbres == {"primary", "augmentation"}

    def test_tone_count_one_uses_di_only(self, tiny_run, tiny_dataset):
        cfg = tiny_config(tiny_run["cfg"].out_dir, tone_count=1)
        assert tone_ids_for(cfg, tiny_dataset) == [DI_TONE_ID]

    def test_tone_count_four_covers_categories(self, tiny_run, tiny_dataset):
        from ampscribe.ampsim import classify_gain

        cfg = tiny_config(tiny_run["cfg"].out_dir, tone_count=4)
        ids = tone_ids_for(cfg, tiny_dataset)
        assert len(ids) == 4 and ids[0] == DI_TONE_ID
        cats = {classify_gain(tiny_dataset.bank.by_id(p)).value for p in ids[1:]}
        assert cats == {"low_gain", "crunch", "high_gain"}

    def test_tone_count_full_uses_all_seen(self, tiny_run, tiny_dataset):
        cfg = tiny_run["cfg"]
        ids = tone_ids_for(cfg, tiny_dataset)
        assert ids == [DI_TONE_ID] + tiny_dataset.seen_presets

    def test_batch_shapes(self, tiny_run, tiny_dataset):
        cfg = tiny_run["cfg"]
        encoder = ToneEncoder.load(tiny_run["tone_ckpt"])
        sampler = TitBatchSampler(cfg, tiny_dataset, encoder)
        mels, tones, labels, _ = sampler.next_batch()
        assert mels.shape == (cfg.batch, 64, 100)
        assert tones.shape == (cfg.batch, 128)
        for grid in labels.values():
            assert grid.shape == (cfg.batch, 49, 100)


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


class TestTrainingStages:
    def test_tone_training_artifacts(self, tiny_run):
        cfg = tiny_run["cfg"]
        ckpt = tiny_run["tone_ckpt"]
        assert ckpt.exists()
        loss_csv = cfg.log_dir / "tone_loss.csv"
        rows = loss_csv.read_text().splitlines()
        assert rows[0] == "step,loss"
        assert len(rows) > 1
        assert verify_run_manifest(Path(cfg.out_dir) / "manifests" / "train-tone.json") == []

    def test_tone_training_deterministic(self, tiny_run):
        cfg = tiny_run["cfg"]
        before = sha256_file(tiny_run["tone_ckpt"])
        stage_train_tone(cfg)
        assert sha256_file(tiny_run["tone_ckpt"]) == before

    def test_tit_training_artifacts(self, tiny_run):
        cfg = tiny_run["cfg"]
        assert tiny_run["tit_ckpt"].exists()
        assert (cfg.log_dir / "tit_loss.csv").exists()
        assert verify_run_manifest(Path(cfg.out_dir) / "manifests" / "train-tit.json") == []

    def test_tit_requires_encoder(self, tmp_path, tiny_run):
        cfg = tiny_config(tiny_run["cfg"].out_dir)
        with pytest.raises(MissingDependency, match="tone encoder"):
            stage_train_tit(cfg, encoder_path=tmp_path / "missing.ckpt")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def eval_outputs(tiny_run):
    return stage_evaluate(tiny_run["cfg"])


class TestEvaluate:
    def test_reports_for_both_groups(self, eval_outputs):
        assert set(eval_outputs) == {"seen", "heldout"}
        for out in eval_outputs.values():
            assert out["json"].exists() and out["csv"].exists()

    def test_row_count_capped(self, tiny_run, eval_outputs):
        cfg = tiny_run["cfg"]
        for out in eval_outputs.values():
            rows = list(csv.DictReader(open(out["csv"])))
            assert 0 < len(rows) <= cfg.eval_max_pieces

    def test_category_means_recompute(self, eval_outputs):
        # spreadsheet-style oracle: recompute per-category means from the CSV
        out = eval_outputs["seen"]
        rows = list(csv.DictReader(open(out["csv"])))
        with open(out["json"]) as fh:
            agg = json.load(fh)["aggregated"]
        by_cat = {}
        for row in rows:
            by_cat.setdefault(row["gain_category"], []).append(float(row["onset_f1"]))
        for cat, vals in by_cat.items():
            assert agg["by_category"][cat]["onset_f1"] == pytest.approx(
                np.mean(vals), abs=1e-9
            )
        all_vals = [float(r["onset_f1"]) for r in rows]
        assert agg["overall"]["onset_f1"] == pytest.approx(np.mean(all_vals), abs=1e-9)

    def test_eval_deterministic_bytes(self, tiny_run, eval_outputs):
        before = {g: sha256_file(o["csv"]) for g, o in eval_outputs.items()}
        again = stage_evaluate(tiny_run["cfg"])
        after = {g: sha256_file(o["csv"]) for g, o in again.items()}
        assert before == after

    def test_eval_manifest_validates(self, tiny_run, eval_outputs):
        path = Path(tiny_run["cfg"].out_dir) / "manifests" / "evaluate.json"
        assert verify_run_manifest(path) == []


# ---------------------------------------------------------------------------
# transcribe
# ---------------------------------------------------------------------------


class TestTranscribeFile:
    def test_notes_json(self, tiny_run, tiny_dataset, tmp_path):
        entry = tiny_dataset.entries("test", "primary")[0]
        wav = tiny_dataset.root / entry.di_audio_path
        notes_out = tmp_path / "notes.json"
        doc = transcribe_file(
            wav, tiny_run["tit_ckpt"], tiny_run["tone_ckpt"], notes_out=notes_out
        )
        assert notes_out.exists()
        loaded = json.loads(notes_out.read_text())
        assert loaded["n_frames"] == doc["n_frames"]
        for note in loaded["notes"]:
            assert set(note) == {"pitch", "onset", "offset", "velocity"}
