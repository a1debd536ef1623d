"""Shared fixtures: a tiny generated dataset and short training artifacts."""

import numpy as np
import pytest

from ampscribe.config import ExperimentConfig
from ampscribe.dataset import RenderedDataset
from ampscribe.pipeline import stage_gen_data, stage_train_tit, stage_train_tone


def tiny_config(out_dir, **overrides) -> ExperimentConfig:
    base = dict(
        seed=5,
        out_dir=str(out_dir),
        bank_heads=5,
        bank_cabs=2,
        bank_size=8,
        heldout_presets=2,
        n_clips=12,
        clip_seconds=4.0,
        note_rate=1.5,
        max_polyphony=2,
        content_aug=True,
        model="desk",
        batch=4,
        micro_batch=2,
        steps=3,
        warmup=2,
        lr=5e-5,
        tone_pairs=4,
        tone_steps=6,
        tone_warmup=2,
        eval_max_pieces=4,
        eval_presets="all",
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """Generated dataset plus short tone/tit trainings in one run dir."""
    out = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config(out)
    stats = stage_gen_data(cfg)
    tone_ckpt = stage_train_tone(cfg)
    tit_ckpt = stage_train_tit(cfg)
    return {
        "cfg": cfg,
        "stats": stats,
        "tone_ckpt": tone_ckpt,
        "tit_ckpt": tit_ckpt,
    }


@pytest.fixture(scope="session")
def tiny_dataset(tiny_run) -> RenderedDataset:
    return RenderedDataset(tiny_run["cfg"].dataset_dir)
