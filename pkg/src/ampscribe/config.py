"""Experiment configuration (single JSON file + AMPT_* env overrides) and
run manifests with content hashes for resumability and provenance."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

VALID_TONE_COUNTS = ("full", 1, 4)
ENV_PREFIX = "AMPT_"


@dataclass
class ExperimentConfig:
    seed: int = 7
    sample_rate: int = 16000
    out_dir: str = "runs/exp"

    # preset bank: heads x cabs grid, category-balanced selection, held-out set
    bank_heads: int = 10
    bank_cabs: int = 4
    bank_size: int = 32
    heldout_presets: int = 4

    # clean-data synthesis
    n_clips: int = 100
    clip_seconds: float = 10.0
    note_rate: float = 1.2
    max_polyphony: int = 2
    pitch_lo: int = 40
    pitch_hi: int = 88

    # ablation toggles
    tone_count: object = "full"  # "full" | 1 | 4
    content_aug: bool = True
    normalize: bool = True

    # model / training
    model: str = "desk"  # desk | full
    batch: int = 10
    micro_batch: int = 5
    lr: float = 5e-5
    steps: int = 2000
    warmup: int = 500

    # tone-encoder training
    tone_pairs: int = 16
    tone_lr: float = 1e-3
    tone_steps: int = 2000
    tone_temperature: float = 0.1
    tone_warmup: int = 50

    # evaluation
    onset_threshold: float = 0.5
    frame_threshold: float = 0.5
    eval_split: str = "test"
    eval_presets: str = "seen"  # seen | heldout | all
    eval_max_pieces: int = 40

    threads: int = 1

    def __post_init__(self):
        if isinstance(self.tone_count, str) and self.tone_count.isdigit():
            self.tone_count = int(self.tone_count)
        if self.tone_count not in VALID_TONE_COUNTS:
            raise ValueError(f"tone_count must be one of {VALID_TONE_COUNTS}")
        if self.bank_size > self.bank_heads * self.bank_cabs:
            raise ValueError("bank_size larger than the head x cab grid")
        if self.model not in ("desk", "full"):
            raise ValueError(f"unknown model config {self.model!r}")
        if self.eval_presets not in ("seen", "heldout", "all"):
            raise ValueError(f"eval_presets must be seen|heldout|all")

    # -- paths ---------------------------------------------------------------
    @property
    def dataset_dir(self) -> Path:
        return Path(self.out_dir) / "dataset"

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.out_dir) / "checkpoints"

    @property
    def report_dir(self) -> Path:
        return Path(self.out_dir) / "reports"

    @property
    def log_dir(self) -> Path:
        return Path(self.out_dir) / "logs"

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def load_config(path=None, env=None, **overrides) -> ExperimentConfig:
    """Config = defaults <- JSON file <- AMPT_<FIELD> env vars <- overrides."""
    doc = {}
    if path is not None:
        with open(path) as fh:
            doc.update(json.load(fh))
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    env = os.environ if env is None else env
    defaults = ExperimentConfig()
    for name in fields:
        key = ENV_PREFIX + name.upper()
        if key in env:
            doc[name] = _coerce(env[key], getattr(defaults, name))
    for name, value in overrides.items():
        if value is not None:
            doc[name] = value
    return ExperimentConfig(**doc)


# ---------------------------------------------------------------------------
# Hashing / run manifests
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def config_fingerprint(config: ExperimentConfig) -> str:
    return sha256_text(json.dumps(config.to_json(), sort_keys=True))


def write_run_manifest(
    path,
    stage: str,
    config: ExperimentConfig,
    inputs: dict,
    artifacts: dict,
    wall_seconds: float,
) -> None:
    """`inputs` and `artifacts` map paths to their recorded sha256 hashes."""
    doc = {
        "stage": stage,
        "config": config.to_json(),
        "config_fingerprint": config_fingerprint(config),
        "inputs": {str(k): v for k, v in inputs.items()},
        "artifacts": {str(k): v for k, v in artifacts.items()},
        "timings": {"wall_seconds": wall_seconds},
        "threads": config.threads,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def verify_run_manifest(path) -> list:
    """Return a list of problems (empty when every named artifact validates)."""
    with open(path) as fh:
        doc = json.load(fh)
    problems = []
    for rel, expected in {**doc.get("inputs", {}), **doc.get("artifacts", {})}.items():
        target = Path(path).parent / rel if not Path(rel).is_absolute() else Path(rel)
        if not target.exists():
            problems.append(f"missing: {rel}")
        elif sha256_file(target) != expected:
            problems.append(f"hash mismatch: {rel}")
    return problems
