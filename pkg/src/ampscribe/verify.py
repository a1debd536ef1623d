"""Self-contained property checks behind the `verify` CLI: normalization
exactness, per-op and full-model gradient checks, shape contracts, metric
and label oracles, the preset taxonomy, determinism, and checkpoint
round-trips. Nonzero exit on any failure."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .ampsim import GainCategory, build_preset_bank, category_counts, render
from .audio import AudioClip, log_mel, normalize_dbfs
from .datagen import random_score, rasterize_labels
from .tit import HEAD_NAMES, TitConfig, TitModel, tit_loss

TINY_TIT = TitConfig(
    n_mels=16, frames=8, feature_dim=16, n_pitches=5, heads=2, ffn=16,
    conv_channels=4, kernel=5, tone_dim=8, margin=2, seed=0,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# ---------------------------------------------------------------------------
# gradient op registry (monkeypatchable so a harness self-test can inject a
# broken op and watch verify catch it by name)
# ---------------------------------------------------------------------------


def _gc(loss_fn, params, threshold, max_coords=200):
    err = ad.grad_check(loss_fn, params, max_coords=max_coords)
    return err, err < threshold


def _check_matmul():
    rng = np.random.default_rng(1)
    a = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    return _gc(lambda: ad.mean(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), [a, b], 1e-6)


def _check_softmax():
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    t = rng.uniform(0.2, 0.8, (3, 6))
    return _gc(lambda: ad.binary_cross_entropy(ad.softmax(x), t), [x], 1e-6)


def _check_layer_norm():
    rng = np.random.default_rng(3)
    x = ad.Tensor(rng.standard_normal((3, 10)), requires_grad=True)
    g = ad.Tensor(rng.standard_normal(10), requires_grad=True)
    b = ad.Tensor(rng.standard_normal(10), requires_grad=True)
    w = rng.standard_normal((3, 10)) + 1.5
    return _gc(lambda: ad.mean(ad.mul(ad.layer_norm(x, g, b), ad.Tensor(w))), [x, g, b], 1e-6)


def _check_attention():
    rng = np.random.default_rng(4)
    attn = ad.MultiHeadAttention(rng, dim=6, heads=2)
    q = ad.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    k = ad.Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    v = ad.Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    t = rng.uniform(0.1, 0.9, (4, 6))
    params = [q, k, v] + list(attn.params("a").values())
    return _gc(lambda: ad.binary_cross_entropy(ad.sigmoid(attn(q, k, v)), t), params, 1e-4)


def _check_conv2d():
    rng = np.random.default_rng(5)
    x = ad.Tensor(rng.standard_normal((1, 8, 8)) * 0.5, requires_grad=True)
    w = ad.Tensor(rng.standard_normal((2, 1, 3, 3)) * 0.5, requires_grad=True)
    b = ad.Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
    t = rng.uniform(0.1, 0.9, (2, 8, 8))
    return _gc(lambda: ad.binary_cross_entropy(ad.sigmoid(ad.conv2d(x, w, b)), t), [x, w, b], 1e-4)


def _check_bce():
    rng = np.random.default_rng(6)
    x = ad.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    t = rng.integers(0, 2, (4, 6)).astype(float)
    return _gc(lambda: ad.binary_cross_entropy(ad.sigmoid(x), t), [x], 1e-6)


def _check_elementwise():
    rng = np.random.default_rng(7)
    x = ad.Tensor(rng.uniform(0.2, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)),
                  requires_grad=True)
    return _gc(lambda: ad.mean(ad.mul(ad.relu(x), ad.sigmoid(x))), [x], 1e-6)


GRADIENT_OPS = [
    ("matmul", _check_matmul),
    ("softmax", _check_softmax),
    ("layer_norm", _check_layer_norm),
    ("multi_head_attention", _check_attention),
    ("conv2d", _check_conv2d),
    ("binary_cross_entropy", _check_bce),
    ("elementwise", _check_elementwise),
]


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def check_normalization() -> tuple[bool, str]:
    rng = np.random.default_rng(17)
    target = 10.0 ** (-12.0 / 20.0)
    for _ in range(100):
        x = rng.standard_normal(rng.integers(3, 500)) * rng.uniform(1e-4, 8.0)
        out = normalize_dbfs(AudioClip(x, 16000), -12.0)
        if abs(np.max(np.abs(out.samples)) - target) > 1e-12:
            return False, "peak misses the -12 dBFS target"
        twice = normalize_dbfs(out, -12.0)
        if np.max(np.abs(twice.samples - out.samples)) > 1e-12:
            return False, "normalize_dbfs is not idempotent"
    return True, "100 random buffers: peak exact, idempotent"


def check_gradient_ops() -> tuple[bool, str]:
    failures = []
    for name, fn in GRADIENT_OPS:
        err, ok = fn()
        if not ok:
            failures.append(f"{name} (err={err:.2e})")
    if failures:
        return False, "gradient check failed for: " + ", ".join(failures)
    return True, f"{len(GRADIENT_OPS)} ops within tolerance"


def check_gradient_tit() -> tuple[bool, str]:
    model = TitModel(TINY_TIT)
    rng = np.random.default_rng(8)
    mel = rng.uniform(-11.5, 1.0, (1, TINY_TIT.n_mels, TINY_TIT.frames))
    tone = rng.standard_normal((1, TINY_TIT.tone_dim))
    targets = {
        n: (rng.random((1, TINY_TIT.n_pitches, TINY_TIT.frames)) > 0.8).astype(float)
        for n in HEAD_NAMES
    }
    params = list(model.params().values())
    err = ad.grad_check(
        lambda: tit_loss(model.forward_batch(mel, tone), targets), params, max_coords=8
    )
    return err < 1e-4, f"tiny-config full model max rel err {err:.2e}"


def check_shapes() -> tuple[bool, str]:
    from .tit import DESK_CONFIG, FULL_CONFIG

    full = TitModel(FULL_CONFIG)
    mel = np.full((1, 256, 100), -11.5)
    tokens = full.conv_frontend(mel)
    if tokens.shape != (100, 256, 256):
        return False, f"stage-1 tokens {tokens.shape} != (100, 256, 256)"
    rng = np.random.default_rng(9)
    out = full.forward(
        rng.uniform(-11.5, 1.0, (256, 100)), rng.standard_normal(128)
    )
    for stage in (out.first, out.second):
        for name in HEAD_NAMES:
            if stage[name].shape != (49, 100):
                return False, f"{name} head shape {stage[name].shape} != (49, 100)"
    desk = TitModel(DESK_CONFIG)
    out = desk.forward(rng.uniform(-11.5, 1.0, (64, 100)), rng.standard_normal(128))
    if out.second["frame"].shape != (49, 100):
        return False, "desk config head shape broken"
    return True, "full config: tokens [100x256x256], heads 2x3x[49x100]"


def _brute_force_matching_size(ref, est, tol) -> int:
    cands = [
        [j for j, e in enumerate(est) if r.pitch == e.pitch and abs(r.onset - e.onset) <= tol]
        for r in ref
    ]
    best = 0

    def rec(i, used):
        nonlocal best
        if i == len(cands):
            best = max(best, len(used))
            return
        if len(used) + (len(cands) - i) <= best:
            return
        rec(i + 1, used)
        for j in cands[i]:
            if j not in used:
                rec(i + 1, used | {j})

    rec(0, frozenset())
    return best


def metric_oracle_instance(rng, tol=0.05, max_notes=6):
    """Score-like reference notes (same-pitch onsets >= 2*tol apart) with
    jittered / dropped / spurious estimates."""
    from .datagen import NoteEvent

    pitches = rng.integers(40, 46, size=rng.integers(0, max_notes + 1))
    by_pitch = {}
    ref = []
    for p in pitches:
        for _ in range(20):
            t = rng.uniform(0, 2.0)
            if all(abs(t - u) >= 2 * tol + 1e-6 for u in by_pitch.get(int(p), [])):
                by_pitch.setdefault(int(p), []).append(t)
                ref.append(NoteEvent(int(p), t, t + 0.3))
                break
    est = []
    for r in ref:
        if rng.random() < 0.75:
            onset = max(0.0, r.onset + rng.uniform(-1.5, 1.5) * tol)
            est.append(NoteEvent(r.pitch, onset, onset + 0.3))
    for _ in range(rng.integers(0, 3)):
        t = rng.uniform(0, 2.0)
        est.append(NoteEvent(int(rng.integers(40, 46)), t, t + 0.3))
    return ref, est


def check_metric_oracle(n_instances: int = 300) -> tuple[bool, str]:
    from .metrics import frame_prf, greedy_note_matching

    rng = np.random.default_rng(20240601)
    for i in range(n_instances):
        ref, est = metric_oracle_instance(rng)
        greedy = len(greedy_note_matching(ref, est))
        brute = _brute_force_matching_size(ref, est, 0.05)
        if greedy != brute:
            return False, f"instance {i}: greedy {greedy} != brute force {brute}"
    for i in range(50):
        g = np.random.default_rng(i)
        ref = (g.random((5, 8)) > 0.5).astype(int)
        est = (g.random((5, 8)) > 0.5).astype(int)
        out = frame_prf(ref, est)
        tp = int(((ref == 1) & (est == 1)).sum())
        p = tp / est.sum() if est.sum() else (1.0 if ref.sum() == 0 else 0.0)
        r = tp / ref.sum() if ref.sum() else (1.0 if est.sum() == 0 else 0.0)
        if abs(out["precision"] - p) > 1e-12 or abs(out["recall"] - r) > 1e-12:
            return False, f"frame counting mismatch on seed {i}"
    return True, f"greedy == brute force on {n_instances} instances; frame counts exact"


def check_label_oracle() -> tuple[bool, str]:
    hop, sr = 256, 16000
    for seed in range(50):
        score = random_score(seed, 4.0, max_polyphony=3, note_rate=3.0)
        n_frames = 1 + int(4.0 * sr) // hop
        grids = rasterize_labels(score, hop, sr, n_frames)
        act = np.zeros((49, n_frames * hop), dtype=np.uint8)
        for note in score.notes:
            act[note.pitch - 40, int(note.onset * sr) : int(note.offset * sr)] = 1
        oracle = act[:, (np.arange(1, n_frames + 1) * hop) - 1]
        if not np.array_equal(grids.frame, oracle):
            return False, f"frame grid mismatch on seed {seed}"
    return True, "50 random scores match the per-sample activity oracle"


def check_preset_taxonomy() -> tuple[bool, str]:
    bank = build_preset_bank(16, 16, seed=7)
    counts = category_counts(bank)
    ok = (
        len(bank) == 256
        and counts[GainCategory.LOW_GAIN] == 96
        and counts[GainCategory.CRUNCH] == 64
        and counts[GainCategory.HIGH_GAIN] == 96
    )
    detail = (
        f"256 presets, split {counts[GainCategory.LOW_GAIN]}/"
        f"{counts[GainCategory.CRUNCH]}/{counts[GainCategory.HIGH_GAIN]}"
    )
    return ok, detail


def check_determinism() -> tuple[bool, str]:
    def train_once():
        rng = np.random.default_rng(0)
        params = {"w": ad.Tensor(rng.standard_normal((6, 6)), requires_grad=True)}
        opt = ad.Adam(params, lr=1e-2)
        x = rng.standard_normal((10, 6))
        t = rng.uniform(0, 1, (10, 6))
        for _ in range(30):
            opt.zero_grad()
            loss = ad.binary_cross_entropy(ad.sigmoid(ad.matmul(ad.Tensor(x), params["w"])), t)
            loss.backward()
            opt.step()
        return params["w"].data.copy()

    if not np.array_equal(train_once(), train_once()):
        return False, "Adam trajectories diverged"
    bank = build_preset_bank(2, 2, seed=4)
    rng = np.random.default_rng(5)
    clip = AudioClip(rng.uniform(-0.5, 0.5, 8000), 16000)
    a = render(clip, bank.presets[0]).samples
    b = render(clip, bank.presets[0]).samples
    if not np.array_equal(a, b):
        return False, "render is not bit-deterministic"
    return True, "training trajectory and renders bit-identical"


def check_checkpoint_roundtrip() -> tuple[bool, str]:
    import tempfile
    from pathlib import Path

    model = TitModel(TINY_TIT)
    rng = np.random.default_rng(10)
    mel = rng.uniform(-11.5, 1.0, (TINY_TIT.n_mels, TINY_TIT.frames))
    tone = rng.standard_normal(TINY_TIT.tone_dim)
    before = model.forward(mel, tone)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "tit.ckpt"
        model.save(path)
        after = TitModel.load(path).forward(mel, tone)
    for name in HEAD_NAMES:
        if not np.array_equal(before.second[name], after.second[name]):
            return False, f"{name} posteriors changed across save/load"
    return True, "save -> load -> forward is bitwise identical"


def check_logmel_shape() -> tuple[bool, str]:
    mel = log_mel(AudioClip(np.zeros(25600), 16000))
    ok = mel.values.shape == (256, 101)
    return ok, f"log-mel of 25600 samples: {mel.values.shape}"


CHECKS = [
    ("normalization_exactness", check_normalization),
    ("gradient_ops", check_gradient_ops),
    ("gradient_tit_tiny", check_gradient_tit),
    ("shape_contracts", check_shapes),
    ("metric_oracle", check_metric_oracle),
    ("label_oracle", check_label_oracle),
    ("preset_taxonomy", check_preset_taxonomy),
    ("logmel_shape", check_logmel_shape),
    ("determinism", check_determinism),
    ("checkpoint_roundtrip", check_checkpoint_roundtrip),
]


def run_checks(names=None) -> list:
    selected = [c for c in CHECKS if names is None or c[0] in names]
    results = []
    for name, fn in selected:
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, passed, detail, time.perf_counter() - t0))
    return results
