"""Contrastive tone encoder: a small conv net mapping a 3-5 s log-mel clip
to a unit-norm embedding, trained with NT-Xent over same-preset pairs.

Pairs share an amplifier preset but differ in playing content; training
pushes same-tone clips together and different-tone clips apart on the
cosine sphere.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .audio import (
    LOG_FLOOR,
    MelSpectrogram,
    log_mel,
    mel_filterbank,
    normalize_dbfs,
    standardize_log_mel,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import DI_TONE_ID, RenderedDataset
from .errors import (
    BatchTooSmall,
    DegenerateEmbedding,
    DegenerateSignal,
    EmptySignal,
    InsufficientData,
)

TONE_WINDOW_SECONDS = 4.0
MIN_CLIP_SECONDS = 3.0
MAX_CLIP_SECONDS = 5.0
DEFAULT_TEMPERATURE = 0.1


@dataclass(frozen=True)
class ToneEmbedding:
    vector: np.ndarray
    source_preset: str | None = None

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise ValueError("embedding must be a finite 1-D vector")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.size


def cosine_sim(a: ToneEmbedding, b: ToneEmbedding) -> float:
    na = np.linalg.norm(a.vector)
    nb = np.linalg.norm(b.vector)
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbedding("cosine similarity of a zero vector is undefined")
    return float(a.vector @ b.vector / (na * nb))


@dataclass(frozen=True)
class ToneEncoderConfig:
    n_mels: int = 256
    embed_dim: int = 128
    channels: tuple = (8, 16)
    kernel: int = 5
    hidden: int = 128
    sample_rate: int = 16000
    hop: int = 256
    seed: int = 0
    dtype: str = "float64"


@dataclass(frozen=True)
class PairBatch:
    """2N mel windows; items (2i, 2i+1) share a preset but not a clip."""

    mels: np.ndarray  # [2N, n_mels, frames]
    preset_ids: tuple
    clip_ids: tuple

    def __post_init__(self):
        n = self.mels.shape[0]
        if n < 4 or n % 2:
            raise BatchTooSmall(f"need at least 2 pairs (got {n} items)")
        for i in range(0, n, 2):
            if self.preset_ids[i] != self.preset_ids[i + 1]:
                raise ValueError(f"items {i},{i+1} are not a same-preset pair")
            if self.clip_ids[i] == self.clip_ids[i + 1]:
                raise ValueError(f"items {i},{i+1} share clip {self.clip_ids[i]}")

    @property
    def n_pairs(self) -> int:
        return self.mels.shape[0] // 2


class ToneEncoder:
    """conv -> pool -> conv -> pool -> temporal mean -> 2-layer projection -> L2."""

    def __init__(self, config: ToneEncoderConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        c1, c2 = config.channels
        k = config.kernel
        self.conv1_w = ad.glorot(rng, k * k, c1 * k * k, (c1, 1, k, k), dtype)
        self.conv1_b = ad.zeros_param((c1,), dtype)
        self.conv2_w = ad.glorot(rng, c1 * k * k, c2 * k * k, (c2, c1, k, k), dtype)
        self.conv2_b = ad.zeros_param((c2,), dtype)
        flat = c2 * (config.n_mels // 4)
        self.fc1 = ad.Linear(rng, flat, config.hidden, dtype)
        self.fc2 = ad.Linear(rng, config.hidden, config.embed_dim, dtype)
        self._filterbank = None

    # -- parameters ----------------------------------------------------------
    def params(self) -> dict:
        out = {
            "conv1.w": self.conv1_w,
            "conv1.b": self.conv1_b,
            "conv2.w": self.conv2_w,
            "conv2.b": self.conv2_b,
        }
        out.update(self.fc1.params("fc1"))
        out.update(self.fc2.params("fc2"))
        return out

    def save(self, path):
        save_checkpoint(
            path,
            "tone_encoder",
            asdict(self.config),
            {k: v.data for k, v in self.params().items()},
        )

    @classmethod
    def load(cls, path) -> "ToneEncoder":
        component, config, arrays = load_checkpoint(path)
        if component != "tone_encoder":
            raise ValueError(f"{path} holds a {component!r} checkpoint")
        config["channels"] = tuple(config["channels"])
        enc = cls(ToneEncoderConfig(**config))
        for name, tensor in enc.params().items():
            tensor.data = arrays[name].astype(tensor.data.dtype)
        return enc

    # -- forward --------------------------------------------------------------
    def forward_batch(self, mels: np.ndarray) -> ad.Tensor:
        """[B, n_mels, frames] log-mel values -> [B, embed_dim] unit vectors."""
        dtype = np.dtype(self.config.dtype)
        x = standardize_log_mel(np.asarray(mels)).astype(dtype)
        # fixed 2x time decimation: tone is stationary, halves conv cost
        t2 = x.shape[2] // 2
        if t2 >= 8:
            x = x[:, :, : t2 * 2].reshape(x.shape[0], x.shape[1], t2, 2).mean(axis=3)
        h = ad.Tensor(x[:, None, :, :])  # [B, 1, mels, frames]
        h = ad.relu(ad.conv2d(h, self.conv1_w, self.conv1_b))
        h = ad.avg_pool2d(h, 2)
        h = ad.relu(ad.conv2d(h, self.conv2_w, self.conv2_b))
        h = ad.avg_pool2d(h, 2)
        h = ad.mean(h, axis=3)  # temporal pooling -> [B, C2, mels//4]
        h = ad.reshape(h, (h.shape[0], h.shape[1] * h.shape[2]))
        h = ad.relu(self.fc1(h))
        return ad.l2_normalize(self.fc2(h))

    def _window_frames(self, seconds: float) -> int:
        return 1 + int(seconds * self.config.sample_rate) // self.config.hop

    def encode(self, mel: MelSpectrogram, source_preset: str | None = None) -> ToneEmbedding:
        """Embed one 3-5 s clip; shorter clips are padded (as silence) with a
        warning, longer ones are rejected."""
        if mel.n_frames == 0:
            raise EmptySignal("cannot encode an empty mel clip")
        if mel.n_mels != self.config.n_mels:
            raise ValueError(f"encoder expects {self.config.n_mels} mel bins, got {mel.n_mels}")
        values = mel.values
        min_frames = self._window_frames(MIN_CLIP_SECONDS)
        max_frames = self._window_frames(MAX_CLIP_SECONDS)
        if values.shape[1] > max_frames:
            raise ValueError(
                f"tone clips must be at most {MAX_CLIP_SECONDS:.0f} s "
                f"({max_frames} frames), got {values.shape[1]}"
            )
        if values.shape[1] < min_frames:
            warnings.warn(
                f"tone clip of {values.shape[1]} frames padded to {min_frames}",
                stacklevel=2,
            )
            pad = np.full((mel.n_mels, min_frames - values.shape[1]), np.log(LOG_FLOOR))
            values = np.concatenate([values, pad], axis=1)
        with ad.no_grad():
            out = self.forward_batch(values[None])
        return ToneEmbedding(out.data[0].astype(np.float64), source_preset)

    # -- audio conveniences -----------------------------------------------------
    def mel_of(self, clip) -> MelSpectrogram:
        if self._filterbank is None:
            self._filterbank = mel_filterbank(
                self.config.n_mels, self.config.sample_rate, fft_len=2048
            )
        return log_mel(
            clip, n_mels=self.config.n_mels, hop=self.config.hop,
            filterbank=self._filterbank,
        )

    def embed_clip_windows(self, clip) -> ToneEmbedding:
        """Mean of consecutive 4 s window embeddings, renormalized.

        Windows are peak-normalized to -12 dBFS before the mel transform so
        the embedding reflects spectral shape, not level.
        """
        sr = self.config.sample_rate
        win = int(TONE_WINDOW_SECONDS * sr)
        n = len(clip)
        starts = list(range(0, max(n - win, 0) + 1, win))
        vecs = []
        for s in starts:
            piece = type(clip)(clip.samples[s : s + win], sr)
            try:
                piece = normalize_dbfs(piece, -12.0)
            except DegenerateSignal:
                pass  # silent window: embed as-is
            vecs.append(self.encode(self.mel_of(piece)).vector)
        if not vecs:  # clip shorter than one window: single padded encode
            piece = clip
            try:
                piece = normalize_dbfs(piece, -12.0)
            except DegenerateSignal:
                pass
            vecs.append(self.encode(self.mel_of(piece)).vector)
        mean_vec = np.mean(vecs, axis=0)
        norm = np.linalg.norm(mean_vec)
        if norm > 0:
            mean_vec = mean_vec / norm
        return ToneEmbedding(mean_vec)


# ---------------------------------------------------------------------------
# NT-Xent
# ---------------------------------------------------------------------------


def nt_xent_loss(embeddings: ad.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> ad.Tensor:
    """Normalized-temperature cross entropy over cosine similarities.

    `embeddings` is [2N, D] with rows L2-normalized and (2i, 2i+1) positive
    pairs; self-similarities are excluded from the softmax.
    """
    n = embeddings.shape[0]
    if n < 4 or n % 2:
        raise BatchTooSmall(f"NT-Xent needs 2N items with N >= 2, got {n}")
    sim = ad.matmul(embeddings, ad.permute(embeddings, (1, 0)))
    sim = ad.scale(sim, 1.0 / temperature)
    mask = np.zeros((n, n), dtype=embeddings.data.dtype)
    np.fill_diagonal(mask, -1e9)
    logp = ad.log_softmax(ad.add(sim, ad.Tensor(mask)), axis=-1)
    pos = np.zeros((n, n), dtype=embeddings.data.dtype)
    idx = np.arange(n)
    pos[idx, idx ^ 1] = 1.0  # 2i <-> 2i+1
    return ad.scale(ad.mean(ad.mul(logp, ad.Tensor(pos))), -float(n))


# ---------------------------------------------------------------------------
# Pair sampling and retrieval evaluation
# ---------------------------------------------------------------------------


def _tone_window_mel(encoder: ToneEncoder, dataset: RenderedDataset, entry, preset_id, rng):
    """Mel of a random 4 s window of the wet clip, peak-normalized to -12 dBFS."""
    clip = dataset.wet_clip(entry, preset_id)
    win = int(TONE_WINDOW_SECONDS * dataset.sample_rate)
    start = int(rng.integers(0, max(len(clip) - win, 0) + 1))
    piece = type(clip)(clip.samples[start : start + win], dataset.sample_rate)
    try:
        piece = normalize_dbfs(piece, -12.0)
    except DegenerateSignal:
        pass
    return encoder.mel_of(piece).values


def sample_pairs(
    dataset: RenderedDataset,
    encoder: ToneEncoder,
    n_pairs: int,
    seed: int,
    split: str = "train",
    preset_ids=None,
) -> PairBatch:
    """N presets without replacement; per preset, two different-clip windows."""
    rng = np.random.default_rng(seed)
    entries = dataset.entries(split)
    pool = list(preset_ids) if preset_ids is not None else dataset.seen_presets
    clip_ids = sorted({e.clip_id for e in entries})
    if len(pool) < max(2, n_pairs):
        raise InsufficientData(f"need {max(2, n_pairs)} presets, have {len(pool)}")
    if len(clip_ids) < 2:
        raise InsufficientData("need at least 2 distinct clips per preset")
    if n_pairs < 2:
        raise BatchTooSmall("need N >= 2 pairs")
    chosen = rng.choice(len(pool), size=n_pairs, replace=False)
    by_clip = {}
    for e in entries:
        by_clip.setdefault(e.clip_id, []).append(e)
    mels, presets, clips = [], [], []
    for pi in chosen:
        preset = pool[pi]
        a, b = rng.choice(len(clip_ids), size=2, replace=False)
        for ci in (a, b):
            options = by_clip[clip_ids[ci]]
            entry = options[int(rng.integers(0, len(options)))]
            mels.append(_tone_window_mel(encoder, dataset, entry, preset, rng))
            presets.append(preset)
            clips.append(entry.clip_id)
    return PairBatch(np.stack(mels), tuple(presets), tuple(clips))


def preset_retrieval_eval(encoder_fn, support, query) -> float:
    """Nearest-centroid preset classification accuracy.

    `support` and `query` are lists of (preset_id, embedding vector) built by
    `encoder_fn` upstream, or (preset_id, mel) pairs if `encoder_fn` is an
    encoder; centroids come from the support split only.
    """
    def vec(item):
        pid, payload = item
        if isinstance(payload, np.ndarray) and payload.ndim == 1:
            return pid, payload
        return pid, encoder_fn.encode(payload).vector

    sup = [vec(i) for i in support]
    qry = [vec(i) for i in query]
    if not sup or not qry:
        raise InsufficientData("empty support or query set")
    centroids = {}
    for pid, v in sup:
        centroids.setdefault(pid, []).append(v)
    if len(centroids) < 2:
        raise InsufficientData("retrieval needs at least 2 presets")
    ids = sorted(centroids)
    mat = np.stack([np.mean(centroids[p], axis=0) for p in ids])
    mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    hits = 0
    for pid, v in qry:
        sims = mat @ (v / np.linalg.norm(v))
        if ids[int(np.argmax(sims))] == pid:
            hits += 1
    return hits / len(qry)


def pair_similarity_stats(encoder: ToneEncoder, batch: PairBatch) -> tuple[float, float]:
    """(mean positive-pair cosine, mean negative-pair cosine) on a PairBatch."""
    with ad.no_grad():
        z = encoder.forward_batch(batch.mels).data
    sims = z @ z.T
    n = z.shape[0]
    idx = np.arange(n)
    pos = sims[idx, idx ^ 1]
    neg_mask = np.ones((n, n), dtype=bool)
    neg_mask[idx, idx] = False
    neg_mask[idx, idx ^ 1] = False
    same_preset = np.equal.outer(batch.preset_ids, batch.preset_ids)
    neg_mask &= ~same_preset
    return float(pos.mean()), float(sims[neg_mask].mean())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_tone_encoder(
    dataset: RenderedDataset,
    config: ToneEncoderConfig,
    steps: int,
    n_pairs: int = 16,
    lr: float = 1e-3,
    temperature: float = DEFAULT_TEMPERATURE,
    seed: int = 0,
    warmup: int = 50,
    log_every: int = 10,
):
    """Contrastive training; returns (encoder, list of (step, loss))."""
    encoder = ToneEncoder(config)
    opt = ad.Adam(encoder.params(), lr=lr)
    losses = []
    for step in range(steps):
        batch = sample_pairs(dataset, encoder, n_pairs, seed=seed * 1_000_003 + step)
        opt.zero_grad()
        z = encoder.forward_batch(batch.mels)
        loss = nt_xent_loss(z, temperature)
        loss.backward()
        opt.step(lr_scale=min(1.0, (step + 1) / max(warmup, 1)))
        if step % log_every == 0 or step == steps - 1:
            losses.append((step, loss.item()))
    return encoder, losses
