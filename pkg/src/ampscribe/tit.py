"""Tone-informed two-stage transcription transformer.

Stage 1 works per frame along the frequency axis: a conv front-end turns
each mel bin into a token, a two-layer encoder with a tone cross-attention
block in between contextualizes the tokens, a learned map folds mel bins to
pitches, and a pitch-axis decoder alternates content and tone cross
attention before the first sigmoid heads. Stage 2 runs self-attention along
time per pitch row (no tone conditioning) into the second, final heads.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .audio import HOP, AudioClip, log_mel, mel_filterbank, normalize_dbfs, standardize_log_mel
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ClipTooShort, DegenerateSignal, ShapeMismatch
from .metrics import extract_notes
from .tone import ToneEmbedding

HEAD_NAMES = ("onset", "offset", "frame")
HEAD_BIAS_INIT = -4.0  # sigmoid prior ~0.018 for sparse piano-roll targets


@dataclass(frozen=True)
class TitConfig:
    n_mels: int = 256
    frames: int = 100  # segment length T
    feature_dim: int = 256  # F
    n_pitches: int = 49  # P
    pitch_lo: int = 40
    heads: int = 4
    ffn: int = 256
    conv_channels: int = 4
    kernel: int = 5
    tone_dim: int = 128
    margin: int = 2  # conv context: +-margin frames around each frame
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.feature_dim % self.heads:
            raise ShapeMismatch(f"F={self.feature_dim} not divisible by {self.heads} heads")


FULL_CONFIG = TitConfig()
DESK_CONFIG = TitConfig(n_mels=64, feature_dim=64, ffn=64, dtype="float32")

MODEL_CONFIGS = {"full": FULL_CONFIG, "desk": DESK_CONFIG}


@dataclass(frozen=True)
class TitOutput:
    first: dict  # {"onset"/"offset"/"frame": [P x T] in (0,1)}
    second: dict


class _FeedForward:
    def __init__(self, rng, dim, hidden, dtype):
        self.lin1 = ad.Linear(rng, dim, hidden, dtype)
        self.lin2 = ad.Linear(rng, hidden, dim, dtype)

    def __call__(self, x):
        return self.lin2(ad.relu(self.lin1(x)))

    def params(self, prefix):
        return {**self.lin1.params(f"{prefix}.1"), **self.lin2.params(f"{prefix}.2")}


class _SelfBlock:
    """Post-LN transformer block: x = LN(x + attn(x)); x = LN(x + ffn(x))."""

    def __init__(self, rng, dim, heads, ffn, dtype):
        self.attn = ad.MultiHeadAttention(rng, dim, heads, dtype)
        self.ffn = _FeedForward(rng, dim, ffn, dtype)
        self.ln1_g = ad.zeros_param((dim,), dtype, 1.0)
        self.ln1_b = ad.zeros_param((dim,), dtype)
        self.ln2_g = ad.zeros_param((dim,), dtype, 1.0)
        self.ln2_b = ad.zeros_param((dim,), dtype)

    def __call__(self, x):
        x = ad.layer_norm(ad.add(x, self.attn(x, x, x)), self.ln1_g, self.ln1_b)
        return ad.layer_norm(ad.add(x, self.ffn(x)), self.ln2_g, self.ln2_b)

    def params(self, prefix):
        out = self.attn.params(f"{prefix}.attn")
        out.update(self.ffn.params(f"{prefix}.ffn"))
        out.update({
            f"{prefix}.ln1.g": self.ln1_g, f"{prefix}.ln1.b": self.ln1_b,
            f"{prefix}.ln2.g": self.ln2_g, f"{prefix}.ln2.b": self.ln2_b,
        })
        return out


class _CrossBlock:
    """Post-LN block whose attention queries come from x, keys/values from mem."""

    def __init__(self, rng, dim, heads, ffn, dtype):
        self.attn = ad.MultiHeadAttention(rng, dim, heads, dtype)
        self.ffn = _FeedForward(rng, dim, ffn, dtype)
        self.ln1_g = ad.zeros_param((dim,), dtype, 1.0)
        self.ln1_b = ad.zeros_param((dim,), dtype)
        self.ln2_g = ad.zeros_param((dim,), dtype, 1.0)
        self.ln2_b = ad.zeros_param((dim,), dtype)

    def __call__(self, x, mem):
        x = ad.layer_norm(ad.add(x, self.attn(x, mem, mem)), self.ln1_g, self.ln1_b)
        return ad.layer_norm(ad.add(x, self.ffn(x)), self.ln2_g, self.ln2_b)

    def params(self, prefix):
        out = self.attn.params(f"{prefix}.attn")
        out.update(self.ffn.params(f"{prefix}.ffn"))
        out.update({
            f"{prefix}.ln1.g": self.ln1_g, f"{prefix}.ln1.b": self.ln1_b,
            f"{prefix}.ln2.g": self.ln2_g, f"{prefix}.ln2.b": self.ln2_b,
        })
        return out


class _ToneContextBlock:
    """Single-query tone cross-attention over the tokens.

    The projected tone token attends over the token sequence, yielding one
    context vector whose learned projection is broadcast-added to every
    token (sequence length is preserved), then LN + FFN as usual.
    """

    def __init__(self, rng, dim, heads, ffn, dtype):
        self.attn = ad.MultiHeadAttention(rng, dim, heads, dtype)
        self.proj = ad.Linear(rng, dim, dim, dtype)
        self.ffn = _FeedForward(rng, dim, ffn, dtype)
        self.ln1_g = ad.zeros_param((dim,), dtype, 1.0)
        self.ln1_b = ad.zeros_param((dim,), dtype)
        self.ln2_g = ad.zeros_param((dim,), dtype, 1.0)
        self.ln2_b = ad.zeros_param((dim,), dtype)

    def __call__(self, tokens, tone_tok):
        ctx = self.attn(tone_tok, tokens, tokens)  # [B, 1, F]
        spread = ad.expand(self.proj(ctx), 1, tokens.shape[1])
        tokens = ad.layer_norm(ad.add(tokens, spread), self.ln1_g, self.ln1_b)
        return ad.layer_norm(ad.add(tokens, self.ffn(tokens)), self.ln2_g, self.ln2_b)

    def params(self, prefix):
        out = self.attn.params(f"{prefix}.attn")
        out.update(self.proj.params(f"{prefix}.proj"))
        out.update(self.ffn.params(f"{prefix}.ffn"))
        out.update({
            f"{prefix}.ln1.g": self.ln1_g, f"{prefix}.ln1.b": self.ln1_b,
            f"{prefix}.ln2.g": self.ln2_g, f"{prefix}.ln2.b": self.ln2_b,
        })
        return out


class _Heads:
    def __init__(self, rng, dim, dtype):
        self.lins = {name: ad.Linear(rng, dim, 1, dtype) for name in HEAD_NAMES}
        for lin in self.lins.values():
            lin.b.data[:] = HEAD_BIAS_INIT

    def __call__(self, feats, bsz, t, p):
        # feats [B*T, P, F] -> three [B, P, T] sigmoid maps
        out = {}
        for name, lin in self.lins.items():
            y = ad.reshape(lin(feats), (bsz, t, p))
            out[name] = ad.sigmoid(ad.permute(y, (0, 2, 1)))
        return out

    def params(self, prefix):
        out = {}
        for name, lin in self.lins.items():
            out.update(lin.params(f"{prefix}.{name}"))
        return out


class TitModel:
    def __init__(self, config: TitConfig):
        self.config = config
        c = config
        dtype = np.dtype(c.dtype)
        rng = np.random.default_rng(c.seed)
        win = 2 * c.margin + 1
        self.conv_w = ad.glorot(
            rng, c.kernel * c.kernel, c.conv_channels * c.kernel * c.kernel,
            (c.conv_channels, 1, c.kernel, c.kernel), dtype,
        )
        self.conv_b = ad.zeros_param((c.conv_channels,), dtype)
        self.frontend_proj = ad.Linear(rng, c.conv_channels * win, c.feature_dim, dtype)
        self.freq_pos = ad.normal_param(rng, (c.n_mels, c.feature_dim), 0.02, dtype)
        self.tone_proj = ad.Linear(rng, c.tone_dim, c.feature_dim, dtype)
        self.enc1 = _SelfBlock(rng, c.feature_dim, c.heads, c.ffn, dtype)
        self.tone_block = _ToneContextBlock(rng, c.feature_dim, c.heads, c.ffn, dtype)
        self.enc2 = _SelfBlock(rng, c.feature_dim, c.heads, c.ffn, dtype)
        self.freq2pitch = ad.glorot(
            rng, c.n_mels, c.n_pitches, (c.n_mels, c.n_pitches), dtype
        )
        self.pitch_pos = ad.normal_param(rng, (c.n_pitches, c.feature_dim), 0.02, dtype)
        self.dec_content = _CrossBlock(rng, c.feature_dim, c.heads, c.ffn, dtype)
        self.dec_tone = _CrossBlock(rng, c.feature_dim, c.heads, c.ffn, dtype)
        self.heads1 = _Heads(rng, c.feature_dim, dtype)
        self.time_pos = ad.normal_param(rng, (c.frames, c.feature_dim), 0.02, dtype)
        self.time1 = _SelfBlock(rng, c.feature_dim, c.heads, c.ffn, dtype)
        self.time2 = _SelfBlock(rng, c.feature_dim, c.heads, c.ffn, dtype)
        self.heads2 = _Heads(rng, c.feature_dim, dtype)

    # -- parameters -----------------------------------------------------------
    def params(self) -> dict:
        out = {
            "frontend.conv.w": self.conv_w,
            "frontend.conv.b": self.conv_b,
            "freq_pos": self.freq_pos,
            "tone_proj.w": self.tone_proj.w,
            "tone_proj.b": self.tone_proj.b,
            "freq2pitch.w": self.freq2pitch,
            "pitch_pos": self.pitch_pos,
            "time_pos": self.time_pos,
        }
        out.update(self.frontend_proj.params("frontend.proj"))
        out.update(self.enc1.params("freq_enc.1"))
        out.update(self.tone_block.params("freq_enc.tone"))
        out.update(self.enc2.params("freq_enc.2"))
        out.update(self.dec_content.params("pitch_dec.content"))
        out.update(self.dec_tone.params("pitch_dec.tone"))
        out.update(self.heads1.params("heads.first"))
        out.update(self.time1.params("time_enc.1"))
        out.update(self.time2.params("time_enc.2"))
        out.update(self.heads2.params("heads.second"))
        return out

    def save(self, path):
        save_checkpoint(
            path, "tit", asdict(self.config),
            {k: v.data for k, v in self.params().items()},
        )

    @classmethod
    def load(cls, path) -> "TitModel":
        component, config, arrays = load_checkpoint(path)
        if component != "tit":
            raise ValueError(f"{path} holds a {component!r} checkpoint")
        model = cls(TitConfig(**config))
        expected = model.params()
        missing = set(expected) ^ set(arrays)
        if missing:
            raise ValueError(f"{path}: parameter names do not match config: {sorted(missing)}")
        for name, tensor in expected.items():
            if tuple(arrays[name].shape) != tensor.shape:
                raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, want {tensor.shape}")
            tensor.data = arrays[name].astype(tensor.data.dtype)
        return model

    # -- stage 1 ----------------------------------------------------------------
    def conv_frontend(self, mels: np.ndarray) -> ad.Tensor:
        """[B, n_mels, T] log-mel -> frequency tokens [B*T, n_mels, F].

        Each frame's +-margin context window goes through the conv block;
        per-bin channel features are flattened, linearly mapped to F, and
        frequency positional embeddings are added.
        """
        c = self.config
        mels = np.asarray(mels)
        if mels.ndim != 3 or mels.shape[1] != c.n_mels or mels.shape[2] != c.frames:
            raise ShapeMismatch(
                f"conv_frontend wants [B, {c.n_mels}, {c.frames}], got {mels.shape}"
            )
        bsz = mels.shape[0]
        win = 2 * c.margin + 1
        x = standardize_log_mel(mels).astype(np.dtype(c.dtype))
        padded = np.pad(x, ((0, 0), (0, 0), (c.margin, c.margin)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, win, axis=2)
        # [B, M, T, W] -> [B*T, 1, M, W]
        windows = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(
            bsz * c.frames, 1, c.n_mels, win
        )
        h = ad.conv2d(ad.Tensor(windows), self.conv_w, self.conv_b)
        h = ad.permute(h, (0, 2, 1, 3))  # [B*T, M, C, W]
        h = ad.reshape(h, (bsz * c.frames, c.n_mels, c.conv_channels * win))
        tokens = self.frontend_proj(h)
        return ad.add_bias(tokens, self.freq_pos)

    def _tone_token(self, tones, bsz: int) -> ad.Tensor:
        """[B, D] tone embeddings -> [B*T, 1, F] projected tone tokens."""
        c = self.config
        if isinstance(tones, ad.Tensor):
            t = tones
        else:
            t = ad.Tensor(np.asarray(tones, dtype=np.dtype(c.dtype)))
        if t.shape != (bsz, c.tone_dim):
            raise ShapeMismatch(f"tone batch must be [{bsz}, {c.tone_dim}], got {t.shape}")
        tok = self.tone_proj(t)  # [B, F]
        tok = ad.expand(ad.reshape(tok, (bsz, 1, c.feature_dim)), 1, c.frames)
        return ad.reshape(tok, (bsz * c.frames, 1, c.feature_dim))

    def freq_encoder(self, tokens: ad.Tensor, tone_tok: ad.Tensor) -> ad.Tensor:
        """self-attention -> tone cross-attention -> self-attention."""
        tokens = self.enc1(tokens)
        tokens = self.tone_block(tokens, tone_tok)
        return self.enc2(tokens)

    def freq_to_pitch(self, tokens: ad.Tensor) -> ad.Tensor:
        """Learned linear fold of the token axis: n_mels -> n_pitches (no bias)."""
        folded = ad.matmul(ad.permute(tokens, (0, 2, 1)), self.freq2pitch)
        return ad.permute(folded, (0, 2, 1))  # [B*T, P, F]

    def pitch_decoder(self, memory: ad.Tensor, tone_tok: ad.Tensor) -> ad.Tensor:
        """Pitch-position queries; content keys then tone keys, alternating."""
        c = self.config
        queries = ad.expand(
            ad.reshape(self.pitch_pos, (1, c.n_pitches, c.feature_dim)), 0, memory.shape[0]
        )
        x = self.dec_content(queries, memory)
        return self.dec_tone(x, tone_tok)

    # -- stage 2 ----------------------------------------------------------------
    def time_encoder(self, feats: ad.Tensor, bsz: int) -> dict:
        """Per pitch row, self-attention over time (no tone anywhere here)."""
        c = self.config
        x = ad.reshape(feats, (bsz, c.frames, c.n_pitches, c.feature_dim))
        x = ad.permute(x, (0, 2, 1, 3))
        x = ad.reshape(x, (bsz * c.n_pitches, c.frames, c.feature_dim))
        x = ad.add_bias(x, self.time_pos)
        x = self.time2(self.time1(x))
        out = {}
        for name, lin in self.heads2.lins.items():
            y = ad.reshape(lin(x), (bsz, c.n_pitches, c.frames))
            out[name] = ad.sigmoid(y)
        return out

    # -- full forward -------------------------------------------------------------
    def forward_batch(self, mels: np.ndarray, tones) -> dict:
        """Returns {"first": {head: [B,P,T]}, "second": {head: [B,P,T]}} tensors."""
        c = self.config
        bsz = np.asarray(mels).shape[0]
        tone_tok = self._tone_token(tones, bsz)
        tokens = self.conv_frontend(mels)
        tokens = self.freq_encoder(tokens, tone_tok)
        memory = self.freq_to_pitch(tokens)
        feats = self.pitch_decoder(memory, tone_tok)
        first = self.heads1(feats, bsz, c.frames, c.n_pitches)
        second = self.time_encoder(feats, bsz)
        return {"first": first, "second": second}

    def forward(self, mel: np.ndarray, tone) -> TitOutput:
        """Single segment [n_mels, T] + tone embedding -> TitOutput of arrays."""
        vec = tone.vector if isinstance(tone, ToneEmbedding) else np.asarray(tone)
        with ad.no_grad():
            out = self.forward_batch(np.asarray(mel)[None], vec[None])
        return TitOutput(
            first={k: v.data[0].copy() for k, v in out["first"].items()},
            second={k: v.data[0].copy() for k, v in out["second"].items()},
        )


def tit_loss(out: dict, targets: dict) -> ad.Tensor:
    """Sum of six BCE terms: onset/offset/frame for both stages, equal weight.

    `targets` maps head name -> [B, P, T] binary arrays.
    """
    total = None
    for stage in ("first", "second"):
        for name in HEAD_NAMES:
            pred = out[stage][name]
            tgt = np.asarray(targets[name], dtype=pred.data.dtype)
            term = ad.binary_cross_entropy(pred, tgt)
            total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptionResult:
    posteriorgrams: dict  # {"onset"/"offset"/"frame": [P x n_frames]}
    notes: tuple


def transcribe(
    clip: AudioClip,
    model: TitModel,
    encoder,
    onset_threshold: float = 0.5,
    frame_threshold: float = 0.5,
    normalize: bool = False,
    batch_windows: int = 16,
) -> TranscriptionResult:
    """Stitched second-output posteriorgrams plus decoded notes.

    The tone embedding is the renormalized mean over consecutive 4 s windows
    of the clip itself. Mel segments are T frames with 50% overlap and
    mean-aggregated posteriors; `normalize` applies -12 dBFS peak
    normalization per audio segment (matching the training-time toggle).
    """
    from .tone import MIN_CLIP_SECONDS  # local import to avoid cycle at load

    c = model.config
    sr = clip.sample_rate
    if clip.duration < MIN_CLIP_SECONDS:
        raise ClipTooShort(
            f"transcription needs >= {MIN_CLIP_SECONDS:.0f} s for tone extraction, "
            f"got {clip.duration:.2f} s"
        )
    tone = encoder.embed_clip_windows(clip)
    n_frames = 1 + len(clip) // HOP
    seg_len = c.frames * HOP
    frame_starts = list(range(0, max(n_frames - c.frames, 0) + 1, c.frames // 2))
    if frame_starts[-1] + c.frames < n_frames:
        frame_starts.append(n_frames - c.frames)
    fb = mel_filterbank(c.n_mels, sr, fft_len=2048)
    mels = []
    for f0 in frame_starts:
        s = f0 * HOP
        seg = clip.samples[s : s + seg_len]
        if seg.size < seg_len:
            seg = np.pad(seg, (0, seg_len - seg.size))
        seg_clip = AudioClip(seg, sr)
        if normalize:
            try:
                seg_clip = normalize_dbfs(seg_clip, -12.0)
            except DegenerateSignal:
                pass
        mels.append(log_mel(seg_clip, n_mels=c.n_mels, filterbank=fb).values[:, : c.frames])
    mels = np.stack(mels)
    acc = {name: np.zeros((c.n_pitches, n_frames)) for name in HEAD_NAMES}
    count = np.zeros(n_frames)
    tone_batchvec = np.repeat(tone.vector[None], len(frame_starts), axis=0)
    with ad.no_grad():
        for i in range(0, len(frame_starts), batch_windows):
            out = model.forward_batch(mels[i : i + batch_windows], tone_batchvec[i : i + batch_windows])
            for j, t0 in enumerate(frame_starts[i : i + batch_windows]):
                hi = min(t0 + c.frames, n_frames)
                for name in HEAD_NAMES:
                    acc[name][:, t0:hi] += out["second"][name].data[j][:, : hi - t0]
                count[t0:hi] += 1
    count[count == 0] = 1
    posteriors = {name: acc[name] / count for name in HEAD_NAMES}
    notes = extract_notes(
        posteriors["onset"],
        posteriors["frame"],
        onset_threshold,
        frame_threshold,
        hop=HOP,
        sample_rate=sr,
        pitch_lo=c.pitch_lo,
    )
    return TranscriptionResult(posteriorgrams=posteriors, notes=tuple(notes))
