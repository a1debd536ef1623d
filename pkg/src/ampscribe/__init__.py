"""ampscribe: tone-informed transcription of amplifier-rendered guitar audio.

Desk-scale pipeline: synthetic DI + amp rendering for data, a contrastive
tone encoder for conditioning embeddings, a two-stage transformer for
onset/offset/frame prediction, and note/frame evaluation metrics.
"""

__version__ = "0.1.0"
