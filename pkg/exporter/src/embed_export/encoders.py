"""Sentence encoders behind one interface: encode(texts) -> float32 matrix.

``hash-v1`` is a pinned, dependency-free feature-hashing encoder: fully
deterministic across platforms and runs, which makes exports byte-identical
and suitable for tests and CI. ``sbert:<model>`` wraps sentence-transformers
when that extra is installed.
"""

from __future__ import annotations

import hashlib

import numpy as np


class EncoderError(RuntimeError):
    pass


class HashEncoder:
    """Feature-hashing text encoder, version-pinned for reproducibility.

    Each whitespace token hashes to a (dimension, sign) bucket; rows are
    L2-normalized. Empty texts get a deterministic non-zero sentinel vector
    so every output row satisfies the engine's non-zero-norm invariant.
    """

    name = "hash-v1"

    def __init__(self, dim: int = 1024):
        if dim < 1:
            raise EncoderError(f"dim must be >= 1, got {dim}")
        self.dim = dim

    def _token_bucket(self, token: str) -> tuple[int, float]:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=9, key=b"hash-v1").digest()
        index = int.from_bytes(digest[:8], "little") % self.dim
        sign = 1.0 if digest[8] & 1 else -1.0
        return index, sign

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            tokens = text.lower().split()
            if not tokens:
                tokens = ["<empty>"]
            for token in tokens:
                index, sign = self._token_bucket(token)
                out[row, index] += sign
            norm = np.linalg.norm(out[row])
            if norm == 0.0:  # tokens cancelled pairwise; fall back to the sentinel
                index, sign = self._token_bucket("<empty>")
                out[row, index] = sign
                norm = 1.0
            out[row] /= norm
        return out.astype(np.float32)


class SbertEncoder:
    """sentence-transformers wrapper (optional dependency)."""

    def __init__(self, model_name: str, batch_size: int = 32):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise EncoderError(
                "sentence-transformers is not installed (pip install embed-export[sbert])"
            ) from exc
        self.name = f"sbert:{model_name}"
        self.batch_size = batch_size
        self._model = SentenceTransformer(model_name)
        self.dim = self._model.get_sentence_embedding_dimension()

    def encode(self, texts: list[str]) -> np.ndarray:
        return np.asarray(
            self._model.encode(texts, batch_size=self.batch_size, convert_to_numpy=True),
            dtype=np.float32,
        )


def get_encoder(name: str, dim: int = 1024, batch_size: int = 32):
    if name == "hash-v1":
        return HashEncoder(dim=dim)
    if name.startswith("sbert:"):
        return SbertEncoder(name.split(":", 1)[1], batch_size=batch_size)
    raise EncoderError(f"unknown encoder {name!r} (expected 'hash-v1' or 'sbert:<model>')")
