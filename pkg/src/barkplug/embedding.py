"""Text embedding providers and the vector arithmetic shared by retrieval.

Two providers: a remote HTTP provider for production and a deterministic
local embedder (token-hash bag of words) that makes every retrieval and
evaluation test runnable offline.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from barkplug import remote

logger = logging.getLogger(__name__)

DEFAULT_LOCAL_DIM = 256
DEFAULT_REMOTE_DIM = 3072
DEFAULT_TEXT_CHAR_CAP = 30000


class EmbeddingError(ValueError):
    """Invalid embedding input or a provider contract violation."""


@dataclass
class EmbeddingProviderConfig:
    kind: str = "deterministic-local"  # or "remote"
    endpoint: str = ""
    model_name: str = ""
    dim: int = DEFAULT_LOCAL_DIM
    batch_size: int = 64
    max_retries: int = 3
    timeout: float = 30.0
    max_chars: int = DEFAULT_TEXT_CHAR_CAP
    max_inflight: int = 4

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")


class Embedder(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def _check_texts(texts: Sequence[str]) -> None:
    if len(texts) == 0:
        raise EmbeddingError("texts must be non-empty")
    for i, text in enumerate(texts):
        if not text.strip():
            raise EmbeddingError(f"empty text at position {i}")


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


class DeterministicLocalEmbedder:
    """Token-hash bag of words, L2-normalized.

    A pure function of the text: the same string yields a bit-identical
    unit vector across processes, and overlapping texts get nonzero
    cosine similarity.
    """

    def __init__(self, dim: int = DEFAULT_LOCAL_DIM):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        _check_texts(texts)
        return [self._embed_one(text) for text in texts]

    def _embed_one(self, text: str) -> np.ndarray:
        counts = np.zeros(self.dim, dtype=np.float64)
        for token in text.split():
            counts[_bucket(token, self.dim)] += 1.0
        return counts / np.linalg.norm(counts)


class RemoteEmbedder:
    """HTTP embedding provider.

    Wire contract: POST {"model": ..., "input": [texts...]} to the configured
    endpoint, expecting {"embeddings": [[floats...], ...]} order-aligned with
    the input. At most ``max_inflight`` requests run concurrently.
    """

    def __init__(self, config: EmbeddingProviderConfig):
        self.config = config
        self.dim = config.dim
        self._gate = threading.Semaphore(config.max_inflight)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        _check_texts(texts)
        prepared = [self._truncate(i, t) for i, t in enumerate(texts)]
        vectors: list[np.ndarray] = []
        for start in range(0, len(prepared), self.config.batch_size):
            batch = prepared[start : start + self.config.batch_size]
            vectors.extend(self._embed_batch(batch))
        return vectors

    def _truncate(self, index: int, text: str) -> str:
        if len(text) > self.config.max_chars:
            logger.warning(
                "text %d exceeds %d characters; truncating", index, self.config.max_chars
            )
            return text[: self.config.max_chars]
        return text

    def _embed_batch(self, batch: list[str]) -> list[np.ndarray]:
        with self._gate:
            body = remote.post_json(
                self.config.endpoint,
                {"model": self.config.model_name, "input": batch},
                timeout=self.config.timeout,
                max_retries=self.config.max_retries,
            )
        rows = body.get("embeddings")
        if not isinstance(rows, list) or len(rows) != len(batch):
            raise EmbeddingError(
                f"provider returned {len(rows) if isinstance(rows, list) else 'no'} "
                f"embeddings for a batch of {len(batch)}"
            )
        vectors = []
        for row in rows:
            vec = np.asarray(row, dtype=np.float64)
            if vec.ndim != 1 or vec.shape[0] != self.dim:
                raise EmbeddingError(
                    f"provider returned dim {vec.shape} but store expects {self.dim}"
                )
            if not np.all(np.isfinite(vec)):
                raise EmbeddingError("provider returned non-finite values")
            vectors.append(vec)
        return vectors


def make_embedder(config: EmbeddingProviderConfig) -> Embedder:
    if config.kind == "deterministic-local":
        return DeterministicLocalEmbedder(dim=config.dim)
    if config.kind == "remote":
        return RemoteEmbedder(config)
    raise ValueError(f"unknown embedding provider kind: {config.kind!r}")


def embed_texts(provider: Embedder, texts: Sequence[str]) -> list[np.ndarray]:
    """Embed texts through any provider; output is order-aligned with input."""
    return provider.embed(texts)


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped into [-1, 1]."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise EmbeddingError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    norm_a = np.linalg.norm(va)
    norm_b = np.linalg.norm(vb)
    if norm_a == 0.0 or norm_b == 0.0:
        raise EmbeddingError("cosine similarity is undefined for zero-norm vectors")
    if np.array_equal(va, vb):
        return 1.0  # avoid rounding drift below 1.0 for identical vectors
    value = float(np.dot(va, vb) / (norm_a * norm_b))
    return max(-1.0, min(1.0, value))
