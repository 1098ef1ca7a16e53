"""Persistent vector store with exact linear-scan retrieval.

Search methods: similarity-score-threshold (inclusive >=), top-k, and
maximal marginal relevance. The store is deliberately index-free — at the
corpus scales this system targets a full scan answers in milliseconds and
stays bit-for-bit testable against a brute-force oracle.

File format (version 1): a header line
    BPVS 1 <dim> <count> <sha256-of-body> <timestamp>
followed by one JSON record per line with the vector as base64-encoded
little-endian float32 bytes. Loaders reject unknown versions.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from barkplug.embedding import Embedder, cosine_similarity

MAGIC = "BPVS"
FORMAT_VERSION = 1
DIM_UNSET = 0

RETRIEVAL_METHODS = ("threshold", "top_k", "mmr")

DEFAULT_THRESHOLD = 0.7
DEFAULT_K = 4


class StoreFormatError(ValueError):
    """Base for persisted-store format problems."""


class StoreVersionError(StoreFormatError):
    """Unknown magic or unsupported format version."""


class TruncatedStoreError(StoreFormatError):
    """Fewer (or more) records than the header declared."""


class ChecksumError(StoreFormatError):
    """Body bytes do not match the header checksum."""


class DimensionMismatchError(ValueError):
    """A record's vector dim differs from the store dim."""


@dataclass
class VectorRecord:
    chunk_id: str
    vector: np.ndarray
    doc_id: str
    url: str
    title: str
    text: str


@dataclass
class RetrievalQuery:
    """A retrieval request: the ``x`` and ``n`` of the retriever."""

    text: str
    method: str = "threshold"
    threshold: float = DEFAULT_THRESHOLD
    k: int = DEFAULT_K
    mmr_lambda: float = 0.5

    def validate(self) -> None:
        if self.method not in RETRIEVAL_METHODS:
            raise ValueError(f"unknown retrieval method: {self.method!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.method == "threshold" and not -1.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [-1, 1]")
        if self.method == "mmr" and not 0.0 <= self.mmr_lambda <= 1.0:
            raise ValueError("mmr lambda must be in [0, 1]")


@dataclass
class RetrievedContext:
    items: list[tuple[VectorRecord, float]]
    query: RetrievalQuery

    def chunk_ids(self) -> list[str]:
        return [record.chunk_id for record, _ in self.items]


class VectorStore:
    """In-memory record set with linear-scan retrieval and file persistence.

    Concurrency: many readers or one writer. Upserts apply as a batch under
    the lock, so retrieval never observes a partially applied batch.
    """

    def __init__(self, dim: int | None = None):
        self.dim = dim
        self._records: dict[str, VectorRecord] = {}
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._records)

    def upsert(self, records: list[VectorRecord]) -> int:
        """Insert or replace records by chunk_id; returns the batch size.

        The first inserted record fixes the store dim.
        """
        with self._lock:
            staged: dict[str, VectorRecord] = {}
            dim = self.dim
            for record in records:
                vec = np.asarray(record.vector, dtype=np.float32)
                if vec.ndim != 1:
                    raise DimensionMismatchError(f"record {record.chunk_id}: vector must be 1-D")
                if dim is None:
                    dim = int(vec.shape[0])
                elif vec.shape[0] != dim:
                    raise DimensionMismatchError(
                        f"record {record.chunk_id}: dim {vec.shape[0]} != store dim {dim}"
                    )
                staged[record.chunk_id] = VectorRecord(
                    chunk_id=record.chunk_id,
                    vector=vec,
                    doc_id=record.doc_id,
                    url=record.url,
                    title=record.title,
                    text=record.text,
                )
            self.dim = dim
            self._records.update(staged)
            return len(records)

    def records(self) -> list[VectorRecord]:
        """Snapshot of all records, ordered by chunk_id."""
        with self._lock:
            return [self._records[cid] for cid in sorted(self._records)]

    def retrieve(self, query: RetrievalQuery, embedder: Embedder) -> RetrievedContext:
        """Run the query against every stored record.

        threshold: every record with cosine score >= threshold, score
        descending, capped at k. top_k: the k best. mmr: greedy
        relevance/diversity trade-off, reported scores are query similarity.
        Ties always break by ascending chunk_id.
        """
        query.validate()
        snapshot = self.records()
        if not snapshot:
            return RetrievedContext(items=[], query=query)
        query_vec = embedder.embed([query.text])[0]
        scored = [
            (record, cosine_similarity(query_vec, record.vector)) for record in snapshot
        ]
        if query.method == "mmr":
            items = _mmr_select(scored, query.k, query.mmr_lambda)
        else:
            scored.sort(key=lambda pair: (-pair[1], pair[0].chunk_id))
            if query.method == "threshold":
                scored = [pair for pair in scored if pair[1] >= query.threshold]
            items = scored[: query.k]
        return RetrievedContext(items=items, query=query)

    # --- persistence ---

    def persist(self, path: str | Path) -> None:
        """Write the store to ``path`` atomically (temp file + rename)."""
        path = Path(path)
        with self._lock:
            dim = self.dim if self.dim is not None else DIM_UNSET
            lines = [_record_line(r) for r in self.records()]
        body = "".join(lines).encode("utf-8")
        checksum = hashlib.sha256(body).hexdigest()
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        header = f"{MAGIC} {FORMAT_VERSION} {dim} {len(lines)} {checksum} {stamp}\n"
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(header.encode("utf-8") + body)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "VectorStore":
        """Load a persisted store; fails closed on any format problem."""
        raw = Path(path).read_bytes()
        newline = raw.find(b"\n")
        if newline == -1:
            raise TruncatedStoreError(f"{path}: missing header line")
        header = raw[:newline].decode("utf-8", errors="replace").split(" ")
        if len(header) < 5 or header[0] != MAGIC:
            raise StoreVersionError(f"{path}: not a vector store file")
        if header[1] != str(FORMAT_VERSION):
            raise StoreVersionError(f"{path}: unsupported store version {header[1]!r}")
        try:
            dim = int(header[2])
            count = int(header[3])
        except ValueError as exc:
            raise StoreVersionError(f"{path}: malformed header") from exc
        checksum = header[4]
        body = raw[newline + 1 :]
        if hashlib.sha256(body).hexdigest() != checksum:
            raise ChecksumError(f"{path}: body checksum mismatch")
        lines = body.decode("utf-8").splitlines()
        if len(lines) != count:
            raise TruncatedStoreError(f"{path}: header declares {count} records, found {len(lines)}")
        store = cls(dim=None if dim == DIM_UNSET else dim)
        records = [_parse_record_line(path, i, line) for i, line in enumerate(lines)]
        if records:
            store.upsert(records)
        return store


def _record_line(record: VectorRecord) -> str:
    vector_b64 = base64.b64encode(record.vector.astype("<f4").tobytes()).decode("ascii")
    return (
        json.dumps(
            {
                "chunk_id": record.chunk_id,
                "doc_id": record.doc_id,
                "url": record.url,
                "title": record.title,
                "text": record.text,
                "vector": vector_b64,
            },
            ensure_ascii=True,
            sort_keys=True,
        )
        + "\n"
    )


def _parse_record_line(path: str | Path, index: int, line: str) -> VectorRecord:
    try:
        obj = json.loads(line)
        vector = np.frombuffer(base64.b64decode(obj["vector"]), dtype="<f4").copy()
        return VectorRecord(
            chunk_id=obj["chunk_id"],
            vector=vector,
            doc_id=obj["doc_id"],
            url=obj["url"],
            title=obj["title"],
            text=obj["text"],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise StoreFormatError(f"{path}: malformed record at line {index + 2}: {exc}") from exc


def _mmr_select(
    scored: list[tuple[VectorRecord, float]], k: int, lam: float
) -> list[tuple[VectorRecord, float]]:
    """Greedy MMR: argmax lam*sim(d, query) - (1-lam)*max_selected sim(d, s).

    Runs min(k, n) rounds over the full candidate set; ties break by
    ascending chunk_id.
    """
    candidates = sorted(scored, key=lambda pair: pair[0].chunk_id)
    selected: list[tuple[VectorRecord, float]] = []
    max_sim_to_selected = [0.0] * len(candidates)
    chosen = [False] * len(candidates)
    while len(selected) < k and len(selected) < len(candidates):
        best_i = -1
        best_score = -np.inf
        for i, (record, query_sim) in enumerate(candidates):
            if chosen[i]:
                continue
            penalty = max_sim_to_selected[i] if selected else 0.0
            mmr = lam * query_sim - (1.0 - lam) * penalty
            if mmr > best_score:
                best_score = mmr
                best_i = i
        chosen[best_i] = True
        picked_record, picked_sim = candidates[best_i]
        selected.append((picked_record, picked_sim))
        for i, (record, _) in enumerate(candidates):
            if not chosen[i]:
                sim = cosine_similarity(record.vector, picked_record.vector)
                if sim > max_sim_to_selected[i]:
                    max_sim_to_selected[i] = sim
    return selected
