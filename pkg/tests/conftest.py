from __future__ import annotations

import json

import pytest
from hypothesis import settings

from barkplug.corpus import ChunkingConfig, chunk_document, load_corpus
from barkplug.embedding import DeterministicLocalEmbedder
from barkplug.vectorstore import VectorRecord, VectorStore

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")

# texts chosen so that, at dim 256, no housing token hashes into a bucket
# used by the "admissions phone" query (collision-free retrieval fixture)
ADMISSIONS_TEXT = (
    "The Office of Admissions phone number is 662-325-2224 and the admissions "
    "email is admissions@example.edu. Call the admissions phone line for "
    "questions about applying."
)

HOUSING_TEXT = (
    "Housing assignments open in June. Residence halls feature suites and "
    "apartments for undergraduates."
)


@pytest.fixture
def local_embedder():
    return DeterministicLocalEmbedder(dim=256)


@pytest.fixture
def fixture_corpus(tmp_path):
    """Two-document corpus: admissions (with the phone number) and housing."""
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "campus.json").write_text(
        json.dumps(
            [
                {
                    "url": "https://www.example.edu/admissions",
                    "title": "Admissions",
                    "content": ADMISSIONS_TEXT,
                },
                {
                    "url": "https://www.example.edu/housing",
                    "title": "Housing",
                    "content": HOUSING_TEXT,
                },
            ]
        ),
        encoding="utf-8",
    )
    return corpus


@pytest.fixture
def fixture_store(fixture_corpus, local_embedder):
    """In-memory store over the fixture corpus."""
    documents = load_corpus(fixture_corpus)
    store = VectorStore()
    records = []
    for doc in documents:
        for chunk in chunk_document(doc, ChunkingConfig()):
            records.append(
                VectorRecord(
                    chunk_id=chunk.id,
                    vector=local_embedder.embed([chunk.text])[0],
                    doc_id=doc.id,
                    url=doc.url,
                    title=doc.title,
                    text=chunk.text,
                )
            )
    store.upsert(records)
    return store


def distinct_bucket_tokens(n: int, dim: int, taken: set[int] | None = None) -> list[str]:
    """Deterministic token names whose hash buckets are pairwise distinct.

    Lets tests construct texts with exactly known cosine similarities
    under the token-hash embedder (no accidental bucket collisions).
    """
    from barkplug.embedding import _bucket

    used: set[int] = set(taken or ())
    tokens: list[str] = []
    i = 0
    while len(tokens) < n:
        candidate = f"tok{i:04d}"
        bucket = _bucket(candidate, dim)
        if bucket not in used:
            used.add(bucket)
            tokens.append(candidate)
        i += 1
    return tokens
