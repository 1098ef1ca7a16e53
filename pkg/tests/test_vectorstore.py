from __future__ import annotations

import random

import numpy as np
import pytest

from barkplug.embedding import DeterministicLocalEmbedder, cosine_similarity
from barkplug.vectorstore import (
    ChecksumError,
    DimensionMismatchError,
    RetrievalQuery,
    StoreVersionError,
    TruncatedStoreError,
    VectorRecord,
    VectorStore,
)

VOCAB = [f"w{i}" for i in range(40)]


def random_text(rng: random.Random) -> str:
    return " ".join(rng.choices(VOCAB, k=rng.randint(3, 10)))


def make_records(embedder, texts, offset=0):
    vectors = embedder.embed(texts)
    return [
        VectorRecord(
            chunk_id=f"chunk-{i + offset:04d}",
            vector=vectors[i],
            doc_id=f"doc-{i % 7}",
            url=f"https://u.example/{i + offset}",
            title=f"T{i + offset}",
            text=texts[i],
        )
        for i in range(len(texts))
    ]


def brute_force_threshold(records, query_vec, threshold, k):
    """Independent oracle: linear filter + sort + truncate."""
    scored = []
    for record in records:
        score = cosine_similarity(query_vec, record.vector)
        if score >= threshold:
            scored.append((record, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0].chunk_id))
    return scored[:k]


class TestUpsert:
    def test_insert_three(self, local_embedder):
        store = VectorStore()
        count = store.upsert(make_records(local_embedder, ["a", "b", "c"]))
        assert count == 3
        assert len(store) == 3

    def test_reupsert_is_idempotent(self, local_embedder):
        store = VectorStore()
        records = make_records(local_embedder, ["a", "b", "c"])
        store.upsert(records)
        count = store.upsert(records)
        assert count == 3
        assert len(store) == 3

    def test_mixed_new_and_duplicate(self, local_embedder):
        store = VectorStore()
        first = make_records(local_embedder, ["a", "b", "c"])
        store.upsert(first)
        fresh = make_records(local_embedder, ["d", "e"], offset=10)
        count = store.upsert(fresh + [first[0]])  # 2 new + 1 duplicate id
        assert count == 3
        assert len(store) == 5

    def test_dim_mismatch_names_chunk_id(self, local_embedder):
        store = VectorStore()
        store.upsert(make_records(local_embedder, ["a"]))
        bad = VectorRecord(
            chunk_id="odd-one",
            vector=np.ones(3, dtype=np.float32),
            doc_id="d",
            url="u",
            title="t",
            text="x",
        )
        with pytest.raises(DimensionMismatchError, match="odd-one"):
            store.upsert([bad])

    def test_first_insert_fixes_dim(self, local_embedder):
        store = VectorStore()
        assert store.dim is None
        store.upsert(make_records(local_embedder, ["a"]))
        assert store.dim == local_embedder.dim


class TestRetrieve:
    def test_threshold_boundary_is_inclusive(self):
        # orthogonal records score exactly 0.0, and 0.0 >= 0.0 keeps them
        emb = DeterministicLocalEmbedder(dim=64)
        from conftest import distinct_bucket_tokens

        tokens = distinct_bucket_tokens(5, 64)
        store = VectorStore()
        store.upsert(make_records(emb, [tokens[i] for i in range(1, 5)]))
        result = store.retrieve(
            RetrievalQuery(text=tokens[0], method="threshold", threshold=0.0, k=3), emb
        )
        assert all(score == 0.0 for _, score in result.items)
        assert len(result.items) == 3  # capped at k

    def test_threshold_excludes_below(self):
        emb = DeterministicLocalEmbedder(dim=64)
        from conftest import distinct_bucket_tokens

        tokens = distinct_bucket_tokens(3, 64)
        store = VectorStore()
        store.upsert(make_records(emb, [f"{tokens[0]} {tokens[1]}", tokens[2]]))
        result = store.retrieve(
            RetrievalQuery(text=tokens[0], method="threshold", threshold=0.5, k=10), emb
        )
        assert [r.chunk_id for r, _ in result.items] == ["chunk-0000"]

    def test_empty_store(self, local_embedder):
        store = VectorStore()
        result = store.retrieve(RetrievalQuery(text="anything"), local_embedder)
        assert result.items == []

    def test_oracle_equivalence_randomized(self, local_embedder):
        rng = random.Random(20240809)
        for _ in range(100):
            texts = [random_text(rng) for _ in range(rng.randint(5, 60))]
            store = VectorStore()
            records = make_records(local_embedder, texts)
            store.upsert(records)
            query = RetrievalQuery(
                text=random_text(rng),
                method="threshold",
                threshold=rng.uniform(0.0, 0.9),
                k=rng.randint(1, 20),
            )
            got = store.retrieve(query, local_embedder)
            query_vec = local_embedder.embed([query.text])[0]
            expected = brute_force_threshold(
                store.records(), query_vec, query.threshold, query.k
            )
            assert [(r.chunk_id, s) for r, s in got.items] == [
                (r.chunk_id, s) for r, s in expected
            ]

    def test_monotonicity_in_threshold(self, local_embedder):
        rng = random.Random(7)
        texts = [random_text(rng) for _ in range(50)]
        store = VectorStore()
        store.upsert(make_records(local_embedder, texts))
        question = random_text(rng)
        previous: set[str] | None = None
        for threshold in [0.9, 0.7, 0.5, 0.3, 0.0, -1.0]:
            result = store.retrieve(
                RetrievalQuery(text=question, method="threshold",
                               threshold=threshold, k=100),
                local_embedder,
            )
            ids = set(result.chunk_ids())
            if previous is not None:
                assert previous.issubset(ids)
            previous = ids

    def test_topk_equals_threshold_minus_one(self, local_embedder):
        rng = random.Random(13)
        texts = [random_text(rng) for _ in range(30)]
        store = VectorStore()
        store.upsert(make_records(local_embedder, texts))
        question = random_text(rng)
        top = store.retrieve(RetrievalQuery(text=question, method="top_k", k=100), local_embedder)
        thr = store.retrieve(
            RetrievalQuery(text=question, method="threshold", threshold=-1.0, k=100),
            local_embedder,
        )
        assert sorted(top.chunk_ids()) == sorted(thr.chunk_ids())

    def test_determinism(self, local_embedder):
        rng = random.Random(99)
        store = VectorStore()
        store.upsert(make_records(local_embedder, [random_text(rng) for _ in range(40)]))
        query = RetrievalQuery(text="w1 w2 w3", method="threshold", threshold=0.1, k=10)
        first = store.retrieve(query, local_embedder)
        second = store.retrieve(query, local_embedder)
        assert [(r.chunk_id, s) for r, s in first.items] == [
            (r.chunk_id, s) for r, s in second.items
        ]

    def test_scores_non_increasing(self, local_embedder):
        rng = random.Random(5)
        store = VectorStore()
        store.upsert(make_records(local_embedder, [random_text(rng) for _ in range(40)]))
        for method in ("threshold", "top_k"):
            result = store.retrieve(
                RetrievalQuery(text=random_text(rng), method=method, threshold=-1.0, k=15),
                local_embedder,
            )
            scores = [s for _, s in result.items]
            assert scores == sorted(scores, reverse=True)

    def test_query_validation(self, local_embedder):
        store = VectorStore()
        with pytest.raises(ValueError, match="unknown retrieval method"):
            store.retrieve(RetrievalQuery(text="x", method="fuzzy"), local_embedder)
        with pytest.raises(ValueError, match="k must be"):
            store.retrieve(RetrievalQuery(text="x", k=0), local_embedder)
        with pytest.raises(ValueError, match="threshold"):
            store.retrieve(RetrievalQuery(text="x", threshold=1.5), local_embedder)
        with pytest.raises(ValueError, match="lambda"):
            store.retrieve(RetrievalQuery(text="x", method="mmr", mmr_lambda=2.0), local_embedder)


class TestMMR:
    def _store(self, embedder, n=25, seed=3):
        rng = random.Random(seed)
        store = VectorStore()
        store.upsert(make_records(embedder, [random_text(rng) for _ in range(n)]))
        return store

    def test_lambda_one_reduces_to_topk(self, local_embedder):
        store = self._store(local_embedder)
        question = "w0 w1 w2"
        mmr = store.retrieve(
            RetrievalQuery(text=question, method="mmr", k=8, mmr_lambda=1.0), local_embedder
        )
        top = store.retrieve(RetrievalQuery(text=question, method="top_k", k=8), local_embedder)
        assert mmr.chunk_ids() == top.chunk_ids()

    def test_first_pick_matches_topk(self, local_embedder):
        store = self._store(local_embedder)
        question = "w3 w4"
        top = store.retrieve(RetrievalQuery(text=question, method="top_k", k=1), local_embedder)
        for lam in (0.2, 0.5, 0.9):
            mmr = store.retrieve(
                RetrievalQuery(text=question, method="mmr", k=5, mmr_lambda=lam), local_embedder
            )
            assert mmr.chunk_ids()[0] == top.chunk_ids()[0]

    def test_selected_size(self, local_embedder):
        store = self._store(local_embedder, n=6)
        mmr = store.retrieve(
            RetrievalQuery(text="w0", method="mmr", k=10, mmr_lambda=0.5), local_embedder
        )
        assert len(mmr.items) == 6
        mmr = store.retrieve(
            RetrievalQuery(text="w0", method="mmr", k=3, mmr_lambda=0.5), local_embedder
        )
        assert len(mmr.items) == 3

    def test_diversity_kicks_in(self):
        # near-duplicates of the best match get demoted below a distinct record
        emb = DeterministicLocalEmbedder(dim=64)
        from conftest import distinct_bucket_tokens

        t = distinct_bucket_tokens(6, 64)
        texts = [
            f"{t[0]} {t[1]} {t[2]}",      # close to query
            f"{t[0]} {t[1]} {t[2]}",      # duplicate of it
            f"{t[0]} {t[3]} {t[4]}",      # shares one query token, different tail
        ]
        store = VectorStore()
        store.upsert(make_records(emb, texts))
        result = store.retrieve(
            RetrievalQuery(text=f"{t[0]} {t[1]}", method="mmr", k=2, mmr_lambda=0.5), emb
        )
        assert result.chunk_ids() == ["chunk-0000", "chunk-0002"]


class TestPersistence:
    def test_empty_store_round_trip(self, tmp_path):
        store = VectorStore()
        path = tmp_path / "empty.bpvs"
        store.persist(path)
        loaded = VectorStore.load(path)
        assert len(loaded) == 0
        assert loaded.dim is None

    def test_round_trip_bit_equal(self, tmp_path, local_embedder):
        rng = random.Random(42)
        store = VectorStore()
        records = make_records(local_embedder, [random_text(rng) for _ in range(100)])
        store.upsert(records)
        path = tmp_path / "store.bpvs"
        store.persist(path)
        loaded = VectorStore.load(path)
        assert len(loaded) == 100
        assert loaded.dim == store.dim
        original = {r.chunk_id: r for r in store.records()}
        for record in loaded.records():
            source = original[record.chunk_id]
            assert record.vector.tobytes() == source.vector.tobytes()
            assert (record.doc_id, record.url, record.title, record.text) == (
                source.doc_id, source.url, source.title, source.text,
            )

    def test_corrupted_checksum_rejected(self, tmp_path, local_embedder):
        store = VectorStore()
        store.upsert(make_records(local_embedder, ["a", "b"]))
        path = tmp_path / "store.bpvs"
        store.persist(path)
        data = path.read_bytes()
        path.write_bytes(data[:-10] + b"corruption")
        with pytest.raises(ChecksumError):
            VectorStore.load(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "v9.bpvs"
        path.write_text("BPVS 9 0 0 aaaa now\n", encoding="utf-8")
        with pytest.raises(StoreVersionError, match="version"):
            VectorStore.load(path)

    def test_not_a_store_file(self, tmp_path):
        path = tmp_path / "junk.bpvs"
        path.write_text("hello world\n", encoding="utf-8")
        with pytest.raises(StoreVersionError):
            VectorStore.load(path)

    def test_truncated_file_rejected(self, tmp_path, local_embedder):
        store = VectorStore()
        store.upsert(make_records(local_embedder, ["a", "b", "c"]))
        path = tmp_path / "store.bpvs"
        store.persist(path)
        lines = path.read_bytes().split(b"\n")
        truncated_body = b"\n".join(lines[1:3]) + b"\n"
        import hashlib

        header_fields = lines[0].decode().split(" ")
        header_fields[4] = hashlib.sha256(truncated_body).hexdigest()
        path.write_bytes(" ".join(header_fields).encode() + b"\n" + truncated_body)
        with pytest.raises(TruncatedStoreError):
            VectorStore.load(path)

    def test_persisted_file_is_deterministic_except_header(self, tmp_path, local_embedder):
        store = VectorStore()
        store.upsert(make_records(local_embedder, ["x", "y"]))
        p1, p2 = tmp_path / "a.bpvs", tmp_path / "b.bpvs"
        store.persist(p1)
        store.persist(p2)
        body1 = p1.read_bytes().split(b"\n", 1)[1]
        body2 = p2.read_bytes().split(b"\n", 1)[1]
        assert body1 == body2
