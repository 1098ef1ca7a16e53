"""Retrieval-augmented question answering over a structured document corpus.

The package is organized around the two-phase pipeline (context retrieval,
then completion) plus the surfaces that wrap it: corpus ingestion, a
persistent vector store, an evaluation suite, an authenticated chat service,
and a CLI.
"""

from barkplug.corpus import Chunk, ChunkingConfig, Document, chunk_document, load_corpus, preprocess
from barkplug.embedding import DeterministicLocalEmbedder, RemoteEmbedder, cosine_similarity
from barkplug.ragchain import Completion, GeneratorConfig, answer
from barkplug.vectorstore import RetrievalQuery, RetrievedContext, VectorRecord, VectorStore

__version__ = "0.1.0"

__all__ = [
    "Chunk",
    "ChunkingConfig",
    "Completion",
    "DeterministicLocalEmbedder",
    "Document",
    "GeneratorConfig",
    "RemoteEmbedder",
    "RetrievalQuery",
    "RetrievedContext",
    "VectorRecord",
    "VectorStore",
    "answer",
    "chunk_document",
    "cosine_similarity",
    "load_corpus",
    "preprocess",
    "__version__",
]
