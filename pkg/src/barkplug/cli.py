"""Operator entry point: ingest a corpus, query it, evaluate, or serve HTTP.

Configuration precedence: flags > config file (--config, JSON) > environment
(BARKPLUG_<FIELD>) > built-in defaults. Secrets travel only through the
environment (BARKPLUG_API_KEY), never through flags.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Query
distinguishes provider failures by phase: 3 retrieval, 4 generation.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
import time
from pathlib import Path

from barkplug import evaluation, ragchain
from barkplug.corpus import ChunkingConfig, CorpusError, chunk_document, load_corpus
from barkplug.embedding import EmbeddingProviderConfig, make_embedder
from barkplug.ragchain import GeneratorConfig
from barkplug.vectorstore import RetrievalQuery, StoreFormatError, VectorRecord, VectorStore

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_RETRIEVAL = 3
EXIT_GENERATION = 4

ENV_PREFIX = "BARKPLUG_"

DEFAULTS: dict = {
    "store": "store.bpvs",
    "chunk_size": 8000,
    "chunk_overlap": 1200,
    "embedder": "deterministic-local",
    "embed_dim": 256,
    "embed_endpoint": "",
    "embed_model": "",
    "method": "threshold",
    "threshold": 0.7,
    "k": 4,
    "mmr_lambda": 0.5,
    "generator": "mock-echo",
    "gen_endpoint": "",
    "gen_model": "mock",
    "context_window": 16000,
    "max_output_tokens": 4096,
    "temperature": 0.0,
    "judge": "heuristic",
    "n_questions": 3,
    "report": "eval_report.json",
    "host": "127.0.0.1",
    "port": 8077,
    "db": "barkplug.db",
    "outbox": "outbox",
    "static_dir": "",
}

_INT_FIELDS = {"chunk_size", "chunk_overlap", "embed_dim", "k", "context_window",
               "max_output_tokens", "n_questions", "port"}
_FLOAT_FIELDS = {"threshold", "mmr_lambda", "temperature"}


class UsageError(Exception):
    pass


def _coerce(name: str, value):
    if name in _INT_FIELDS:
        return int(value)
    if name in _FLOAT_FIELDS:
        return float(value)
    return value


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults < environment < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    for name in DEFAULTS:
        env_value = os.environ.get(ENV_PREFIX + name.upper())
        if env_value is not None:
            cfg[name] = _coerce(name, env_value)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        for name, value in loaded.items():
            if name not in DEFAULTS:
                raise UsageError(f"unknown config field {name!r} in {args.config}")
            cfg[name] = _coerce(name, value)
    for name in DEFAULTS:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            cfg[name] = flag_value
    return cfg


def _embedder_from(cfg: dict):
    return make_embedder(
        EmbeddingProviderConfig(
            kind=cfg["embedder"],
            endpoint=cfg["embed_endpoint"],
            model_name=cfg["embed_model"],
            dim=cfg["embed_dim"],
        )
    )


def _generator_from(cfg: dict) -> GeneratorConfig:
    return GeneratorConfig(
        kind=cfg["generator"],
        model_name=cfg["gen_model"],
        endpoint=cfg["gen_endpoint"],
        context_window=cfg["context_window"],
        max_output_tokens=cfg["max_output_tokens"],
        temperature=cfg["temperature"],
    )


def _retrieval_from(cfg: dict) -> RetrievalQuery:
    return RetrievalQuery(
        text="",
        method=cfg["method"],
        threshold=cfg["threshold"],
        k=cfg["k"],
        mmr_lambda=cfg["mmr_lambda"],
    )


def _load_store(cfg: dict) -> VectorStore:
    path = Path(cfg["store"])
    if not path.is_file():
        raise UsageError(f"store file does not exist: {path}")
    return VectorStore.load(path)


def _judge_from(cfg: dict):
    spec = cfg["judge"]
    if spec == "heuristic":
        return evaluation.HeuristicJudge()
    if spec == "remote":
        return evaluation.RemoteJudge(_generator_from(cfg))
    if spec.startswith("scripted:"):
        return evaluation.ScriptedJudge.from_file(spec.split(":", 1)[1])
    raise UsageError(f"unknown judge {spec!r} (expected heuristic, remote, or scripted:<path>)")


# --- subcommands -------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    started = time.monotonic()
    try:
        documents = load_corpus(args.corpus)
    except CorpusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    chunk_cfg = ChunkingConfig(size=cfg["chunk_size"], overlap=cfg["chunk_overlap"])
    chunks = [chunk for doc in documents for chunk in chunk_document(doc, chunk_cfg)]
    embedder = _embedder_from(cfg)
    by_doc = {doc.id: doc for doc in documents}
    vectors = embedder.embed([c.text for c in chunks]) if chunks else []
    records = [
        VectorRecord(
            chunk_id=chunk.id,
            vector=vector,
            doc_id=chunk.doc_id,
            url=by_doc[chunk.doc_id].url,
            title=by_doc[chunk.doc_id].title,
            text=chunk.text,
        )
        for chunk, vector in zip(chunks, vectors)
    ]
    store = VectorStore()
    if records:
        store.upsert(records)
    store.persist(cfg["store"])
    elapsed = round(time.monotonic() - started, 3)
    summary = {
        "documents": len(documents),
        "chunks": len(chunks),
        "vectors": len(records),
        "elapsed": elapsed,
    }
    print(json.dumps(summary, sort_keys=True))
    print(f"ingested {len(documents)} document(s) -> {len(chunks)} chunk(s)")
    print(f"store written to {cfg['store']} ({elapsed}s)")
    return EXIT_OK


def cmd_query(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    store = _load_store(cfg)
    embedder = _embedder_from(cfg)
    generator = _generator_from(cfg)
    try:
        completion, context = ragchain.answer(
            args.question, store, embedder, generator, retrieval=_retrieval_from(cfg)
        )
    except ragchain.RetrievalPhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RETRIEVAL
    except ragchain.GenerationPhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    print(completion.text)
    print()
    print("sources:")
    if context.items:
        for record, score in context.items:
            print(f"  {record.url}  (score={score:.3f})")
    else:
        print("  (none)")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    try:
        samples = evaluation.load_samples(args.samples)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not samples:
        print("error: samples file is empty", file=sys.stderr)
        return EXIT_USAGE
    needs_pipeline = any(s.answer is None or not s.contexts for s in samples)
    if needs_pipeline:
        if getattr(args, "store", None) is None and not Path(cfg["store"]).is_file():
            print("error: live pipeline requires --store", file=sys.stderr)
            return EXIT_USAGE
        store = _load_store(cfg)
        samples = evaluation.complete_samples(
            samples, store, _embedder_from(cfg), _generator_from(cfg), _retrieval_from(cfg)
        )
    judge = _judge_from(cfg)
    report = evaluation.evaluate_batch(
        samples,
        judge,
        _embedder_from(cfg),
        evaluation.EvalConfig(n_questions=cfg["n_questions"]),
    )
    report.write(cfg["report"])
    _print_report_table(report)
    print(json.dumps({"report": cfg["report"], "samples": len(samples)}, sort_keys=True))
    return EXIT_OK


_TABLE_COLUMNS = [
    ("context_precision", "Prec."),
    ("context_recall", "Recall"),
    ("faithfulness", "Faith."),
    ("answer_relevancy", "Rel."),
    ("ragas_score", "RAGAS"),
    ("answer_similarity", "AnsSim"),
    ("answer_correctness", "AnsCorr"),
]


def _print_report_table(report: evaluation.MetricReport) -> None:
    width = max([len("Category")] + [len(c) for c in report.category_means]) + 2
    header = "Category".ljust(width) + "".join(h.rjust(9) for _, h in _TABLE_COLUMNS)
    print(header)
    for category in sorted(report.category_means):
        means = report.category_means[category]
        cells = []
        for metric, _ in _TABLE_COLUMNS:
            value = means.get(metric)
            cells.append(("--" if value is None else f"{value:.2f}").rjust(9))
        print(category.ljust(width) + "".join(cells))


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from barkplug.httpapi import create_app
    from barkplug.service import ChatService, FileOutboxSink, Storage

    cfg = resolve_config(args)
    store = _load_store(cfg)
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as probe:
        try:
            probe.bind((cfg["host"], cfg["port"]))
        except OSError as exc:
            print(f"error: port {cfg['port']} is already in use ({exc})", file=sys.stderr)
            return EXIT_USAGE
    service = ChatService(
        storage=Storage(cfg["db"]),
        store=store,
        embedder=_embedder_from(cfg),
        generator=_generator_from(cfg),
        retrieval=_retrieval_from(cfg),
        mail_sink=FileOutboxSink(cfg["outbox"]),
    )
    app = create_app(service, static_dir=cfg["static_dir"] or None)
    uvicorn.run(app, host=cfg["host"], port=cfg["port"], log_level="warning")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (default: none)")
    parser.add_argument("--store", help=f"vector store path (default: {DEFAULTS['store']})")


def _add_embedder_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--embedder", choices=["deterministic-local", "remote"],
        help=f"embedding provider kind (default: {DEFAULTS['embedder']})",
    )
    parser.add_argument("--embed-dim", dest="embed_dim", type=int,
                        help=f"embedding dimension (default: {DEFAULTS['embed_dim']})")
    parser.add_argument("--embed-endpoint", dest="embed_endpoint",
                        help="remote embedding endpoint URL (default: empty)")
    parser.add_argument("--embed-model", dest="embed_model",
                        help="remote embedding model name (default: empty)")


def _add_retrieval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", choices=["threshold", "top_k", "mmr"],
                        help=f"retrieval method (default: {DEFAULTS['method']})")
    parser.add_argument("--threshold", type=float,
                        help=f"minimum similarity score (default: {DEFAULTS['threshold']})")
    parser.add_argument("--k", type=int,
                        help=f"maximum results to retrieve (default: {DEFAULTS['k']})")
    parser.add_argument("--mmr-lambda", dest="mmr_lambda", type=float,
                        help=f"MMR relevance/diversity trade-off (default: {DEFAULTS['mmr_lambda']})")


def _add_generator_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--generator", choices=["mock-echo", "remote"],
                        help=f"generator kind (default: {DEFAULTS['generator']})")
    parser.add_argument("--gen-endpoint", dest="gen_endpoint",
                        help="remote generator endpoint URL (default: empty)")
    parser.add_argument("--gen-model", dest="gen_model",
                        help=f"generator model name (default: {DEFAULTS['gen_model']})")
    parser.add_argument("--context-window", dest="context_window", type=int,
                        help=f"generator context window in tokens (default: {DEFAULTS['context_window']})")
    parser.add_argument("--max-output-tokens", dest="max_output_tokens", type=int,
                        help=f"generator output budget in tokens (default: {DEFAULTS['max_output_tokens']})")
    parser.add_argument("--temperature", type=float,
                        help=f"sampling temperature (default: {DEFAULTS['temperature']})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="barkplug",
        description="Retrieval-augmented question answering over a document corpus.",
        epilog="Secrets: set BARKPLUG_API_KEY for remote providers. "
               "Any config field can also come from BARKPLUG_<FIELD> environment variables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="chunk, embed, and store a corpus")
    _add_common(p_ingest)
    p_ingest.add_argument("--corpus", required=True, help="corpus file or directory of *.json files")
    p_ingest.add_argument("--chunk-size", dest="chunk_size", type=int,
                          help=f"max characters per chunk (default: {DEFAULTS['chunk_size']})")
    p_ingest.add_argument("--chunk-overlap", dest="chunk_overlap", type=int,
                          help=f"target overlap between chunks (default: {DEFAULTS['chunk_overlap']})")
    _add_embedder_flags(p_ingest)
    p_ingest.set_defaults(func=cmd_ingest)

    p_query = sub.add_parser("query", help="answer one question against a store")
    _add_common(p_query)
    p_query.add_argument("question", help="the question to answer")
    _add_embedder_flags(p_query)
    _add_retrieval_flags(p_query)
    _add_generator_flags(p_query)
    p_query.set_defaults(func=cmd_query)

    p_eval = sub.add_parser("eval", help="run the metric suite over a samples file")
    _add_common(p_eval)
    p_eval.add_argument("--samples", required=True, help="JSON-lines evaluation samples")
    p_eval.add_argument("--report", help=f"report output path (default: {DEFAULTS['report']})")
    p_eval.add_argument("--judge",
                        help=f"heuristic, remote, or scripted:<path> (default: {DEFAULTS['judge']})")
    p_eval.add_argument("--n-questions", dest="n_questions", type=int,
                        help=f"questions per answer for relevancy (default: {DEFAULTS['n_questions']})")
    _add_embedder_flags(p_eval)
    _add_retrieval_flags(p_eval)
    _add_generator_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_serve = sub.add_parser("serve", help="serve the HTTP chat API")
    _add_common(p_serve)
    p_serve.add_argument("--host", help=f"bind address (default: {DEFAULTS['host']})")
    p_serve.add_argument("--port", type=int, help=f"bind port (default: {DEFAULTS['port']})")
    p_serve.add_argument("--db", help=f"service database path (default: {DEFAULTS['db']})")
    p_serve.add_argument("--outbox", help=f"mail outbox directory (default: {DEFAULTS['outbox']})")
    p_serve.add_argument("--static-dir", dest="static_dir",
                         help="directory of web UI assets to serve (default: none)")
    _add_embedder_flags(p_serve)
    _add_retrieval_flags(p_serve)
    _add_generator_flags(p_serve)
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StoreFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort CLI guard
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
