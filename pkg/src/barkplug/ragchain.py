"""Completion phase: token-budgeted prompt assembly and pluggable generation.

The prompt is built from retrieved context blocks, rolling conversation
history, and the user prompt, trimmed to fit the generator's context window
minus its output budget. Context is evicted lowest-score first, then history
oldest first; the system template and user prompt are never dropped.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from barkplug import remote
from barkplug.corpus import DEFAULT_TOKEN_SCHEME, count_tokens
from barkplug.embedding import Embedder
from barkplug.vectorstore import RetrievalQuery, RetrievedContext, VectorStore

SYSTEM_TEMPLATE_V1 = (
    "You are a campus resource assistant. Answer the question using only the "
    "context passages provided below. Cite no facts that are not in the "
    "context. If the context does not contain the answer, reply with the "
    "disclaimer instead of guessing."
)

NO_CONTEXT_DISCLAIMER = "I could not find this in the available campus resources."

DEFAULT_CONTEXT_WINDOW = 16000
DEFAULT_MAX_OUTPUT_TOKENS = 4096
DEFAULT_HISTORY_TURNS = 10


class PromptTooLargeError(ValueError):
    """The user prompt plus system template alone exceed the token budget."""


class GenerationFailedError(RuntimeError):
    """The provider returned a refusal or an empty completion."""


class RetrievalPhaseError(RuntimeError):
    """Wraps any failure raised while retrieving context."""


class GenerationPhaseError(RuntimeError):
    """Wraps any failure raised while generating the completion."""


@dataclass(frozen=True)
class ChatTurn:
    role: str  # "user" | "assistant"
    content: str


@dataclass(frozen=True)
class ContextBlock:
    chunk_id: str
    text: str
    url: str
    score: float


@dataclass
class GeneratorConfig:
    kind: str = "mock-echo"  # or "remote"
    model_name: str = "mock"
    context_window: int = DEFAULT_CONTEXT_WINDOW
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    temperature: float = 0.0
    endpoint: str = ""
    max_retries: int = 3
    timeout: float = 60.0
    system_template: str = SYSTEM_TEMPLATE_V1
    no_context_disclaimer: str = NO_CONTEXT_DISCLAIMER

    def __post_init__(self) -> None:
        if self.max_output_tokens >= self.context_window:
            raise ValueError("max_output_tokens must be smaller than context_window")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class PromptBundle:
    system_template: str
    context_blocks: list[ContextBlock]
    history: list[ChatTurn]
    user_prompt: str
    token_estimate: int

    def chunk_ids(self) -> list[str]:
        return [block.chunk_id for block in self.context_blocks]


@dataclass
class Completion:
    text: str
    used_context: list[str] = field(default_factory=list)
    prompt_tokens: int = 0
    output_tokens: int = 0


def _render_block(block: ContextBlock) -> str:
    return f"[source: {block.url}]\n{block.text}"


def _render_turn(turn: ChatTurn) -> str:
    return f"{turn.role}: {turn.content}"


def build_prompt(
    context: RetrievedContext | None,
    history: list[ChatTurn],
    user_prompt: str,
    cfg: GeneratorConfig,
    counter: str = DEFAULT_TOKEN_SCHEME,
) -> PromptBundle:
    """Assemble a bundle whose token_estimate fits the generator budget.

    Eviction order: lowest-scored context blocks first, then oldest history
    turns. Deterministic for identical inputs.
    """
    if not user_prompt.strip():
        raise ValueError("user_prompt must be non-empty")
    budget = cfg.context_window - cfg.max_output_tokens
    base = count_tokens(cfg.system_template, counter) + count_tokens(user_prompt, counter)
    if base > budget:
        raise PromptTooLargeError(
            f"prompt too large: {base} tokens exceed the {budget}-token budget"
        )

    blocks = []
    if context is not None:
        blocks = [
            ContextBlock(chunk_id=rec.chunk_id, text=rec.text, url=rec.url, score=score)
            for rec, score in context.items
        ]
        blocks.sort(key=lambda b: (-b.score, b.chunk_id))
    block_costs = [count_tokens(_render_block(b), counter) for b in blocks]
    turns = list(history)
    turn_costs = [count_tokens(_render_turn(t), counter) for t in turns]

    total = base + sum(block_costs) + sum(turn_costs)
    while total > budget and blocks:
        blocks.pop()
        total -= block_costs.pop()
    while total > budget and turns:
        turns.pop(0)
        total -= turn_costs.pop(0)

    return PromptBundle(
        system_template=cfg.system_template,
        context_blocks=blocks,
        history=turns,
        user_prompt=user_prompt,
        token_estimate=total,
    )


def render_messages(bundle: PromptBundle) -> list[dict[str, str]]:
    """Chat-completion style messages for the remote generator."""
    system = bundle.system_template
    if bundle.context_blocks:
        rendered = "\n\n".join(_render_block(b) for b in bundle.context_blocks)
        system = f"{system}\n\nContext:\n{rendered}"
    messages = [{"role": "system", "content": system}]
    messages.extend({"role": t.role, "content": t.content} for t in bundle.history)
    messages.append({"role": "user", "content": bundle.user_prompt})
    return messages


_SENTENCE_END = re.compile(r"(?<=[.!?])\s")


def _first_sentence(text: str) -> str:
    stripped = text.strip()
    parts = _SENTENCE_END.split(stripped, maxsplit=1)
    return parts[0]


def generate(cfg: GeneratorConfig, bundle: PromptBundle) -> Completion:
    """Produce a completion for the bundle with the configured generator."""
    if cfg.kind == "mock-echo":
        return _generate_mock_echo(cfg, bundle)
    if cfg.kind == "remote":
        return _generate_remote(cfg, bundle)
    raise ValueError(f"unknown generator kind: {cfg.kind!r}")


def _generate_mock_echo(cfg: GeneratorConfig, bundle: PromptBundle) -> Completion:
    # Deterministic rendering so end-to-end tests are byte-stable: first
    # sentence of the top context block, then the echoed prompt.
    if bundle.context_blocks:
        top = bundle.context_blocks[0]
        text = f"{_first_sentence(top.text)}\n\n(in answer to: {bundle.user_prompt})"
    else:
        text = cfg.no_context_disclaimer
    return Completion(
        text=text,
        used_context=bundle.chunk_ids(),
        prompt_tokens=bundle.token_estimate,
        output_tokens=count_tokens(text),
    )


def _generate_remote(cfg: GeneratorConfig, bundle: PromptBundle) -> Completion:
    body = remote.post_json(
        cfg.endpoint,
        {
            "model": cfg.model_name,
            "messages": render_messages(bundle),
            "max_tokens": cfg.max_output_tokens,
            "temperature": cfg.temperature,
        },
        timeout=cfg.timeout,
        max_retries=cfg.max_retries,
    )
    text = body.get("text")
    if not isinstance(text, str) or not text.strip():
        raise GenerationFailedError("generation failed: provider returned no completion text")
    return Completion(
        text=text,
        used_context=bundle.chunk_ids(),
        prompt_tokens=bundle.token_estimate,
        output_tokens=count_tokens(text),
    )


def answer(
    query_text: str,
    store: VectorStore,
    embedder: Embedder,
    generator: GeneratorConfig,
    retrieval: RetrievalQuery | None = None,
    history: list[ChatTurn] | None = None,
) -> tuple[Completion, RetrievedContext]:
    """Two-phase pipeline: retrieve context, then generate a completion.

    Returns both phases' outputs so callers can log contexts alongside
    answers. Failures are wrapped with the phase they came from.
    """
    if retrieval is None:
        query = RetrievalQuery(text=query_text)
    else:
        query = RetrievalQuery(
            text=query_text,
            method=retrieval.method,
            threshold=retrieval.threshold,
            k=retrieval.k,
            mmr_lambda=retrieval.mmr_lambda,
        )
    try:
        context = store.retrieve(query, embedder)
    except Exception as exc:
        raise RetrievalPhaseError(f"retrieval failed: {exc}") from exc
    try:
        bundle = build_prompt(context, list(history or []), query_text, generator)
        completion = generate(generator, bundle)
    except Exception as exc:
        raise GenerationPhaseError(f"generation failed: {exc}") from exc
    return completion, context
