"""Metric suite for the retrieval and completion phases.

Four component metrics (context precision, context recall, faithfulness,
answer relevancy), their harmonic mean, two end-to-end metrics (answer
similarity, answer correctness), SUS questionnaire scoring, and a batch
harness that aggregates per-category means into a report.

Judgment calls (is this passage relevant? is this claim supported?) go
through a Judge. Three implementations: a deterministic text-overlap judge,
a scripted judge driven by fixture data, and a remote LLM judge.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

from barkplug import __version__, ragchain
from barkplug.embedding import Embedder, cosine_similarity
from barkplug.vectorstore import RetrievalQuery, VectorStore

METRIC_NAMES = (
    "context_precision",
    "context_recall",
    "faithfulness",
    "answer_relevancy",
    "ragas_score",
    "answer_similarity",
    "answer_correctness",
)

DEFAULT_N_QUESTIONS = 3
DEFAULT_W_FACTUAL = 0.75
DEFAULT_W_SIMILARITY = 0.25


class JudgeError(RuntimeError):
    """A judge could not produce a verdict."""


class MetricAbsent(Exception):
    """A metric is undefined for this sample; carries the reason code."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class EvalSample:
    question: str
    ground_truth: str
    answer: str | None = None
    contexts: tuple[str, ...] = ()
    category: str = "uncategorized"

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("question must be non-empty")
        if not self.ground_truth.strip():
            raise ValueError("ground_truth must be non-empty")


@dataclass(frozen=True)
class JudgeVerdict:
    item: str
    supported: bool
    rationale: str = ""


@dataclass(frozen=True)
class ClaimClassification:
    tp: int
    fp: int
    fn: int


@dataclass
class MetricScores:
    context_precision: float | None = None
    context_recall: float | None = None
    faithfulness: float | None = None
    answer_relevancy: float | None = None
    ragas_score: float | None = None
    answer_similarity: float | None = None
    answer_correctness: float | None = None
    reasons: dict[str, str] = field(default_factory=dict)

    def value(self, metric: str) -> float | None:
        return getattr(self, metric)

    def as_dict(self) -> dict:
        return {
            "scores": {name: self.value(name) for name in METRIC_NAMES},
            "absent": dict(self.reasons),
        }


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def split_statements(text: str) -> list[str]:
    """Sentence split on ., !, ? followed by whitespace."""
    return [part.strip() for part in _SENTENCE_SPLIT.split(text.strip()) if part.strip()]


def _normalize(text: str) -> str:
    return " ".join(text.casefold().split())


# --- judges ------------------------------------------------------------------


class Judge(Protocol):
    def relevant_contexts(self, sample: EvalSample) -> list[JudgeVerdict]: ...

    def attributed_statements(
        self, sample: EvalSample, statements: Sequence[str]
    ) -> list[JudgeVerdict]: ...

    def supported_claims(self, sample: EvalSample, claims: Sequence[str]) -> list[JudgeVerdict]: ...

    def split_claims(self, sample: EvalSample) -> list[str]: ...

    def generate_questions(self, sample: EvalSample, n: int) -> list[str]: ...

    def classify_claims(self, sample: EvalSample) -> ClaimClassification: ...


class HeuristicJudge:
    """Deterministic text-overlap judge; the offline reference.

    A context is relevant when it contains the ground truth or shares at
    least half of its tokens. A statement or claim is supported when its
    normalized text occurs inside some context.
    """

    relevance_token_overlap = 0.5

    def relevant_contexts(self, sample: EvalSample) -> list[JudgeVerdict]:
        truth = _normalize(sample.ground_truth)
        truth_tokens = set(truth.split())
        verdicts = []
        for context in sample.contexts:
            ctx = _normalize(context)
            if truth and truth in ctx:
                supported = True
            elif truth_tokens:
                overlap = len(truth_tokens & set(ctx.split())) / len(truth_tokens)
                supported = overlap >= self.relevance_token_overlap
            else:
                supported = False
            verdicts.append(JudgeVerdict(item=context, supported=supported))
        return verdicts

    def _contained(self, item: str, contexts: Sequence[str]) -> bool:
        needle = _normalize(item)
        return any(needle and needle in _normalize(ctx) for ctx in contexts)

    def attributed_statements(self, sample, statements) -> list[JudgeVerdict]:
        return [
            JudgeVerdict(item=s, supported=self._contained(s, sample.contexts))
            for s in statements
        ]

    def supported_claims(self, sample, claims) -> list[JudgeVerdict]:
        return [
            JudgeVerdict(item=c, supported=self._contained(c, sample.contexts))
            for c in claims
        ]

    def split_claims(self, sample: EvalSample) -> list[str]:
        return split_statements(sample.answer or "")

    def generate_questions(self, sample: EvalSample, n: int) -> list[str]:
        sentences = split_statements(sample.answer or "") or [sample.answer or ""]
        return [sentences[i % len(sentences)] for i in range(n)]

    def classify_claims(self, sample: EvalSample) -> ClaimClassification:
        answer_claims = {_normalize(c) for c in split_statements(sample.answer or "")}
        truth_claims = {_normalize(c) for c in split_statements(sample.ground_truth)}
        return ClaimClassification(
            tp=len(answer_claims & truth_claims),
            fp=len(answer_claims - truth_claims),
            fn=len(truth_claims - answer_claims),
        )


class ScriptedJudge:
    """Judge whose verdicts come from fixture data instead of a model.

    The script is a dict; any aspect it leaves out falls back to the
    heuristic judge. Recognized keys (flat, or nested per question under
    "by_question"):

      relevance:      [bool, ...] one per context position
      recall_support: [bool, ...] one per ground-truth statement
      claim_support:  [bool, ...] one per claim
      claims:         [str, ...]  fixed claim decomposition
      questions:      [str, ...]  generated questions (cycled to n)
      classification: {"tp": int, "fp": int, "fn": int}
      fail:           [aspect, ...] aspects that raise JudgeError
    """

    def __init__(self, script: dict | None = None):
        self.script = script or {}
        self._fallback = HeuristicJudge()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedJudge":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def _spec(self, sample: EvalSample) -> dict:
        by_question = self.script.get("by_question")
        if by_question and sample.question in by_question:
            return by_question[sample.question]
        return self.script

    def _maybe_fail(self, spec: dict, aspect: str) -> None:
        if aspect in spec.get("fail", ()):
            raise JudgeError(f"scripted failure for {aspect}")

    @staticmethod
    def _verdicts(items: Sequence[str], flags: list) -> list[JudgeVerdict]:
        return [
            JudgeVerdict(item=item, supported=bool(flags[i]) if i < len(flags) else False)
            for i, item in enumerate(items)
        ]

    def relevant_contexts(self, sample: EvalSample) -> list[JudgeVerdict]:
        spec = self._spec(sample)
        self._maybe_fail(spec, "relevance")
        if "relevance" in spec:
            return self._verdicts(sample.contexts, spec["relevance"])
        return self._fallback.relevant_contexts(sample)

    def attributed_statements(self, sample, statements) -> list[JudgeVerdict]:
        spec = self._spec(sample)
        self._maybe_fail(spec, "recall_support")
        if "recall_support" in spec:
            return self._verdicts(statements, spec["recall_support"])
        return self._fallback.attributed_statements(sample, statements)

    def supported_claims(self, sample, claims) -> list[JudgeVerdict]:
        spec = self._spec(sample)
        self._maybe_fail(spec, "claim_support")
        if "claim_support" in spec:
            return self._verdicts(claims, spec["claim_support"])
        return self._fallback.supported_claims(sample, claims)

    def split_claims(self, sample: EvalSample) -> list[str]:
        spec = self._spec(sample)
        self._maybe_fail(spec, "claims")
        if "claims" in spec:
            return list(spec["claims"])
        return self._fallback.split_claims(sample)

    def generate_questions(self, sample: EvalSample, n: int) -> list[str]:
        spec = self._spec(sample)
        self._maybe_fail(spec, "questions")
        if "questions" in spec:
            pool = list(spec["questions"])
            return [pool[i % len(pool)] for i in range(n)]
        return self._fallback.generate_questions(sample, n)

    def classify_claims(self, sample: EvalSample) -> ClaimClassification:
        spec = self._spec(sample)
        self._maybe_fail(spec, "classification")
        if "classification" in spec:
            c = spec["classification"]
            return ClaimClassification(tp=int(c["tp"]), fp=int(c["fp"]), fn=int(c["fn"]))
        return self._fallback.classify_claims(sample)


JUDGE_RELEVANCE_PROMPT_V1 = (
    "Question: {question}\n"
    "Reference answer: {ground_truth}\n"
    "Passage: {context}\n\n"
    "Does the passage contain information useful for producing the reference "
    "answer? Reply with exactly YES or NO."
)

JUDGE_ATTRIBUTION_PROMPT_V1 = (
    "Statement: {statement}\n\n"
    "Context passages:\n{contexts}\n\n"
    "Can the statement be attributed to the passages above? Reply with "
    "exactly YES or NO."
)

JUDGE_CLAIMS_PROMPT_V1 = (
    "Break the following answer into its individual factual claims. "
    "Output one claim per line and nothing else.\n\nAnswer: {answer}"
)

JUDGE_QUESTIONS_PROMPT_V1 = (
    "Write {n} questions that the following answer would directly address. "
    "Output one question per line and nothing else.\n\nAnswer: {answer}"
)

JUDGE_CLASSIFY_PROMPT_V1 = (
    "Compare the answer with the ground truth claim by claim.\n"
    "Answer: {answer}\nGround truth: {ground_truth}\n\n"
    'Reply with a JSON object {{"tp": <claims in both>, "fp": <claims only '
    'in the answer>, "fn": <claims only in the ground truth>}} and nothing else.'
)


class RemoteJudge:
    """LLM judge speaking the remote generator wire contract."""

    def __init__(self, cfg: ragchain.GeneratorConfig):
        self.cfg = cfg

    def _ask(self, prompt: str) -> str:
        try:
            body = ragchain.remote.post_json(
                self.cfg.endpoint,
                {
                    "model": self.cfg.model_name,
                    "messages": [{"role": "user", "content": prompt}],
                    "max_tokens": self.cfg.max_output_tokens,
                    "temperature": self.cfg.temperature,
                },
                timeout=self.cfg.timeout,
                max_retries=self.cfg.max_retries,
            )
        except ragchain.remote.TransportError as exc:
            raise JudgeError(str(exc)) from exc
        text = body.get("text")
        if not isinstance(text, str):
            raise JudgeError("judge returned no text")
        return text

    def _yes_no(self, prompt: str, item: str) -> JudgeVerdict:
        reply = self._ask(prompt).strip()
        return JudgeVerdict(item=item, supported=reply.upper().startswith("YES"), rationale=reply)

    def relevant_contexts(self, sample: EvalSample) -> list[JudgeVerdict]:
        return [
            self._yes_no(
                JUDGE_RELEVANCE_PROMPT_V1.format(
                    question=sample.question, ground_truth=sample.ground_truth, context=ctx
                ),
                ctx,
            )
            for ctx in sample.contexts
        ]

    def _attribution(self, sample: EvalSample, items: Sequence[str]) -> list[JudgeVerdict]:
        joined = "\n---\n".join(sample.contexts)
        return [
            self._yes_no(
                JUDGE_ATTRIBUTION_PROMPT_V1.format(statement=item, contexts=joined), item
            )
            for item in items
        ]

    def attributed_statements(self, sample, statements) -> list[JudgeVerdict]:
        return self._attribution(sample, statements)

    def supported_claims(self, sample, claims) -> list[JudgeVerdict]:
        return self._attribution(sample, claims)

    def split_claims(self, sample: EvalSample) -> list[str]:
        reply = self._ask(JUDGE_CLAIMS_PROMPT_V1.format(answer=sample.answer or ""))
        return [line.strip() for line in reply.splitlines() if line.strip()]

    def generate_questions(self, sample: EvalSample, n: int) -> list[str]:
        reply = self._ask(JUDGE_QUESTIONS_PROMPT_V1.format(n=n, answer=sample.answer or ""))
        questions = [line.strip() for line in reply.splitlines() if line.strip()]
        if not questions:
            raise JudgeError("judge returned no questions")
        return [questions[i % len(questions)] for i in range(n)]

    def classify_claims(self, sample: EvalSample) -> ClaimClassification:
        reply = self._ask(
            JUDGE_CLASSIFY_PROMPT_V1.format(
                answer=sample.answer or "", ground_truth=sample.ground_truth
            )
        )
        try:
            obj = json.loads(reply)
            return ClaimClassification(tp=int(obj["tp"]), fp=int(obj["fp"]), fn=int(obj["fn"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise JudgeError(f"unparseable classification reply: {reply!r}") from exc


# --- component metrics -------------------------------------------------------


def context_precision(sample: EvalSample, judge: Judge) -> float:
    """Rank-weighted precision of the retrieved contexts.

    Sum of precision@k over relevant positions k, divided by the number of
    relevant positions; 0 when nothing is relevant.
    """
    if not sample.contexts:
        raise MetricAbsent("no contexts")
    try:
        verdicts = judge.relevant_contexts(sample)
    except JudgeError as exc:
        raise MetricAbsent(f"judge failure: {exc}") from exc
    pattern = [v.supported for v in verdicts]
    relevant_positions = [k for k, flag in enumerate(pattern, start=1) if flag]
    if not relevant_positions:
        return 0.0
    total = sum(sum(pattern[:k]) / k for k in relevant_positions)
    return total / len(relevant_positions)


def context_recall(sample: EvalSample, judge: Judge) -> float:
    """Fraction of ground-truth statements attributable to some context."""
    if not sample.contexts:
        return 0.0
    statements = split_statements(sample.ground_truth)
    if not statements:
        raise MetricAbsent("no ground-truth statements")
    try:
        verdicts = judge.attributed_statements(sample, statements)
    except JudgeError as exc:
        raise MetricAbsent(f"judge failure: {exc}") from exc
    return sum(1 for v in verdicts if v.supported) / len(statements)


def faithfulness(sample: EvalSample, judge: Judge) -> float:
    """Fraction of the answer's claims supported by the contexts."""
    try:
        claims = judge.split_claims(sample)
    except JudgeError as exc:
        raise MetricAbsent(f"judge failure: {exc}") from exc
    if not claims:
        raise MetricAbsent("degenerate answer")
    try:
        verdicts = judge.supported_claims(sample, claims)
    except JudgeError as exc:
        raise MetricAbsent(f"judge failure: {exc}") from exc
    return sum(1 for v in verdicts if v.supported) / len(claims)


def answer_relevancy(
    sample: EvalSample,
    judge: Judge,
    embedder: Embedder,
    n_questions: int = DEFAULT_N_QUESTIONS,
) -> float:
    """Similarity between the question and questions regenerated from the answer."""
    if n_questions < 1:
        raise ValueError("n_questions must be >= 1")
    if not (sample.answer or "").strip():
        raise MetricAbsent("no answer")
    try:
        questions = judge.generate_questions(sample, n_questions)
    except JudgeError as exc:
        raise MetricAbsent(f"judge failure: {exc}") from exc
    try:
        vectors = embedder.embed([sample.question] + questions)
    except Exception as exc:
        raise MetricAbsent(f"embedder failure: {exc}") from exc
    question_vec = vectors[0]
    sims = [max(0.0, cosine_similarity(question_vec, v)) for v in vectors[1:]]
    return sum(sims) / len(sims)


def ragas_score(
    precision: float | None,
    recall: float | None,
    faith: float | None,
    relevancy: float | None,
) -> float:
    """Harmonic mean of the four component metrics; 0 if any component is 0."""
    components = (precision, recall, faith, relevancy)
    if any(c is None for c in components):
        raise MetricAbsent("component absent")
    if any(c == 0.0 for c in components):
        return 0.0
    return 4.0 / sum(1.0 / c for c in components)


def answer_similarity(sample: EvalSample, embedder: Embedder) -> float:
    """Embedding similarity of answer and ground truth, clamped to [0, 1]."""
    if not (sample.answer or "").strip():
        raise MetricAbsent("no answer")
    try:
        answer_vec, truth_vec = embedder.embed([sample.answer, sample.ground_truth])
    except Exception as exc:
        raise MetricAbsent(f"embedder failure: {exc}") from exc
    return max(0.0, cosine_similarity(answer_vec, truth_vec))


def answer_correctness(
    sample: EvalSample,
    judge: Judge,
    embedder: Embedder,
    w_factual: float = DEFAULT_W_FACTUAL,
    w_similarity: float = DEFAULT_W_SIMILARITY,
) -> float:
    """Weighted blend of claim-level F1 and answer similarity."""
    if w_factual < 0 or w_similarity < 0 or abs(w_factual + w_similarity - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    if not (sample.answer or "").strip():
        raise MetricAbsent("no answer")
    try:
        cls = judge.classify_claims(sample)
    except JudgeError as exc:
        raise MetricAbsent(f"judge failure: {exc}") from exc
    if cls.tp == 0:
        f1 = 0.0
    else:
        f1 = 2.0 * cls.tp / (2.0 * cls.tp + cls.fp + cls.fn)
    similarity = answer_similarity(sample, embedder)
    return w_factual * f1 + w_similarity * similarity


# --- SUS ---------------------------------------------------------------------


@dataclass(frozen=True)
class SusResult:
    per_respondent: tuple[float, ...]
    mean: float


def sus_score(responses: Sequence[Sequence[int]]) -> SusResult:
    """Standard SUS arithmetic over 10-item questionnaires scored 1..5.

    Odd items contribute (score - 1), even items (5 - score); the sum is
    scaled by 2.5 to land in [0, 100].
    """
    if not responses:
        raise ValueError("at least one respondent is required")
    scores = []
    for r, items in enumerate(responses):
        if len(items) != 10:
            raise ValueError(f"respondent {r}: expected 10 items, got {len(items)}")
        total = 0
        for i, value in enumerate(items, start=1):
            if not isinstance(value, int) or not 1 <= value <= 5:
                raise ValueError(f"respondent {r}: item {i}: value {value!r} not in 1..5")
            total += (value - 1) if i % 2 == 1 else (5 - value)
        scores.append(total * 2.5)
    return SusResult(per_respondent=tuple(scores), mean=sum(scores) / len(scores))


# --- batch harness -----------------------------------------------------------


@dataclass
class EvalConfig:
    n_questions: int = DEFAULT_N_QUESTIONS
    w_factual: float = DEFAULT_W_FACTUAL
    w_similarity: float = DEFAULT_W_SIMILARITY

    def as_dict(self) -> dict:
        return {
            "n_questions": self.n_questions,
            "w_factual": self.w_factual,
            "w_similarity": self.w_similarity,
        }


@dataclass
class SampleResult:
    question: str
    category: str
    scores: MetricScores


@dataclass
class MetricReport:
    samples: list[SampleResult]
    category_means: dict[str, dict[str, float | None]]
    absence_counts: dict[str, dict[str, int]]
    config: dict
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "samples": [
                {"question": s.question, "category": s.category, **s.scores.as_dict()}
                for s in self.samples
            ],
            "category_means": self.category_means,
            "absence_counts": self.absence_counts,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def score_sample(
    sample: EvalSample, judge: Judge, embedder: Embedder, config: EvalConfig
) -> MetricScores:
    scores = MetricScores()

    def run(metric: str, fn) -> None:
        try:
            setattr(scores, metric, fn())
        except MetricAbsent as absent:
            scores.reasons[metric] = absent.reason

    run("context_precision", lambda: context_precision(sample, judge))
    run("context_recall", lambda: context_recall(sample, judge))
    run("faithfulness", lambda: faithfulness(sample, judge))
    run("answer_relevancy", lambda: answer_relevancy(sample, judge, embedder, config.n_questions))
    run(
        "ragas_score",
        lambda: ragas_score(
            scores.context_precision,
            scores.context_recall,
            scores.faithfulness,
            scores.answer_relevancy,
        ),
    )
    run("answer_similarity", lambda: answer_similarity(sample, embedder))
    run(
        "answer_correctness",
        lambda: answer_correctness(sample, judge, embedder, config.w_factual, config.w_similarity),
    )
    return scores


def evaluate_batch(
    samples: Sequence[EvalSample],
    judge: Judge,
    embedder: Embedder,
    config: EvalConfig | None = None,
) -> MetricReport:
    """Score every sample and aggregate per-category means.

    Per-sample failures become absences, never aborts. The category-level
    ragas_score is the harmonic mean of the four category component means
    (the same shape the component means are reported in), not the mean of
    per-sample harmonic means.
    """
    if not samples:
        raise ValueError("samples must be non-empty")
    config = config or EvalConfig()
    results = [
        SampleResult(
            question=s.question,
            category=s.category,
            scores=score_sample(s, judge, embedder, config),
        )
        for s in samples
    ]

    categories = sorted({r.category for r in results})
    category_means: dict[str, dict[str, float | None]] = {}
    absence_counts: dict[str, dict[str, int]] = {}
    for category in categories:
        rows = [r.scores for r in results if r.category == category]
        means: dict[str, float | None] = {}
        absences: dict[str, int] = {}
        for metric in METRIC_NAMES:
            if metric == "ragas_score":
                continue
            present = [row.value(metric) for row in rows if row.value(metric) is not None]
            means[metric] = sum(present) / len(present) if present else None
            missing = len(rows) - len(present)
            if missing:
                absences[metric] = missing
        try:
            means["ragas_score"] = ragas_score(
                means["context_precision"],
                means["context_recall"],
                means["faithfulness"],
                means["answer_relevancy"],
            )
        except MetricAbsent:
            means["ragas_score"] = None
        category_means[category] = means
        absence_counts[category] = absences

    return MetricReport(
        samples=results,
        category_means=category_means,
        absence_counts=absence_counts,
        config=config.as_dict(),
    )


# --- samples file and live completion ---------------------------------------


def load_samples(path: str | Path) -> list[EvalSample]:
    """Read JSON-lines samples: {question, ground_truth, answer?, contexts?, category?}."""
    samples = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            samples.append(
                EvalSample(
                    question=obj["question"],
                    ground_truth=obj["ground_truth"],
                    answer=obj.get("answer"),
                    contexts=tuple(obj.get("contexts", ())),
                    category=obj.get("category", "uncategorized"),
                )
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: bad sample at line {lineno}: {exc}") from exc
    return samples


def complete_samples(
    samples: Sequence[EvalSample],
    store: VectorStore,
    embedder: Embedder,
    generator: ragchain.GeneratorConfig,
    retrieval: RetrievalQuery | None = None,
) -> list[EvalSample]:
    """Fill missing answers/contexts by running the live pipeline."""
    completed = []
    for sample in samples:
        if sample.answer is not None and sample.contexts:
            completed.append(sample)
            continue
        completion, context = ragchain.answer(
            sample.question, store, embedder, generator, retrieval=retrieval
        )
        completed.append(
            replace(
                sample,
                answer=sample.answer if sample.answer is not None else completion.text,
                contexts=sample.contexts or tuple(rec.text for rec, _ in context.items),
            )
        )
    return completed
