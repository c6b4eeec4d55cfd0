"""End-to-end execution of each retrieval method for one question.

Every method follows the same skeleton: plan queries, retrieve, fuse under
the final-context budget, generate with the shared generator prompt, and
record everything. The working hypothesis produced by the two-stage
rewriting pipeline steers retrieval only; an audit check (not trust) keeps
it out of the generator messages unless exposure is explicitly enabled.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import prompts
from .corpus import Corpus, QAItem, VectorIndex
from .errors import AuditError, CapabilityError, EvdError, MissingTokenError, ParseFailure
from .gateway import ChatRequest, Gateway, gap_from_response
from .parsing import (
    HCQR_ROLES,
    ROLE_DISTINCTION,
    ROLE_KEY_FEATURES,
    ROLE_PARAPHRASE,
    ROLE_RAW,
    ROLE_SUPPORT,
    HypothesisState,
    ParsedAnswer,
    QueryPlan,
    parse_answer,
    parse_choice_only,
    parse_hypothesis,
    parse_queries,
)

KIND_COT = "COT"
KIND_SIMPLE_RAG = "SIMPLE_RAG"
KIND_REWRITING = "REWRITING"
KIND_REWRITING_OPTIONS = "REWRITING_OPTIONS"
KIND_HYDE = "HYDE"
KIND_RERANK_RAG = "RERANK_RAG"
KIND_MAIN_RAG = "MAIN_RAG"
KIND_HCQR = "HCQR"
KIND_HCQR_NO_OPTIONS = "HCQR_NO_OPTIONS"
KIND_HCQR_MINUS_Q1 = "HCQR_MINUS_Q1"
KIND_HCQR_MINUS_Q2 = "HCQR_MINUS_Q2"
KIND_HCQR_MINUS_Q3 = "HCQR_MINUS_Q3"

ALL_KINDS = (
    KIND_COT,
    KIND_SIMPLE_RAG,
    KIND_REWRITING,
    KIND_REWRITING_OPTIONS,
    KIND_HYDE,
    KIND_RERANK_RAG,
    KIND_MAIN_RAG,
    KIND_HCQR,
    KIND_HCQR_NO_OPTIONS,
    KIND_HCQR_MINUS_Q1,
    KIND_HCQR_MINUS_Q2,
    KIND_HCQR_MINUS_Q3,
)

HCQR_KINDS = (
    KIND_HCQR,
    KIND_HCQR_NO_OPTIONS,
    KIND_HCQR_MINUS_Q1,
    KIND_HCQR_MINUS_Q2,
    KIND_HCQR_MINUS_Q3,
)

_KEPT_ROLES = {
    KIND_HCQR: HCQR_ROLES,
    KIND_HCQR_NO_OPTIONS: HCQR_ROLES,
    KIND_HCQR_MINUS_Q1: (ROLE_DISTINCTION, ROLE_KEY_FEATURES),
    KIND_HCQR_MINUS_Q2: (ROLE_SUPPORT, ROLE_KEY_FEATURES),
    KIND_HCQR_MINUS_Q3: (ROLE_SUPPORT, ROLE_DISTINCTION),
}

FLAG_HYPOTHESIS_PARSE = "hypothesis_parse"
FLAG_QUERY_PARSE = "query_parse"
FLAG_HYDE_PARTIAL = "hyde_partial"
FLAG_HYDE_ALL_FAILED = "hyde_all_failed"
FLAG_MAINRAG_UNFILTERED = "mainrag_unfiltered"
FLAG_TOKEN_BUDGET = "context_token_budget"


@dataclass(frozen=True)
class MethodSpec:
    """A runnable method variant: a kind plus its budget knobs.

    b_max caps the final context shown to the generator; it is a ceiling,
    not an exact fill, so per_query_k times the query count need not equal
    it.
    """

    name: str
    kind: str
    b_max: int = 15
    per_query_k: int = 5
    rerank_pool: int = 150
    hyde_samples: int = 8
    hyde_temperature: float = 0.7
    expose_hypothesis: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        for attr in ("b_max", "per_query_k", "rerank_pool", "hyde_samples"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be positive")
        if self.hyde_temperature < 0:
            raise ValueError("hyde_temperature must be non-negative")


def default_methods() -> dict[str, MethodSpec]:
    """The thirteen stock method variants, keyed by name.

    Twelve are the method kinds themselves; HCQR_EXPOSED is the diagnostic
    variant that additionally shows the working hypothesis to the generator.
    """
    table = {kind: MethodSpec(name=kind, kind=kind) for kind in ALL_KINDS}
    table["HCQR_EXPOSED"] = MethodSpec(
        name="HCQR_EXPOSED", kind=KIND_HCQR, expose_hypothesis=True
    )
    return table


@dataclass(frozen=True)
class ContextEntry:
    doc_id: str
    roles: tuple[str, ...]
    best_rank: int
    best_score: float

    def to_json(self) -> list:
        return [self.doc_id, list(self.roles), self.best_rank, self.best_score]


@dataclass(frozen=True)
class ContextSet:
    """Ordered, deduplicated final evidence, at most b_max entries."""

    entries: tuple[ContextEntry, ...]

    @property
    def realized_size(self) -> int:
        return len(self.entries)

    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]

    def to_json(self) -> dict:
        return {
            "doc_ids": self.doc_ids(),
            "entries": [e.to_json() for e in self.entries],
        }


EMPTY_CONTEXT = ContextSet(entries=())


def mainrag_survivors(scores: Sequence[float]) -> list[int]:
    """Indices whose score clears the mean of the finite scores, in order.

    Non-finite scores mark unscorable documents; they are excluded from the
    mean and can never survive. Empty only when no score is finite.
    """
    finite = [s for s in scores if math.isfinite(s)]
    if not finite:
        return []
    mean = sum(finite) / len(finite)
    return [i for i, s in enumerate(scores) if math.isfinite(s) and s >= mean]


def fuse(
    role_lists: Sequence[tuple[str, Sequence[tuple[str, float]]]],
    b_max: int,
) -> ContextSet:
    """Round-robin merge of per-query ranked lists under the budget.

    Walks rank positions across lists in plan order; the first occurrence of
    a doc wins its slot, later visited occurrences only extend its
    contributing roles and best rank/score. Consumption stops the moment
    b_max docs are collected, so entries depend only on the visited prefix
    of each list.
    """
    order: list[str] = []
    roles: dict[str, list[str]] = {}
    best_rank: dict[str, int] = {}
    best_score: dict[str, float] = {}

    rank = 0
    while len(order) < b_max:
        progressed = False
        for role, ranked in role_lists:
            if rank >= len(ranked):
                continue
            progressed = True
            doc_id, score = ranked[rank]
            if doc_id not in best_rank:
                order.append(doc_id)
                roles[doc_id] = [role]
                best_rank[doc_id] = rank
                best_score[doc_id] = float(score)
            else:
                if role not in roles[doc_id]:
                    roles[doc_id].append(role)
                best_rank[doc_id] = min(best_rank[doc_id], rank)
                best_score[doc_id] = max(best_score[doc_id], float(score))
            if len(order) >= b_max:
                break
        if not progressed:
            break
        rank += 1

    entries = tuple(
        ContextEntry(
            doc_id=d,
            roles=tuple(roles[d]),
            best_rank=best_rank[d],
            best_score=best_score[d],
        )
        for d in order
    )
    return ContextSet(entries=entries)


@dataclass
class RunRecord:
    """Everything recorded for one (question, method) execution.

    wall_time_s is in-memory only; it is deliberately left out of the
    serialized form so record files from identical seeded runs compare
    byte for byte.
    """

    item_id: str
    dataset: str
    method: str
    kind: str
    model: str
    query_plan: QueryPlan
    context: ContextSet
    hypothesis: HypothesisState | None = None
    answer: ParsedAnswer | None = None
    status: str = "ok"
    error: str | None = None
    fallback_flag: str | None = None
    usage: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def to_json(self, manifest_hash: str = "") -> dict:
        return {
            "schema_version": 1,
            "manifest_hash": manifest_hash,
            "item_id": self.item_id,
            "dataset": self.dataset,
            "method": self.method,
            "kind": self.kind,
            "model": self.model,
            "query_plan": self.query_plan.to_json(),
            "context": self.context.to_json(),
            "hypothesis": None if self.hypothesis is None else self.hypothesis.to_json(),
            "answer": None if self.answer is None else self.answer.to_json(),
            "status": self.status,
            "error": self.error,
            "fallback_flag": self.fallback_flag,
            "usage": dict(sorted(self.usage.items())),
            "extras": self.extras,
        }


PromptSink = Callable[[str, str, str, str | None, str], None]


@dataclass
class _RunState:
    """Mutable scratchpad for one pipeline execution."""

    plan: QueryPlan = QueryPlan(entries=())
    context: ContextSet = EMPTY_CONTEXT
    hypothesis: HypothesisState | None = None
    answer: ParsedAnswer | None = None
    fallback_flag: str | None = None
    prompt_tokens: int = 0
    output_tokens: int = 0
    chat_calls: int = 0
    retrieval_calls: int = 0
    extras: dict = field(default_factory=dict)


class PipelineRunner:
    """Executes method variants against one corpus/index and a gateway."""

    RETRY_TEMPERATURE = 0.3
    EXPOSURE_PREFIX = "\n\nA working hypothesis from a prior analysis step: "

    def __init__(
        self,
        gateway: Gateway,
        corpus: Corpus,
        index: VectorIndex,
        dataset_id: str = "",
        max_output_tokens: int = 2048,
        context_window_tokens: int = 8192,
        hyde_include_query: bool = True,
        inner_workers: int = 1,
        prompt_sink: PromptSink | None = None,
    ):
        self.gateway = gateway
        self.corpus = corpus
        self.index = index
        self.dataset_id = dataset_id
        self.max_output_tokens = max_output_tokens
        self.context_window_tokens = context_window_tokens
        self.hyde_include_query = hyde_include_query
        self.inner_workers = max(1, inner_workers)
        self.prompt_sink = prompt_sink

    # -- low-level helpers --------------------------------------------------

    def _emit(self, state_key: tuple[str, str], template_id: str,
              system: str | None, user: str) -> None:
        if self.prompt_sink is not None:
            method, item_id = state_key
            self.prompt_sink(method, item_id, template_id, system, user)

    def _chat(
        self,
        state: _RunState,
        key: tuple[str, str],
        template_id: str,
        system: str | None,
        user: str,
        temperature: float = 0.0,
        tag: str = "",
    ):
        self._emit(key, template_id, system, user)
        messages = []
        if system is not None:
            messages.append(("system", system))
        messages.append(("user", user))
        req = ChatRequest(
            messages=tuple(messages),
            temperature=temperature,
            max_output_tokens=self.max_output_tokens,
            tag=tag,
        )
        resp = self.gateway.chat(req)
        state.prompt_tokens += resp.usage[0]
        state.output_tokens += resp.usage[1]
        state.chat_calls += 1
        return resp

    def _chat_parse(self, state, key, template_id, slots, parse_fn):
        """Greedy call, parse; on failure retry once at a low temperature."""
        system, user = prompts.render(template_id, slots)
        resp = self._chat(state, key, template_id, system, user)
        try:
            return parse_fn(resp.text)
        except ParseFailure:
            resp = self._chat(
                state, key, template_id, system, user, temperature=self.RETRY_TEMPERATURE
            )
            return parse_fn(resp.text)

    def _retrieve(self, state: _RunState, query: str, k: int) -> list[tuple[str, float]]:
        vec = self.gateway.embed([query])[0]
        state.retrieval_calls += 1
        return self.index.search(vec, k)

    def _resolve_docs(self, context: ContextSet) -> list[tuple[str | None, str]]:
        docs = []
        for entry in context.entries:
            doc = self.corpus.get(entry.doc_id)
            docs.append((doc.title, doc.text))
        return docs

    @staticmethod
    def _estimate_tokens(*texts: str) -> int:
        return sum(max(1, len(t) // 4) for t in texts)

    def _generate(self, state: _RunState, key: tuple[str, str], item: QAItem,
                  spec: MethodSpec) -> ParsedAnswer:
        """Render the shared generator prompt over the fused context and parse.

        The rendered prompt is additionally held under the model context
        window by dropping tail documents (flagged); budget truncation
        proper happens only at fusion.
        """
        entries = list(state.context.entries)
        options_text = prompts.format_options(item.options)
        exposure = ""
        if spec.expose_hypothesis and state.hypothesis is not None:
            exposure = self.EXPOSURE_PREFIX + state.hypothesis.best_guess_text
        input_budget = self.context_window_tokens - self.max_output_tokens
        dropped = 0
        while True:
            docs = self._resolve_docs(ContextSet(entries=tuple(entries)))
            system, user = prompts.render(
                prompts.GENERATOR,
                {
                    "context": prompts.format_documents(docs),
                    "question": item.question,
                    "options": options_text,
                },
            )
            user += exposure
            if self._estimate_tokens(system or "", user) <= input_budget or not entries:
                break
            entries.pop()
            dropped += 1
        if dropped:
            state.fallback_flag = state.fallback_flag or FLAG_TOKEN_BUDGET
            state.extras["token_budget_dropped"] = dropped

        if not spec.expose_hypothesis and state.hypothesis is not None:
            self._audit_isolation(state.hypothesis, item, docs, system, user)

        self._emit(key, prompts.GENERATOR, system, user)
        req = ChatRequest(
            messages=(("system", system), ("user", user)),
            temperature=0.0,
            max_output_tokens=self.max_output_tokens,
        )
        resp = self.gateway.chat(req)
        state.prompt_tokens += resp.usage[0]
        state.output_tokens += resp.usage[1]
        state.chat_calls += 1
        try:
            return parse_answer(resp.text, item.letters)
        except ParseFailure:
            resp = self.gateway.chat(
                ChatRequest(
                    messages=req.messages,
                    temperature=self.RETRY_TEMPERATURE,
                    max_output_tokens=self.max_output_tokens,
                )
            )
            state.prompt_tokens += resp.usage[0]
            state.output_tokens += resp.usage[1]
            state.chat_calls += 1
            return parse_answer(resp.text, item.letters)

    def _audit_isolation(self, hypothesis: HypothesisState, item: QAItem,
                         docs: Sequence[tuple[str | None, str]],
                         system: str | None, user: str) -> None:
        """Fail loudly if the hypothesis text leaked into generator messages.

        The guess often legitimately equals an option text or appears inside
        retrieved passages, so only occurrences not attributable to those
        sources count as leaks.
        """
        needle = hypothesis.best_guess_text
        if not needle:
            return
        haystack = (system or "") + "\n" + user
        if needle not in haystack:
            return
        legitimate = [item.question, *item.options.values()]
        legitimate.extend(text for _, text in docs)
        legitimate.extend(title for title, _ in docs if title)
        if any(needle in source for source in legitimate):
            return
        raise AuditError(
            "working hypothesis text leaked into generator messages with "
            "expose_hypothesis disabled"
        )

    # -- method implementations ---------------------------------------------

    def _simple_context(self, state: _RunState, item: QAItem, k: int) -> ContextSet:
        hits = self._retrieve(state, item.question, k)
        return fuse([(ROLE_RAW, hits)], k)

    def _run_cot(self, state: _RunState, key, item: QAItem, spec: MethodSpec) -> None:
        state.plan = QueryPlan(entries=(), origin=spec.name)
        state.context = EMPTY_CONTEXT
        state.answer = self._chat_parse(
            state,
            key,
            prompts.COT,
            {"question": item.question, "options": prompts.format_options(item.options)},
            lambda text: parse_answer(text, item.letters),
        )

    def _run_simple_rag(self, state: _RunState, key, item: QAItem, spec: MethodSpec) -> None:
        state.plan = QueryPlan(entries=((ROLE_RAW, item.question),), origin=spec.name)
        state.context = self._simple_context(state, item, spec.b_max)
        state.answer = self._generate(state, key, item, spec)

    def _run_rewriting(self, state: _RunState, key, item: QAItem, spec: MethodSpec) -> None:
        with_options = spec.kind == KIND_REWRITING_OPTIONS
        template = prompts.REWRITING_OPTIONS if with_options else prompts.REWRITING
        slots = {"question": item.question}
        if with_options:
            slots["options"] = prompts.format_options(item.options)
        try:
            plan = self._chat_parse(
                state,
                key,
                template,
                slots,
                lambda text: parse_queries(
                    text, [ROLE_PARAPHRASE] * 3, "Sub-query", origin=spec.name
                ),
            )
        except ParseFailure:
            state.fallback_flag = FLAG_QUERY_PARSE
            state.plan = QueryPlan(entries=((ROLE_RAW, item.question),), origin=spec.name)
            state.context = self._simple_context(state, item, spec.per_query_k)
            state.answer = self._generate(state, key, item, spec)
            return
        state.plan = plan
        lists = [
            (role, self._retrieve(state, text, spec.per_query_k))
            for role, text in plan.entries
        ]
        state.context = fuse(lists, spec.b_max)
        state.answer = self._generate(state, key, item, spec)

    def _run_hyde(self, state: _RunState, key, item: QAItem, spec: MethodSpec) -> None:
        system, user = prompts.render(prompts.HYDE, {"question": item.question})
        passages: list[str] = []
        failures = 0
        for i in range(spec.hyde_samples):
            try:
                resp = self._chat(
                    state, key, prompts.HYDE, system, user,
                    temperature=spec.hyde_temperature, tag=f"sample-{i}",
                )
                text = resp.text.strip()
            except EvdError:
                text = ""
            if text:
                passages.append(text)
            else:
                failures += 1

        entries = [(ROLE_RAW, item.question)] + [(ROLE_RAW, p) for p in passages]
        state.plan = QueryPlan(entries=tuple(entries), origin=spec.name)
        if not passages:
            state.fallback_flag = FLAG_HYDE_ALL_FAILED
            state.context = self._simple_context(state, item, spec.b_max)
            state.answer = self._generate(state, key, item, spec)
            return
        if failures:
            state.fallback_flag = FLAG_HYDE_PARTIAL
        texts = [item.question] + passages
        vectors = self.gateway.embed(texts)
        pool = vectors if self.hyde_include_query else vectors[1:]
        mean_vec = sum(pool[1:], start=pool[0].copy()) / len(pool)
        state.retrieval_calls += 1
        hits = self.index.search(mean_vec, spec.b_max)
        state.context = fuse([(ROLE_RAW, hits)], spec.b_max)
        state.extras["hyde_passages"] = len(passages)
        state.answer = self._generate(state, key, item, spec)

    def _run_rerank(self, state: _RunState, key, item: QAItem, spec: MethodSpec) -> None:
        state.plan = QueryPlan(entries=((ROLE_RAW, item.question),), origin=spec.name)
        pool = self._retrieve(state, item.question, spec.rerank_pool)
        if not pool:
            state.context = EMPTY_CONTEXT
            state.answer = self._generate(state, key, item, spec)
            return
        texts = [self.corpus.get(doc_id).text for doc_id, _ in pool]
        scores = self.gateway.score_pairs(item.question, texts)
        ranked = sorted(
            range(len(pool)),
            key=lambda i: (-scores[i].score, i, pool[i][0]),
        )
        kept = ranked[: spec.b_max]
        entries = tuple(
            ContextEntry(
                doc_id=pool[i][0],
                roles=(ROLE_RAW,),
                best_rank=i,
                best_score=scores[i].score,
            )
            for i in kept
        )
        state.context = ContextSet(entries=entries)
        state.extras["rerank_pool_size"] = len(pool)
        state.answer = self._generate(state, key, item, spec)

    def _score_one_doc(self, key, item: QAItem, doc_id: str) -> tuple[float, _RunState]:
        """Score a single candidate document; returns (gap, local usage).

        Usage lands in a per-call scratchpad so parallel scoring never
        touches shared state; the caller merges in document order.
        """
        local = _RunState()
        doc = self.corpus.get(doc_id)
        doc_text = prompts.format_documents([(doc.title, doc.text)])
        options_text = prompts.format_options(item.options)
        system1, user1 = prompts.render(
            prompts.MAINRAG_AGENT1,
            {"context": doc_text, "question": item.question, "options": options_text},
        )
        resp = self._chat(local, key, prompts.MAINRAG_AGENT1, system1, user1)
        try:
            letter = parse_choice_only(resp.text, item.letters)
        except ParseFailure:
            return -math.inf, local
        system2, user2 = prompts.render(
            prompts.MAINRAG_AGENT2,
            {
                "context": doc_text,
                "question": item.question,
                "options": options_text,
                "llm_answer": f"{letter}. {item.options[letter]}",
            },
        )
        self._emit(key, prompts.MAINRAG_AGENT2, system2, user2)
        req = ChatRequest(
            messages=(("system", system2), ("user", user2)),
            temperature=0.0,
            max_output_tokens=self.max_output_tokens,
            want_token_logprobs=True,
        )
        resp = self.gateway.chat(req)
        local.prompt_tokens += resp.usage[0]
        local.output_tokens += resp.usage[1]
        local.chat_calls += 1
        try:
            gap = gap_from_response(resp)
        except (MissingTokenError, CapabilityError):
            return -math.inf, local
        return gap, local

    def _run_main_rag(self, state: _RunState, key, item: QAItem, spec: MethodSpec) -> None:
        if not self.gateway.supports_logprobs("chat"):
            raise CapabilityError(
                "MAIN_RAG needs a chat backend with token logprobs"
            )
        state.plan = QueryPlan(entries=((ROLE_RAW, item.question),), origin=spec.name)
        hits = self._retrieve(state, item.question, spec.b_max)
        if not hits:
            state.context = EMPTY_CONTEXT
            state.answer = self._generate(state, key, item, spec)
            return

        if self.inner_workers > 1 and len(hits) > 1:
            with ThreadPoolExecutor(max_workers=self.inner_workers) as pool:
                futures = [
                    pool.submit(self._score_one_doc, key, item, doc_id)
                    for doc_id, _ in hits
                ]
                results = [f.result() for f in futures]
        else:
            results = [self._score_one_doc(key, item, doc_id) for doc_id, _ in hits]
        scores = []
        for gap, local in results:
            scores.append(gap)
            state.prompt_tokens += local.prompt_tokens
            state.output_tokens += local.output_tokens
            state.chat_calls += local.chat_calls

        survivors = mainrag_survivors(scores)
        if not survivors:
            state.fallback_flag = FLAG_MAINRAG_UNFILTERED
            survivors = list(range(len(hits)))
        entries = tuple(
            ContextEntry(
                doc_id=hits[i][0], roles=(ROLE_RAW,), best_rank=i, best_score=hits[i][1]
            )
            for i in survivors
        )
        state.context = ContextSet(entries=entries)
        state.extras["doc_scores"] = [
            [hits[i][0], (scores[i] if math.isfinite(scores[i]) else None)]
            for i in range(len(hits))
        ]
        state.answer = self._generate(state, key, item, spec)

    def formulate_hypothesis(
        self, state: _RunState, key, item: QAItem, with_options: bool
    ) -> HypothesisState:
        template = prompts.HYPOTHESIS if with_options else prompts.HYPOTHESIS_NO_OPTIONS
        slots = {"question": item.question}
        if with_options:
            slots["options"] = prompts.format_options(item.options)
        return self._chat_parse(
            state, key, template, slots,
            lambda text: parse_hypothesis(text, options_present=with_options),
        )

    def rewrite_queries(
        self, state: _RunState, key, item: QAItem, hypothesis: HypothesisState,
        keep: Sequence[str], origin: str,
    ) -> QueryPlan:
        """Turn the hypothesis state into the three targeted queries.

        The rewriter always produces all three; ablations restrict the plan
        to `keep` afterwards, so dropped roles never reach the retriever.
        """
        slots = {
            "question": item.question,
            "best_guess_text": hypothesis.best_guess_text,
            "reasoning": hypothesis.reasoning,
            "confirming_evidence": prompts.join_list_slot(hypothesis.confirming_evidence),
            "discriminating_features": prompts.join_list_slot(
                hypothesis.discriminating_features
            ),
        }
        plan = self._chat_parse(
            state, key, prompts.REWRITER, slots,
            lambda text: parse_queries(text, list(HCQR_ROLES), "Query", origin=origin),
        )
        kept = tuple(entry for entry in plan.entries if entry[0] in set(keep))
        return QueryPlan(entries=kept, origin=origin)

    def _run_hcqr(self, state: _RunState, key, item: QAItem, spec: MethodSpec) -> None:
        with_options = spec.kind != KIND_HCQR_NO_OPTIONS
        keep = _KEPT_ROLES[spec.kind]
        try:
            state.hypothesis = self.formulate_hypothesis(state, key, item, with_options)
        except ParseFailure:
            state.fallback_flag = FLAG_HYPOTHESIS_PARSE
            state.plan = QueryPlan(entries=((ROLE_RAW, item.question),), origin=spec.name)
            state.context = self._simple_context(state, item, spec.b_max)
            state.answer = self._generate(state, key, item, spec)
            return
        try:
            state.plan = self.rewrite_queries(
                state, key, item, state.hypothesis, keep, spec.name
            )
        except ParseFailure:
            state.fallback_flag = FLAG_QUERY_PARSE
            state.plan = QueryPlan(entries=((ROLE_RAW, item.question),), origin=spec.name)
            state.context = self._simple_context(state, item, spec.b_max)
            state.answer = self._generate(state, key, item, spec)
            return
        lists = [
            (role, self._retrieve(state, text, spec.per_query_k))
            for role, text in state.plan.entries
        ]
        state.context = fuse(lists, spec.b_max)
        state.answer = self._generate(state, key, item, spec)

    _DISPATCH = {
        KIND_COT: "_run_cot",
        KIND_SIMPLE_RAG: "_run_simple_rag",
        KIND_REWRITING: "_run_rewriting",
        KIND_REWRITING_OPTIONS: "_run_rewriting",
        KIND_HYDE: "_run_hyde",
        KIND_RERANK_RAG: "_run_rerank",
        KIND_MAIN_RAG: "_run_main_rag",
        KIND_HCQR: "_run_hcqr",
        KIND_HCQR_NO_OPTIONS: "_run_hcqr",
        KIND_HCQR_MINUS_Q1: "_run_hcqr",
        KIND_HCQR_MINUS_Q2: "_run_hcqr",
        KIND_HCQR_MINUS_Q3: "_run_hcqr",
    }

    def run(self, spec: MethodSpec, item: QAItem) -> RunRecord:
        """Execute one method for one question; failures become error records.

        Parse failures that survive the retry and backend faults degrade to
        an error-status record so a batch keeps going; capability errors
        propagate because the whole run is misconfigured.
        """
        item.validate()
        state = _RunState()
        key = (spec.name, item.item_id)
        started = time.perf_counter()
        status, error = "ok", None
        try:
            getattr(self, self._DISPATCH[spec.kind])(state, key, item, spec)
        except CapabilityError:
            raise
        except EvdError as exc:
            status, error = "error", f"{type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - started

        model = ""
        if self.gateway.has_role("chat"):
            model = self.gateway.backend("chat").model_name
        usage = {
            "prompt_tokens": state.prompt_tokens,
            "output_tokens": state.output_tokens,
            "chat_calls": state.chat_calls,
        }
        extras = dict(state.extras)
        extras["retrieval_calls"] = state.retrieval_calls
        return RunRecord(
            item_id=item.item_id,
            dataset=self.dataset_id,
            method=spec.name,
            kind=spec.kind,
            model=model,
            query_plan=state.plan,
            context=state.context,
            hypothesis=state.hypothesis,
            answer=state.answer if status == "ok" else None,
            status=status,
            error=error,
            fallback_flag=state.fallback_flag,
            usage=usage,
            extras=extras,
            wall_time_s=elapsed,
        )
