"""Budgeted multi-query RAG experiment harness."""

from .corpus import (
    Corpus,
    Document,
    QAItem,
    VectorIndex,
    build_index,
    ingest_corpus,
    load_dataset,
    load_index,
    save_index,
)
from .gateway import (
    ChatRequest,
    ChatResponse,
    Gateway,
    MockChatBackend,
    MockEmbedBackend,
    MockScoreBackend,
    PairScore,
    ScriptedChatBackend,
)
from .judge import JudgeRequest, judge_context
from .parsing import (
    HypothesisState,
    JudgeVerdict,
    ParsedAnswer,
    QueryPlan,
    parse_answer,
    parse_hypothesis,
    parse_judge,
    parse_queries,
)
from .pipelines import ContextSet, MethodSpec, PipelineRunner, RunRecord, default_methods, fuse
from .prompts import TEMPLATES, render

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "ChatResponse",
    "ContextSet",
    "Corpus",
    "Document",
    "Gateway",
    "HypothesisState",
    "JudgeRequest",
    "JudgeVerdict",
    "MethodSpec",
    "MockChatBackend",
    "MockEmbedBackend",
    "MockScoreBackend",
    "PairScore",
    "ParsedAnswer",
    "PipelineRunner",
    "QAItem",
    "QueryPlan",
    "RunRecord",
    "ScriptedChatBackend",
    "TEMPLATES",
    "VectorIndex",
    "build_index",
    "default_methods",
    "fuse",
    "ingest_corpus",
    "judge_context",
    "load_dataset",
    "load_index",
    "parse_answer",
    "parse_hypothesis",
    "parse_judge",
    "parse_queries",
    "render",
    "save_index",
]
