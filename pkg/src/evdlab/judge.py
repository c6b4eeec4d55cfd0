"""Context-utility labeling of retrieved evidence via a judge backend.

The judge sees only the question, options, gold answer, and retrieved
chunks; it never sees the generator's answer. An ENTAILED verdict whose
selected answer disagrees with the gold answer violates the label's own
required condition and is downgraded with a flag rather than trusted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import prompts
from .corpus import QAItem
from .errors import DataError, ParseFailure
from .gateway import ChatRequest, Gateway
from .parsing import JudgeVerdict, parse_judge

FLAG_ENTAILED_DOWNGRADED = "entailed_selected_mismatch"

RETRY_TEMPERATURE = 0.3


@dataclass(frozen=True)
class JudgeRequest:
    """One judging task: a question plus the resolved context texts."""

    item: QAItem
    gold: str
    chunks: tuple[tuple[str | None, str], ...]
    judge_model: str = ""


def judge_context(
    gateway: Gateway,
    req: JudgeRequest,
    max_output_tokens: int = 8192,
    prompt_sink: Callable[[str | None, str], None] | None = None,
) -> JudgeVerdict:
    """Label one retrieved context against the gold answer.

    Greedy decoding with one low-temperature retry on unparseable output;
    a still-unparseable reply raises ParseFailure for the batch layer to
    record as unjudged.
    """
    if not req.chunks:
        raise DataError(
            f"item {req.item.item_id!r}: empty context is never judged"
        )
    if req.gold not in req.item.options:
        raise DataError(
            f"item {req.item.item_id!r}: gold {req.gold!r} not among options"
        )
    system, user = prompts.render(
        prompts.JUDGE,
        {
            "question": req.item.question,
            "options": prompts.format_options(req.item.options),
            "gold_line": prompts.format_gold_line(req.gold, req.item.options[req.gold]),
            "chunks": prompts.format_documents(req.chunks),
        },
    )
    if prompt_sink is not None:
        prompt_sink(system, user)
    base = ChatRequest(
        messages=(("system", system), ("user", user)),
        temperature=0.0,
        max_output_tokens=max_output_tokens,
    )
    resp = gateway.chat(base, role="judge")
    try:
        verdict = parse_judge(resp.text, req.item.letters)
    except ParseFailure:
        retry = ChatRequest(
            messages=base.messages,
            temperature=RETRY_TEMPERATURE,
            max_output_tokens=max_output_tokens,
        )
        resp = gateway.chat(retry, role="judge")
        verdict = parse_judge(resp.text, req.item.letters)

    if verdict.label == "ENTAILED" and verdict.selected_answer != req.gold:
        return JudgeVerdict(
            selected_answer=verdict.selected_answer,
            label="USEFUL_BUT_NOT_ENTAILED",
            raw=verdict.raw,
            flag=FLAG_ENTAILED_DOWNGRADED,
        )
    return verdict
