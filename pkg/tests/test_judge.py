"""Context-utility judging: consistency rule, determinism, preconditions."""

from __future__ import annotations

import pytest

from evdlab.corpus import QAItem
from evdlab.errors import DataError, ParseFailure
from evdlab.gateway import Gateway, MockChatBackend, ScriptedChatBackend
from evdlab.judge import FLAG_ENTAILED_DOWNGRADED, JudgeRequest, judge_context

ITEM = QAItem(
    item_id="q1",
    question="Which management step follows?",
    options={"A": "brace", "B": "surgery", "C": "reassurance", "D": "capsulotomy"},
    gold="C",
)
CHUNKS = (("Topic 1", "passage one"), (None, "passage two"))


def judge_gateway(script):
    return Gateway(
        judge=ScriptedChatBackend(script, model_name="scripted-judge"),
        retry_backoff_s=0.0,
        sleep=lambda s: None,
    )


def request(chunks=CHUNKS):
    return JudgeRequest(item=ITEM, gold=ITEM.gold, chunks=chunks)


class TestJudgeContext:
    def test_consistent_entailed_passes_through(self):
        gw = judge_gateway(['{"selected_answer": "C", "label": "ENTAILED"}'])
        verdict = judge_context(gw, request())
        assert verdict.label == "ENTAILED"
        assert verdict.flag is None

    def test_inconsistent_entailed_downgraded_with_flag(self):
        gw = judge_gateway(['{"selected_answer": "A", "label": "ENTAILED"}'])
        verdict = judge_context(gw, request())
        assert verdict.label == "USEFUL_BUT_NOT_ENTAILED"
        assert verdict.flag == FLAG_ENTAILED_DOWNGRADED
        assert verdict.selected_answer == "A"

    def test_empty_context_is_precondition_error(self):
        gw = judge_gateway(['{"selected_answer": "C", "label": "ENTAILED"}'])
        with pytest.raises(DataError, match="never judged"):
            judge_context(gw, request(chunks=()))

    def test_unparseable_after_retry_raises(self):
        gw = judge_gateway(["garbage", "still garbage"])
        with pytest.raises(ParseFailure):
            judge_context(gw, request())

    def test_retry_recovers_on_second_attempt(self):
        gw = judge_gateway(
            ["garbage", '{"selected_answer": "B", "label": "NOT_USEFUL"}']
        )
        verdict = judge_context(gw, request())
        assert verdict.label == "NOT_USEFUL"

    def test_prompt_contains_question_gold_and_chunks(self):
        captured = {}

        def sink(system, user):
            captured["user"] = user

        gw = judge_gateway(['{"selected_answer": "C", "label": "NOT_USEFUL"}'])
        judge_context(gw, request(), prompt_sink=sink)
        user = captured["user"]
        assert ITEM.question in user
        assert "C. reassurance" in user
        assert "[1] Topic 1. passage one" in user
        assert "[2] passage two" in user

    def test_identical_inputs_identical_verdicts(self):
        gw = Gateway(
            judge=MockChatBackend(seed=31, model_name="mock-judge"),
            retry_backoff_s=0.0,
            sleep=lambda s: None,
        )
        first = judge_context(gw, request())
        second = judge_context(gw, request())
        assert (first.selected_answer, first.label) == (
            second.selected_answer,
            second.label,
        )

    def test_independent_of_generator_answers(self):
        # The judge request carries no generator answer at all; permuting
        # answers across records cannot reach it. Assert the surface stays
        # closed: constructing a request needs only item, gold, and chunks.
        req = request()
        assert not hasattr(req, "answer")
        gw = judge_gateway(['{"selected_answer": "C", "label": "ENTAILED"}'] )
        verdict = judge_context(gw, req)
        assert verdict.label == "ENTAILED"
