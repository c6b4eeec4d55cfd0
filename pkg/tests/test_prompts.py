"""Template rendering: slot fidelity, formatting helpers, and invariants."""

from __future__ import annotations

import pytest

from evdlab import prompts
from evdlab.prompts import (
    EMPTY_CONTEXT_MARKER,
    TEMPLATES,
    format_documents,
    format_gold_line,
    format_options,
    render,
)


def example_slots(example):
    return {
        "question": example["question"],
        "options": format_options(example["options"]),
    }


class TestRender:
    def test_unknown_template_rejected(self):
        with pytest.raises(ValueError, match="unknown template"):
            render("NOPE", {})

    def test_missing_slot_rejected(self):
        with pytest.raises(ValueError, match="missing slots"):
            render(prompts.GENERATOR, {"question": "q"})

    def test_generator_empty_context_marker(self, clubfoot_example):
        slots = example_slots(clubfoot_example)
        slots["context"] = format_documents([])
        _, user = render(prompts.GENERATOR, slots)
        assert "Here are the relevant documents:" in user
        assert EMPTY_CONTEXT_MARKER in user

    def test_rewriter_contains_support_instruction(self, clubfoot_example):
        _, user = render(
            prompts.REWRITER,
            {
                "question": clubfoot_example["question"],
                "best_guess_text": "Foot abduction brace",
                "reasoning": "r",
                "confirming_evidence": "e",
                "discriminating_features": "f",
            },
        )
        assert "Find evidence supporting Foot abduction brace" in user

    def test_hypothesis_lists_all_options_in_order(self, clubfoot_example):
        _, user = render(prompts.HYPOTHESIS, example_slots(clubfoot_example))
        options = clubfoot_example["options"]
        positions = [user.index(f"{letter}. {options[letter]}") for letter in "ABCD"]
        assert positions == sorted(positions)

    def test_hypothesis_no_options_hides_option_text(self, clubfoot_example):
        _, user = render(
            prompts.HYPOTHESIS_NO_OPTIONS, {"question": clubfoot_example["question"]}
        )
        for text in clubfoot_example["options"].values():
            assert text not in user

    def test_no_unexpanded_markers_after_render(self):
        for template_id, template in TEMPLATES.items():
            slots = {name: f"<{name} value>" for name in template.required_slots}
            system, user = render(template_id, slots)
            for name in template.required_slots:
                assert "{" + name + "}" not in user
                assert system is None or "{" + name + "}" not in system

    def test_slot_values_never_rescanned(self):
        _, user = render(
            prompts.HYDE, {"question": "data containing {question} marker"}
        )
        assert "data containing {question} marker" in user

    def test_rendering_injective_on_slot_values(self):
        rendered = set()
        for i in range(25):
            _, user = render(prompts.HYDE, {"question": f"variant {i}"})
            rendered.add(user)
        assert len(rendered) == 25

    def test_json_directive_braces_survive(self):
        system, _ = render(
            prompts.COT, {"question": "q", "options": "A. x\nB. y"}
        )
        assert '"answer_choice": Str{A/B/C/...}' in system

    def test_rewriting_options_exposes_every_option(self, clubfoot_example):
        _, user = render(prompts.REWRITING_OPTIONS, example_slots(clubfoot_example))
        for text in clubfoot_example["options"].values():
            assert text in user

    def test_mainrag_templates_round_out(self):
        _, user = render(
            prompts.MAINRAG_AGENT2,
            {"context": "[1] d", "question": "q", "options": "A. x", "llm_answer": "A. x"},
        )
        assert user.endswith("Answer with exactly one token: Yes or No.")


class TestFormatting:
    def test_document_numbering_starts_at_one(self):
        text = format_documents([("T1", "body one"), (None, "body two")])
        assert text.splitlines() == ["[1] T1. body one", "[2] body two"]

    def test_empty_documents_marker(self):
        assert format_documents([]) == EMPTY_CONTEXT_MARKER

    def test_options_sorted_by_letter(self):
        assert format_options({"B": "two", "A": "one"}) == "A. one\nB. two"

    def test_gold_line(self):
        assert format_gold_line("C", "Reassurance") == "C. Reassurance"
