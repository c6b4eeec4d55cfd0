"""Static prompt templates and slot rendering.

Templates are shipped verbatim as versioned assets; rendering is byte-exact
slot substitution and nothing else. Prompt drift is the main
reproducibility hazard in this kind of harness, so nothing here rewraps,
trims, or normalizes template text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

TEMPLATE_VERSION = "1"

COT = "COT"
GENERATOR = "GENERATOR"
REWRITING = "REWRITING"
REWRITING_OPTIONS = "REWRITING_OPTIONS"
HYDE = "HYDE"
MAINRAG_AGENT1 = "MAINRAG_AGENT1"
MAINRAG_AGENT2 = "MAINRAG_AGENT2"
JUDGE = "JUDGE"
HYPOTHESIS = "HYPOTHESIS"
HYPOTHESIS_NO_OPTIONS = "HYPOTHESIS_NO_OPTIONS"
REWRITER = "REWRITER"

EMPTY_CONTEXT_MARKER = "(no documents)"

_SLOT_NAMES = (
    "question",
    "options",
    "context",
    "gold_line",
    "chunks",
    "llm_answer",
    "best_guess_text",
    "reasoning",
    "confirming_evidence",
    "discriminating_features",
)
_SLOT_RE = re.compile(r"\{(" + "|".join(_SLOT_NAMES) + r")\}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    system_text: str | None
    user_text: str

    @property
    def required_slots(self) -> frozenset[str]:
        text = (self.system_text or "") + self.user_text
        return frozenset(m.group(1) for m in _SLOT_RE.finditer(text))


_COT_SYSTEM = (
    "You are a helpful medical expert, and your task is to answer a multi-choice "
    "medical question. Please first think step-by-step and then choose the answer from "
    'the provided options. Organize your output in a json formatted as '
    'Dict{"step_by_step_thinking": Str(explanation), "answer_choice": Str{A/B/C/...}}. '
    "Your responses will be used for research purposes only, so please have a definite answer."
)

_GENERATOR_SYSTEM = (
    "You are a helpful medical expert, and your task is to answer a multi-choice "
    "medical question using the relevant documents. Please first think step-by-step and "
    "then choose the answer from the provided options. Organize your output in a json "
    'formatted as Dict{"step_by_step_thinking": Str(explanation), "answer_choice": '
    "Str{A/B/C/...}}. Your responses will be used for research purposes only, so please "
    "have a definite answer."
)

_REWRITING_PREAMBLE = (
    "You are an AI language model assistant. Your task is to generate exactly three "
    "different versions of the given user question to retrieve relevant documents from "
    "a vector database. By generating multiple perspectives on the user question, your "
    "goal is to help the user overcome some of the limitations of the distance-based "
    "similarity search."
)

_JUDGE_USER = """### QUESTION
{question}

### OPTIONS
{options}

### GOLD ANSWER
{gold_line}

### RETRIEVED CONTEXT
{chunks}

### TASK
Given the retrieved context, evaluate its relationship to the gold answer.
1. Identify the answer option most strongly supported by the retrieved context alone. Call this 'selected_answer'.
2. Then classify how the retrieved context relates to the gold answer: whether it entails the gold answer, provides useful but incomplete support for it, or is not useful for supporting it.

### LABELS

1. ENTAILED
Definition:
The gold answer is entailed by the retrieved context alone.
The reasoning chain from the retrieved context to the gold answer is complete within the provided context.

Required conditions:
- The gold answer follows from the retrieved context alone.
- No outside knowledge, missing fact, or unstated assumption is needed.
- The conclusion is decisive, not merely plausible.
- 'selected_answer' matches the gold answer.

2. USEFUL_BUT_NOT_ENTAILED
Definition:
The retrieved context provides strong decision-relevant support for the gold answer, but the gold answer is not fully entailed by the retrieved context alone.
A small additional reasoning step, minor outside knowledge, or a single missing bridge may still be needed, but the retrieved context already contains evidence that substantially narrows the decision toward the gold answer.

This label should be used only when the retrieved context contains at least one of the following:
- a decisive clue, rule, condition, or relation that strongly supports the gold answer, even if one final bridge is missing
- evidence that rules out or strongly weakens one or more plausible alternative answers, leaving the gold answer as the clearly favored option
- a partial but highly informative connection between the question and the gold answer that would make the correct answer reasonably reachable with only minimal additional knowledge

Do not use this label for context that is merely relevant, broadly related, or weakly suggestive.

3. NOT_USEFUL
Definition:
The retrieved context does not provide strong decision-relevant support for the gold answer.
It may be topically related, mention similar concepts, or provide background information, but it does not contain a decisive clue, a strong exclusion of alternatives, or a core connection that materially helps determine the gold answer.

### RULES
- Evaluate only the retrieved context.
- Evaluate the label relative to the gold answer.
- Infer 'selected_answer' from the retrieved context alone; do not force it to equal the gold answer.
- Be conservative about ENTAILED.

Output only JSON on the last line:
{"selected_answer": "<A|B|C|D|UNSURE>", "label": "<ENTAILED|USEFUL_BUT_NOT_ENTAILED|NOT_USEFUL>"}"""

_HYPOTHESIS_TAIL = (
    "Analyze this question carefully. Think step-by-step about each option, considering "
    "the information given in the question and relevant knowledge. Reason through the "
    "elimination analysis before making your final assessment."
)

TEMPLATES: dict[str, PromptTemplate] = {
    COT: PromptTemplate(
        COT,
        _COT_SYSTEM,
        "Here is the question:\n{question}\n\n"
        "Here are the potential choices:\n{options}\n\n"
        "Please think step-by-step and generate your output in json:",
    ),
    GENERATOR: PromptTemplate(
        GENERATOR,
        _GENERATOR_SYSTEM,
        "Here are the relevant documents:\n{context}\n\n"
        "Here is the question:\n{question}\n\n"
        "Here are the potential choices:\n{options}\n\n"
        "Please think step-by-step and generate your output in json:",
    ),
    REWRITING: PromptTemplate(
        REWRITING,
        None,
        _REWRITING_PREAMBLE
        + "\n\nOriginal question: {question}\n\n"
        + "Format your response in plain text as:\n\nSub-query 1:\n\nSub-query 2:\n\nSub-query 3:",
    ),
    REWRITING_OPTIONS: PromptTemplate(
        REWRITING_OPTIONS,
        None,
        _REWRITING_PREAMBLE
        + "\n\nOriginal question: {question}\n\nOptions:\n{options}\n\n"
        + "Format your response in plain text as:\n\nSub-query 1:\n\nSub-query 2:\n\nSub-query 3:",
    ),
    HYDE: PromptTemplate(
        HYDE,
        None,
        "Please write a passage to answer the question.\nQuestion: {question}\nPassage:",
    ),
    MAINRAG_AGENT1: PromptTemplate(
        MAINRAG_AGENT1,
        "You are an accurate and reliable AI assistant that can answer questions with "
        "the help of external documents. You should only provide the correct answer "
        "without repeating the question and instruction.",
        "Document:\n{context}\n\n"
        "Question:\n{question}\n\n"
        "Options:\n{options}\n\n"
        "Based ONLY on the provided document, what is the best answer to the question? "
        "Output only the answer choice.",
    ),
    MAINRAG_AGENT2: PromptTemplate(
        MAINRAG_AGENT2,
        "You are a noisy document evaluator that can judge if the external document is "
        "noisy for the query with unrelated or misleading information. Given a retrieved "
        "Document, a Question, and an Answer generated by an LLM (LLM Answer), you "
        "should judge whether both the following two conditions are reached: (1) the "
        "Document provides specific information for answering the Question; (2) the LLM "
        "Answer directly answers the question based on the retrieved Document. Please "
        "note that external documents may contain noisy or factually incorrect "
        "information. If the information in the document does not contain the answer, "
        "you should point it out with evidence. You should answer with 'Yes' or 'No' "
        "with evidence of your judgment, where 'No' means one of the conditions (1) and "
        "(2) are unreached and indicates it is a noisy document.",
        "Document:\n{context}\n\n"
        "Question with Options:\n{question}\n{options}\n\n"
        "LLM Answer:\n{llm_answer}\n\n"
        "Does the document contain enough specific information to answer the question, "
        "and is the LLM Answer directly supported by the document? Answer with exactly "
        "one token: Yes or No.",
    ),
    JUDGE: PromptTemplate(
        JUDGE,
        "You evaluate the relationship between retrieved context and the gold answer "
        "for a multiple-choice question.",
        _JUDGE_USER,
    ),
    HYPOTHESIS: PromptTemplate(
        HYPOTHESIS,
        "You are an expert analyst taking an exam.",
        "Question: {question}\n\nOptions:\n{options}\n\n" + _HYPOTHESIS_TAIL + "\n\n"
        "After your analysis, provide your final assessment in JSON:\n"
        "{\n"
        '    "discriminating_features": ["2-3 features that distinguish between options"],\n'
        '    "reasoning": "brief explanation why this is the best answer",\n'
        '    "confirming_evidence": ["1-3 specific facts that would confirm this answer"],\n'
        '    "best_guess": "A/B/C/D",\n'
        '    "best_guess_text": "<<copy the chosen option text verbatim>>"\n'
        "}",
    ),
    HYPOTHESIS_NO_OPTIONS: PromptTemplate(
        HYPOTHESIS_NO_OPTIONS,
        "You are an expert analyst taking an exam.",
        "Question: {question}\n\n" + _HYPOTHESIS_TAIL + "\n\n"
        "After your analysis, provide your final assessment in JSON:\n"
        "{\n"
        '    "discriminating_features": ["2-3 features that distinguish between options"],\n'
        '    "reasoning": "brief explanation why this is the best answer",\n'
        '    "confirming_evidence": ["1-3 specific facts that would confirm this answer"],\n'
        '    "best_guess": "write your best guess for the answer"\n'
        "}",
    ),
    REWRITER: PromptTemplate(
        REWRITER,
        "You are a search query expert. Generate precise, targeted search queries. "
        "Output ONLY the 3 queries in the exact format requested.",
        "Generate 3 highly targeted search queries to find evidence for this question.\n\n"
        "Question: {question}\n"
        "Best Guess Answer: {best_guess_text}\n"
        "Reasoning: {reasoning}\n"
        "Evidence Needed: {confirming_evidence}\n"
        "Key Features: {discriminating_features}\n\n"
        "Generate 3 SPECIFIC queries:\n"
        "Query 1: Find evidence supporting {best_guess_text} - focus on the main reasoning\n"
        "Query 2: Find distinguishing criteria between the top candidate answers\n"
        "Query 3: Find specific key features or facts\n\n"
        "Format:\n"
        "Query 1: [query]\n"
        "Query 2: [query]\n"
        "Query 3: [query]",
    ),
}


def render(template_id: str, slots: Mapping[str, str]) -> tuple[str | None, str]:
    """Fill a template's slots and return (system_text, user_text).

    Substitution is a single byte-exact pass; slot values are never rescanned,
    so data that happens to look like a marker stays untouched. Raises on an
    unknown template id or a missing slot.
    """
    template = TEMPLATES.get(template_id)
    if template is None:
        raise ValueError(f"unknown template id {template_id!r}")
    missing = template.required_slots - set(slots)
    if missing:
        raise ValueError(
            f"template {template_id}: missing slots {sorted(missing)}"
        )

    def fill(text: str | None) -> str | None:
        if text is None:
            return None
        return _SLOT_RE.sub(lambda m: str(slots[m.group(1)]), text)

    return fill(template.system_text), fill(template.user_text)  # type: ignore[return-value]


def format_options(options: Mapping[str, str]) -> str:
    """Render an option map as 'A. <text>' lines in letter order."""
    return "\n".join(f"{letter}. {options[letter]}" for letter in sorted(options))


def format_documents(docs: Sequence[tuple[str | None, str]]) -> str:
    """Render documents as numbered '[i] <title>. <text>' lines, 1-based.

    An empty collection renders as an explicit marker rather than an empty
    section, so the surrounding prompt never silently malforms.
    """
    if not docs:
        return EMPTY_CONTEXT_MARKER
    lines = []
    for i, (title, text) in enumerate(docs, start=1):
        if title:
            lines.append(f"[{i}] {title}. {text}")
        else:
            lines.append(f"[{i}] {text}")
    return "\n".join(lines)


def format_gold_line(letter: str, text: str) -> str:
    return f"{letter}. {text}"


def join_list_slot(values: Sequence[str]) -> str:
    """Serialize a list-valued slot for single-line template fields."""
    return "; ".join(values)
