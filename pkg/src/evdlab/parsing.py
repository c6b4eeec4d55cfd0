"""Parsers turning raw model output into structured records.

Every parser uses the same bounded, deterministic repair ladder: take the
last well-formed JSON object in the text; failing that, retry after
mechanical repairs (code fences, trailing commas, single quotes); for
answers only, fall back to a regex over answer-choice phrasing. There is no
LLM-based self-repair, so parsing stays testable.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ParseFailure

PARSE_CLEAN = "clean_json"
PARSE_REPAIRED = "repaired"
PARSE_REGEX = "regex_fallback"

ROLE_SUPPORT = "SUPPORT"
ROLE_DISTINCTION = "DISTINCTION"
ROLE_KEY_FEATURES = "KEY_FEATURES"
ROLE_PARAPHRASE = "PARAPHRASE"
ROLE_RAW = "RAW"

HCQR_ROLES = (ROLE_SUPPORT, ROLE_DISTINCTION, ROLE_KEY_FEATURES)

JUDGE_LABELS = ("ENTAILED", "USEFUL_BUT_NOT_ENTAILED", "NOT_USEFUL")
UNSURE = "UNSURE"


@dataclass(frozen=True)
class ParsedAnswer:
    choice: str
    rationale: str
    parse_mode: str

    def to_json(self) -> dict:
        return {"choice": self.choice, "rationale": self.rationale, "parse_mode": self.parse_mode}

    @classmethod
    def from_json(cls, obj: dict) -> "ParsedAnswer":
        return cls(obj["choice"], obj.get("rationale", ""), obj.get("parse_mode", PARSE_CLEAN))


@dataclass(frozen=True)
class HypothesisState:
    """Structured working hypothesis steering retrieval."""

    best_guess: str
    best_guess_text: str
    discriminating_features: tuple[str, ...]
    confirming_evidence: tuple[str, ...]
    reasoning: str

    def to_json(self) -> dict:
        return {
            "best_guess": self.best_guess,
            "best_guess_text": self.best_guess_text,
            "discriminating_features": list(self.discriminating_features),
            "confirming_evidence": list(self.confirming_evidence),
            "reasoning": self.reasoning,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HypothesisState":
        return cls(
            best_guess=obj["best_guess"],
            best_guess_text=obj["best_guess_text"],
            discriminating_features=tuple(obj["discriminating_features"]),
            confirming_evidence=tuple(obj["confirming_evidence"]),
            reasoning=obj["reasoning"],
        )


@dataclass(frozen=True)
class QueryPlan:
    """Ordered (role, query) pairs plus the method that produced them."""

    entries: tuple[tuple[str, str], ...]
    origin: str = ""

    def queries(self) -> list[str]:
        return [text for _, text in self.entries]

    def roles(self) -> list[str]:
        return [role for role, _ in self.entries]

    def to_json(self) -> dict:
        return {"origin": self.origin, "entries": [list(e) for e in self.entries]}

    @classmethod
    def from_json(cls, obj: dict) -> "QueryPlan":
        return cls(tuple((r, t) for r, t in obj["entries"]), obj.get("origin", ""))


@dataclass(frozen=True)
class JudgeVerdict:
    selected_answer: str
    label: str
    raw: str
    flag: str | None = None


# ---------------------------------------------------------------------------
# JSON extraction and repair
# ---------------------------------------------------------------------------


def _balanced_spans(text: str) -> list[tuple[int, int]]:
    """Top-level {...} spans by brace counting (string contents not tracked)."""
    spans: list[tuple[int, int]] = []
    stack: list[int] = []
    for i, ch in enumerate(text):
        if ch == "{":
            stack.append(i)
        elif ch == "}" and stack:
            start = stack.pop()
            if not stack:
                spans.append((start, i + 1))
    return spans


def _strip_fences(text: str) -> str:
    return re.sub(r"```[a-zA-Z]*", "", text).replace("```", "")


def _repair_candidate(candidate: str) -> Iterable[str]:
    no_comma = re.sub(r",\s*([}\]])", r"\1", candidate)
    yield no_comma
    if "'" in no_comma:
        yield no_comma.replace("'", '"')


def extract_last_json(raw: str) -> tuple[dict, str]:
    """Return (object, parse_mode) for the last well-formed JSON object.

    The clean pass scans candidates from the end of the text; the repaired
    pass reruns the scan after mechanical fixes. Raises ParseFailure when
    nothing parses.
    """
    spans = _balanced_spans(raw)
    for start, end in reversed(spans):
        try:
            obj = json.loads(raw[start:end])
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj, PARSE_CLEAN
    defenced = _strip_fences(raw)
    repaired_spans = _balanced_spans(defenced)
    for start, end in reversed(repaired_spans):
        for attempt in _repair_candidate(defenced[start:end]):
            try:
                obj = json.loads(attempt)
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict):
                return obj, PARSE_REPAIRED
    raise ParseFailure("no well-formed JSON object found", raw=raw)


def _clean_letter(value: str) -> str:
    s = str(value).strip()
    s = s.strip("\"'")
    s = re.sub(r"^[\(\[\s]+", "", s)
    s = re.sub(r"[\)\]\s]+$", "", s)
    if s and (len(s) == 1 or not s[1].isalpha()):
        return s[0].upper()
    return s


_ANSWER_PHRASES = re.compile(
    r"""(?ix)
    (?:
        answer[_\s]?choice["”]?\s*[:=]?\s*["“']?\(?(?P<c1>[A-Z])\)?(?![A-Za-z])
      | (?:final\ answer|best\ choice|correct\ answer|best\ option|correct\ option|answer|choice|option)
        \s+(?:is|would\ be)\s*:?\s*["“']?\(?(?P<c2>[A-Z])\)?(?![A-Za-z])
      | \banswer\s*[:=]\s*["“']?\(?(?P<c3>[A-Z])\)?(?![A-Za-z])
    )
    """
)


def _regex_choice(raw: str, valid_letters: set[str]) -> str | None:
    last: str | None = None
    for match in _ANSWER_PHRASES.finditer(raw):
        letter = (match.group("c1") or match.group("c2") or match.group("c3") or "").upper()
        if letter in valid_letters:
            last = letter
    return last


def parse_answer(raw: str, valid_letters: Iterable[str]) -> ParsedAnswer:
    """Extract the chosen option letter from generator output.

    JSON with an in-range `answer_choice` wins; a JSON answer outside the
    valid letters is an error, not a fallback trigger.
    """
    valid = {l.upper() for l in valid_letters}
    try:
        obj, mode = extract_last_json(raw)
    except ParseFailure:
        obj, mode = None, PARSE_REGEX

    if obj is not None and "answer_choice" in obj:
        letter = _clean_letter(obj["answer_choice"])
        if letter not in valid:
            raise ParseFailure(
                f"answer_choice {obj['answer_choice']!r} outside valid letters "
                f"{sorted(valid)}",
                raw=raw,
            )
        return ParsedAnswer(
            choice=letter,
            rationale=str(obj.get("step_by_step_thinking", "")),
            parse_mode=mode,
        )

    letter = _regex_choice(raw, valid)
    if letter is None:
        raise ParseFailure("could not extract an answer choice", raw=raw)
    return ParsedAnswer(choice=letter, rationale=raw.strip(), parse_mode=PARSE_REGEX)


def _string_list(value, field_name: str, raw: str) -> tuple[str, ...]:
    if isinstance(value, str):
        items = [value.strip()] if value.strip() else []
    elif isinstance(value, (list, tuple)):
        items = [str(v).strip() for v in value if str(v).strip()]
    else:
        raise ParseFailure(f"{field_name} is not a list", raw=raw)
    if not items:
        raise ParseFailure(f"{field_name} is empty", raw=raw)
    return tuple(items)


def parse_hypothesis(raw: str, options_present: bool) -> HypothesisState:
    """Read the working-hypothesis record from formulator output.

    With options the model reports both a best-guess letter and the verbatim
    option text; without options the free-text guess doubles as the text.
    """
    obj, _mode = extract_last_json(raw)
    for name in ("discriminating_features", "reasoning", "confirming_evidence", "best_guess"):
        if name not in obj:
            raise ParseFailure(f"hypothesis output missing field {name!r}", raw=raw)
    features = _string_list(obj["discriminating_features"], "discriminating_features", raw)
    evidence = _string_list(obj["confirming_evidence"], "confirming_evidence", raw)
    reasoning = str(obj["reasoning"]).strip()
    best_guess = str(obj["best_guess"]).strip()
    if options_present:
        if "best_guess_text" not in obj:
            raise ParseFailure("hypothesis output missing field 'best_guess_text'", raw=raw)
        best_guess_text = str(obj["best_guess_text"]).strip()
    else:
        best_guess_text = best_guess
    if not best_guess_text:
        raise ParseFailure("hypothesis best_guess_text is empty", raw=raw)
    return HypothesisState(
        best_guess=best_guess,
        best_guess_text=best_guess_text,
        discriminating_features=features,
        confirming_evidence=evidence,
        reasoning=reasoning,
    )


def _strip_brackets(text: str) -> str:
    s = text.strip()
    if len(s) >= 2 and s[0] == "[" and s[-1] == "]":
        s = s[1:-1].strip()
    return s


def parse_queries(
    raw: str,
    expected_roles: Sequence[str],
    line_prefix: str,
    origin: str = "",
) -> QueryPlan:
    """Collect `<prefix> <n>:` lines and assign them to roles in order.

    A query left on the line after the marker wins; an empty marker line
    consumes the next non-marker, non-empty line. Fewer usable queries than
    expected roles is a parse failure listing what was found.
    """
    if len(expected_roles) not in (2, 3):
        raise ValueError("expected_roles must have length 2 or 3")
    marker = re.compile(rf"^\s*{re.escape(line_prefix)}\s*(\d+)\s*[:.]\s*(.*)$")
    lines = raw.splitlines()
    texts: list[str] = []
    i = 0
    while i < len(lines):
        match = marker.match(lines[i])
        if match:
            text = _strip_brackets(match.group(2))
            j = i + 1
            while not text and j < len(lines):
                if marker.match(lines[j]):
                    break
                text = _strip_brackets(lines[j])
                j += 1
            if text:
                texts.append(text)
            i = j if j > i + 1 else i + 1
        else:
            i += 1
    if len(texts) < len(expected_roles):
        raise ParseFailure(
            f"expected {len(expected_roles)} '{line_prefix} n:' lines, found "
            f"{len(texts)}: {texts!r}",
            raw=raw,
        )
    entries = tuple(zip(expected_roles, texts[: len(expected_roles)]))
    return QueryPlan(entries=entries, origin=origin)


def parse_judge(raw: str, valid_letters: Iterable[str]) -> JudgeVerdict:
    """Read the context-utility verdict from judge output."""
    valid = {l.upper() for l in valid_letters}
    obj, _mode = extract_last_json(raw)
    for name in ("selected_answer", "label"):
        if name not in obj:
            raise ParseFailure(f"judge output missing field {name!r}", raw=raw)
    selected = str(obj["selected_answer"]).strip().strip("\"'").strip()
    if selected.upper() == UNSURE:
        selected = UNSURE
    else:
        selected = _clean_letter(selected)
        if selected not in valid:
            raise ParseFailure(
                f"selected_answer {obj['selected_answer']!r} not a valid letter or UNSURE",
                raw=raw,
            )
    label = str(obj["label"]).strip().strip(".").strip().upper()
    if label not in JUDGE_LABELS:
        raise ParseFailure(f"unknown judge label {obj['label']!r}", raw=raw)
    return JudgeVerdict(selected_answer=selected, label=label, raw=raw)


def parse_choice_only(raw: str, valid_letters: Iterable[str]) -> str:
    """Extract a bare option letter from a 'answer choice only' style reply."""
    valid = {l.upper() for l in valid_letters}
    stripped = raw.strip()
    lead = re.match(r"^[\(\[]?([A-Za-z])[\)\]]?(?:[.:\s]|$)", stripped)
    if lead and lead.group(1).upper() in valid:
        return lead.group(1).upper()
    phrased = _regex_choice(raw, valid)
    if phrased is not None:
        return phrased
    for match in re.finditer(r"\b([A-Z])\b", raw):
        if match.group(1) in valid:
            return match.group(1)
    raise ParseFailure("could not extract a bare answer choice", raw=raw)
