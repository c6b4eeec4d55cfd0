from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def clubfoot_example() -> dict:
    return json.loads((FIXTURES / "clubfoot_example.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def malformed_answers() -> list[dict]:
    lines = (FIXTURES / "malformed_answers.jsonl").read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]
