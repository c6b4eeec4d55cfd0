"""Append-only newline-delimited persistence for records and verdicts.

Files are named by (dataset, model, manifest hash prefix), so any change to
the manifest opens a fresh record namespace and resumability reduces to
membership checks on the existing file.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable

from .errors import DataError


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def slug(text: str) -> str:
    cleaned = re.sub(r"[^A-Za-z0-9_.-]+", "-", text).strip("-")
    return cleaned or "x"


def records_path(output_dir: str | Path, dataset: str, model: str, manifest_hash: str) -> Path:
    return Path(output_dir) / (
        f"records__{slug(dataset)}__{slug(model)}__{manifest_hash[:8]}.jsonl"
    )


def verdicts_path(
    output_dir: str | Path, dataset: str, model: str, judge_model: str, manifest_hash: str
) -> Path:
    return Path(output_dir) / (
        f"verdicts__{slug(dataset)}__{slug(model)}__{slug(judge_model)}"
        f"__{manifest_hash[:8]}.jsonl"
    )


def manifest_path(output_dir: str | Path, dataset: str, model: str, manifest_hash: str) -> Path:
    return Path(output_dir) / (
        f"manifest__{slug(dataset)}__{slug(model)}__{manifest_hash[:8]}.json"
    )


def read_jsonl(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    out: list[dict] = []
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {lineno}: corrupt record: {exc}") from exc
    return out


def append_jsonl(path: str | Path, objs: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with path.open("a", encoding="utf-8") as handle:
        for obj in objs:
            handle.write(canonical_dumps(obj) + "\n")
            written += 1
    return written


def write_manifest(path: str | Path, manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not path.exists():
        path.write_text(canonical_dumps(manifest) + "\n", encoding="utf-8")
