"""Shared builders for synthetic corpora, datasets, and mock-backed runners."""

from __future__ import annotations

import json
import random
from pathlib import Path

from evdlab.config import config_from_dict
from evdlab.corpus import Corpus, Document, QAItem, build_index
from evdlab.gateway import Gateway, MockChatBackend, MockEmbedBackend, MockScoreBackend
from evdlab.pipelines import PipelineRunner

WORDS = [f"w{j}" for j in range(60)]


def synth_documents(n_docs: int, seed: int = 0) -> list[Document]:
    rng = random.Random(seed)
    docs = []
    for i in range(n_docs):
        words = " ".join(rng.sample(WORDS, 6))
        docs.append(
            Document(doc_id=f"d{i:04d}", title=f"Topic {i}", text=f"Passage about {words}.")
        )
    return docs


def synth_items(n_items: int, seed: int = 0, n_options: int = 4) -> list[QAItem]:
    rng = random.Random(seed + 1)
    letters = [chr(ord("A") + i) for i in range(n_options)]
    items = []
    for i in range(n_items):
        words = rng.sample(WORDS, 4)
        options = {
            letter: f"management plan {rng.choice(WORDS)} {letter.lower()}{i}"
            for letter in letters
        }
        items.append(
            QAItem(
                item_id=f"q{i:04d}",
                question=(
                    f"Case {i}: a patient presents with {words[0]} {words[1]} and "
                    f"{words[2]}. Given {words[3]}, what is the next step?"
                ),
                options=options,
                gold=rng.choice(letters),
            )
        )
    return items


def mock_gateway(
    seed: int = 7,
    dim: int = 24,
    cache_dir: Path | None = None,
    supports_logprobs: bool = True,
    override=None,
    max_batch: int | None = None,
) -> Gateway:
    return Gateway(
        chat=MockChatBackend(seed=seed, supports_logprobs=supports_logprobs, override=override),
        embed=MockEmbedBackend(seed=seed + 1, dim=dim, max_batch=max_batch),
        score=MockScoreBackend(seed=seed + 2),
        judge=MockChatBackend(seed=seed + 3, model_name="mock-judge"),
        cache_dir=cache_dir,
        cache_enabled=cache_dir is not None,
        retry_backoff_s=0.0,
        sleep=lambda s: None,
    )


def mock_runner(
    n_docs: int = 60,
    seed: int = 7,
    dim: int = 24,
    gateway: Gateway | None = None,
    **runner_kwargs,
) -> tuple[PipelineRunner, Corpus, Gateway]:
    corpus = Corpus(synth_documents(n_docs, seed=seed))
    gw = gateway or mock_gateway(seed=seed, dim=dim)
    index = build_index(corpus, gw.embed, batch_size=32)
    runner = PipelineRunner(gw, corpus, index, dataset_id="toy", **runner_kwargs)
    return runner, corpus, gw


def write_corpus_file(path: Path, docs: list[Document]) -> Path:
    lines = []
    for d in docs:
        obj = {"doc_id": d.doc_id, "title": d.title, "text": d.text}
        lines.append(json.dumps(obj))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_dataset_file(path: Path, items: list[QAItem]) -> Path:
    lines = []
    for it in items:
        obj = {
            "item_id": it.item_id,
            "question": it.question,
            "options": dict(it.options),
            "answer": it.gold,
        }
        lines.append(json.dumps(obj))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def make_cli_config(
    tmp_path: Path,
    n_docs: int = 40,
    n_items: int = 10,
    methods: list[str] | None = None,
    seed: int = 11,
    **extra,
) -> Path:
    """Write corpus, dataset, and a mock-backed config file; returns config path."""
    tmp_path.mkdir(parents=True, exist_ok=True)
    corpus_path = write_corpus_file(tmp_path / "corpus.jsonl", synth_documents(n_docs, seed))
    data_path = write_dataset_file(tmp_path / "toy.jsonl", synth_items(n_items, seed))
    cfg = {
        "corpus_path": str(corpus_path),
        "datasets": {"toy": str(data_path)},
        "seed": seed,
        "workers": 2,
        "output_dir": str(tmp_path / "out"),
        "cache_dir": str(tmp_path / "cache"),
        "embed_batch": 32,
        "backends": {
            "chat": {"kind": "mock", "model": "mock-chat"},
            "embed": {"kind": "mock", "model": "mock-embed", "dim": 24},
            "score": {"kind": "mock", "model": "mock-score"},
            "judge": {"kind": "mock", "model": "mock-judge"},
        },
    }
    if methods is not None:
        cfg["methods"] = methods
    cfg.update(extra)
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
    return config_path


def load_cfg(config_path: Path, **overrides):
    raw = json.loads(config_path.read_text(encoding="utf-8"))
    raw.update(overrides)
    return config_from_dict(raw)
