"""Document corpus and QA dataset ingestion, plus exact dense retrieval.

Corpora and datasets arrive as newline-delimited JSON. The vector index is
a dense brute-force index: scoring is exact, ties break on ascending
doc_id, and the whole structure is immutable once built, so rankings are
reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import BackendError, DataError

INDEX_MAGIC = b"EVIDX1"
_PROBE_TEXT = "dimension probe"

METRIC_INNER_PRODUCT = "ip"
METRIC_COSINE = "cosine"


@dataclass(frozen=True)
class Document:
    """A single retrievable passage with a stable id."""

    doc_id: str
    text: str
    title: str | None = None
    source: str | None = None


@dataclass(frozen=True)
class QAItem:
    """A multiple-choice question with lettered options and a gold letter."""

    item_id: str
    question: str
    options: Mapping[str, str]
    gold: str

    @property
    def letters(self) -> list[str]:
        return sorted(self.options)

    def validate(self) -> None:
        letters = self.letters
        if len(letters) < 2:
            raise DataError(f"item {self.item_id!r}: needs at least 2 options")
        expected = [chr(ord("A") + i) for i in range(len(letters))]
        if letters != expected:
            raise DataError(
                f"item {self.item_id!r}: option letters {letters} must be contiguous from A"
            )
        if self.gold not in self.options:
            raise DataError(
                f"item {self.item_id!r}: gold {self.gold!r} not among options {letters}"
            )
        if not self.question.strip():
            raise DataError(f"item {self.item_id!r}: empty question")


class Corpus:
    """Ordered, duplicate-free collection of documents with a content fingerprint.

    The fingerprint hashes (doc_id, text) pairs after sorting by doc_id, so
    it is invariant to ingestion order.
    """

    def __init__(self, documents: Sequence[Document]):
        self.documents: tuple[Document, ...] = tuple(documents)
        self._by_id: dict[str, Document] = {}
        for doc in self.documents:
            if doc.doc_id in self._by_id:
                raise DataError(f"duplicate doc_id {doc.doc_id!r} in corpus")
            if not doc.text:
                raise DataError(f"doc {doc.doc_id!r}: empty text")
            self._by_id[doc.doc_id] = doc
        self.fingerprint = _fingerprint(self.documents)

    def __len__(self) -> int:
        return len(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise DataError(f"doc_id {doc_id!r} not in corpus") from None

    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.documents]


def _fingerprint(documents: Sequence[Document]) -> str:
    h = hashlib.sha256()
    for doc in sorted(documents, key=lambda d: d.doc_id):
        h.update(doc.doc_id.encode("utf-8"))
        h.update(b"\x00")
        h.update(doc.text.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def synth_doc_id(text: str) -> str:
    """Stable id for records that arrive without one: hash of the text."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def ingest_corpus(path: str | Path) -> Corpus:
    """Read a newline-delimited corpus file into a Corpus.

    Each line is a JSON object with a required `text` field and optional
    `doc_id`, `title`, and `source`. Lines without a doc_id get one derived
    from the text hash, which is stable across re-runs.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc

    documents: list[Document] = []
    seen_lines: dict[str, int] = {}
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {lineno}: malformed record: {exc}") from exc
        if not isinstance(obj, dict):
            raise DataError(f"{path}: line {lineno}: record must be an object")
        text = obj.get("text")
        if not isinstance(text, str) or not text:
            raise DataError(f"{path}: line {lineno}: missing or empty 'text'")
        doc_id = obj.get("doc_id")
        if doc_id is None:
            doc_id = synth_doc_id(text)
        elif not isinstance(doc_id, str) or not doc_id:
            raise DataError(f"{path}: line {lineno}: 'doc_id' must be a non-empty string")
        if doc_id in seen_lines:
            raise DataError(
                f"{path}: duplicate doc_id {doc_id!r} at lines {seen_lines[doc_id]} and {lineno}"
            )
        seen_lines[doc_id] = lineno
        documents.append(
            Document(
                doc_id=doc_id,
                text=text,
                title=obj.get("title"),
                source=obj.get("source"),
            )
        )
    return Corpus(documents)


def load_dataset(path: str | Path) -> list[QAItem]:
    """Read a newline-delimited QA dataset file.

    Each line holds `item_id`, `question`, `options` (letter to text map),
    and `answer` (the gold letter).
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset file {path}: {exc}") from exc

    items: list[QAItem] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {lineno}: malformed record: {exc}") from exc
        try:
            item = QAItem(
                item_id=str(obj["item_id"]),
                question=str(obj["question"]),
                options={str(k): str(v) for k, v in obj["options"].items()},
                gold=str(obj["answer"]),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise DataError(f"{path}: line {lineno}: bad dataset record: {exc}") from exc
        if item.item_id in seen:
            raise DataError(
                f"{path}: duplicate item_id {item.item_id!r} at lines "
                f"{seen[item.item_id]} and {lineno}"
            )
        seen[item.item_id] = lineno
        item.validate()
        items.append(item)
    return items


class VectorIndex:
    """Immutable dense index over a corpus; exact top-k search.

    Rows are float64 and order-aligned with the corpus. Under the cosine
    metric rows are L2-normalized at build time and queries at search time.
    """

    def __init__(
        self,
        doc_ids: Sequence[str],
        rows: np.ndarray,
        corpus_fingerprint: str,
        metric: str = METRIC_INNER_PRODUCT,
    ):
        if metric not in (METRIC_INNER_PRODUCT, METRIC_COSINE):
            raise DataError(f"unknown index metric {metric!r}")
        if rows.ndim != 2:
            raise DataError("index rows must be a 2D array")
        if rows.shape[0] != len(doc_ids):
            raise DataError(
                f"row count {rows.shape[0]} does not match doc count {len(doc_ids)}"
            )
        self.doc_ids: tuple[str, ...] = tuple(doc_ids)
        self.rows = np.ascontiguousarray(rows, dtype=np.float64)
        self.rows.setflags(write=False)
        self.corpus_fingerprint = corpus_fingerprint
        self.metric = metric
        self._id_array = np.array(self.doc_ids, dtype=object) if self.doc_ids else None

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def __len__(self) -> int:
        return len(self.doc_ids)

    def search(self, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
        """Exact top-k by the configured metric; ties break on ascending doc_id."""
        if k < 0:
            raise ValueError("k must be non-negative")
        if k == 0 or len(self.doc_ids) == 0:
            return []
        q = np.asarray(query_vec, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ValueError(f"query dimension {q.shape[0]} != index dimension {self.dim}")
        if self.metric == METRIC_COSINE:
            norm = float(np.linalg.norm(q))
            if norm > 0.0:
                q = q / norm
        scores = self.rows @ q
        # lexsort orders by the last key first: descending score, then doc_id.
        order = np.lexsort((self._id_array, -scores))
        take = order[: min(k, len(order))]
        return [(self.doc_ids[i], float(scores[i])) for i in take]


def build_index(
    corpus: Corpus,
    embed_fn: Callable[[list[str]], Sequence[Sequence[float]]],
    batch_size: int = 64,
    metric: str = METRIC_INNER_PRODUCT,
    workers: int = 1,
) -> VectorIndex:
    """Embed every document and assemble an index.

    Batches may embed in parallel; vectors land at their document's
    position, so the result is independent of batch size and worker count.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    texts = [d.text for d in corpus.documents]
    if not texts:
        probe = np.asarray(embed_fn([_PROBE_TEXT])[0], dtype=np.float64)
        rows = np.zeros((0, probe.shape[0]), dtype=np.float64)
        return VectorIndex(corpus.doc_ids(), rows, corpus.fingerprint, metric)

    batches = [
        (start, texts[start : start + batch_size])
        for start in range(0, len(texts), batch_size)
    ]

    results: list[tuple[int, list[np.ndarray]]] = []
    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(embed_fn, chunk) for _, chunk in batches]
            for (start, _), fut in zip(batches, futures):
                results.append((start, [np.asarray(v, dtype=np.float64) for v in fut.result()]))
    else:
        for start, chunk in batches:
            results.append((start, [np.asarray(v, dtype=np.float64) for v in embed_fn(chunk)]))

    dim: int | None = None
    vectors: list[np.ndarray | None] = [None] * len(texts)
    for start, vecs in results:
        for offset, vec in enumerate(vecs):
            if vec.ndim != 1:
                raise BackendError("embedder returned a non-1D vector")
            if dim is None:
                dim = int(vec.shape[0])
            elif int(vec.shape[0]) != dim:
                raise BackendError(
                    f"embedding dimension mismatch across batches: {dim} vs {vec.shape[0]}"
                )
            vectors[start + offset] = vec

    rows = np.stack([v for v in vectors if v is not None])
    if metric == METRIC_COSINE:
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        rows = rows / norms
    return VectorIndex(corpus.doc_ids(), rows, corpus.fingerprint, metric)


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Persist an index: magic string, JSON header line, raw float64 rows."""
    path = Path(path)
    header = {
        "dim": index.dim,
        "metric": index.metric,
        "fingerprint": index.corpus_fingerprint,
        "doc_ids": list(index.doc_ids),
    }
    payload = (
        INDEX_MAGIC
        + b"\n"
        + json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        + b"\n"
        + index.rows.tobytes(order="C")
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_index(path: str | Path) -> VectorIndex:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read index file {path}: {exc}") from exc
    magic, _, rest = blob.partition(b"\n")
    if magic != INDEX_MAGIC:
        raise DataError(f"{path}: not a recognized index file (bad magic {magic[:8]!r})")
    header_line, _, row_bytes = rest.partition(b"\n")
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt index header: {exc}") from exc
    doc_ids = header["doc_ids"]
    dim = int(header["dim"])
    rows = np.frombuffer(row_bytes, dtype=np.float64)
    if dim > 0 and rows.size != len(doc_ids) * dim:
        raise DataError(f"{path}: index payload size does not match header")
    rows = rows.reshape(len(doc_ids), dim) if doc_ids else rows.reshape(0, dim)
    return VectorIndex(doc_ids, rows.copy(), header["fingerprint"], header["metric"])
