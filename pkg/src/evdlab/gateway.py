"""Uniform access to chat, embedding, and pair-scoring backends.

Live backends speak an OpenAI-compatible wire protocol; mock backends are
pure functions of (seed, request) so whole pipeline runs replay exactly.
Greedy chat responses and embeddings are memoized on disk; sampled calls
are never cached because that would collapse the diversity they exist for.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import requests

from .errors import (
    BackendError,
    CapabilityError,
    MissingTokenError,
    TransportError,
)

TokenLogprob = tuple[str, float, tuple[tuple[str, float], ...]]


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion call.

    `tag` disambiguates repeated sampled calls with identical prompts (it
    feeds the mock backends' hash and never goes on the wire, nor into
    cache keys).
    """

    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output_tokens: int = 2048
    want_token_logprobs: bool = False
    model_name: str = ""
    tag: str = ""

    def __post_init__(self) -> None:
        roles = [role for role, _ in self.messages]
        for role in roles:
            if role not in ("system", "user"):
                raise ValueError(f"unsupported message role {role!r}")
        if roles.count("system") > 1:
            raise ValueError("at most one system message")
        if "system" in roles and roles[0] != "system":
            raise ValueError("system message must come first")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @property
    def greedy(self) -> bool:
        return self.temperature == 0.0


@dataclass(frozen=True)
class ChatResponse:
    text: str
    token_logprobs: tuple[TokenLogprob, ...] | None = None
    usage: tuple[int, int] = (0, 0)  # (prompt_tokens, output_tokens)
    truncated: bool = False

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "token_logprobs": None
            if self.token_logprobs is None
            else [[t, lp, [[a, alp] for a, alp in alts]] for t, lp, alts in self.token_logprobs],
            "usage": list(self.usage),
            "truncated": self.truncated,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ChatResponse":
        tlp = obj.get("token_logprobs")
        parsed = None
        if tlp is not None:
            parsed = tuple(
                (t, float(lp), tuple((a, float(alp)) for a, alp in alts)) for t, lp, alts in tlp
            )
        return cls(
            text=obj["text"],
            token_logprobs=parsed,
            usage=tuple(obj.get("usage", (0, 0))),  # type: ignore[arg-type]
            truncated=bool(obj.get("truncated", False)),
        )


@dataclass(frozen=True)
class PairScore:
    query: str
    doc: str
    score: float


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def chat_cache_key(backend_id: str, req: ChatRequest) -> str:
    """Content hash of the semantic request; tag and timestamps excluded."""
    body = _canonical(
        {
            "backend": backend_id,
            "model": req.model_name,
            "messages": [list(m) for m in req.messages],
            "temperature": repr(req.temperature),
            "max_output_tokens": req.max_output_tokens,
            "want_token_logprobs": req.want_token_logprobs,
        }
    )
    return _sha(body)


def _estimate_tokens(text: str) -> int:
    # Rough 4-chars-per-token estimate; used only by mocks and budgets.
    return max(1, len(text) // 4)


class ResponseCache:
    """One file per cache key; last writer wins (values are identical anyway)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> ChatResponse | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            return ChatResponse.from_json(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, KeyError):
            return None

    def put(self, key: str, resp: ChatResponse) -> None:
        path = self._path(key)
        tmp = path.with_suffix(f".tmp{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(_canonical(resp.to_json()), encoding="utf-8")
        tmp.replace(path)


class EmbeddingCache:
    """Disk cache keyed by (backend id, model, text hash); re-runs skip embedding calls."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, backend_id: str, model: str, text: str) -> Path:
        return self.root / f"{_sha(_canonical([backend_id, model, _sha(text)]))}.json"

    def get(self, backend_id: str, model: str, text: str) -> list[float] | None:
        path = self._path(backend_id, model, text)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return None

    def put(self, backend_id: str, model: str, text: str, vec: Sequence[float]) -> None:
        path = self._path(backend_id, model, text)
        tmp = path.with_suffix(f".tmp{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(json.dumps([float(v) for v in vec]), encoding="utf-8")
        tmp.replace(path)


class _Counted:
    """Mixin holding a thread-safe backend call counter."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0

    def _count(self) -> None:
        with self._lock:
            self.calls += 1


# ---------------------------------------------------------------------------
# Mock backends
# ---------------------------------------------------------------------------


def _hash_int(*parts: str) -> int:
    return int(hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()[:12], 16)


def hash_unit_vector(seed: int, model: str, text: str, dim: int) -> np.ndarray:
    """Seeded pseudo-random unit vector for a text; the mock embedding rule."""
    h = hashlib.sha256(f"{seed}|{model}|{text}".encode("utf-8")).hexdigest()
    rng = np.random.RandomState(int(h[:8], 16))
    vec = rng.standard_normal(dim)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


class MockEmbedBackend(_Counted):
    """Deterministic embedder: each text maps to a seeded hash unit vector."""

    def __init__(self, seed: int = 0, dim: int = 32, max_batch: int | None = None,
                 model_name: str = "mock-embed"):
        super().__init__()
        self.seed = seed
        self.dim = dim
        self.max_batch = max_batch
        self.model_name = model_name
        self.is_mock = True
        self.backend_id = f"mock-embed:{seed}:{dim}"

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        self._count()
        if self.max_batch is not None and len(texts) > self.max_batch:
            raise BackendError(
                f"batch of {len(texts)} exceeds backend cap {self.max_batch}"
            )
        return [
            hash_unit_vector(self.seed, self.model_name, t, self.dim).tolist() for t in texts
        ]


class MockScoreBackend(_Counted):
    """Pair scorer counting shared whitespace tokens, or a supplied rule."""

    def __init__(self, seed: int = 0, fn: Callable[[str, str], float] | None = None,
                 model_name: str = "mock-score"):
        super().__init__()
        self.seed = seed
        self.fn = fn
        self.model_name = model_name
        self.is_mock = True
        self.backend_id = f"mock-score:{seed}"

    def score(self, query: str, docs: Sequence[str]) -> list[float]:
        self._count()
        if self.fn is not None:
            return [float(self.fn(query, d)) for d in docs]
        q_tokens = set(query.split())
        return [float(len(q_tokens & set(d.split()))) for d in docs]


_MOCK_LABELS = ("ENTAILED", "USEFUL_BUT_NOT_ENTAILED", "NOT_USEFUL")


class MockChatBackend(_Counted):
    """Deterministic chat backend that recognizes the run's prompt shapes.

    The response is a pure function of (seed, request); at temperature 0 the
    request tag is ignored so caching stays transparent. An optional
    `override` callable may intercept any request and return raw text, which
    unit tests use to script hypotheses, garbage, or sentinels.
    """

    def __init__(self, seed: int = 0, model_name: str = "mock-chat",
                 supports_logprobs: bool = True,
                 override: Callable[[ChatRequest], str | None] | None = None):
        super().__init__()
        self.seed = seed
        self.model_name = model_name
        self.supports_logprobs = supports_logprobs
        self.override = override
        self.is_mock = True
        self.backend_id = f"mock-chat:{seed}"

    # -- helpers ----------------------------------------------------------

    def _h(self, req: ChatRequest, salt: str) -> int:
        parts = [str(self.seed), salt, chat_cache_key(self.backend_id, req)]
        if req.temperature != 0.0 and req.tag:
            parts.append(req.tag)
        return _hash_int(*parts)

    @staticmethod
    def _user_text(req: ChatRequest) -> str:
        return "\n".join(c for r, c in req.messages if r == "user")

    @staticmethod
    def _system_text(req: ChatRequest) -> str:
        for role, content in req.messages:
            if role == "system":
                return content
        return ""

    @staticmethod
    def _option_lines(user: str) -> list[tuple[str, str]]:
        out = []
        for line in user.splitlines():
            line = line.strip()
            if len(line) > 2 and line[0].isupper() and line[0].isalpha() and line[1] == "." :
                out.append((line[0], line[2:].strip()))
        return out

    def _respond(self, req: ChatRequest) -> str:
        user = self._user_text(req)
        system = self._system_text(req)
        h = self._h(req, "main")

        if system.startswith("You evaluate the relationship between retrieved context"):
            letters = [l for l, _ in self._option_lines(user)] or ["A", "B"]
            pool = letters + ["UNSURE"]
            selected = pool[h % len(pool)]
            label = _MOCK_LABELS[self._h(req, "label") % 3]
            return json.dumps({"selected_answer": selected, "label": label})

        if system.startswith("You are a noisy document evaluator"):
            return "Yes" if h % 2 == 0 else "No"

        if system.startswith("You are an accurate and reliable AI assistant"):
            letters = [l for l, _ in self._option_lines(user)] or ["A"]
            return f"{letters[h % len(letters)]}."

        if system == "You are an expert analyst taking an exam.":
            options = self._option_lines(user)
            body = {
                "discriminating_features": [f"feature f{h % 97}", f"feature f{(h >> 8) % 97}"],
                "reasoning": f"reasoning r{h % 997}",
                "confirming_evidence": [f"evidence e{h % 89}"],
            }
            if '"best_guess_text"' in user and options:
                letter, text = options[h % len(options)]
                body["best_guess"] = letter
                body["best_guess_text"] = text
            else:
                body["best_guess"] = f"free-guess g{h % 211}"
            return "Considering each candidate in turn.\n\n" + json.dumps(body)

        if system.startswith("You are a search query expert"):
            guess = ""
            for line in user.splitlines():
                if line.startswith("Best Guess Answer:"):
                    guess = line.split(":", 1)[1].strip()
                    break
            return (
                f"Query 1: [supporting evidence for {guess} s{h % 211}]\n"
                f"Query 2: [distinguishing criteria d{(h >> 6) % 211}]\n"
                f"Query 3: [key features k{(h >> 12) % 211}]"
            )

        if "generate exactly three different versions" in user:
            return (
                f"Sub-query 1: paraphrase p{h % 211}\n"
                f"Sub-query 2: paraphrase p{(h >> 6) % 211}\n"
                f"Sub-query 3: paraphrase p{(h >> 12) % 211}"
            )

        if user.startswith("Please write a passage to answer the question."):
            return f"Hypothetical passage v{h % 9973} discussing the asked topic."

        if "your task is to answer a multi-choice medical question" in system:
            letters = [l for l, _ in self._option_lines(user)] or ["A"]
            choice = letters[h % len(letters)]
            return json.dumps(
                {"step_by_step_thinking": f"reasoning r{h % 9973}", "answer_choice": choice}
            )

        return "OK"

    def chat(self, req: ChatRequest) -> ChatResponse:
        self._count()
        text: str | None = None
        if self.override is not None:
            text = self.override(req)
        if text is None:
            text = self._respond(req)

        logprobs: tuple[TokenLogprob, ...] | None = None
        if self.supports_logprobs and req.want_token_logprobs:
            stripped = text.strip()
            if stripped.split()[:1] in (["Yes"], ["No"]):
                gap_seed = self._h(req, "gap")
                lp_yes = -((gap_seed % 200) / 100.0)
                lp_no = -(((gap_seed >> 8) % 200) / 100.0)
                first = "Yes" if lp_yes >= lp_no else "No"
                alts = (("Yes", lp_yes), ("No", lp_no))
                logprobs = ((first, max(lp_yes, lp_no), alts),)
                text = first
            else:
                first = stripped.split()[0] if stripped else ""
                logprobs = ((first, -0.05, ((first, -0.05),)),)

        prompt_tokens = sum(_estimate_tokens(c) for _, c in req.messages)
        output_tokens = _estimate_tokens(text)
        return ChatResponse(
            text=text,
            token_logprobs=logprobs,
            usage=(prompt_tokens, output_tokens),
            truncated=output_tokens >= req.max_output_tokens,
        )


class ScriptedChatBackend(_Counted):
    """Replays a fixed sequence of responses, or defers to a callable."""

    def __init__(self, script: Sequence[str | ChatResponse] | Callable[[ChatRequest], str | ChatResponse],
                 model_name: str = "scripted-chat", supports_logprobs: bool = False):
        super().__init__()
        self._script = script
        self._pos = 0
        self.model_name = model_name
        self.supports_logprobs = supports_logprobs
        self.is_mock = True
        self.backend_id = f"scripted-chat:{id(self)}"

    def chat(self, req: ChatRequest) -> ChatResponse:
        self._count()
        if callable(self._script):
            out = self._script(req)
        else:
            if self._pos >= len(self._script):
                out = self._script[-1]
            else:
                out = self._script[self._pos]
                self._pos += 1
        if isinstance(out, ChatResponse):
            return out
        prompt_tokens = sum(_estimate_tokens(c) for _, c in req.messages)
        return ChatResponse(text=out, usage=(prompt_tokens, _estimate_tokens(out)))


class FlakyBackend(_Counted):
    """Wraps a backend, failing the first `failures` calls; retry-path tests."""

    def __init__(self, inner, failures: int):
        super().__init__()
        self.inner = inner
        self.failures = failures
        self.model_name = inner.model_name
        self.supports_logprobs = getattr(inner, "supports_logprobs", False)
        self.is_mock = True
        self.backend_id = inner.backend_id

    def chat(self, req: ChatRequest) -> ChatResponse:
        self._count()
        if self.calls <= self.failures:
            raise TransportError("simulated transport failure")
        return self.inner.chat(req)


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP backends
# ---------------------------------------------------------------------------


class OpenAIChatBackend(_Counted):
    """Chat completions over an OpenAI-compatible `/chat/completions` endpoint."""

    def __init__(self, base_url: str, model_name: str, api_key: str | None = None,
                 supports_logprobs: bool = False, timeout: float = 120.0,
                 session: requests.Session | None = None):
        super().__init__()
        self.base_url = base_url.rstrip("/")
        self.model_name = model_name
        self.api_key = api_key
        self.supports_logprobs = supports_logprobs
        self.timeout = timeout
        self.is_mock = False
        self.backend_id = f"openai:{self.base_url}:{model_name}"
        self._session = session or requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def chat(self, req: ChatRequest) -> ChatResponse:
        self._count()
        body: dict = {
            "model": self.model_name,
            "messages": [{"role": r, "content": c} for r, c in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        if req.want_token_logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = 5
        try:
            resp = self._session.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers=self._headers(),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"chat backend returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"chat backend error HTTP {resp.status_code}: {resp.text[:500]}")
        payload = resp.json()
        try:
            choice = payload["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat response: {exc}") from exc

        logprobs = None
        lp_content = (choice.get("logprobs") or {}).get("content")
        if lp_content:
            logprobs = tuple(
                (
                    entry.get("token", ""),
                    float(entry.get("logprob", 0.0)),
                    tuple(
                        (alt.get("token", ""), float(alt.get("logprob", 0.0)))
                        for alt in entry.get("top_logprobs", [])
                    ),
                )
                for entry in lp_content
            )
        usage = payload.get("usage", {})
        return ChatResponse(
            text=text,
            token_logprobs=logprobs,
            usage=(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
            truncated=choice.get("finish_reason") == "length",
        )


class OpenAIEmbedBackend(_Counted):
    """Embeddings over an OpenAI-compatible `/embeddings` endpoint."""

    def __init__(self, base_url: str, model_name: str, api_key: str | None = None,
                 max_batch: int | None = None, timeout: float = 120.0,
                 session: requests.Session | None = None):
        super().__init__()
        self.base_url = base_url.rstrip("/")
        self.model_name = model_name
        self.api_key = api_key
        self.max_batch = max_batch
        self.timeout = timeout
        self.is_mock = False
        self.backend_id = f"openai-embed:{self.base_url}:{model_name}"
        self._session = session or requests.Session()

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        self._count()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._session.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model_name, "input": list(texts)},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"embedding transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"embedding backend returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(
                f"embedding backend error HTTP {resp.status_code}: {resp.text[:500]}"
            )
        try:
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
            return [[float(x) for x in d["embedding"]] for d in data]
        except (KeyError, TypeError) as exc:
            raise BackendError(f"malformed embedding response: {exc}") from exc


class HttpScoreBackend(_Counted):
    """Pair scoring via a rerank-style endpoint taking (query, documents)."""

    def __init__(self, url: str, model_name: str = "", api_key: str | None = None,
                 timeout: float = 120.0, session: requests.Session | None = None):
        super().__init__()
        self.url = url
        self.model_name = model_name
        self.api_key = api_key
        self.timeout = timeout
        self.is_mock = False
        self.backend_id = f"rerank:{url}:{model_name}"
        self._session = session or requests.Session()

    def score(self, query: str, docs: Sequence[str]) -> list[float]:
        self._count()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"query": query, "documents": list(docs)}
        if self.model_name:
            body["model"] = self.model_name
        try:
            resp = self._session.post(self.url, json=body, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"scoring transport failure: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"scoring backend returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"scoring backend error HTTP {resp.status_code}: {resp.text[:500]}")
        payload = resp.json()
        if "scores" in payload:
            return [float(s) for s in payload["scores"]]
        if "results" in payload:
            ordered = sorted(payload["results"], key=lambda r: r["index"])
            return [float(r.get("relevance_score", r.get("score", 0.0))) for r in ordered]
        raise BackendError("scoring response has neither 'scores' nor 'results'")


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------


@dataclass
class GatewayStats:
    backend_calls: int = 0
    cache_hits: int = 0


class Gateway:
    """Routes role-tagged requests to backends with retry and caching.

    Safe for concurrent callers; a per-backend semaphore bounds in-flight
    requests. The cache is a pure memoization layer: only greedy chat calls
    and embeddings are cached, so enabling it never changes outputs.
    """

    def __init__(
        self,
        chat=None,
        embed=None,
        score=None,
        judge=None,
        cache_dir: str | Path | None = None,
        cache_enabled: bool = True,
        retry_attempts: int = 3,
        retry_backoff_s: float = 1.0,
        max_in_flight: int = 8,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._backends = {"chat": chat, "embed": embed, "score": score, "judge": judge}
        self._response_cache: ResponseCache | None = None
        self._embedding_cache: EmbeddingCache | None = None
        if cache_enabled and cache_dir is not None:
            root = Path(cache_dir)
            self._response_cache = ResponseCache(root / "chat")
            self._embedding_cache = EmbeddingCache(root / "embeddings")
        self.retry_attempts = max(1, retry_attempts)
        self.retry_backoff_s = retry_backoff_s
        self._sleep = sleep
        self._semaphores: dict[str, threading.Semaphore] = {}
        self._sem_lock = threading.Lock()
        self._max_in_flight = max_in_flight
        self.stats = GatewayStats()
        self._stats_lock = threading.Lock()

    def backend(self, role: str):
        be = self._backends.get(role)
        if be is None:
            raise CapabilityError(f"no backend configured for role {role!r}")
        return be

    def has_role(self, role: str) -> bool:
        return self._backends.get(role) is not None

    def supports_logprobs(self, role: str = "chat") -> bool:
        be = self._backends.get(role)
        return bool(be is not None and getattr(be, "supports_logprobs", False))

    def _sem(self, backend_id: str) -> threading.Semaphore:
        with self._sem_lock:
            if backend_id not in self._semaphores:
                self._semaphores[backend_id] = threading.Semaphore(self._max_in_flight)
            return self._semaphores[backend_id]

    def _with_retry(self, backend_id: str, fn: Callable[[], object]):
        last: Exception | None = None
        for attempt in range(self.retry_attempts):
            try:
                with self._sem(backend_id):
                    result = fn()
                with self._stats_lock:
                    self.stats.backend_calls += 1
                return result
            except TransportError as exc:
                last = exc
                if attempt + 1 < self.retry_attempts:
                    self._sleep(self.retry_backoff_s * (2**attempt))
        raise TransportError(
            f"backend {backend_id} failed after {self.retry_attempts} attempts: {last}"
        )

    # -- operations --------------------------------------------------------

    def chat(self, req: ChatRequest, role: str = "chat") -> ChatResponse:
        backend = self.backend(role)
        if not req.model_name:
            req = replace(req, model_name=backend.model_name)
        key = None
        if req.greedy and self._response_cache is not None:
            key = chat_cache_key(backend.backend_id, req)
            cached = self._response_cache.get(key)
            if cached is not None:
                with self._stats_lock:
                    self.stats.cache_hits += 1
                return cached
        resp: ChatResponse = self._with_retry(backend.backend_id, lambda: backend.chat(req))
        if key is not None:
            self._response_cache.put(key, resp)
        return resp

    def embed(self, texts: Sequence[str], role: str = "embed") -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed requires at least one text")
        backend = self.backend(role)
        out: list[np.ndarray | None] = [None] * len(texts)
        misses: list[int] = []
        if self._embedding_cache is not None:
            for i, text in enumerate(texts):
                vec = self._embedding_cache.get(backend.backend_id, backend.model_name, text)
                if vec is not None:
                    out[i] = np.asarray(vec, dtype=np.float64)
                    with self._stats_lock:
                        self.stats.cache_hits += 1
                else:
                    misses.append(i)
        else:
            misses = list(range(len(texts)))

        cap = getattr(backend, "max_batch", None) or len(misses) or 1
        for start in range(0, len(misses), cap):
            chunk_idx = misses[start : start + cap]
            chunk = [texts[i] for i in chunk_idx]
            vectors = self._with_retry(backend.backend_id, lambda c=chunk: backend.embed(c))
            if len(vectors) != len(chunk):
                raise BackendError(
                    f"embedding backend returned {len(vectors)} vectors for {len(chunk)} texts"
                )
            for i, vec in zip(chunk_idx, vectors):
                arr = np.asarray(vec, dtype=np.float64)
                out[i] = arr
                if self._embedding_cache is not None:
                    self._embedding_cache.put(
                        backend.backend_id, backend.model_name, texts[i], arr.tolist()
                    )

        vectors_out = [v for v in out if v is not None]
        dims = {v.shape[0] for v in vectors_out}
        if len(dims) > 1:
            raise BackendError(f"inconsistent embedding dimensions: {sorted(dims)}")
        return vectors_out  # type: ignore[return-value]

    def score_pairs(self, query: str, docs: Sequence[str], role: str = "score") -> list[PairScore]:
        if not docs:
            raise ValueError("score_pairs requires at least one document")
        backend = self.backend(role)
        scores = self._with_retry(backend.backend_id, lambda: backend.score(query, docs))
        if len(scores) != len(docs):
            raise BackendError(
                f"scoring backend returned {len(scores)} scores for {len(docs)} documents"
            )
        return [PairScore(query=query, doc=d, score=float(s)) for d, s in zip(docs, scores)]

    def yes_no_logit_gap(self, req: ChatRequest, role: str = "chat") -> float:
        """logprob(Yes) minus logprob(No) at the first content token.

        Token matching is case-insensitive over the reported alternatives.
        """
        backend = self.backend(role)
        if not getattr(backend, "supports_logprobs", False):
            raise CapabilityError(
                f"backend {backend.backend_id} does not expose token logprobs; "
                "MAIN-RAG scoring cannot run on it"
            )
        req = replace(req, want_token_logprobs=True)
        resp = self.chat(req, role=role)
        return gap_from_response(resp)


def gap_from_response(resp: ChatResponse) -> float:
    """Yes/No logprob gap at the first non-whitespace generated token."""
    if not resp.token_logprobs:
        raise CapabilityError(
            "response carries no token logprobs; MAIN-RAG scoring cannot use it"
        )
    entry = None
    for token, lp, alts in resp.token_logprobs:
        if token.strip():
            entry = (token, lp, alts)
            break
    if entry is None:
        raise MissingTokenError("no non-whitespace token in logprob stream")
    token, lp, alts = entry
    table: dict[str, float] = {}
    for alt_token, alt_lp in alts:
        table.setdefault(alt_token.strip().lower(), alt_lp)
    table[token.strip().lower()] = lp
    if "yes" not in table or "no" not in table:
        raise MissingTokenError(
            f"Yes/No not both present among alternatives {sorted(table)}"
        )
    return table["yes"] - table["no"]
