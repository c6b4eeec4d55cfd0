"""Run configuration: file loading, overrides, and backend construction.

The config is one JSON file; any scalar can be overridden on the command
line with dotted `--set key=value` pairs. API keys come from the
environment (`EVD_API_KEY_<ROLE>` by default) and never participate in
manifest hashing.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .corpus import METRIC_COSINE, METRIC_INNER_PRODUCT
from .errors import CapabilityError, ConfigError
from .gateway import (
    Gateway,
    HttpScoreBackend,
    MockChatBackend,
    MockEmbedBackend,
    MockScoreBackend,
    OpenAIChatBackend,
    OpenAIEmbedBackend,
)
from .pipelines import (
    KIND_COT,
    KIND_MAIN_RAG,
    KIND_RERANK_RAG,
    MethodSpec,
    default_methods,
)
from .prompts import TEMPLATE_VERSION

ROLES = ("chat", "embed", "score", "judge")

ENV_CACHE_DIR = "EVD_CACHE_DIR"


@dataclass
class BackendConfig:
    role: str
    kind: str = "mock"
    base_url: str = ""
    url: str = ""
    model: str = ""
    api_key_env: str = ""
    supports_logprobs: bool = True
    max_batch: int | None = None
    dim: int = 32
    seed: int | None = None

    def semantic(self) -> dict:
        return {
            "role": self.role,
            "kind": self.kind,
            "base_url": self.base_url,
            "url": self.url,
            "model": self.model,
            "supports_logprobs": self.supports_logprobs,
            "max_batch": self.max_batch,
            "dim": self.dim,
            "seed": self.seed,
        }


@dataclass
class RunConfig:
    corpus_path: str = ""
    datasets: dict[str, str] = field(default_factory=dict)
    methods: list[str] = field(default_factory=lambda: sorted(default_methods()))
    method_overrides: dict[str, dict] = field(default_factory=dict)
    backends: dict[str, BackendConfig] = field(default_factory=dict)
    seed: int = 0
    workers: int = 4
    inner_workers: int = 1
    output_dir: str = "runs/out"
    cache_dir: str = ""
    cache_enabled: bool = True
    retry_attempts: int = 3
    retry_backoff_s: float = 1.0
    max_in_flight: int = 8
    max_output_tokens: int = 2048
    judge_max_output_tokens: int = 8192
    context_window_tokens: int = 8192
    hyde_include_query: bool = True
    metric: str = METRIC_INNER_PRODUCT
    embed_batch: int = 64
    probe: bool = True
    judge_strict_unjudged: bool = False

    def resolved_cache_dir(self) -> Path | None:
        env = os.environ.get(ENV_CACHE_DIR)
        raw = env or self.cache_dir or str(Path(self.output_dir) / "cache")
        return Path(raw) if self.cache_enabled else None

    def method_specs(self) -> dict[str, MethodSpec]:
        """The selected methods resolved against the stock table plus overrides."""
        table = default_methods()
        if not self.methods:
            raise ConfigError("method list is empty")
        specs: dict[str, MethodSpec] = {}
        for name in self.methods:
            base = table.get(name)
            overrides = dict(self.method_overrides.get(name, {}))
            if base is None:
                kind = overrides.pop("kind", None)
                if kind is None:
                    raise ConfigError(
                        f"unknown method {name!r}; custom methods need a 'kind' override"
                    )
                base = MethodSpec(name=name, kind=kind)
            if overrides:
                valid = {f.name for f in fields(MethodSpec)} - {"name", "kind"}
                bad = set(overrides) - valid
                if bad:
                    raise ConfigError(f"method {name}: unknown override fields {sorted(bad)}")
                base = MethodSpec(
                    name=base.name,
                    kind=base.kind,
                    **{**{f: getattr(base, f) for f in valid}, **overrides},
                )
            specs[name] = base
        return specs

    def semantic_dict(self) -> dict:
        """The config subset that can change run outputs; feeds the manifest.

        Execution knobs (workers, cache location, probing) and filesystem
        locations are excluded on purpose: caching is pure memoization,
        record content is order-independent, and corpus content is pinned by
        its fingerprint rather than its path. Judge-side settings are also
        excluded: they shape verdict files, which carry the judge identity
        in their own names, and never the run records.
        """
        return {
            "datasets": sorted(self.datasets),
            "methods": sorted(self.methods),
            "method_specs": {
                name: {
                    "kind": spec.kind,
                    "b_max": spec.b_max,
                    "per_query_k": spec.per_query_k,
                    "rerank_pool": spec.rerank_pool,
                    "hyde_samples": spec.hyde_samples,
                    "hyde_temperature": spec.hyde_temperature,
                    "expose_hypothesis": spec.expose_hypothesis,
                }
                for name, spec in sorted(self.method_specs().items())
            },
            "backends": {
                role: cfg.semantic()
                for role, cfg in sorted(self.backends.items())
                if role != "judge"
            },
            "seed": self.seed,
            "max_output_tokens": self.max_output_tokens,
            "context_window_tokens": self.context_window_tokens,
            "hyde_include_query": self.hyde_include_query,
            "metric": self.metric,
            "template_version": TEMPLATE_VERSION,
        }


def _coerce_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_override(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value


def parse_set_overrides(pairs: list[str]) -> dict:
    tree: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set needs key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        _apply_override(tree, key.strip(), _coerce_value(raw))
    return tree


def _merge(base: dict, overlay: Mapping) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path, overrides: Mapping | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    if overrides:
        raw = _merge(raw, overrides)
    return config_from_dict(raw)


def config_from_dict(raw: Mapping) -> RunConfig:
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    for key, value in raw.items():
        if key == "backends":
            continue
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    for role, spec in (raw.get("backends") or {}).items():
        if role not in ROLES:
            raise ConfigError(f"unknown backend role {role!r}; expected one of {ROLES}")
        if not isinstance(spec, Mapping):
            raise ConfigError(f"backend {role!r} must be an object")
        bc = BackendConfig(role=role)
        bc_fields = {f.name for f in fields(BackendConfig)}
        for k, v in spec.items():
            if k not in bc_fields:
                raise ConfigError(f"backend {role}: unknown field {k!r}")
            setattr(bc, k, v)
        cfg.backends[role] = bc
    if cfg.metric not in (METRIC_INNER_PRODUCT, METRIC_COSINE):
        raise ConfigError(f"metric must be '{METRIC_INNER_PRODUCT}' or '{METRIC_COSINE}'")
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer")
    return cfg


def _api_key(bc: BackendConfig) -> str | None:
    env_name = bc.api_key_env or f"EVD_API_KEY_{bc.role.upper()}"
    return os.environ.get(env_name)


def _derived_seed(cfg: RunConfig, bc: BackendConfig) -> int:
    if bc.seed is not None:
        return bc.seed
    digest = hashlib.sha256(f"{cfg.seed}|{bc.role}".encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


def _build_backend(cfg: RunConfig, bc: BackendConfig):
    seed = _derived_seed(cfg, bc)
    if bc.role in ("chat", "judge"):
        if bc.kind == "mock":
            return MockChatBackend(
                seed=seed,
                model_name=bc.model or f"mock-{bc.role}",
                supports_logprobs=bc.supports_logprobs,
            )
        if bc.kind == "openai":
            if not bc.base_url or not bc.model:
                raise ConfigError(f"backend {bc.role}: openai kind needs base_url and model")
            return OpenAIChatBackend(
                base_url=bc.base_url,
                model_name=bc.model,
                api_key=_api_key(bc),
                supports_logprobs=bc.supports_logprobs,
            )
    elif bc.role == "embed":
        if bc.kind == "mock":
            return MockEmbedBackend(
                seed=seed,
                dim=bc.dim,
                max_batch=bc.max_batch,
                model_name=bc.model or "mock-embed",
            )
        if bc.kind == "openai":
            if not bc.base_url or not bc.model:
                raise ConfigError("backend embed: openai kind needs base_url and model")
            return OpenAIEmbedBackend(
                base_url=bc.base_url,
                model_name=bc.model,
                api_key=_api_key(bc),
                max_batch=bc.max_batch,
            )
    elif bc.role == "score":
        if bc.kind == "mock":
            return MockScoreBackend(seed=seed, model_name=bc.model or "mock-score")
        if bc.kind == "http":
            if not bc.url:
                raise ConfigError("backend score: http kind needs url")
            return HttpScoreBackend(url=bc.url, model_name=bc.model, api_key=_api_key(bc))
    raise ConfigError(f"backend {bc.role}: unsupported kind {bc.kind!r}")


def build_gateway(cfg: RunConfig, sleep=None) -> Gateway:
    backends = {role: None for role in ROLES}
    for role, bc in cfg.backends.items():
        backends[role] = _build_backend(cfg, bc)
    kwargs = {}
    if sleep is not None:
        kwargs["sleep"] = sleep
    return Gateway(
        chat=backends["chat"],
        embed=backends["embed"],
        score=backends["score"],
        judge=backends["judge"],
        cache_dir=cfg.resolved_cache_dir(),
        cache_enabled=cfg.cache_enabled,
        retry_attempts=cfg.retry_attempts,
        retry_backoff_s=cfg.retry_backoff_s,
        max_in_flight=cfg.max_in_flight,
        **kwargs,
    )


def required_roles(spec: MethodSpec) -> tuple[str, ...]:
    if spec.kind == KIND_COT:
        return ("chat",)
    if spec.kind == KIND_RERANK_RAG:
        return ("chat", "embed", "score")
    return ("chat", "embed")


def preflight_capabilities(cfg: RunConfig, gateway: Gateway,
                           specs: Mapping[str, MethodSpec]) -> None:
    """Fail before any model call if a selected method cannot run."""
    for name, spec in sorted(specs.items()):
        for role in required_roles(spec):
            if not gateway.has_role(role):
                raise CapabilityError(
                    f"method {name} needs a {role!r} backend, none configured"
                )
        if spec.kind == KIND_MAIN_RAG and not gateway.supports_logprobs("chat"):
            raise CapabilityError(
                f"method {name} (MAIN_RAG) needs token logprobs, which the chat "
                "backend does not support"
            )


def manifest_dict(cfg: RunConfig, corpus_fingerprint: str) -> dict:
    body = {
        "config": cfg.semantic_dict(),
        "corpus_fingerprint": corpus_fingerprint,
        "template_version": TEMPLATE_VERSION,
        "seed": cfg.seed,
    }
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    body["manifest_hash"] = hashlib.sha256(canon.encode("utf-8")).hexdigest()
    return body
