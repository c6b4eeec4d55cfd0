"""Command implementations: ingest, index, run, judge, report, dump-prompts.

Every command is idempotent: an immediate re-invocation performs zero
backend calls and changes no output bytes. The run loop writes finished
records in submission order so record files from identical seeded runs are
byte-identical even with a worker pool.
"""

from __future__ import annotations

import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

from . import metrics
from .config import (
    RunConfig,
    build_gateway,
    manifest_dict,
    preflight_capabilities,
    required_roles,
)
from .corpus import (
    Corpus,
    VectorIndex,
    build_index,
    ingest_corpus,
    load_dataset,
    load_index,
    save_index,
)
from .errors import ConfigError, DataError, ParseFailure
from .gateway import ChatRequest, Gateway
from .judge import JudgeRequest, judge_context
from .metrics import RecordView, RunKey, build_report, pct
from .pipelines import KIND_COT, PipelineRunner
from .records import (
    append_jsonl,
    canonical_dumps,
    manifest_path,
    read_jsonl,
    records_path,
    slug,
    verdicts_path,
    write_manifest,
)


def _echo(message: str, quiet: bool = False) -> None:
    if not quiet:
        print(message, flush=True)


def cmd_ingest(cfg: RunConfig, quiet: bool = False) -> dict:
    corpus = ingest_corpus(cfg.corpus_path)
    _echo(f"documents={len(corpus)} fingerprint={corpus.fingerprint}", quiet)
    return {"documents": len(corpus), "fingerprint": corpus.fingerprint}


def _index_path(cfg: RunConfig, corpus: Corpus) -> Path:
    embed = cfg.backends.get("embed")
    embed_tag = slug((embed.model or embed.kind) if embed else "none")
    return Path(cfg.output_dir) / (
        f"index__{corpus.fingerprint[:8]}__{embed_tag}__{cfg.metric}.evidx"
    )


def ensure_index(cfg: RunConfig, corpus: Corpus, gateway: Gateway) -> VectorIndex:
    path = _index_path(cfg, corpus)
    if path.exists():
        index = load_index(path)
        if index.corpus_fingerprint == corpus.fingerprint and index.metric == cfg.metric:
            return index
    index = build_index(
        corpus,
        gateway.embed,
        batch_size=cfg.embed_batch,
        metric=cfg.metric,
        workers=cfg.workers,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    save_index(index, path)
    return index


def cmd_index(cfg: RunConfig, quiet: bool = False) -> dict:
    corpus = ingest_corpus(cfg.corpus_path)
    gateway = build_gateway(cfg)
    if not gateway.has_role("embed"):
        raise ConfigError("indexing needs an 'embed' backend")
    index = ensure_index(cfg, corpus, gateway)
    _echo(
        f"index rows={len(index)} dim={index.dim} metric={index.metric} "
        f"fingerprint={index.corpus_fingerprint}",
        quiet,
    )
    return {"rows": len(index), "dim": index.dim, "path": str(_index_path(cfg, corpus))}


def _probe_backends(cfg: RunConfig, gateway: Gateway, roles: set[str],
                    quiet: bool = False) -> None:
    """One cheap call per live backend role before a long run.

    Mock backends are skipped; success markers in the cache directory keep
    re-invocations free of backend calls.
    """
    if not cfg.probe:
        return
    cache_dir = cfg.resolved_cache_dir()
    marker_dir = (cache_dir / "probes") if cache_dir else None
    if marker_dir is not None:
        marker_dir.mkdir(parents=True, exist_ok=True)
    for role in sorted(roles):
        if not gateway.has_role(role):
            continue
        backend = gateway.backend(role)
        if getattr(backend, "is_mock", False):
            continue
        marker = (marker_dir / f"{slug(backend.backend_id)}.ok") if marker_dir else None
        if marker is not None and marker.exists():
            continue
        _echo(f"probing {role} backend {backend.backend_id}", quiet)
        if role in ("chat", "judge"):
            gateway.chat(
                ChatRequest(messages=(("user", "ping"),), max_output_tokens=8), role=role
            )
        elif role == "embed":
            gateway.embed(["ping"], role=role)
        elif role == "score":
            gateway.score_pairs("ping", ["ping"], role=role)
        if marker is not None:
            marker.write_text("ok\n", encoding="utf-8")


class _PromptDumper:
    """Writes every rendered prompt of a run under prompts/ for audit."""

    def __init__(self, root: Path, dataset: str):
        self.root = root / slug(dataset)
        self._lock = threading.Lock()
        self._seq: dict[tuple[str, str], int] = {}
        self.count = 0

    def __call__(self, method: str, item_id: str, template_id: str,
                 system: str | None, user: str) -> None:
        key = (method, item_id)
        with self._lock:
            seq = self._seq.get(key, 0)
            self._seq[key] = seq + 1
            self.count += 1
        folder = self.root / slug(method) / slug(item_id)
        folder.mkdir(parents=True, exist_ok=True)
        body = ""
        if system is not None:
            body += f"--- system ---\n{system}\n"
        body += f"--- user ---\n{user}\n"
        (folder / f"{seq:03d}__{slug(template_id)}.txt").write_text(body, encoding="utf-8")


def _load_run_inputs(cfg: RunConfig):
    if not cfg.datasets:
        raise ConfigError("no datasets configured")
    corpus = ingest_corpus(cfg.corpus_path)
    gateway = build_gateway(cfg)
    specs = cfg.method_specs()
    preflight_capabilities(cfg, gateway, specs)
    roles = {role for spec in specs.values() for role in required_roles(spec)}
    _probe_backends(cfg, gateway, roles, quiet=True)
    index = ensure_index(cfg, corpus, gateway)
    manifest = manifest_dict(cfg, corpus.fingerprint)
    return corpus, gateway, specs, index, manifest


def _model_name(gateway: Gateway) -> str:
    return gateway.backend("chat").model_name if gateway.has_role("chat") else "none"


def cmd_run(cfg: RunConfig, quiet: bool = False,
            prompt_sink_factory: Callable[[str], object] | None = None) -> dict:
    """Execute every missing (method, item) pair and append the records."""
    corpus, gateway, specs, index, manifest = _load_run_inputs(cfg)
    model = _model_name(gateway)
    mhash = manifest["manifest_hash"]
    totals = {"records_written": 0, "records_skipped": 0, "per_method": {}}

    for dataset_id in sorted(cfg.datasets):
        items = load_dataset(cfg.datasets[dataset_id])
        rec_path = records_path(cfg.output_dir, dataset_id, model, mhash)
        write_manifest(manifest_path(cfg.output_dir, dataset_id, model, mhash), manifest)
        existing = {
            (rec["method"], rec["item_id"])
            for rec in read_jsonl(rec_path)
            if rec.get("manifest_hash") == mhash
        }

        sink = prompt_sink_factory(dataset_id) if prompt_sink_factory else None
        runner = PipelineRunner(
            gateway,
            corpus,
            index,
            dataset_id=dataset_id,
            max_output_tokens=cfg.max_output_tokens,
            context_window_tokens=cfg.context_window_tokens,
            hyde_include_query=cfg.hyde_include_query,
            inner_workers=cfg.inner_workers,
            prompt_sink=sink,  # type: ignore[arg-type]
        )

        tasks = [
            (name, item)
            for name in sorted(specs)
            for item in items
            if (name, item.item_id) not in existing
        ]
        totals["records_skipped"] += len(cfg.methods) * len(items) - len(tasks)
        if not tasks:
            _echo(f"[{dataset_id}] nothing to do ({len(existing)} records present)", quiet)
            continue

        per_method: dict[str, int] = {}
        parse_modes: dict[str, int] = {}
        rec_path.parent.mkdir(parents=True, exist_ok=True)
        with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
            futures = [
                (name, pool.submit(runner.run, specs[name], item)) for name, item in tasks
            ]
            with rec_path.open("a", encoding="utf-8") as handle:
                for name, future in futures:
                    record = future.result()
                    handle.write(canonical_dumps(record.to_json(mhash)) + "\n")
                    per_method[name] = per_method.get(name, 0) + 1
                    mode = record.answer.parse_mode if record.answer else "error"
                    parse_modes[mode] = parse_modes.get(mode, 0) + 1
        for name in sorted(per_method):
            _echo(f"[{dataset_id}] {name}: {per_method[name]} records", quiet)
            totals["per_method"][f"{dataset_id}/{name}"] = per_method[name]
        mode_text = " ".join(f"{k}={v}" for k, v in sorted(parse_modes.items()))
        _echo(f"[{dataset_id}] answer parse modes: {mode_text}", quiet)
        totals.setdefault("parse_modes", {})
        for mode, count in parse_modes.items():
            totals["parse_modes"][mode] = totals["parse_modes"].get(mode, 0) + count
        totals["records_written"] += sum(per_method.values())

    totals["backend_calls"] = gateway.stats.backend_calls
    totals["cache_hits"] = gateway.stats.cache_hits
    _echo(
        f"done: {totals['records_written']} new records, "
        f"{totals['records_skipped']} skipped, "
        f"{totals['backend_calls']} backend calls",
        quiet,
    )
    return totals


def cmd_dump_prompts(cfg: RunConfig, quiet: bool = False) -> dict:
    """Re-render every prompt of the configured run into prompts/ for audit.

    Executes the full pipeline (cached greedy calls are free); records are
    not appended, so this never perturbs run state.
    """
    corpus, gateway, specs, index, manifest = _load_run_inputs(cfg)
    root = Path(cfg.output_dir) / "prompts"
    total = 0
    for dataset_id in sorted(cfg.datasets):
        items = load_dataset(cfg.datasets[dataset_id])
        dumper = _PromptDumper(root, dataset_id)
        runner = PipelineRunner(
            gateway,
            corpus,
            index,
            dataset_id=dataset_id,
            max_output_tokens=cfg.max_output_tokens,
            context_window_tokens=cfg.context_window_tokens,
            hyde_include_query=cfg.hyde_include_query,
            inner_workers=cfg.inner_workers,
            prompt_sink=dumper,
        )
        for name in sorted(specs):
            for item in items:
                runner.run(specs[name], item)
        total += dumper.count
    _echo(f"wrote {total} prompts under {root}", quiet)
    return {"prompts_written": total, "root": str(root)}


def _record_context_ids(rec: dict) -> list[str]:
    return list(rec.get("context", {}).get("doc_ids", []))


def cmd_judge(cfg: RunConfig, quiet: bool = False) -> dict:
    """Label every retrieval-method record lacking a verdict; CoT excluded."""
    corpus = ingest_corpus(cfg.corpus_path)
    gateway = build_gateway(cfg)
    if not gateway.has_role("judge"):
        raise ConfigError("judging needs a 'judge' backend")
    _probe_backends(cfg, gateway, {"judge"}, quiet=True)
    manifest = manifest_dict(cfg, corpus.fingerprint)
    mhash = manifest["manifest_hash"]
    model = _model_name(gateway)
    judge_model = gateway.backend("judge").model_name
    totals = {"verdicts_written": 0, "verdicts_skipped": 0}

    for dataset_id in sorted(cfg.datasets):
        items = {item.item_id: item for item in load_dataset(cfg.datasets[dataset_id])}
        rec_path = records_path(cfg.output_dir, dataset_id, model, mhash)
        recs = read_jsonl(rec_path)
        if not recs:
            raise DataError(
                f"no run records at {rec_path}; run the 'run' command first"
            )
        for rec in recs:
            if rec.get("manifest_hash") != mhash:
                raise DataError(
                    f"{rec_path}: record manifest {rec.get('manifest_hash')!r} does not "
                    f"match current corpus/config manifest {mhash!r}"
                )
        v_path = verdicts_path(cfg.output_dir, dataset_id, model, judge_model, mhash)
        existing = {
            (v["method"], v["item_id"]) for v in read_jsonl(v_path)
        }

        todo = []
        for rec in recs:
            if rec.get("kind") == KIND_COT:
                continue
            if not _record_context_ids(rec):
                continue
            key = (rec["method"], rec["item_id"])
            if key in existing:
                totals["verdicts_skipped"] += 1
                continue
            todo.append(rec)

        def judge_one(rec: dict) -> dict:
            item = items.get(rec["item_id"])
            if item is None:
                raise DataError(f"record item {rec['item_id']!r} missing from dataset")
            chunks = tuple(
                (corpus.get(d).title, corpus.get(d).text) for d in _record_context_ids(rec)
            )
            req = JudgeRequest(item=item, gold=item.gold, chunks=chunks,
                               judge_model=judge_model)
            base = {
                "manifest_hash": mhash,
                "dataset": dataset_id,
                "method": rec["method"],
                "model": rec["model"],
                "item_id": rec["item_id"],
                "judge_model": judge_model,
            }
            try:
                verdict = judge_context(
                    gateway, req, max_output_tokens=cfg.judge_max_output_tokens
                )
            except ParseFailure as exc:
                return {
                    **base,
                    "status": "unjudged",
                    "selected_answer": None,
                    "label": None,
                    "flag": None,
                    "raw": exc.raw,
                }
            return {
                **base,
                "status": "ok",
                "selected_answer": verdict.selected_answer,
                "label": verdict.label,
                "flag": verdict.flag,
                "raw": verdict.raw,
            }

        if todo:
            with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
                futures = [pool.submit(judge_one, rec) for rec in todo]
                lines = [f.result() for f in futures]
            append_jsonl(v_path, lines)
            totals["verdicts_written"] += len(lines)
        _echo(
            f"[{dataset_id}] wrote {len(todo)} verdicts "
            f"({totals['verdicts_skipped']} already present)",
            quiet,
        )

    totals["backend_calls"] = gateway.stats.backend_calls
    return totals


def _load_verdict_labels(path: Path) -> dict[tuple[str, str], str]:
    labels: dict[tuple[str, str], str] = {}
    for v in read_jsonl(path):
        if v.get("status") == "ok" and v.get("label"):
            labels[(v["method"], v["item_id"])] = v["label"]
    return labels


def cmd_report(cfg: RunConfig, quiet: bool = False) -> dict:
    """Aggregate records plus verdicts into the four report tables."""
    corpus = ingest_corpus(cfg.corpus_path)
    manifest = manifest_dict(cfg, corpus.fingerprint)
    mhash = manifest["manifest_hash"]
    gateway = build_gateway(cfg)
    model = _model_name(gateway)
    judge_model = (
        gateway.backend("judge").model_name if gateway.has_role("judge") else None
    )
    specs = cfg.method_specs()

    report_dir = Path(cfg.output_dir) / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    reports: list = []
    warned_no_verdicts = False

    for dataset_id in sorted(cfg.datasets):
        items = load_dataset(cfg.datasets[dataset_id])
        gold_map = {item.item_id: item.gold for item in items}
        rec_path = records_path(cfg.output_dir, dataset_id, model, mhash)
        recs = read_jsonl(rec_path)
        if not recs:
            raise DataError(f"no run records at {rec_path}; nothing to report")

        verdict_labels: dict[tuple[str, str], str] = {}
        if judge_model is not None:
            v_path = verdicts_path(cfg.output_dir, dataset_id, model, judge_model, mhash)
            verdict_labels = _load_verdict_labels(v_path)
        if not verdict_labels and not warned_no_verdicts:
            print(
                "warning: no verdicts found; emitting accuracy-only report",
                file=sys.stderr,
            )
            warned_no_verdicts = True

        by_method: dict[str, list[RecordView]] = {}
        for rec in recs:
            answer = rec.get("answer") or {}
            view = RecordView(
                item_id=rec["item_id"],
                choice=answer.get("choice"),
                status=rec.get("status", "ok"),
            )
            by_method.setdefault(rec["method"], []).append(view)

        cot_records = None
        for name, spec in specs.items():
            if spec.kind == KIND_COT and name in by_method:
                cot_records = by_method[name]
                break

        for name in sorted(by_method):
            records = by_method[name]
            verdicts = {
                item_id: label
                for (method, item_id), label in verdict_labels.items()
                if method == name
            }
            is_cot = specs.get(name) is not None and specs[name].kind == KIND_COT
            reports.append(
                build_report(
                    RunKey(dataset=dataset_id, method=name, model=model),
                    records,
                    gold_map,
                    verdicts=None if (is_cot or not verdicts) else verdicts,
                    cot_records=cot_records,
                    strict_unjudged=cfg.judge_strict_unjudged,
                )
            )

    _write_report_files(report_dir, reports)
    _echo(f"wrote report tables under {report_dir}", quiet)
    return {"rows": len(reports), "report_dir": str(report_dir)}


def _write_report_files(report_dir: Path, reports: list) -> None:
    acc_lines = ["dataset\tmethod\tmodel\tn\taccuracy_pct\taccuracy"]
    dur_lines = [
        "dataset\tmethod\tmodel\tn\tentailed\tuseful\tnot_useful\tdur_pct\tdur\tcoverage"
    ]
    label_lines = ["dataset\tmethod\tmodel\tentailed_pct\tuseful_pct\tnot_useful_pct"]
    util_lines = [
        "dataset\tmethod\tmodel\tlabel\tn\taccuracy_pct\taccuracy\tdelta_cot_pct\tdelta_cot"
    ]
    summary: list[str] = ["run summary", "==========="]

    for rep in reports:
        key = rep.key
        acc_lines.append(
            f"{key.dataset}\t{key.method}\t{key.model}\t{rep.n}\t"
            f"{pct(rep.accuracy)}\t{rep.accuracy!r}"
        )
        summary.append(
            f"{key.dataset} / {key.method} / {key.model}: n={rep.n} "
            f"accuracy={pct(rep.accuracy)}%"
            + (f" dur={pct(rep.dur_value)}%" if rep.dur_value is not None else "")
        )
        if rep.counts is None:
            continue
        c = rep.counts
        dur_lines.append(
            f"{key.dataset}\t{key.method}\t{key.model}\t{c.n_total}\t{c.n_entailed}\t"
            f"{c.n_useful}\t{c.n_not_useful}\t{pct(rep.dur_value)}\t"
            f"{rep.dur_value!r}\t{'' if rep.coverage is None else f'{rep.coverage:.4f}'}"
        )
        frac = rep.label_fractions
        label_lines.append(
            f"{key.dataset}\t{key.method}\t{key.model}\t"
            f"{pct(frac.get(metrics.LABEL_ENTAILED))}\t"
            f"{pct(frac.get(metrics.LABEL_USEFUL))}\t"
            f"{pct(frac.get(metrics.LABEL_NOT_USEFUL))}"
        )
        for label, entry in rep.per_label.items():
            acc_txt = "NA" if entry["accuracy"] is None else repr(entry["accuracy"])
            delta_txt = "NA" if entry["delta_cot"] is None else repr(entry["delta_cot"])
            util_lines.append(
                f"{key.dataset}\t{key.method}\t{key.model}\t{label}\t{entry['n']}\t"
                f"{pct(entry['accuracy'])}\t{acc_txt}\t{pct(entry['delta_cot'])}\t{delta_txt}"
            )

    (report_dir / "accuracy.tsv").write_text("\n".join(acc_lines) + "\n", encoding="utf-8")
    (report_dir / "dur.tsv").write_text("\n".join(dur_lines) + "\n", encoding="utf-8")
    (report_dir / "labels.tsv").write_text("\n".join(label_lines) + "\n", encoding="utf-8")
    (report_dir / "utility.tsv").write_text("\n".join(util_lines) + "\n", encoding="utf-8")
    (report_dir / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
