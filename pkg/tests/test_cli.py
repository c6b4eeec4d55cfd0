"""End-to-end command surface over mock backends: run, judge, report, resume."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from evdlab import harness
from evdlab.cli import main
from evdlab.config import load_config, parse_set_overrides
from evdlab.errors import CapabilityError

from support import load_cfg, make_cli_config


def records_file(out_dir: Path) -> Path:
    matches = sorted(out_dir.glob("records__*.jsonl"))
    assert matches, f"no records file under {out_dir}"
    return matches[0]


def verdicts_file(out_dir: Path) -> Path:
    matches = sorted(out_dir.glob("verdicts__*.jsonl"))
    assert matches, f"no verdicts file under {out_dir}"
    return matches[0]


class TestIngestCommand:
    def test_summary_line(self, tmp_path, capsys):
        config = make_cli_config(tmp_path, n_docs=12)
        assert main(["ingest", "--config", str(config)]) == 0
        out = capsys.readouterr().out
        assert "documents=12" in out
        assert "fingerprint=" in out

    def test_missing_corpus_exits_4_with_path(self, tmp_path, capsys):
        config = make_cli_config(tmp_path)
        code = main(
            ["ingest", "--config", str(config), "--set",
             f"corpus_path={tmp_path / 'absent.jsonl'}"]
        )
        assert code == 4
        assert "absent.jsonl" in capsys.readouterr().err

    def test_reingest_identical_fingerprint(self, tmp_path):
        config = make_cli_config(tmp_path)
        cfg = load_cfg(config)
        first = harness.cmd_ingest(cfg, quiet=True)
        second = harness.cmd_ingest(cfg, quiet=True)
        assert first["fingerprint"] == second["fingerprint"]

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["ingest", "--config", str(tmp_path / "nope.json")]) == 2


class TestRunCommand:
    def test_thirteen_methods_times_ten_items(self, tmp_path):
        config = make_cli_config(tmp_path, n_items=10)
        cfg = load_cfg(config)
        totals = harness.cmd_run(cfg, quiet=True)
        assert totals["records_written"] == 130
        lines = records_file(tmp_path / "out").read_text().splitlines()
        assert len(lines) == 130
        methods = {json.loads(line)["method"] for line in lines}
        assert len(methods) == 13

    def test_immediate_rerun_is_free_and_byte_stable(self, tmp_path):
        config = make_cli_config(tmp_path, n_items=4, methods=["COT", "SIMPLE_RAG"])
        cfg = load_cfg(config)
        harness.cmd_run(cfg, quiet=True)
        path = records_file(tmp_path / "out")
        before = path.read_bytes()
        rerun = harness.cmd_run(load_cfg(config), quiet=True)
        assert rerun["records_written"] == 0
        assert rerun["backend_calls"] == 0
        assert path.read_bytes() == before

    def test_resume_after_interruption_runs_only_missing_pairs(self, tmp_path):
        config = make_cli_config(tmp_path, n_items=10, methods=["COT", "SIMPLE_RAG"])
        cfg = load_cfg(config)
        harness.cmd_run(cfg, quiet=True)
        path = records_file(tmp_path / "out")
        all_lines = path.read_text().splitlines()
        assert len(all_lines) == 20
        path.write_text("\n".join(all_lines[:10]) + "\n", encoding="utf-8")
        resumed = harness.cmd_run(load_cfg(config), quiet=True)
        assert resumed["records_written"] == 10
        final = set(path.read_text().splitlines())
        assert final == set(all_lines)

    def test_mainrag_without_logprobs_fails_preflight(self, tmp_path, capsys):
        config = make_cli_config(tmp_path, methods=["MAIN_RAG"])
        code = main(
            ["run", "--config", str(config), "--set",
             "backends.chat.supports_logprobs=false"]
        )
        assert code == 3
        err = capsys.readouterr().err
        assert "MAIN_RAG" in err

    def test_preflight_runs_before_any_model_call(self, tmp_path):
        config = make_cli_config(tmp_path, methods=["MAIN_RAG"])
        cfg = load_cfg(config)
        cfg.backends["chat"].supports_logprobs = False
        with pytest.raises(CapabilityError):
            harness.cmd_run(cfg, quiet=True)
        assert not list((tmp_path / "out").glob("records__*.jsonl"))

    def test_set_override_via_cli(self, tmp_path):
        config = make_cli_config(tmp_path, n_items=3)
        code = main(
            ["run", "--config", str(config), "--quiet", "--set", 'methods=["COT"]']
        )
        assert code == 0
        lines = records_file(tmp_path / "out").read_text().splitlines()
        assert len(lines) == 3
        assert {json.loads(l)["method"] for l in lines} == {"COT"}


class TestJudgeCommand:
    def test_two_retrieval_methods_twenty_verdicts(self, tmp_path):
        config = make_cli_config(
            tmp_path, n_items=10, methods=["COT", "SIMPLE_RAG", "RERANK_RAG"]
        )
        cfg = load_cfg(config)
        harness.cmd_run(cfg, quiet=True)
        totals = harness.cmd_judge(load_cfg(config), quiet=True)
        assert totals["verdicts_written"] == 20
        lines = [json.loads(l) for l in verdicts_file(tmp_path / "out").read_text().splitlines()]
        assert len(lines) == 20
        assert all(v["method"] != "COT" for v in lines)
        assert all(v["judge_model"] == "mock-judge" for v in lines)

    def test_second_invocation_zero_judge_calls(self, tmp_path):
        config = make_cli_config(tmp_path, n_items=5, methods=["COT", "SIMPLE_RAG"])
        harness.cmd_run(load_cfg(config), quiet=True)
        harness.cmd_judge(load_cfg(config), quiet=True)
        again = harness.cmd_judge(load_cfg(config), quiet=True)
        assert again["verdicts_written"] == 0
        assert again["backend_calls"] == 0

    def test_judge_before_run_is_data_error(self, tmp_path, capsys):
        config = make_cli_config(tmp_path)
        assert main(["judge", "--config", str(config), "--quiet"]) == 4
        assert "run" in capsys.readouterr().err


class TestReportCommand:
    def run_judge_report(self, tmp_path, methods):
        config = make_cli_config(tmp_path, n_items=8, methods=methods)
        harness.cmd_run(load_cfg(config), quiet=True)
        harness.cmd_judge(load_cfg(config), quiet=True)
        result = harness.cmd_report(load_cfg(config), quiet=True)
        return config, Path(result["report_dir"])

    def test_all_four_tables_emitted(self, tmp_path):
        _, report_dir = self.run_judge_report(
            tmp_path, ["COT", "SIMPLE_RAG", "HCQR", "REWRITING"]
        )
        for name in ("accuracy.tsv", "dur.tsv", "labels.tsv", "utility.tsv", "summary.txt"):
            assert (report_dir / name).exists(), name
        acc = (report_dir / "accuracy.tsv").read_text().splitlines()
        assert acc[0].startswith("dataset\tmethod")
        assert len(acc) == 1 + 4
        dur_rows = (report_dir / "dur.tsv").read_text().splitlines()
        assert len(dur_rows) == 1 + 3  # retrieval methods only

    def test_report_values_match_direct_aggregation(self, tmp_path):
        config, report_dir = self.run_judge_report(tmp_path, ["COT", "SIMPLE_RAG"])
        from evdlab.records import read_jsonl

        recs = read_jsonl(records_file(tmp_path / "out"))
        simple = [r for r in recs if r["method"] == "SIMPLE_RAG"]
        items = {}
        for line in Path(json.loads(config.read_text())["datasets"]["toy"]).read_text().splitlines():
            obj = json.loads(line)
            items[obj["item_id"]] = obj["answer"]
        correct = sum(
            1 for r in simple
            if r["status"] == "ok" and r["answer"]["choice"] == items[r["item_id"]]
        )
        expected = correct / len(simple)
        acc_rows = (report_dir / "accuracy.tsv").read_text().splitlines()[1:]
        row = next(r for r in acc_rows if "\tSIMPLE_RAG\t" in r)
        assert float(row.split("\t")[5]) == pytest.approx(expected)

    def test_no_verdicts_warns_and_exits_zero(self, tmp_path, capsys):
        config = make_cli_config(tmp_path, n_items=4, methods=["COT", "SIMPLE_RAG"])
        assert main(["run", "--config", str(config), "--quiet"]) == 0
        assert main(["report", "--config", str(config), "--quiet"]) == 0
        assert "accuracy-only" in capsys.readouterr().err

    def test_empty_method_list_is_config_error(self, tmp_path):
        config = make_cli_config(tmp_path, methods=[])
        assert main(["report", "--config", str(config), "--quiet"]) == 2


class TestDumpPrompts:
    def test_prompts_written_for_audit(self, tmp_path):
        config = make_cli_config(tmp_path, n_items=2, methods=["COT", "HCQR"])
        cfg = load_cfg(config)
        result = harness.cmd_dump_prompts(cfg, quiet=True)
        assert result["prompts_written"] > 0
        root = Path(result["root"])
        files = list(root.rglob("*.txt"))
        assert files
        sample = files[0].read_text(encoding="utf-8")
        assert "--- user ---" in sample

    def test_dump_does_not_write_records(self, tmp_path):
        config = make_cli_config(tmp_path, n_items=2, methods=["COT"])
        harness.cmd_dump_prompts(load_cfg(config), quiet=True)
        assert not list((tmp_path / "out").glob("records__*.jsonl"))


class TestConfigPlumbing:
    def test_parse_set_overrides_nested(self):
        tree = parse_set_overrides(
            ["seed=9", "backends.embed.dim=12", 'methods=["COT"]', "probe=false"]
        )
        assert tree == {
            "seed": 9,
            "backends": {"embed": {"dim": 12}},
            "methods": ["COT"],
            "probe": False,
        }

    def test_env_cache_dir_override(self, tmp_path, monkeypatch):
        config = make_cli_config(tmp_path)
        monkeypatch.setenv("EVD_CACHE_DIR", str(tmp_path / "elsewhere"))
        cfg = load_config(config)
        assert cfg.resolved_cache_dir() == tmp_path / "elsewhere"

    def test_unknown_config_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"no_such_key": 1}', encoding="utf-8")
        assert main(["ingest", "--config", str(bad)]) == 2

    def test_unknown_method_rejected(self, tmp_path):
        config = make_cli_config(tmp_path, methods=["NOT_A_METHOD"])
        assert main(["run", "--config", str(config), "--quiet"]) == 2

    def test_method_override_changes_budget(self, tmp_path):
        config = make_cli_config(
            tmp_path,
            n_items=2,
            methods=["SIMPLE_RAG"],
            method_overrides={"SIMPLE_RAG": {"b_max": 3}},
        )
        harness.cmd_run(load_cfg(config), quiet=True)
        recs = [
            json.loads(l)
            for l in records_file(tmp_path / "out").read_text().splitlines()
        ]
        assert all(len(r["context"]["doc_ids"]) <= 3 for r in recs)

    def test_index_command_persists(self, tmp_path, capsys):
        config = make_cli_config(tmp_path, n_docs=9)
        assert main(["index", "--config", str(config)]) == 0
        out = capsys.readouterr().out
        assert "rows=9" in out
        assert list((tmp_path / "out").glob("index__*.evidx"))

    def test_api_key_env_reaches_backend(self, tmp_path, monkeypatch):
        from evdlab.config import build_gateway

        config = make_cli_config(tmp_path)
        monkeypatch.setenv("EVD_API_KEY_CHAT", "sk-from-env")
        cfg = load_cfg(config)
        cfg.backends["chat"].kind = "openai"
        cfg.backends["chat"].base_url = "http://example.invalid/v1"
        cfg.backends["chat"].model = "m"
        gateway = build_gateway(cfg)
        assert gateway.backend("chat").api_key == "sk-from-env"

    def test_explicit_api_key_env_name(self, tmp_path, monkeypatch):
        from evdlab.config import build_gateway

        config = make_cli_config(tmp_path)
        monkeypatch.setenv("MY_SPECIAL_KEY", "sk-custom")
        cfg = load_cfg(config)
        cfg.backends["embed"].kind = "openai"
        cfg.backends["embed"].base_url = "http://example.invalid/v1"
        cfg.backends["embed"].model = "m"
        cfg.backends["embed"].api_key_env = "MY_SPECIAL_KEY"
        gateway = build_gateway(cfg)
        assert gateway.backend("embed").api_key == "sk-custom"


class TestNamespaces:
    def test_seed_change_opens_fresh_record_namespace(self, tmp_path):
        config = make_cli_config(tmp_path, n_items=2, methods=["COT"])
        harness.cmd_run(load_cfg(config), quiet=True)
        harness.cmd_run(load_cfg(config, seed=999), quiet=True)
        files = sorted((tmp_path / "out").glob("records__*.jsonl"))
        assert len(files) == 2

    def test_parse_mode_distribution_reported(self, tmp_path):
        config = make_cli_config(tmp_path, n_items=3, methods=["COT", "SIMPLE_RAG"])
        totals = harness.cmd_run(load_cfg(config), quiet=True)
        assert sum(totals["parse_modes"].values()) == 6
        assert totals["parse_modes"].get("clean_json", 0) == 6

    def test_new_judge_model_new_verdict_file(self, tmp_path):
        config = make_cli_config(tmp_path, n_items=3, methods=["COT", "SIMPLE_RAG"])
        harness.cmd_run(load_cfg(config), quiet=True)
        harness.cmd_judge(load_cfg(config), quiet=True)
        cfg2 = load_cfg(config)
        cfg2.backends["judge"].model = "other-judge"
        harness.cmd_judge(cfg2, quiet=True)
        files = sorted((tmp_path / "out").glob("verdicts__*.jsonl"))
        assert len(files) == 2
        names = {f.name for f in files}
        assert any("other-judge" in n for n in names)
        assert any("mock-judge" in n for n in names)
