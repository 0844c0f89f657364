import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from gcaudit.cli import main
from gcaudit.kb import bundled_kb, serialize_kb
from gcaudit.output import read_comments
from gcaudit.aggregate_fixture import fixture_dir


@pytest.fixture
def kb_file(tmp_path):
    path = tmp_path / "kb.json"
    path.write_text(serialize_kb(bundled_kb()), encoding="utf-8")
    return path


def synth(tmp_path, *extra) -> Path:
    out = tmp_path / "cohort"
    assert main(["synth", "--patients", "12", "--seed", "3", "--transactions", "120", "--output-dir", str(out),
                 *extra]) == 0
    return out


def analyze(kb_file, cohort: Path, out: Path, *extra) -> int:
    return main(["analyze", "--kb-path", str(kb_file), "--cohort-paths", str(cohort / "transactions.csv"),
                 str(cohort / "demographics.csv"), "--output-dir", str(out), *extra])


# ---------------------------------------------------------------------------
# kb validate
# ---------------------------------------------------------------------------


def test_kb_validate_ok(kb_file, capsys):
    assert main(["kb", "validate", str(kb_file)]) == 0
    assert capsys.readouterr().err == ""


def test_kb_validate_dangling_reference(tmp_path, capsys):
    doc = {"meta": {"name": "x", "version": "1", "scope_notes": ""}, "concepts": [], "abstractions": [],
           "mappings": [], "drug_steps": [],
           "monitoring": [{"id": "m", "action_concept": "hba1c", "period": "90d", "latest_start_offset": "90d",
                           "grace": "30d", "severity": "important", "applicability": True}]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["kb", "validate", str(path)]) == 1
    lines = capsys.readouterr().err.splitlines()
    assert len(lines) == 1 and "hba1c" in lines[0]


def test_kb_validate_syntax_error(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{")
    assert main(["kb", "validate", str(path)]) == 1
    assert "line 1" in capsys.readouterr().err


def test_kb_validate_missing_file(tmp_path):
    assert main(["kb", "validate", str(tmp_path / "nope.json")]) == 2


def test_usage_error_exit_code():
    assert main(["analyze"]) == 2
    assert main(["no-such-command"]) == 2


# ---------------------------------------------------------------------------
# ingest / analyze
# ---------------------------------------------------------------------------


def test_analyze_fig1_reports_missing_action(kb_file, tmp_path):
    cohort = tmp_path / "fig1"
    assert main(["synth", "--patients", "0", "--fixture", "fig1", "--output-dir", str(cohort)]) == 0
    out = tmp_path / "out"
    assert analyze(kb_file, cohort, out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["comment_counts"]["MissingAction"] >= 1
    with open(out / "comments.jsonl") as fh:
        comments = read_comments(fh)
    insulin = [c for c in comments if c.guideline_path.endswith("initiate-insulin-therapy")]
    assert [c.comment_type.value for c in insulin] == ["MissingAction"]


def test_empty_cohort(kb_file, tmp_path):
    cohort = tmp_path / "empty"
    cohort.mkdir()
    (cohort / "transactions.csv").write_text("patient_id,date,kind,code,code_system,value,unit,days_supply\n")
    (cohort / "demographics.csv").write_text("patient_id,gender,birth_year\n")
    out = tmp_path / "out"
    assert analyze(kb_file, cohort, out) == 0
    assert (out / "comments.jsonl").read_text() == ""
    assert json.loads((out / "manifest.json").read_text())["comments"] == 0


def test_strict_reject_exits_one(kb_file, tmp_path, capsys):
    cohort = synth(tmp_path, "--unmapped-rate", "0.05")
    out = tmp_path / "out"
    assert analyze(kb_file, cohort, out) == 1
    assert "unmapped code" in capsys.readouterr().err
    assert not (out / "comments.jsonl").exists()
    assert analyze(kb_file, cohort, out, "--no-strict-ingestion") == 0


def test_analyze_is_byte_identical_across_runs_and_workers(kb_file, tmp_path):
    cohort = synth(tmp_path)
    outs = []
    for k, extra in enumerate([(), (), ("--parallelism", "3")]):
        out = tmp_path / f"run{k}"
        assert analyze(kb_file, cohort, out, *extra) == 0
        outs.append(out)
    for name in ("comments.jsonl", "report.txt", "manifest.json"):
        texts = {(o / name).read_bytes() for o in outs}
        assert len(texts) == 1, name


def test_outputs_stay_in_output_dir(kb_file, tmp_path):
    cohort = synth(tmp_path)
    before = set(tmp_path.rglob("*"))
    out = tmp_path / "out"
    assert analyze(kb_file, cohort, out) == 0
    new = set(tmp_path.rglob("*")) - before
    assert new and all(p == out or out in p.parents for p in new)


def test_ingest_then_analyze_saved_cohort(kb_file, tmp_path):
    cohort = synth(tmp_path)
    ing = tmp_path / "ingested"
    assert main(["ingest", "--kb-path", str(kb_file), "--cohort-paths", str(cohort / "transactions.csv"),
                 str(cohort / "demographics.csv"), "--output-dir", str(ing)]) == 0
    report = json.loads((ing / "ingestion_report.json").read_text())
    assert report["rejected"] == [] and report["accepted"] == report["input_rows"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert analyze(kb_file, cohort, a) == 0
    assert main(["analyze", "--kb-path", str(kb_file), "--cohort-paths", str(ing / "cohort.json"),
                 "--output-dir", str(b)]) == 0
    assert (a / "comments.jsonl").read_bytes() == (b / "comments.jsonl").read_bytes()


def test_config_file_with_override(kb_file, tmp_path):
    cohort = synth(tmp_path)
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"kb_path": str(kb_file),
                               "cohort_paths": [str(cohort / "transactions.csv"), str(cohort / "demographics.csv")],
                               "adherence_threshold": 0.5, "include_on_time": False}))
    out = tmp_path / "out"
    assert main(["analyze", "--config", str(cfg), "--adherence-threshold", "0.9", "--output-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["adherence_threshold"] == 0.9
    assert manifest["config"]["include_on_time"] is False
    assert manifest["comment_counts"].get("ActionOnTime", 0) == 0


def test_bad_config_values(kb_file, tmp_path):
    cohort = synth(tmp_path)
    base = ["analyze", "--kb-path", str(kb_file), "--cohort-paths", str(cohort / "transactions.csv")]
    assert main(base + ["--adherence-threshold", "1.5"]) == 2
    assert main(base + ["--parallelism", "0"]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text('{"colour": "red"}')
    assert main(base + ["--config", str(cfg)]) == 2


def test_manifest_contents(kb_file, tmp_path):
    cohort = synth(tmp_path)
    out = tmp_path / "out"
    assert analyze(kb_file, cohort, out) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["kb"]["name"] == "diabetes-excerpt"
    assert len(m["kb"]["sha256"]) == 64 and len(m["inputs"]) == 2
    assert m["patients"] == 12
    assert sum(m["comment_counts"].values()) == m["comments"]
    assert set(m["outputs"]) == {"comments.jsonl", "report.txt"}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def test_report_filters_patients(kb_file, tmp_path, capsys):
    cohort = synth(tmp_path)
    out = tmp_path / "out"
    assert analyze(kb_file, cohort, out) == 0
    capsys.readouterr()
    assert main(["report", str(out / "comments.jsonl"), "--patient", "S00001"]) == 0
    text = capsys.readouterr().out
    assert "S00001" in text and "S00002" not in text


def test_report_on_malformed_stream(tmp_path, capsys):
    bad = tmp_path / "c.jsonl"
    bad.write_text('{"patient_id": "P"}\n')
    assert main(["report", str(bad)]) == 1
    assert "line 1" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_aggregate_fixture(tmp_path, capsys):
    assert main(["eval", "--bundled-fixture", "--output-dir", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    assert printed == (tmp_path / "tables.txt").read_text()
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert [r["exact_pct"] for r in stats["completeness"]["levels"]] == [66, 83, 98]
    assert any("98%" in n or "99" in n for n in stats["notes"])


def test_eval_is_repeatable(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["eval", "--bundled-fixture", "--output-dir", str(a)]) == 0
    assert main(["eval", "--annotations-dir", str(fixture_dir()), "--output-dir", str(b)]) == 0
    for name in ("tables.txt", "stats.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def _copy_fixture(tmp_path) -> Path:
    d = tmp_path / "ann"
    shutil.copytree(fixture_dir(), d)
    (d / "reference.json").unlink(missing_ok=True)
    return d


def test_eval_empty_verdicts(tmp_path, capsys):
    d = _copy_fixture(tmp_path)
    (d / "verdicts.csv").write_text("expert_id,system_comment_id,correctness,importance,note\n")
    assert main(["eval", "--annotations-dir", str(d), "--output-dir", str(tmp_path / "o")]) == 1
    assert "no verdicts" in capsys.readouterr().err


def test_eval_all_correct_verdicts(tmp_path, capsys):
    d = _copy_fixture(tmp_path)
    lines = (d / "verdicts.csv").read_text().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    for r in rows:
        r[2] = "correct"
    (d / "verdicts.csv").write_text("\n".join([lines[0]] + [",".join(r) for r in rows]) + "\n")
    out = tmp_path / "o"
    assert main(["eval", "--annotations-dir", str(d), "--output-dir", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    first = stats["correctness"]["groups"][0]
    assert first["pct"] == 100 and first["cumulative_pct"] == 100


def test_eval_row_level_errors(tmp_path, capsys):
    d = _copy_fixture(tmp_path)
    with open(d / "support.csv", "a") as fh:
        fh.write("I999,DE1,maybe\n")
    assert main(["eval", "--annotations-dir", str(d), "--output-dir", str(tmp_path / "o")]) == 1
    assert "line" in capsys.readouterr().err


def test_eval_explicit_paths_need_all_files(tmp_path):
    assert main(["eval", "--support", str(fixture_dir() / "support.csv")]) == 2


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "gcaudit", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("gcaudit ")


def test_console_script():
    exe = shutil.which("gcaudit")
    if exe is None:
        pytest.skip("package not installed with scripts on PATH")
    r = subprocess.run([exe, "kb", "validate", "/nonexistent.json"], capture_output=True, text=True)
    assert r.returncode == 2
