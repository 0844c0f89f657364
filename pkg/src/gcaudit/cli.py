"""Command-line entry point.

Exit codes: 0 success, 1 domain error (invalid KB, rejected rows in strict
mode, malformed annotations), 2 I/O or usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .compliance import AnalysisConfig, Critic
from .evalstats import EvalError
from .kb import GuidelineKB, KBError, parse_kb, validate_kb
from .output import StreamFormatError, comment_to_line, count_by_type, read_comments, render_report
from .patient_store import (
    DEMOGRAPHICS_HEADER, TRANSACTION_HEADER, Cohort, IngestError, IngestionReport, PatientRecord, cohort_to_json,
    ingest_files, load_cohort,
)

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    kb_path: str = ""
    cohort_paths: list[str] = field(default_factory=list)
    output_dir: str = "."
    adherence_threshold: float = 0.8
    drug_active_lapse_days: int = 90
    strict_ingestion: bool = True
    parallelism: int = 1
    include_on_time: bool = True

    def check(self) -> None:
        if not 0 < self.adherence_threshold <= 1:
            raise UsageError(f"adherence_threshold must be in (0, 1], got {self.adherence_threshold}")
        if self.parallelism < 1:
            raise UsageError(f"parallelism must be >= 1, got {self.parallelism}")
        if self.drug_active_lapse_days < 0:
            raise UsageError("drug_active_lapse_days must be >= 0")

    def analysis(self) -> AnalysisConfig:
        return AnalysisConfig(self.adherence_threshold, self.drug_active_lapse_days, self.include_on_time)


def _err(msg: str) -> None:
    print(f"gcaudit: {msg}", file=sys.stderr)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_kb(path) -> tuple[GuidelineKB, list]:
    """Parse a KB file without raising on semantic errors; return it with all diagnostics."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    kb = parse_kb(text, validate=False)
    return kb, sorted(validate_kb(kb), key=lambda d: d.sort_key())


def _load_valid_kb(path) -> GuidelineKB:
    kb, diags = _read_kb(path)
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise KBError("; ".join(str(d) for d in errors))
    return kb


def _sniff(path) -> str:
    """'transactions', 'demographics' or 'cohort', from the file's first line."""
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
    if first.lstrip().startswith("{"):
        return "cohort"
    cols = [c.strip() for c in first.strip().split(",")]
    if cols == TRANSACTION_HEADER:
        return "transactions"
    if cols[: len(DEMOGRAPHICS_HEADER)] == DEMOGRAPHICS_HEADER:
        return "demographics"
    raise IngestError(f"{path}: unrecognised header {first.strip()!r}")


def load_cohort_files(paths, kb: GuidelineKB, strict: bool) -> Cohort:
    """Ingest a mix of transaction CSVs, demographics CSVs and saved cohort JSON files."""
    kinds = {p: _sniff(p) for p in paths}
    saved = [p for p in paths if kinds[p] == "cohort"]
    if saved and len(saved) != len(paths):
        raise UsageError("saved cohort files cannot be mixed with CSV inputs")
    if saved:
        cohort = Cohort()
        for p in saved:
            part = load_cohort(p)
            dup = sorted(set(part.patients) & set(cohort.patients))
            if dup:
                raise IngestError(f"{p}: patients already loaded: {dup[:5]}")
            cohort.patients.update(part.patients)
            r = cohort.report
            r.input_rows += part.report.input_rows
            r.accepted += part.report.accepted
            r.unmapped_retained += part.report.unmapped_retained
            r.rejected += part.report.rejected
        return cohort
    transactions = [p for p in paths if kinds[p] == "transactions"]
    demographics = [p for p in paths if kinds[p] == "demographics"]
    return ingest_files(transactions, kb, "strict" if strict else "lenient", demographics)


def _report_json(report: IngestionReport) -> dict:
    return {
        "input_rows": report.input_rows,
        "accepted": report.accepted,
        "unmapped_retained": report.unmapped_retained,
        "rejected": [{"source": r.source, "line": r.row_number, "reason": r.reason, "raw": r.raw}
                     for r in report.rejected],
    }


def _print_rejects(report: IngestionReport, limit: int = 20) -> None:
    for r in report.rejected[:limit]:
        _err(f"{r.source or 'input'}:{r.row_number}: {r.reason}")
    if len(report.rejected) > limit:
        _err(f"... {len(report.rejected) - limit} more rejected rows")


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# Analysis workers
# ---------------------------------------------------------------------------

_worker_critic: Critic | None = None


def _init_worker(kb: GuidelineKB, config: AnalysisConfig) -> None:
    global _worker_critic
    _worker_critic = Critic(kb, config)


def _analyze_one(record: PatientRecord) -> list[str]:
    return [comment_to_line(c) for c in _worker_critic(record)]


def analyze_records(records: list[PatientRecord], kb: GuidelineKB, config: AnalysisConfig,
                    parallelism: int = 1) -> list[tuple[str, list[str]]]:
    """Serialized comment lines per patient, ordered by patient_id whatever the worker count."""
    records = sorted(records, key=lambda r: r.patient_id)
    if parallelism == 1 or len(records) < 2:
        critic = Critic(kb, config)
        return [(r.patient_id, [comment_to_line(c) for c in critic(r)]) for r in records]
    chunk = max(1, len(records) // (parallelism * 4))
    with ProcessPoolExecutor(parallelism, initializer=_init_worker, initargs=(kb, config)) as pool:
        lines = list(pool.map(_analyze_one, records, chunksize=chunk))
    return sorted(zip((r.patient_id for r in records), lines))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_kb_validate(args) -> int:
    try:
        _, diags = _read_kb(args.kb_path)
    except OSError as exc:
        _err(f"cannot read {args.kb_path}: {exc.strerror}")
        return EXIT_IO
    except KBError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    for d in diags:
        print(str(d), file=sys.stderr)
    return EXIT_DOMAIN if any(d.severity == "error" for d in diags) else EXIT_OK


def cmd_ingest(cfg: RunConfig) -> int:
    kb = _load_valid_kb(cfg.kb_path)
    cohort = load_cohort_files(cfg.cohort_paths, kb, cfg.strict_ingestion)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "ingestion_report.json", json.dumps(_report_json(cohort.report), indent=2) + "\n")
    if cfg.strict_ingestion and cohort.report.rejected:
        _print_rejects(cohort.report)
        return EXIT_DOMAIN
    _write(out / "cohort.json", json.dumps(cohort_to_json(cohort), separators=(",", ":"), ensure_ascii=False) + "\n")
    print(f"{len(cohort)} patients, {cohort.report.accepted} transactions, "
          f"{len(cohort.report.rejected)} rejected rows", file=sys.stderr)
    return EXIT_OK


def manifest(cfg: RunConfig, kb: GuidelineKB, cohort: Cohort, counts: dict[str, int], n_comments: int,
             outputs: dict[str, str]) -> dict:
    """Run manifest.  Worker count and output location are left out so reruns compare byte for byte."""
    return {
        "format": "gcaudit-manifest/1",
        "tool_version": __version__,
        "config": {
            "adherence_threshold": cfg.adherence_threshold,
            "drug_active_lapse_days": cfg.drug_active_lapse_days,
            "strict_ingestion": cfg.strict_ingestion,
            "include_on_time": cfg.include_on_time,
        },
        "kb": {"path": cfg.kb_path, "sha256": _sha256(cfg.kb_path), "name": kb.meta.name, "version": kb.meta.version},
        "inputs": [{"path": p, "sha256": _sha256(p)} for p in cfg.cohort_paths],
        "ingestion": {k: v for k, v in _report_json(cohort.report).items() if k != "rejected"}
        | {"rejected": len(cohort.report.rejected)},
        "patients": len(cohort),
        "comments": n_comments,
        "comment_counts": counts,
        "outputs": outputs,
    }


def cmd_analyze(cfg: RunConfig) -> int:
    kb = _load_valid_kb(cfg.kb_path)
    cohort = load_cohort_files(cfg.cohort_paths, kb, cfg.strict_ingestion)
    if cfg.strict_ingestion and cohort.report.rejected:
        _print_rejects(cohort.report)
        return EXIT_DOMAIN
    results = analyze_records(cohort.records(), kb, cfg.analysis(), cfg.parallelism)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream = "".join(line + "\n" for _, lines in results for line in lines)
    _write(out / "comments.jsonl", stream)
    with open(out / "comments.jsonl", encoding="utf-8") as fh:
        comments = read_comments(fh)
    _write(out / "report.txt", render_report(comments))
    outputs = {name: _sha256(out / name) for name in ("comments.jsonl", "report.txt")}
    man = manifest(cfg, kb, cohort, count_by_type(comments), len(comments), outputs)
    _write(out / "manifest.json", json.dumps(man, indent=2) + "\n")
    print(f"{len(cohort)} patients, {len(comments)} comments -> {out}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .tables import dumps_stats, evaluate, load_directory, load_inputs, render_tables
    from .aggregate_fixture import fixture_dir

    if args.bundled_fixture:
        inputs = load_directory(fixture_dir())
    elif args.annotations_dir:
        inputs = load_directory(args.annotations_dir)
    else:
        needed = ("expert_comments", "support", "verdicts", "mentions", "system_comments")
        missing = [f"--{n.replace('_', '-')}" for n in needed if getattr(args, n) is None]
        if missing:
            raise UsageError(f"missing {', '.join(missing)} (or pass --annotations-dir / --bundled-fixture)")
        inputs = load_inputs(args.expert_comments, args.support, args.verdicts, args.mentions,
                             args.system_comments, args.reference)
    stats = evaluate(inputs)
    tables = render_tables(stats)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "stats.json", dumps_stats(stats))
    _write(out / "tables.txt", tables)
    sys.stdout.write(tables)
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.comments, encoding="utf-8") as fh:
        comments = read_comments(fh)
    if args.patient:
        comments = [c for c in comments if c.patient_id in set(args.patient)]
    text = render_report(comments)
    if args.output:
        _write(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    from . import synth

    named = {"fig1": synth.fig1_patient, "compliant": synth.compliant_patient, "empty": synth.empty_patient}
    patients = list(synth.synth_cohort(args.patients, args.seed, args.transactions, args.unmapped_rate))
    patients += [named[n]() for n in args.fixture]
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "transactions.csv", synth.transactions_csv(patients))
    _write(out / "demographics.csv", synth.demographics_csv(patients))
    print(f"{len(patients)} patients, {sum(len(p.rows) for p in patients)} rows -> {out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser, analysis: bool) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields; command-line flags override it")
    p.add_argument("--kb-path", help="guideline KB (JSON)")
    p.add_argument("--cohort-paths", nargs="+", metavar="PATH",
                   help="transaction CSVs, demographics CSVs, or saved cohort JSON files")
    p.add_argument("--output-dir", help="directory for all outputs (default: current directory)")
    p.add_argument("--strict-ingestion", action=argparse.BooleanOptionalAction, default=None,
                   help="reject unmapped codes and fail on any rejected row (default: on)")
    if analysis:
        p.add_argument("--adherence-threshold", type=float, help="possession ratio below which adherence is flagged")
        p.add_argument("--drug-active-lapse-days", type=int,
                       help="days after supply runs out that a drug still counts as active")
        p.add_argument("--parallelism", type=int, help="worker processes (output is identical for any value)")
        p.add_argument("--include-on-time", action=argparse.BooleanOptionalAction, default=None,
                       help="emit ActionOnTime comments (default: on)")


def build_config(args) -> RunConfig:
    base: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                base = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        unknown = set(base) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
    cfg = RunConfig(**base)
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    if isinstance(cfg.cohort_paths, str):
        cfg.cohort_paths = [cfg.cohort_paths]
    if not cfg.kb_path:
        raise UsageError("--kb-path is required")
    if not cfg.cohort_paths:
        raise UsageError("--cohort-paths is required")
    cfg.check()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcaudit", description="Retrospective guideline-compliance critiquing.")
    parser.add_argument("--version", action="version", version=f"gcaudit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    kb = sub.add_parser("kb", help="knowledge-base tools")
    kb_sub = kb.add_subparsers(dest="kb_command", required=True)
    v = kb_sub.add_parser("validate", help="validate a KB; diagnostics go to stderr")
    v.add_argument("kb_path")

    _add_run_flags(sub.add_parser("ingest", help="ingest cohort files into a normalized cohort.json"), False)
    _add_run_flags(sub.add_parser("analyze", help="critique every patient; writes comments, report, manifest"), True)

    e = sub.add_parser("eval", help="compute evaluation statistics and tables from annotation files")
    e.add_argument("--annotations-dir", help="directory holding the five annotation files")
    e.add_argument("--bundled-fixture", action="store_true", help="use the bundled annotation fixture")
    e.add_argument("--expert-comments")
    e.add_argument("--support")
    e.add_argument("--verdicts")
    e.add_argument("--mentions")
    e.add_argument("--system-comments", help="comment stream (JSON Lines) the verdicts refer to")
    e.add_argument("--reference", help="optional JSON of expected values to check against")
    e.add_argument("--output-dir", default=".")

    r = sub.add_parser("report", help="render a comment stream as a per-patient text report")
    r.add_argument("comments")
    r.add_argument("--patient", action="append", help="restrict to this patient (repeatable)")
    r.add_argument("--output", help="write here instead of stdout")

    s = sub.add_parser("synth", help="write a synthetic cohort (transactions.csv, demographics.csv)")
    s.add_argument("--patients", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--transactions", type=int, default=None, help="target transactions per patient")
    s.add_argument("--unmapped-rate", type=float, default=0.0)
    s.add_argument("--fixture", action="append", default=[], choices=["fig1", "compliant", "empty"],
                   help="append a named fixture patient (repeatable)")
    s.add_argument("--output-dir", default=".")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_IO
    try:
        if args.command == "kb":
            return cmd_kb_validate(args)
        if args.command == "ingest":
            return cmd_ingest(build_config(args))
        if args.command == "analyze":
            return cmd_analyze(build_config(args))
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "synth":
            return cmd_synth(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_IO
    except OSError as exc:
        _err(f"{getattr(exc, 'filename', '') or ''}: {exc.strerror or exc}")
        return EXIT_IO
    except (KBError, IngestError, EvalError, StreamFormatError) as exc:
        _err(str(exc))
        return EXIT_DOMAIN
    parser.error(f"unknown command {args.command}")
    return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
