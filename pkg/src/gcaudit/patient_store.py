"""Patient transaction logs: CSV ingestion, normalization, persistence and queries."""

from __future__ import annotations

import csv
import json
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from datetime import date, timedelta
from functools import cached_property
from typing import Iterable, TextIO

from .kb import GuidelineKB, find_mapping, resolve_term

TRANSACTION_HEADER = ["patient_id", "date", "kind", "code", "code_system", "value", "unit", "days_supply"]
DEMOGRAPHICS_HEADER = ["patient_id", "gender", "birth_year"]
OBSERVATION_COLUMNS = ["observation_start", "observation_end"]
KINDS = ("lab_result", "med_order", "med_purchase")
GENDERS = ("M", "F", "unknown")

_KIND_RANK = {k: i for i, k in enumerate(KINDS)}


class IngestError(ValueError):
    """File-level ingestion failure (bad header, unreadable stream)."""


@dataclass(frozen=True)
class Transaction:
    patient_id: str
    date: date
    kind: str
    code: str
    code_system: str
    value: float | None = None  # canonical units
    unit: str | None = None  # canonical unit
    quantity_days_supply: int | None = None
    concept: str | None = None  # None when retained unmapped (lenient mode)
    source_value: float | None = None
    source_unit: str | None = None

    @property
    def day(self) -> int:
        return self.date.toordinal()

    def sort_key(self) -> tuple:
        return (
            self.date,
            _KIND_RANK.get(self.kind, len(KINDS)),
            self.code,
            self.code_system,
            -math.inf if self.value is None else self.value,
            self.unit or "",
            self.quantity_days_supply or 0,
        )


class _Series:
    """Per-concept columns (day ordinals, values, transaction indices), ascending by day."""

    __slots__ = ("days", "values", "indices")

    def __init__(self):
        self.days: list[int] = []
        self.values: list[float | None] = []
        self.indices: list[int] = []


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    gender: str = "unknown"
    birth_year: int | None = None
    transactions: tuple[Transaction, ...] = ()
    horizon: tuple[date, date] | None = None

    @cached_property
    def by_concept(self) -> dict[str, _Series]:
        out: dict[str, _Series] = {}
        for i, tx in enumerate(self.transactions):
            if tx.concept is None:
                continue
            s = out.get(tx.concept)
            if s is None:
                s = out[tx.concept] = _Series()
            s.days.append(tx.day)
            s.values.append(tx.value)
            s.indices.append(i)
        return out

    @cached_property
    def labs_by_concept(self) -> dict[str, _Series]:
        out: dict[str, _Series] = {}
        for i, tx in enumerate(self.transactions):
            if tx.concept is None or tx.kind != "lab_result":
                continue
            s = out.get(tx.concept)
            if s is None:
                s = out[tx.concept] = _Series()
            s.days.append(tx.day)
            s.values.append(tx.value)
            s.indices.append(i)
        return out

    @property
    def horizon_days(self) -> tuple[int, int] | None:
        if self.horizon is None:
            return None
        return self.horizon[0].toordinal(), self.horizon[1].toordinal()


def make_record(
    patient_id: str,
    transactions: Iterable[Transaction] = (),
    gender: str = "unknown",
    birth_year: int | None = None,
    observation: tuple[date, date] | None = None,
) -> PatientRecord:
    """Build a record with sorted transactions and its horizon.

    The horizon spans the first to last transaction date, widened to the
    observation window when one is given.
    """
    txs = tuple(sorted(transactions, key=Transaction.sort_key))
    dates = [tx.date for tx in txs]
    if observation is not None:
        dates += list(observation)
    horizon = (min(dates), max(dates)) if dates else None
    return PatientRecord(patient_id, gender, birth_year, txs, horizon)


@dataclass(frozen=True)
class RejectedRow:
    row_number: int
    reason: str
    raw: str = ""
    source: str = ""


@dataclass
class IngestionReport:
    input_rows: int = 0
    accepted: int = 0
    unmapped_retained: int = 0
    rejected: list[RejectedRow] = field(default_factory=list)


@dataclass
class Cohort:
    patients: dict[str, PatientRecord] = field(default_factory=dict)
    report: IngestionReport = field(default_factory=IngestionReport)

    def __len__(self) -> int:
        return len(self.patients)

    def records(self) -> list[PatientRecord]:
        return [self.patients[pid] for pid in sorted(self.patients)]


@dataclass(frozen=True)
class Demographics:
    gender: str = "unknown"
    birth_year: int | None = None
    observation: tuple[date, date] | None = None


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _parse_date(text: str) -> date:
    if len(text) != 10:
        raise ValueError(text)
    return date.fromisoformat(text)


def _parse_float(text: str) -> float:
    x = float(text)
    if not math.isfinite(x):
        raise ValueError(text)
    return x


class _RowError(Exception):
    pass


def _row_to_transaction(row: list[str], kb: GuidelineKB, lenient: bool, cache: dict) -> Transaction:
    if len(row) != len(TRANSACTION_HEADER):
        raise _RowError(f"expected {len(TRANSACTION_HEADER)} columns, got {len(row)}")
    pid, date_s, kind, code, system, value_s, unit, supply_s = (c.strip() for c in row)
    if not pid:
        raise _RowError("empty patient_id")
    try:
        day = _parse_date(date_s)
    except ValueError:
        raise _RowError(f"unparseable date {date_s!r}") from None
    if kind not in KINDS:
        raise _RowError(f"unknown kind {kind!r}")
    if system not in ("LOCAL", "ATC"):
        raise _RowError(f"unknown code_system {system!r}")
    if not code:
        raise _RowError("empty code")
    value = None
    if value_s:
        try:
            value = _parse_float(value_s)
        except ValueError:
            raise _RowError(f"unparseable value {value_s!r}") from None
    supply = None
    if supply_s:
        try:
            supply = int(supply_s)
        except ValueError:
            raise _RowError(f"unparseable days_supply {supply_s!r}") from None
        if supply <= 0:
            raise _RowError(f"days_supply must be positive, got {supply}")

    if kind == "lab_result":
        if value is None or not unit:
            raise _RowError("lab_result needs value and unit")
        if supply is not None:
            raise _RowError("lab_result must not have days_supply")
    elif kind == "med_purchase":
        if supply is None:
            raise _RowError("med_purchase needs days_supply")
        if value is not None:
            raise _RowError("med_purchase must not have a value")
    elif value is not None or supply is not None:
        raise _RowError("med_order must have neither value nor days_supply")

    key = (system, code, unit)
    if key in cache:
        res = cache[key]
    else:
        res = cache[key] = resolve_term(kb, system, code, unit)
    if res is None:
        if find_mapping(kb, system, code) is not None:
            raise _RowError(f"unit {unit!r} not convertible for code {code!r}")
        if not lenient:
            raise _RowError("unmapped code")
        return Transaction(pid, day, kind, code, system, value, unit or None, supply, None, value, unit or None)

    want = "raw-numeric" if kind == "lab_result" else "medication-class"
    if res.concept.kind != want:
        raise _RowError(f"code {code!r} maps to {res.concept.kind} concept {res.concept.id!r}, expected {want}")
    if kind == "lab_result":
        return Transaction(pid, day, kind, code, system, res.convert(value), res.concept.canonical_unit,
                           None, res.concept.id, value, unit)
    return Transaction(pid, day, kind, code, system, None, None, supply, res.concept.id, None, None)


def load_demographics(stream: TextIO) -> dict[str, Demographics]:
    """Read ``patient_id,gender,birth_year[,observation_start,observation_end]``."""
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        return {}
    header = [h.strip() for h in header]
    if header not in (DEMOGRAPHICS_HEADER, DEMOGRAPHICS_HEADER + OBSERVATION_COLUMNS):
        raise IngestError(f"bad demographics header: {','.join(header)}")
    out: dict[str, Demographics] = {}
    for row in reader:
        if not row:
            continue
        if len(row) != len(header):
            raise IngestError(f"demographics line {reader.line_num}: expected {len(header)} columns")
        cells = [c.strip() for c in row]
        gender = cells[1] if cells[1] in GENDERS else "unknown"
        try:
            birth_year = int(cells[2]) if cells[2] else None
            observation = None
            if len(cells) == 5 and cells[3] and cells[4]:
                observation = (_parse_date(cells[3]), _parse_date(cells[4]))
        except ValueError as exc:
            raise IngestError(f"demographics line {reader.line_num}: {exc}") from None
        out[cells[0]] = Demographics(gender, birth_year, observation)
    return out


def _read_transactions(stream, kb: GuidelineKB, lenient: bool, report: IngestionReport,
                       grouped: dict[str, list[Transaction]], source: str = "") -> None:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        raise IngestError(f"{source or 'transaction file'}: empty file")
    if [h.strip() for h in header] != TRANSACTION_HEADER:
        raise IngestError(f"{source or 'transaction file'}: bad header: {','.join(header)}")
    cache: dict = {}
    for row in reader:
        if not row:
            continue
        report.input_rows += 1
        try:
            tx = _row_to_transaction(row, kb, lenient, cache)
        except _RowError as exc:
            report.rejected.append(RejectedRow(reader.line_num, str(exc), ",".join(row), source))
            continue
        report.accepted += 1
        if tx.concept is None:
            report.unmapped_retained += 1
        grouped.setdefault(tx.patient_id, []).append(tx)


def _build_cohort(grouped, demographics, report) -> Cohort:
    demographics = demographics or {}
    patients: dict[str, PatientRecord] = {}
    for pid in sorted(set(grouped) | set(demographics)):
        demo = demographics.get(pid, Demographics())
        patients[pid] = make_record(pid, grouped.get(pid, ()), demo.gender, demo.birth_year, demo.observation)
    return Cohort(patients, report)


def _check_mode(mode: str) -> bool:
    if mode not in ("strict", "lenient"):
        raise ValueError(f"mode must be 'strict' or 'lenient', got {mode!r}")
    return mode == "lenient"


def ingest_transactions(
    stream: TextIO | Iterable[str],
    kb: GuidelineKB,
    mode: str = "strict",
    demographics: dict[str, Demographics] | None = None,
) -> Cohort:
    """Read a transaction CSV into a Cohort.

    Malformed rows are rejected individually with their line number; the
    stream is never aborted.  In strict mode unmapped codes are rejected,
    in lenient mode they are kept with ``concept=None``.
    """
    lenient = _check_mode(mode)
    report = IngestionReport()
    grouped: dict[str, list[Transaction]] = {}
    _read_transactions(stream, kb, lenient, report, grouped)
    return _build_cohort(grouped, demographics, report)


def ingest_files(transaction_paths, kb: GuidelineKB, mode: str = "strict", demographics_paths=()) -> Cohort:
    """Ingest several transaction files (and optional demographics files) into one Cohort."""
    lenient = _check_mode(mode)
    demographics: dict[str, Demographics] = {}
    for path in demographics_paths:
        with open(path, encoding="utf-8", newline="") as fh:
            demographics.update(load_demographics(fh))
    report = IngestionReport()
    grouped: dict[str, list[Transaction]] = {}
    for path in transaction_paths:
        with open(path, encoding="utf-8", newline="") as fh:
            _read_transactions(fh, kb, lenient, report, grouped, source=str(path))
    return _build_cohort(grouped, demographics, report)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _tx_to_json(tx: Transaction) -> list:
    return [tx.date.isoformat(), tx.kind, tx.code, tx.code_system, tx.value, tx.unit,
            tx.quantity_days_supply, tx.concept, tx.source_value, tx.source_unit]


def _tx_from_json(pid: str, row: list) -> Transaction:
    d, kind, code, system, value, unit, supply, concept, src_value, src_unit = row
    return Transaction(pid, date.fromisoformat(d), kind, code, system, value, unit, supply, concept,
                       src_value, src_unit)


def cohort_to_json(cohort: Cohort) -> dict:
    patients = []
    for rec in cohort.records():
        patients.append({
            "patient_id": rec.patient_id,
            "gender": rec.gender,
            "birth_year": rec.birth_year,
            "horizon": None if rec.horizon is None else [rec.horizon[0].isoformat(), rec.horizon[1].isoformat()],
            "transactions": [_tx_to_json(tx) for tx in rec.transactions],
        })
    r = cohort.report
    return {
        "format": "gcaudit-cohort/1",
        "report": {
            "input_rows": r.input_rows,
            "accepted": r.accepted,
            "unmapped_retained": r.unmapped_retained,
            "rejected": [[x.row_number, x.reason, x.raw, x.source] for x in r.rejected],
        },
        "patients": patients,
    }


def cohort_from_json(doc: dict) -> Cohort:
    if doc.get("format") != "gcaudit-cohort/1":
        raise IngestError("not a gcaudit cohort file")
    patients = {}
    for p in doc["patients"]:
        pid = p["patient_id"]
        horizon = None if p["horizon"] is None else tuple(date.fromisoformat(x) for x in p["horizon"])
        txs = tuple(_tx_from_json(pid, row) for row in p["transactions"])
        patients[pid] = PatientRecord(pid, p["gender"], p["birth_year"], txs, horizon)
    r = doc["report"]
    report = IngestionReport(r["input_rows"], r["accepted"], r["unmapped_retained"],
                             [RejectedRow(*row) for row in r["rejected"]])
    return Cohort(patients, report)


def dumps_cohort(cohort: Cohort) -> str:
    return json.dumps(cohort_to_json(cohort), separators=(",", ":"), ensure_ascii=False) + "\n"


def loads_cohort(text: str) -> Cohort:
    return cohort_from_json(json.loads(text))


def save_cohort(cohort: Cohort, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_cohort(cohort))


def load_cohort(path) -> Cohort:
    with open(path, encoding="utf-8") as fh:
        return loads_cohort(fh.read())


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------


def series_query(
    record: PatientRecord,
    concept: str,
    window: tuple[date, date],
    kb: GuidelineKB | None = None,
) -> list[tuple[date, float]]:
    """Lab values of one concept with date inside the inclusive window, ascending."""
    if kb is not None and concept not in kb.concept_by_id:
        raise KeyError(f"unknown concept {concept!r}")
    s = record.labs_by_concept.get(concept)
    if s is None:
        return []
    lo = bisect_left(s.days, window[0].toordinal())
    hi = bisect_right(s.days, window[1].toordinal())
    return [(date.fromordinal(s.days[i]), s.values[i]) for i in range(lo, hi)]


def merge_intervals(intervals: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
    """Merge half-open integer intervals that overlap or touch."""
    merged: list[list[int]] = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(a, b) for a, b in merged]


def coverage_segments(record: PatientRecord, drug_concept: str) -> list[tuple[date, date]]:
    """Merged half-open [start, end) date intervals covered by purchases of a drug concept."""
    raw = [
        (tx.day, tx.day + tx.quantity_days_supply)
        for tx in record.transactions
        if tx.kind == "med_purchase" and tx.concept == drug_concept
    ]
    return [(date.fromordinal(a), date.fromordinal(b)) for a, b in merge_intervals(raw)]


def day_to_date(day: int) -> date:
    return date.fromordinal(day)


def add_days(d: date, n: int) -> date:
    return d + timedelta(days=n)
