"""Synthetic diabetes cohorts in source-code form, for tests and scale runs.

Rows use the bundled diabetes KB's local lab codes and ATC drug codes, so
they go through normal ingestion.  Generation is seeded per patient:
patient ``i`` of seed ``s`` is identical however many patients are drawn.
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Iterator

from .patient_store import DEMOGRAPHICS_HEADER, OBSERVATION_COLUMNS, TRANSACTION_HEADER

DRUG_CODES = {
    "metformin": ["A10BA02"],
    "insulin_fast_acting": ["A10B01", "A10B05"],
    "insulin_intermediate": ["A10AC01"],
    "statin": ["C10AA01", "C10AA05"],
}
UNMAPPED_CODES = ["B01AC06", "C09AA05"]


@dataclass(frozen=True)
class SourceRow:
    patient_id: str
    date: date
    kind: str
    code: str
    code_system: str
    value: float | None = None
    unit: str = ""
    days_supply: int | None = None

    def as_csv(self) -> list[str]:
        return [
            self.patient_id,
            self.date.isoformat(),
            self.kind,
            self.code,
            self.code_system,
            "" if self.value is None else f"{self.value:g}",
            self.unit,
            "" if self.days_supply is None else str(self.days_supply),
        ]


@dataclass(frozen=True)
class SyntheticPatient:
    patient_id: str
    gender: str
    birth_year: int
    observation: tuple[date, date]
    rows: list[SourceRow]


def _lab_series(rng: random.Random, pid, start: date, length: int, code, unit, every, level, spread, lo, hi):
    rows = []
    day = rng.randint(0, every[1])
    value = level
    while day <= length:
        value = min(hi, max(lo, value + rng.gauss(0, spread)))
        rows.append(SourceRow(pid, start + timedelta(days=day), "lab_result", code, "LOCAL", round(value, 1), unit))
        day += rng.randint(*every)
    return rows


def _drug_course(rng: random.Random, pid, start: date, length: int, concept: str, adherent: float):
    """An order, then purchases with occasional gaps, and a re-order now and then."""
    code = rng.choice(DRUG_CODES[concept])
    day = rng.randint(0, max(0, length - 30))
    rows = [SourceRow(pid, start + timedelta(days=day), "med_order", code, "ATC")]
    day += rng.randint(0, 10)
    while day <= length:
        supply = rng.choice([30, 30, 60, 90])
        rows.append(SourceRow(pid, start + timedelta(days=day), "med_purchase", code, "ATC", days_supply=supply))
        day += supply
        if rng.random() > adherent:
            day += rng.randint(20, 200)
        if rng.random() < 0.1 and day <= length:
            rows.append(SourceRow(pid, start + timedelta(days=day), "med_order", code, "ATC"))
    return rows


def synth_patient(seed: int, index: int, n_transactions: int | None = None, unmapped_rate: float = 0.0) -> SyntheticPatient:
    """One synthetic patient; ``n_transactions`` scales lab frequencies towards that count."""
    rng = random.Random(f"{seed}:{index}")
    pid = f"S{index:05d}"
    start = date(2008, 1, 1) + timedelta(days=rng.randint(0, 730))
    length = rng.randint(200, 1460)
    # baseline is ~16 labs and ~8 drug rows per year; density scales the lab rate only
    density = 1.0 if n_transactions is None else max(0.05, (n_transactions * 365 / length - 8) / 16)

    def every(lo, hi):
        return max(1, int(lo / density)), max(2, int(hi / density))

    rows: list[SourceRow] = []
    severe = rng.random() < 0.4
    hba1c, glucose = (rng.uniform(9.5, 12.5), rng.uniform(250, 360)) if severe else (rng.uniform(6.0, 9.5), rng.uniform(90, 250))
    rows += _lab_series(rng, pid, start, length, "HBA1C", "%", every(45, 160), hba1c, 0.7, 4.5, 14.0)
    rows += _lab_series(rng, pid, start, length, "GLU-SER", "mg/dL", every(15, 60), glucose, 40, 50, 450)
    rows += _lab_series(rng, pid, start, length, "CREA", "mg/dL", every(90, 400), rng.uniform(0.7, 1.8), 0.2, 0.4, 3.0)
    rows += _lab_series(rng, pid, start, length, "LDL-C", "mg/dL", every(150, 500), rng.uniform(70, 180), 20, 40, 250)
    insulin = 0.6 if severe else 0.15
    for concept, p in (("metformin", 0.75), ("insulin_fast_acting", insulin), ("insulin_intermediate", insulin), ("statin", 0.5)):
        if rng.random() < p:
            rows += _drug_course(rng, pid, start, length, concept, rng.uniform(0.4, 0.95))
    if unmapped_rate > 0:
        for _ in range(int(len(rows) * unmapped_rate)):
            day = rng.randint(0, length)
            rows.append(SourceRow(pid, start + timedelta(days=day), "med_order", rng.choice(UNMAPPED_CODES), "ATC"))
    end = start + timedelta(days=length)
    rows = [r for r in rows if r.date <= end]
    rows.sort(key=lambda r: (r.date, r.kind, r.code))
    return SyntheticPatient(pid, rng.choice(["M", "F"]), rng.randint(1930, 1985), (start, end), rows)


def synth_cohort(n_patients: int, seed: int = 0, n_transactions: int | None = None,
                 unmapped_rate: float = 0.0) -> Iterator[SyntheticPatient]:
    for i in range(n_patients):
        yield synth_patient(seed, i, n_transactions, unmapped_rate)


def transactions_csv(patients) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRANSACTION_HEADER)
    for p in patients:
        for r in p.rows:
            w.writerow(r.as_csv())
    return buf.getvalue()


def demographics_csv(patients) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DEMOGRAPHICS_HEADER + OBSERVATION_COLUMNS)
    for p in patients:
        w.writerow([p.patient_id, p.gender, p.birth_year, p.observation[0].isoformat(), p.observation[1].isoformat()])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Named fixture patients
# ---------------------------------------------------------------------------


def fig1_patient() -> SyntheticPatient:
    """Newly diagnosed patient with HbA1c 11% and glucose 300 mg/dL, treated with metformin but never insulin."""
    pid = "FIG1"
    d0 = date(2014, 3, 2)
    rows = [
        SourceRow(pid, d0, "lab_result", "HBA1C", "LOCAL", 11.0, "%"),
        SourceRow(pid, d0, "lab_result", "GLU-SER", "LOCAL", 300.0, "mg/dL"),
        SourceRow(pid, d0, "lab_result", "LDL-C", "LOCAL", 92.0, "mg/dL"),
        SourceRow(pid, d0 + timedelta(days=3), "med_order", "A10BA02", "ATC"),
    ]
    for k in range(4):
        rows.append(SourceRow(pid, d0 + timedelta(days=4 + 90 * k), "med_purchase", "A10BA02", "ATC", days_supply=90))
    for day, value in ((80, 9.4), (165, 8.1), (250, 7.6), (335, 7.2)):
        rows.append(SourceRow(pid, d0 + timedelta(days=day), "lab_result", "HBA1C", "LOCAL", value, "%"))
    rows.append(SourceRow(pid, d0 + timedelta(days=300), "lab_result", "CREA", "LOCAL", 0.9, "mg/dL"))
    rows.append(SourceRow(pid, d0 + timedelta(days=340), "lab_result", "LDL-C", "LOCAL", 88.0, "mg/dL"))
    rows.sort(key=lambda r: (r.date, r.kind, r.code))
    return SyntheticPatient(pid, "M", 1975, (d0, d0 + timedelta(days=365)), rows)


def compliant_patient() -> SyntheticPatient:
    """Every expectation met on time: well-controlled, tested on schedule, no drug indicated."""
    pid = "GOOD"
    d0 = date(2015, 1, 5)
    rows = []
    for day in range(0, 721, 80):
        rows.append(SourceRow(pid, d0 + timedelta(days=day), "lab_result", "HBA1C", "LOCAL", 6.1, "%"))
    for day in (0, 350, 700):
        rows.append(SourceRow(pid, d0 + timedelta(days=day), "lab_result", "LDL-C", "LOCAL", 85.0, "mg/dL"))
    rows.sort(key=lambda r: (r.date, r.kind, r.code))
    return SyntheticPatient(pid, "F", 1980, (d0, d0 + timedelta(days=720)), rows)


def empty_patient() -> SyntheticPatient:
    """Enrolled for a year with no transactions at all."""
    d0 = date(2016, 6, 1)
    return SyntheticPatient("EMPTY", "unknown", 1950, (d0, d0 + timedelta(days=365)), [])
