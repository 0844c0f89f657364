"""Temporal abstraction of lab series into state intervals, and condition evaluation."""

from __future__ import annotations

import csv
import io
import operator
from bisect import bisect_right
from dataclasses import dataclass
from datetime import date
from typing import Iterable

from .kb import (
    AbstractionRule, AgeCompare, And, Condition, Const, GuidelineKB, LatestValueCompare, Not, Or,
    RecordAbsent, RecordExists, StateHolds, iter_atoms,
)
from .patient_store import PatientRecord

COMPARATORS = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "=": operator.eq,
}


@dataclass(frozen=True)
class StateInterval:
    abstraction_id: str
    state_label: str
    start: date
    end: date
    support_points: int


def abstract_states(series: Iterable[tuple[date, float]], rule: AbstractionRule) -> list[StateInterval]:
    """Bin each point and merge runs of equal labels separated by at most ``rule.max_gap`` days.

    An interval spans its first to last supporting measurement; nothing is
    interpolated beyond the observed points.
    """
    intervals: list[StateInterval] = []
    label = start = end = None
    count = 0
    for d, value in series:
        if end is not None and d < end:
            raise ValueError(f"series not sorted: {d} after {end}")
        lab = rule.label_for(value)
        if lab is None:
            raise ValueError(f"value {value} not covered by abstraction {rule.id!r}")
        if label == lab and (d - end).days <= rule.max_gap:
            end = d
            count += 1
            continue
        if label is not None:
            intervals.append(StateInterval(rule.id, label, start, end, count))
        label, start, end, count = lab, d, d, 1
    if label is not None:
        intervals.append(StateInterval(rule.id, label, start, end, count))
    return intervals


def intervals_to_csv(intervals: Iterable[StateInterval]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["abstraction_id", "state", "start", "end", "support_points"])
    for iv in intervals:
        w.writerow([iv.abstraction_id, iv.state_label, iv.start.isoformat(), iv.end.isoformat(), iv.support_points])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Condition evaluation
# ---------------------------------------------------------------------------


def _merge_witnesses(parts: list[list[int]]) -> list[int]:
    seen: set[int] = set()
    out: list[int] = []
    for part in parts:
        for w in part:
            if w not in seen:
                seen.add(w)
                out.append(w)
    return out


def eval_at(cond: Condition, record: PatientRecord, kb: GuidelineKB, day: int) -> tuple[bool, list[int]]:
    """Evaluate ``cond`` on day ordinal ``day``; witnesses are transaction indices.

    Missing data makes an atom false.  Only transactions dated on or before
    ``day`` are consulted.
    """
    if isinstance(cond, Const):
        return cond.value, []

    if isinstance(cond, LatestValueCompare):
        s = record.labs_by_concept.get(cond.concept)
        if s is None:
            return False, []
        i = bisect_right(s.days, day) - 1
        if i < 0 or (cond.lookback is not None and s.days[i] < day - cond.lookback):
            return False, []
        if COMPARATORS[cond.operator](s.values[i], cond.threshold):
            return True, [s.indices[i]]
        return False, []

    if isinstance(cond, (RecordExists, RecordAbsent)):
        s = record.by_concept.get(cond.concept)
        found = False
        witness: list[int] = []
        if s is not None:
            i = bisect_right(s.days, day) - 1
            if i >= 0 and (cond.lookback is None or s.days[i] >= day - cond.lookback):
                found = True
                witness = [s.indices[i]]
        if isinstance(cond, RecordExists):
            return found, witness
        return not found, []

    if isinstance(cond, StateHolds):
        rule = kb.abstraction_by_id[cond.abstraction]
        s = record.labs_by_concept.get(rule.input_concept)
        if s is None:
            return False, []
        i = bisect_right(s.days, day) - 1
        if i < 0 or day - s.days[i] > rule.max_gap:
            return False, []
        label = rule.label_for(s.values[i])
        if label != cond.state:
            return False, []
        support = [s.indices[i]]
        j = i - 1
        while j >= 0 and s.days[j + 1] - s.days[j] <= rule.max_gap and rule.label_for(s.values[j]) == label:
            support.append(s.indices[j])
            j -= 1
        support.reverse()
        return True, support

    if isinstance(cond, AgeCompare):
        if record.birth_year is None:
            return False, []
        age = date.fromordinal(day).year - record.birth_year
        return COMPARATORS[cond.operator](age, cond.years), []

    if isinstance(cond, And):
        parts = []
        for arg in cond.args:
            ok, w = eval_at(arg, record, kb, day)
            if not ok:
                return False, []
            parts.append(w)
        return True, _merge_witnesses(parts)

    if isinstance(cond, Or):
        parts = []
        truth = False
        for arg in cond.args:
            ok, w = eval_at(arg, record, kb, day)
            if ok:
                truth = True
                parts.append(w)
        return truth, _merge_witnesses(parts)

    if isinstance(cond, Not):
        ok, _ = eval_at(cond.arg, record, kb, day)
        return not ok, []

    raise TypeError(f"not a condition: {cond!r}")


def eval_condition(cond: Condition, record: PatientRecord, kb: GuidelineKB, at: date) -> tuple[bool, list[int]]:
    """Evaluate a guideline condition for ``record`` on calendar date ``at``."""
    for atom in iter_atoms(cond):
        if isinstance(atom, StateHolds) and atom.abstraction not in kb.abstraction_by_id:
            raise KeyError(f"unknown abstraction {atom.abstraction!r}")
        if isinstance(atom, (LatestValueCompare, RecordExists, RecordAbsent)) and atom.concept not in kb.concept_by_id:
            raise KeyError(f"unknown concept {atom.concept!r}")
    return eval_at(cond, record, kb, at.toordinal())


def kb_change_offsets(kb: GuidelineKB) -> list[int]:
    """Day offsets after a transaction at which some KB condition may change truth value."""
    offsets = {0}
    conds = [s.applicability for s in kb.monitoring_specs]
    for s in kb.drug_steps:
        conds += [s.indication, s.contraindication]
    for cond in conds:
        for atom in iter_atoms(cond):
            if isinstance(atom, (LatestValueCompare, RecordExists, RecordAbsent)) and atom.lookback is not None:
                offsets.add(atom.lookback + 1)
            elif isinstance(atom, StateHolds):
                rule = kb.abstraction_by_id.get(atom.abstraction)
                if rule is not None:
                    offsets.add(rule.max_gap + 1)
    return sorted(offsets)


def change_days(kb: GuidelineKB, record: PatientRecord, offsets: list[int] | None = None) -> list[int]:
    """Sorted day ordinals where any KB condition may change truth for this record.

    Between consecutive change days every condition is constant: window
    contents only change when a transaction enters (its own date) or leaves
    (date + lookback + 1) a window, and ages only change on 1 January.
    """
    if record.horizon is None:
        return []
    if offsets is None:
        offsets = kb_change_offsets(kb)
    days = set()
    for tx in record.transactions:
        if tx.concept is None:
            continue
        d = tx.day
        for off in offsets:
            days.add(d + off)
    start, end = record.horizon
    for year in range(start.year + 1, end.year + 1):
        days.add(date(year, 1, 1).toordinal())
    days.add(start.toordinal())
    return sorted(days)
