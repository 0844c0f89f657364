"""Bi-directional compliance analysis.

Forward direction: the guideline's monitoring specs and drug steps generate
expected actions, which are matched against the record and scored.
Backward direction: observed drug starts and governed lab tests are checked
for guideline support, contraindications and redundancy.  Purchase coverage
feeds a possession-ratio check for patient adherence.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import Callable

from .abstraction import change_days, eval_at, kb_change_offsets
from .kb import DrugStep, GuidelineKB, MonitoringSpec
from .patient_store import PatientRecord, merge_intervals


class CommentType(str, Enum):
    LATE_ACTION = "LateAction"
    ACTION_ON_TIME = "ActionOnTime"
    MISSING_ACTION = "MissingAction"
    PATIENT_COMPLIANCE = "PatientCompliance"
    NO_SUPPORT = "NoSupport"
    REDUNDANT = "Redundant"
    EARLY_ACTION = "EarlyAction"
    GUIDELINE_CONTRADICTED = "GuidelineContradicted"


def linear_decay(lateness: int, grace: int) -> float:
    return 1.0 - lateness / grace


LATE_DECAYS: dict[str, Callable[[int, int], float]] = {"linear": linear_decay}


@dataclass(frozen=True)
class AnalysisConfig:
    adherence_threshold: float = 0.8
    drug_active_lapse_days: int = 90
    include_on_time: bool = True
    late_decay: str = "linear"

    def __post_init__(self):
        if not 0 < self.adherence_threshold <= 1:
            raise ValueError(f"adherence threshold must be in (0, 1], got {self.adherence_threshold}")
        if self.drug_active_lapse_days < 0:
            raise ValueError("drug_active_lapse_days must be >= 0")
        if self.late_decay not in LATE_DECAYS:
            raise ValueError(f"unknown late decay {self.late_decay!r}")


@dataclass(frozen=True)
class ExpectedAction:
    source: str
    source_kind: str  # "monitoring" | "drug"
    guideline_path: str
    action_concepts: tuple[str, ...]
    anchor: date
    earliest: date | None
    latest: date
    grace: int
    severity: str
    trigger: tuple[int, ...] = ()

    @property
    def opens(self) -> int:
        """First day ordinal on which an observed action can satisfy this expectation."""
        # a periodic test on the anchor day is the anchor itself
        return self.anchor.toordinal() + (1 if self.source_kind == "monitoring" else 0)


@dataclass(frozen=True)
class CritiqueComment:
    patient_id: str
    comment_type: CommentType
    event_date: date
    guideline_path: str
    score: float
    severity: str
    explanation: str
    evidence: tuple[int, ...] = field(default_factory=tuple)

    def sort_key(self) -> tuple:
        return (self.event_date, self.comment_type.value, self.guideline_path)

    def dedup_key(self) -> tuple:
        return (self.comment_type, self.guideline_path, self.event_date)


def monitoring_path(spec: MonitoringSpec) -> str:
    return f"monitoring/{spec.id}"


def drug_path(step: DrugStep) -> str:
    return f"drug-therapy/{step.intention_label}/{step.id}"


def _d(day: int) -> date:
    return date.fromordinal(day)


class _PatientContext:
    """Per-patient lookup tables shared by the analysis passes."""

    def __init__(self, kb: GuidelineKB, record: PatientRecord, offsets: list[int] | None = None):
        self.kb = kb
        self.record = record
        self.horizon = record.horizon_days
        self.change = change_days(kb, record, offsets)

    def holds(self, cond, day: int) -> tuple[bool, list[int]]:
        return eval_at(cond, self.record, self.kb, day)

    def first_true(self, pred: Callable[[int], bool], lo: int, hi: int) -> int | None:
        """First day in [lo, hi] where ``pred`` holds, probing only at change days."""
        if lo > hi:
            return None
        if pred(lo):
            return lo
        i = bisect_right(self.change, lo)
        while i < len(self.change) and self.change[i] <= hi:
            if pred(self.change[i]):
                return self.change[i]
            i += 1
        return None

    def actions(self, concepts: tuple[str, ...]) -> tuple[list[int], list[int]]:
        """(days, tx indices) of every transaction resolving to any of ``concepts``, ascending."""
        if len(concepts) == 1:
            s = self.record.by_concept.get(concepts[0])
            return (s.days, s.indices) if s is not None else ([], [])
        pairs = []
        for c in concepts:
            s = self.record.by_concept.get(c)
            if s is not None:
                pairs += zip(s.days, s.indices)
        pairs.sort()
        return [p[0] for p in pairs], [p[1] for p in pairs]

    def first_action(self, concepts: tuple[str, ...], lo: int, hi: int) -> tuple[int, int] | None:
        days, idx = self.actions(concepts)
        i = bisect_left(days, lo)
        if i < len(days) and days[i] <= hi:
            return days[i], idx[i]
        return None


# ---------------------------------------------------------------------------
# Forward direction
# ---------------------------------------------------------------------------


def _monitoring_expectations(ctx: _PatientContext, spec: MonitoringSpec) -> list[ExpectedAction]:
    start, end = ctx.horizon
    concepts = (spec.action_concept,)
    path = monitoring_path(spec)
    applicable = lambda day: ctx.holds(spec.applicability, day)[0]  # noqa: E731

    out: list[ExpectedAction] = []
    anchor = ctx.first_true(applicable, start, end)
    initial = True
    while anchor is not None:
        offset = spec.latest_start_offset if initial else spec.period
        earliest = None if spec.earliest_start_offset is None else anchor + spec.earliest_start_offset
        latest = anchor + offset
        trigger = tuple(sorted(ctx.holds(spec.applicability, anchor)[1]))
        out.append(ExpectedAction(spec.id, "monitoring", path, concepts, _d(anchor),
                                  None if earliest is None else _d(earliest), _d(latest),
                                  spec.grace, spec.severity, trigger))
        match = ctx.first_action(concepts, anchor + 1, latest + spec.grace)
        if match is not None:
            nxt = match[0]
        elif latest + spec.grace <= end:
            nxt = latest  # missed: the next cycle runs from the nominal due date
        else:
            break
        if nxt > end:
            break
        if applicable(nxt):
            anchor, initial = nxt, False
        else:
            anchor, initial = ctx.first_true(applicable, nxt + 1, end), True
    return out


def _drug_expectation(ctx: _PatientContext, step: DrugStep) -> ExpectedAction | None:
    start, end = ctx.horizon

    def eligible(day: int) -> bool:
        return ctx.holds(step.indication, day)[0] and not ctx.holds(step.contraindication, day)[0]

    onset = ctx.first_true(eligible, start, end)
    if onset is None:
        return None
    trigger = tuple(sorted(ctx.holds(step.indication, onset)[1]))
    return ExpectedAction(step.id, "drug", drug_path(step), tuple(step.drug_mappings), _d(onset), None,
                          _d(onset + step.expected_within), step.grace, step.severity, trigger)


def generate_expected(kb: GuidelineKB, record: PatientRecord, _ctx: _PatientContext | None = None) -> list[ExpectedAction]:
    """Expected actions for one patient, ordered by (latest date, source id).

    Periodic monitoring expectations start at the first day the spec applies
    and re-anchor on every satisfying action; a missed expectation re-anchors
    at its due date.  Each drug step yields at most one expectation, due
    ``expected_within`` days after its indication first holds without a
    contraindication.
    """
    if record.horizon is None:
        return []
    ctx = _ctx or _PatientContext(kb, record)
    out: list[ExpectedAction] = []
    for spec in kb.monitoring_specs:
        out += _monitoring_expectations(ctx, spec)
    for step in kb.drug_steps:
        exp = _drug_expectation(ctx, step)
        if exp is not None:
            out.append(exp)
    out.sort(key=lambda e: (e.latest, e.source))
    return out


def _tx_ref(record: PatientRecord, i: int) -> str:
    return f"tx#{i} ({record.transactions[i].date.isoformat()})"


def classify_expected(
    expected: ExpectedAction,
    record: PatientRecord,
    kb: GuidelineKB,
    config: AnalysisConfig | None = None,
    _ctx: _PatientContext | None = None,
) -> CritiqueComment | None:
    """Score the first matching action against the expectation's window.

    Returns None when nothing matched and the record ends before the grace
    period has elapsed (follow-up too short to call the action missing).
    """
    config = config or AnalysisConfig()
    ctx = _ctx or _PatientContext(kb, record)
    latest = expected.latest.toordinal()
    deadline = latest + expected.grace
    what = "/".join(expected.action_concepts)
    match = ctx.first_action(expected.action_concepts, expected.opens, deadline)

    def comment(kind: CommentType, day: int, score: float, text: str, evidence) -> CritiqueComment:
        return CritiqueComment(record.patient_id, kind, _d(day), expected.guideline_path, score,
                               expected.severity, text, tuple(evidence))

    if match is None:
        if record.horizon is None or record.horizon_days[1] < deadline:
            return None
        text = (f"expected {what} by {expected.latest.isoformat()} "
                f"(window opened {expected.anchor.isoformat()}, grace {expected.grace} days); none recorded")
        if expected.trigger:
            text += "; triggered by " + ", ".join(_tx_ref(record, i) for i in expected.trigger)
        return comment(CommentType.MISSING_ACTION, latest, 1.0, text, expected.trigger)

    day, idx = match
    ref = _tx_ref(record, idx)
    if expected.earliest is not None and day < expected.earliest.toordinal():
        text = f"{what} performed {ref}, before the earliest start {expected.earliest.isoformat()}"
        return comment(CommentType.EARLY_ACTION, day, 1.0, text, [idx])
    if day <= latest:
        text = f"{what} performed {ref}, within the window ending {expected.latest.isoformat()}"
        return comment(CommentType.ACTION_ON_TIME, day, 1.0, text, [idx])
    lateness = day - latest
    score = min(1.0, max(0.0, LATE_DECAYS[config.late_decay](lateness, expected.grace)))
    text = (f"{what} performed {ref}, {lateness} days after the latest start "
            f"{expected.latest.isoformat()} (grace {expected.grace} days, score {score:.3f})")
    return comment(CommentType.LATE_ACTION, day, score, text, [idx])


# ---------------------------------------------------------------------------
# Backward direction
# ---------------------------------------------------------------------------


def _drug_starts(record: PatientRecord, lapse: int) -> list[tuple[int, int, str]]:
    """(day, tx index, concept) for every order/purchase that starts a new episode of its drug.

    A drug stays active from each order or purchase until its supply has run
    out for more than ``lapse`` days.
    """
    active_until: dict[str, int] = {}
    starts = []
    for i, tx in enumerate(record.transactions):
        if tx.concept is None or tx.kind == "lab_result":
            continue
        d = tx.day
        if d >= active_until.get(tx.concept, d):
            starts.append((d, i, tx.concept))
        end = d + (tx.quantity_days_supply or 0) + lapse
        active_until[tx.concept] = max(active_until.get(tx.concept, end), end)
    return starts


def _active_before(record: PatientRecord, concept: str, day: int, lapse: int) -> int | None:
    """Index of the latest transaction dated before ``day`` that keeps ``concept`` active on ``day``."""
    s = record.by_concept.get(concept)
    if s is None:
        return None
    best = None
    for d, i in zip(s.days, s.indices):
        if d >= day:
            break
        tx = record.transactions[i]
        if tx.kind != "lab_result" and day < d + (tx.quantity_days_supply or 0) + lapse:
            best = i
    return best


def audit_observed(
    kb: GuidelineKB,
    record: PatientRecord,
    config: AnalysisConfig | None = None,
    _ctx: _PatientContext | None = None,
) -> list[CritiqueComment]:
    """Check observed actions against the guideline (data to guideline direction).

    Audited actions are drug starts and lab tests of concepts that some
    monitoring spec governs; other lab results are treated as plain data.
    A drug start whose step is contraindicated yields GuidelineContradicted;
    one with no indicated step yields NoSupport; one made while another drug
    of the same intention is active yields Redundant.  A governed lab test
    with no applicable spec yields NoSupport.
    """
    if record.horizon is None:
        return []
    config = config or AnalysisConfig()
    ctx = _ctx or _PatientContext(kb, record)
    lapse = config.drug_active_lapse_days
    pid = record.patient_id
    out: list[CritiqueComment] = []

    steps_for: dict[str, list[DrugStep]] = {}
    for step in kb.drug_steps:
        for c in step.drug_mappings:
            steps_for.setdefault(c, []).append(step)
    concepts_for_intention: dict[str, list[str]] = {}
    for step in kb.drug_steps:
        bucket = concepts_for_intention.setdefault(step.intention_label, [])
        for c in step.drug_mappings:
            if c not in bucket:
                bucket.append(c)

    events: list[tuple[int, CritiqueComment]] = []

    for day, i, concept in _drug_starts(record, lapse):
        ref = _tx_ref(record, i)
        steps = steps_for.get(concept, [])
        if not steps:
            events.append((i, CritiqueComment(
                pid, CommentType.NO_SUPPORT, _d(day), f"drug-therapy/unassigned/{concept}", 1.0,
                "less-important", f"{concept} started {ref}; no guideline step covers this drug", (i,))))
            continue
        contra = [(s, w) for s in steps for ok, w in [ctx.holds(s.contraindication, day)] if ok]
        if contra:
            step, w = contra[0]
            evidence = (i,) + tuple(x for x in sorted(w) if x != i)
            cited = ", ".join(_tx_ref(record, x) for x in w)
            text = f"{concept} started {ref} while the contraindication of {step.id} holds"
            if cited:
                text += f" ({cited})"
            events.append((i, CritiqueComment(pid, CommentType.GUIDELINE_CONTRADICTED, _d(day), drug_path(step),
                                              1.0, step.severity, text, evidence)))
            continue
        indicated = [s for s in steps if ctx.holds(s.indication, day)[0]]
        if not indicated:
            step = steps[0]
            events.append((i, CritiqueComment(
                pid, CommentType.NO_SUPPORT, _d(day), drug_path(step), 1.0, step.severity,
                f"{concept} started {ref} but the indication of {step.id} does not hold", (i,))))
            continue
        for step in indicated:
            other = None
            for c in concepts_for_intention[step.intention_label]:
                if c == concept:
                    continue
                j = _active_before(record, c, day, lapse)
                if j is not None:
                    other = (c, j)
                    break
            if other is not None:
                c, j = other
                text = (f"{concept} started {ref} while {c} ({_tx_ref(record, j)}) with the same intention "
                        f"{step.intention_label!r} is still active")
                events.append((i, CritiqueComment(pid, CommentType.REDUNDANT, _d(day), drug_path(step), 1.0,
                                                  step.severity, text, (i, j))))
                break

    specs_for: dict[str, list[MonitoringSpec]] = {}
    for spec in kb.monitoring_specs:
        specs_for.setdefault(spec.action_concept, []).append(spec)
    for i, tx in enumerate(record.transactions):
        if tx.kind != "lab_result" or tx.concept not in specs_for:
            continue
        specs = specs_for[tx.concept]
        day = tx.day
        if any(ctx.holds(s.applicability, day)[0] for s in specs):
            continue
        spec = specs[0]
        events.append((i, CritiqueComment(
            pid, CommentType.NO_SUPPORT, tx.date, monitoring_path(spec), 1.0, spec.severity,
            f"{tx.concept} tested {_tx_ref(record, i)} but no monitoring recommendation applies", (i,))))

    events.sort(key=lambda e: e[0])
    return [c for _, c in events]


def assess_medication_adherence(
    kb: GuidelineKB,
    record: PatientRecord,
    threshold: float = 0.8,
) -> list[CritiqueComment]:
    """Possession-ratio check for every drug concept the patient was ordered.

    The ratio is purchase-covered days over the span from the first order to
    the end of the record (inclusive).  Below ``threshold`` the comment score
    is ``1 - ratio / threshold``.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    if record.horizon is None:
        return []
    end = record.horizon_days[1] + 1
    out: list[CritiqueComment] = []
    drug_concepts = sorted({tx.concept for tx in record.transactions
                            if tx.kind == "med_order" and tx.concept is not None})
    for concept in drug_concepts:
        orders = [(tx.day, i) for i, tx in enumerate(record.transactions)
                  if tx.kind == "med_order" and tx.concept == concept]
        first_day, first_idx = orders[0]
        purchases = [(i, tx) for i, tx in enumerate(record.transactions)
                     if tx.kind == "med_purchase" and tx.concept == concept]
        raw = [(max(tx.day, first_day), min(tx.day + tx.quantity_days_supply, end)) for _, tx in purchases]
        segments = merge_intervals((a, b) for a, b in raw if a < b)
        covered = sum(b - a for a, b in segments)
        span = end - first_day
        ratio = covered / span
        if ratio >= threshold:
            continue
        gaps = []
        cursor = first_day
        for a, b in segments:
            if a > cursor:
                gaps.append((cursor, a))
            cursor = max(cursor, b)
        if cursor < end:
            gaps.append((cursor, end))
        score = min(1.0, max(0.0, 1.0 - ratio / threshold))
        gap_text = ", ".join(f"[{_d(a).isoformat()}, {_d(b).isoformat()})" for a, b in gaps)
        text = (f"{concept} ordered {_tx_ref(record, first_idx)}; possession ratio {ratio:.3f} "
                f"({covered}/{span} days covered) below {threshold:g}; uncovered: {gap_text}")
        evidence = (first_idx,) + tuple(i for i, _ in purchases)
        out.append(CritiqueComment(record.patient_id, CommentType.PATIENT_COMPLIANCE, _d(first_day),
                                   f"adherence/{concept}", score, "important", text, evidence))
    return out


# ---------------------------------------------------------------------------
# Whole-patient critique
# ---------------------------------------------------------------------------


def critique_patient(
    kb: GuidelineKB,
    record: PatientRecord,
    config: AnalysisConfig | None = None,
    _offsets: list[int] | None = None,
) -> list[CritiqueComment]:
    """All critique comments for one patient, deduplicated and sorted.

    Comments sharing (type, path, date) collapse to the first one produced;
    the result is ordered by (event date, type wire name, guideline path).
    """
    config = config or AnalysisConfig()
    if record.horizon is None:
        return []
    ctx = _PatientContext(kb, record, _offsets)
    comments: list[CritiqueComment] = []
    for exp in generate_expected(kb, record, ctx):
        c = classify_expected(exp, record, kb, config, ctx)
        if c is None:
            continue
        if c.comment_type is CommentType.ACTION_ON_TIME and not config.include_on_time:
            continue
        comments.append(c)
    comments += audit_observed(kb, record, config, ctx)
    comments += assess_medication_adherence(kb, record, config.adherence_threshold)

    comments.sort(key=CritiqueComment.sort_key)
    seen: set[tuple] = set()
    out = []
    for c in comments:
        key = c.dedup_key()
        if key in seen:
            continue
        seen.add(key)
        out.append(c)
    return out


class Critic:
    """Reusable analyzer bound to one KB and config (precomputes KB-level tables)."""

    def __init__(self, kb: GuidelineKB, config: AnalysisConfig | None = None):
        self.kb = kb
        self.config = config or AnalysisConfig()
        self._offsets = kb_change_offsets(kb)

    def __call__(self, record: PatientRecord) -> list[CritiqueComment]:
        return critique_patient(self.kb, record, self.config, self._offsets)
