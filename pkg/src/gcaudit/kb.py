"""Guideline knowledge base: types, JSON document parsing, validation and term resolution.

A KB document is a single JSON object with the top-level keys ``meta``,
``concepts``, ``abstractions``, ``mappings``, ``monitoring`` and
``drug_steps``.  Its structure is described by ``data/kb.schema.json``;
semantic rules (referential closure, bin coverage, duration ordering) are
checked by :func:`validate_kb`.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Any, Iterator, Union

import jsonschema

CONCEPT_KINDS = ("raw-numeric", "raw-categorical", "medication-class", "abstract-state")
SEVERITIES = ("important", "less-important")
OPERATORS = ("<", "<=", ">", ">=", "=")
SOURCE_SYSTEMS = ("LOCAL", "ATC")

_SECTIONS = ("meta", "concepts", "abstractions", "mappings", "monitoring", "drug_steps")
_DURATION_RE = re.compile(r"^(-?[0-9]+)d$")


# ---------------------------------------------------------------------------
# Errors and diagnostics
# ---------------------------------------------------------------------------


class KBError(Exception):
    """Base class for knowledge-base loading errors."""


class KBSyntaxError(KBError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class KBSchemaError(KBError):
    pass


class KBReferenceError(KBError):
    pass


class KBSemanticError(KBError):
    pass


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    location: str
    message: str
    category: str = "semantic"  # "reference" | "semantic"

    def sort_key(self) -> tuple:
        head, _, rest = self.location.partition("[")
        rank = _SECTIONS.index(head) if head in _SECTIONS else len(_SECTIONS)
        index = int(rest.split("]", 1)[0]) if rest else -1
        return (rank, index)

    def __str__(self) -> str:
        return f"{self.severity}: {self.location}: {self.message}"


# ---------------------------------------------------------------------------
# Conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: bool


@dataclass(frozen=True)
class StateHolds:
    abstraction: str
    state: str


@dataclass(frozen=True)
class LatestValueCompare:
    concept: str
    operator: str
    threshold: float
    lookback: int | None  # days; None = unbounded


@dataclass(frozen=True)
class RecordExists:
    concept: str
    lookback: int | None


@dataclass(frozen=True)
class RecordAbsent:
    concept: str
    lookback: int | None


@dataclass(frozen=True)
class AgeCompare:
    operator: str
    years: int


@dataclass(frozen=True)
class And:
    args: tuple


@dataclass(frozen=True)
class Or:
    args: tuple


@dataclass(frozen=True)
class Not:
    arg: Any


Condition = Union[Const, StateHolds, LatestValueCompare, RecordExists, RecordAbsent, AgeCompare, And, Or, Not]

TRUE = Const(True)
FALSE = Const(False)


def iter_atoms(cond: Condition) -> Iterator[Condition]:
    """Yield every non-combinator node of a condition tree, depth first."""
    if isinstance(cond, (And, Or)):
        for arg in cond.args:
            yield from iter_atoms(arg)
    elif isinstance(cond, Not):
        yield from iter_atoms(cond.arg)
    else:
        yield cond


# ---------------------------------------------------------------------------
# KB types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConceptDef:
    id: str
    kind: str
    canonical_unit: str = ""
    description: str = ""


@dataclass(frozen=True)
class Bin:
    lower: float  # inclusive
    upper: float  # exclusive
    label: str


@dataclass(frozen=True)
class AbstractionRule:
    id: str
    input_concept: str
    bins: tuple[Bin, ...]
    max_gap: int

    def label_for(self, value: float) -> str | None:
        for b in self.bins:
            if b.lower <= value < b.upper:
                return b.label
        return None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(b.label for b in self.bins)


@dataclass(frozen=True)
class TermMapping:
    source_system: str
    source_code_or_prefix: str
    target_concept: str
    unit_factor: float = 1.0
    unit_offset: float = 0.0
    source_unit: str = ""


@dataclass(frozen=True)
class MonitoringSpec:
    id: str
    action_concept: str
    period: int
    latest_start_offset: int
    grace: int
    severity: str
    applicability: Condition
    earliest_start_offset: int | None = None
    description: str = ""


@dataclass(frozen=True)
class DrugStep:
    id: str
    intention_label: str
    drug_mappings: tuple[str, ...]  # medication-class concept ids
    indication: Condition
    expected_within: int
    grace: int
    severity: str
    contraindication: Condition = FALSE
    description: str = ""


@dataclass(frozen=True)
class KBMeta:
    name: str = ""
    version: str = ""
    scope_notes: str = ""


@dataclass(frozen=True)
class Resolution:
    concept: ConceptDef
    factor: float
    offset: float

    def convert(self, value: float) -> float:
        return value * self.factor + self.offset


@dataclass(frozen=True)
class GuidelineKB:
    meta: KBMeta = field(default_factory=KBMeta)
    concepts: tuple[ConceptDef, ...] = ()
    abstractions: tuple[AbstractionRule, ...] = ()
    mappings: tuple[TermMapping, ...] = ()
    monitoring_specs: tuple[MonitoringSpec, ...] = ()
    drug_steps: tuple[DrugStep, ...] = ()

    @cached_property
    def concept_by_id(self) -> dict[str, ConceptDef]:
        return {c.id: c for c in self.concepts}

    @cached_property
    def abstraction_by_id(self) -> dict[str, AbstractionRule]:
        return {a.id: a for a in self.abstractions}

    @cached_property
    def _local_index(self) -> dict[str, TermMapping]:
        index: dict[str, TermMapping] = {}
        for m in self.mappings:
            if m.source_system == "LOCAL":
                index.setdefault(m.source_code_or_prefix, m)
        return index

    @cached_property
    def _atc_index(self) -> dict[str, TermMapping]:
        index: dict[str, TermMapping] = {}
        for m in self.mappings:
            if m.source_system == "ATC":
                index.setdefault(m.source_code_or_prefix, m)
        return index

    def concept(self, concept_id: str) -> ConceptDef:
        try:
            return self.concept_by_id[concept_id]
        except KeyError:
            raise KeyError(f"unknown concept {concept_id!r}") from None


# ---------------------------------------------------------------------------
# Term resolution
# ---------------------------------------------------------------------------


def find_mapping(kb: GuidelineKB, source_system: str, code: str) -> TermMapping | None:
    if source_system == "LOCAL":
        return kb._local_index.get(code)
    if source_system == "ATC":
        index = kb._atc_index
        for n in range(len(code), 0, -1):
            m = index.get(code[:n])
            if m is not None:
                return m
        return None
    return None


def resolve_term(kb: GuidelineKB, source_system: str, code: str, unit: str = "") -> Resolution | None:
    """Map a source code onto a KB concept.

    LOCAL codes match exactly; ATC codes match the longest mapped prefix.
    When the mapping names a ``source_unit`` and the caller's unit differs,
    a value already in the concept's canonical unit passes through unchanged
    and any other unit is treated as no match.
    """
    m = find_mapping(kb, source_system, code)
    if m is None:
        return None
    concept = kb.concept_by_id.get(m.target_concept)
    if concept is None:
        return None
    if m.source_unit and unit and unit != m.source_unit:
        if unit == concept.canonical_unit:
            return Resolution(concept, 1.0, 0.0)
        return None
    return Resolution(concept, m.unit_factor, m.unit_offset)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def load_schema() -> dict:
    text = resources.files("gcaudit.data").joinpath("kb.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


_VALIDATOR: jsonschema.Draft202012Validator | None = None


def _schema_validator() -> jsonschema.Draft202012Validator:
    global _VALIDATOR
    if _VALIDATOR is None:
        _VALIDATOR = jsonschema.Draft202012Validator(load_schema())
    return _VALIDATOR


def _json_path(path) -> str:
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<document>"


def parse_duration(text: str) -> int:
    m = _DURATION_RE.match(text)
    if m is None:
        raise ValueError(f"bad duration {text!r}")
    return int(m.group(1))


def format_duration(days: int | None) -> str:
    return "inf" if days is None else f"{days}d"


def _parse_lookback(text: str) -> int | None:
    return None if text == "inf" else parse_duration(text)


def _parse_bound(value) -> float:
    if value == "-inf":
        return -math.inf
    if value == "+inf":
        return math.inf
    return float(value)


def _format_bound(value: float):
    if value == -math.inf:
        return "-inf"
    if value == math.inf:
        return "+inf"
    return int(value) if float(value).is_integer() else value


def _format_number(value: float):
    return int(value) if float(value).is_integer() else value


def parse_condition(obj) -> Condition:
    if isinstance(obj, bool):
        return Const(obj)
    kind = obj["kind"]
    if kind == "state-holds":
        return StateHolds(obj["abstraction"], obj["state"])
    if kind == "latest-value-compare":
        return LatestValueCompare(obj["concept"], obj["operator"], float(obj["threshold"]),
                                  _parse_lookback(obj["lookback"]))
    if kind == "record-exists":
        return RecordExists(obj["concept"], _parse_lookback(obj["lookback"]))
    if kind == "record-absent":
        return RecordAbsent(obj["concept"], _parse_lookback(obj["lookback"]))
    if kind == "age-compare":
        return AgeCompare(obj["operator"], int(obj["years"]))
    if kind == "and":
        return And(tuple(parse_condition(a) for a in obj["args"]))
    if kind == "or":
        return Or(tuple(parse_condition(a) for a in obj["args"]))
    if kind == "not":
        return Not(parse_condition(obj["arg"]))
    raise KBSchemaError(f"unknown condition kind {kind!r}")


def condition_to_json(cond: Condition):
    if isinstance(cond, Const):
        return cond.value
    if isinstance(cond, StateHolds):
        return {"kind": "state-holds", "abstraction": cond.abstraction, "state": cond.state}
    if isinstance(cond, LatestValueCompare):
        return {"kind": "latest-value-compare", "concept": cond.concept, "operator": cond.operator,
                "threshold": _format_number(cond.threshold), "lookback": format_duration(cond.lookback)}
    if isinstance(cond, (RecordExists, RecordAbsent)):
        kind = "record-exists" if isinstance(cond, RecordExists) else "record-absent"
        return {"kind": kind, "concept": cond.concept, "lookback": format_duration(cond.lookback)}
    if isinstance(cond, AgeCompare):
        return {"kind": "age-compare", "operator": cond.operator, "years": cond.years}
    if isinstance(cond, And):
        return {"kind": "and", "args": [condition_to_json(a) for a in cond.args]}
    if isinstance(cond, Or):
        return {"kind": "or", "args": [condition_to_json(a) for a in cond.args]}
    if isinstance(cond, Not):
        return {"kind": "not", "arg": condition_to_json(cond.arg)}
    raise TypeError(f"not a condition: {cond!r}")


def kb_from_json(doc: dict) -> GuidelineKB:
    """Build a GuidelineKB from an already schema-checked JSON object."""
    meta = doc["meta"]
    concepts = tuple(
        ConceptDef(c["id"], c["kind"], c.get("canonical_unit", ""), c.get("description", ""))
        for c in doc["concepts"]
    )
    abstractions = tuple(
        AbstractionRule(
            a["id"],
            a["input_concept"],
            tuple(Bin(_parse_bound(lo), _parse_bound(hi), label) for lo, hi, label in a["bins"]),
            parse_duration(a["max_gap"]),
        )
        for a in doc["abstractions"]
    )
    mappings = tuple(
        TermMapping(
            m["source_system"],
            m["source_code_or_prefix"],
            m["target_concept"],
            float(m.get("unit_factor", 1.0)),
            float(m.get("unit_offset", 0.0)),
            m.get("source_unit", ""),
        )
        for m in doc["mappings"]
    )
    monitoring = tuple(
        MonitoringSpec(
            id=s["id"],
            action_concept=s["action_concept"],
            period=parse_duration(s["period"]),
            latest_start_offset=parse_duration(s["latest_start_offset"]),
            grace=parse_duration(s["grace"]),
            severity=s["severity"],
            applicability=parse_condition(s["applicability"]),
            earliest_start_offset=(parse_duration(s["earliest_start_offset"])
                                   if "earliest_start_offset" in s else None),
            description=s.get("description", ""),
        )
        for s in doc["monitoring"]
    )
    drug_steps = tuple(
        DrugStep(
            id=s["id"],
            intention_label=s["intention_label"],
            drug_mappings=tuple(s["drug_mappings"]),
            indication=parse_condition(s["indication"]),
            expected_within=parse_duration(s["expected_within"]),
            grace=parse_duration(s["grace"]),
            severity=s["severity"],
            contraindication=parse_condition(s.get("contraindication", False)),
            description=s.get("description", ""),
        )
        for s in doc["drug_steps"]
    )
    return GuidelineKB(
        KBMeta(meta["name"], meta["version"], meta.get("scope_notes", "")),
        concepts, abstractions, mappings, monitoring, drug_steps,
    )


def parse_kb(document: str, validate: bool = True) -> GuidelineKB:
    """Parse a KB document.

    Raises KBSyntaxError for malformed JSON, KBSchemaError for structural
    problems, and (when ``validate`` is true) KBReferenceError or
    KBSemanticError for the first error-severity diagnostic.
    """
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise KBSyntaxError(exc.msg, exc.lineno, exc.colno) from None

    errors = sorted(_schema_validator().iter_errors(doc), key=lambda e: (list(map(str, e.path)), e.message))
    if errors:
        first = jsonschema.exceptions.best_match(errors)
        raise KBSchemaError(f"{_json_path(first.absolute_path)}: {first.message}")

    kb = kb_from_json(doc)
    if validate:
        for diag in validate_kb(kb):
            if diag.severity != "error":
                continue
            if diag.category == "reference":
                raise KBReferenceError(f"{diag.location}: {diag.message}")
            raise KBSemanticError(f"{diag.location}: {diag.message}")
    return kb


def kb_to_json(kb: GuidelineKB) -> dict:
    def concept(c: ConceptDef) -> dict:
        out = {"id": c.id, "kind": c.kind}
        if c.canonical_unit:
            out["canonical_unit"] = c.canonical_unit
        if c.description:
            out["description"] = c.description
        return out

    def mapping(m: TermMapping) -> dict:
        out = {"source_system": m.source_system, "source_code_or_prefix": m.source_code_or_prefix,
               "target_concept": m.target_concept, "unit_factor": _format_number(m.unit_factor),
               "unit_offset": _format_number(m.unit_offset)}
        if m.source_unit:
            out["source_unit"] = m.source_unit
        return out

    def monitoring(s: MonitoringSpec) -> dict:
        out = {"id": s.id, "action_concept": s.action_concept, "period": format_duration(s.period)}
        if s.earliest_start_offset is not None:
            out["earliest_start_offset"] = format_duration(s.earliest_start_offset)
        out.update({
            "latest_start_offset": format_duration(s.latest_start_offset),
            "grace": format_duration(s.grace),
            "severity": s.severity,
            "applicability": condition_to_json(s.applicability),
        })
        if s.description:
            out["description"] = s.description
        return out

    def drug_step(s: DrugStep) -> dict:
        out = {
            "id": s.id,
            "intention_label": s.intention_label,
            "drug_mappings": list(s.drug_mappings),
            "indication": condition_to_json(s.indication),
            "contraindication": condition_to_json(s.contraindication),
            "expected_within": format_duration(s.expected_within),
            "grace": format_duration(s.grace),
            "severity": s.severity,
        }
        if s.description:
            out["description"] = s.description
        return out

    meta = {"name": kb.meta.name, "version": kb.meta.version}
    if kb.meta.scope_notes:
        meta["scope_notes"] = kb.meta.scope_notes
    return {
        "meta": meta,
        "concepts": [concept(c) for c in kb.concepts],
        "abstractions": [
            {"id": a.id, "input_concept": a.input_concept,
             "bins": [[_format_bound(b.lower), _format_bound(b.upper), b.label] for b in a.bins],
             "max_gap": format_duration(a.max_gap)}
            for a in kb.abstractions
        ],
        "mappings": [mapping(m) for m in kb.mappings],
        "monitoring": [monitoring(s) for s in kb.monitoring_specs],
        "drug_steps": [drug_step(s) for s in kb.drug_steps],
    }


def serialize_kb(kb: GuidelineKB) -> str:
    return json.dumps(kb_to_json(kb), indent=2, ensure_ascii=False) + "\n"


def load_kb(path, validate: bool = True) -> GuidelineKB:
    with open(path, encoding="utf-8") as fh:
        return parse_kb(fh.read(), validate=validate)


BUNDLED_KBS = ("minimal", "diabetes_excerpt")


def bundled_kb(name: str = "diabetes_excerpt") -> GuidelineKB:
    """Load one of the KBs shipped with the package ("minimal" or "diabetes_excerpt")."""
    if name not in BUNDLED_KBS:
        raise ValueError(f"unknown bundled KB {name!r}; choose from {', '.join(BUNDLED_KBS)}")
    text = resources.files("gcaudit.data").joinpath(f"{name}_kb.json").read_text(encoding="utf-8")
    return parse_kb(text)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _fmt_bound(x: float) -> str:
    if math.isinf(x):
        return "-inf" if x < 0 else "+inf"
    return f"{x:g}"


def _check_bins(rule: AbstractionRule, loc: str) -> list[Diagnostic]:
    out: list[Diagnostic] = []
    if not rule.bins:
        return [Diagnostic("error", loc, "abstraction has no bins")]
    for i, b in enumerate(rule.bins):
        if not b.lower < b.upper:
            out.append(Diagnostic("error", f"{loc}[{i}]",
                                  f"empty bin [{_fmt_bound(b.lower)},{_fmt_bound(b.upper)}) for {b.label!r}"))
    if rule.bins[0].lower != -math.inf:
        out.append(Diagnostic("error", loc, f"gap [-inf,{_fmt_bound(rule.bins[0].lower)})"))
    for prev, nxt in zip(rule.bins, rule.bins[1:]):
        if prev.upper < nxt.lower:
            out.append(Diagnostic("error", loc, f"gap [{_fmt_bound(prev.upper)},{_fmt_bound(nxt.lower)})"))
        elif prev.upper > nxt.lower:
            out.append(Diagnostic("error", loc,
                                  f"overlap [{_fmt_bound(nxt.lower)},{_fmt_bound(prev.upper)}) "
                                  f"between {prev.label!r} and {nxt.label!r}"))
    if rule.bins[-1].upper != math.inf:
        out.append(Diagnostic("error", loc, f"gap [{_fmt_bound(rule.bins[-1].upper)},+inf)"))
    return out


def _check_condition(kb: GuidelineKB, cond: Condition, loc: str) -> list[Diagnostic]:
    out: list[Diagnostic] = []
    if isinstance(cond, (And, Or)):
        for i, arg in enumerate(cond.args):
            out += _check_condition(kb, arg, f"{loc}.args[{i}]")
    elif isinstance(cond, Not):
        out += _check_condition(kb, cond.arg, f"{loc}.arg")
    elif isinstance(cond, StateHolds):
        rule = kb.abstraction_by_id.get(cond.abstraction)
        if rule is None:
            out.append(Diagnostic("error", f"{loc}.abstraction",
                                  f"unknown abstraction {cond.abstraction!r}", "reference"))
        elif cond.state not in rule.labels:
            out.append(Diagnostic("error", f"{loc}.state",
                                  f"abstraction {cond.abstraction!r} has no state {cond.state!r}", "reference"))
    elif isinstance(cond, (LatestValueCompare, RecordExists, RecordAbsent)):
        concept = kb.concept_by_id.get(cond.concept)
        if concept is None:
            out.append(Diagnostic("error", f"{loc}.concept", f"unknown concept {cond.concept!r}", "reference"))
        elif isinstance(cond, LatestValueCompare) and concept.kind != "raw-numeric":
            out.append(Diagnostic("error", f"{loc}.concept",
                                  f"concept {cond.concept!r} is {concept.kind}, expected raw-numeric"))
        if cond.lookback is not None and cond.lookback < 0:
            out.append(Diagnostic("error", f"{loc}.lookback", f"negative duration {cond.lookback}d"))
    return out


def _check_duration(value: int | None, loc: str, positive: bool = False) -> list[Diagnostic]:
    if value is None:
        return []
    if value < 0:
        return [Diagnostic("error", loc, f"negative duration {value}d")]
    if positive and value == 0:
        return [Diagnostic("error", loc, "duration must be positive")]
    return []


def validate_kb(kb: GuidelineKB) -> list[Diagnostic]:
    """Check every KB invariant; an empty list means the KB is usable.

    Diagnostics come back ordered by location (section, then item index).
    """
    diags: list[Diagnostic] = []

    seen: set[str] = set()
    for i, c in enumerate(kb.concepts):
        loc = f"concepts[{i}]"
        if c.id in seen:
            diags.append(Diagnostic("error", f"{loc}.id", f"duplicate concept id {c.id!r}"))
        seen.add(c.id)
        if c.kind not in CONCEPT_KINDS:
            diags.append(Diagnostic("error", f"{loc}.kind", f"unknown concept kind {c.kind!r}"))
        if c.kind == "raw-numeric" and not c.canonical_unit:
            diags.append(Diagnostic("error", f"{loc}.canonical_unit",
                                    f"raw-numeric concept {c.id!r} needs a canonical unit"))

    seen = set()
    for i, a in enumerate(kb.abstractions):
        loc = f"abstractions[{i}]"
        if a.id in seen:
            diags.append(Diagnostic("error", f"{loc}.id", f"duplicate abstraction id {a.id!r}"))
        seen.add(a.id)
        concept = kb.concept_by_id.get(a.input_concept)
        if concept is None:
            diags.append(Diagnostic("error", f"{loc}.input_concept",
                                    f"unknown concept {a.input_concept!r}", "reference"))
        elif concept.kind != "raw-numeric":
            diags.append(Diagnostic("error", f"{loc}.input_concept",
                                    f"concept {a.input_concept!r} is {concept.kind}, expected raw-numeric"))
        diags += _check_bins(a, f"{loc}.bins")
        diags += _check_duration(a.max_gap, f"{loc}.max_gap", positive=True)

    seen_keys: set[tuple[str, str]] = set()
    for i, m in enumerate(kb.mappings):
        loc = f"mappings[{i}]"
        if m.source_system not in SOURCE_SYSTEMS:
            diags.append(Diagnostic("error", f"{loc}.source_system", f"unknown source system {m.source_system!r}"))
        key = (m.source_system, m.source_code_or_prefix)
        if key in seen_keys:
            what = "code" if m.source_system == "LOCAL" else "prefix"
            diags.append(Diagnostic("error", f"{loc}.source_code_or_prefix",
                                    f"duplicate {m.source_system} {what} {m.source_code_or_prefix!r}"))
        seen_keys.add(key)
        if m.target_concept not in kb.concept_by_id:
            diags.append(Diagnostic("error", f"{loc}.target_concept",
                                    f"unknown concept {m.target_concept!r}", "reference"))
        if m.unit_factor == 0:
            diags.append(Diagnostic("error", f"{loc}.unit_factor", "unit factor must be non-zero"))

    seen = set()
    for i, s in enumerate(kb.monitoring_specs):
        loc = f"monitoring[{i}]"
        if s.id in seen:
            diags.append(Diagnostic("error", f"{loc}.id", f"duplicate monitoring spec id {s.id!r}"))
        seen.add(s.id)
        if s.action_concept not in kb.concept_by_id:
            diags.append(Diagnostic("error", f"{loc}.action_concept",
                                    f"unknown concept {s.action_concept!r}", "reference"))
        diags += _check_duration(s.period, f"{loc}.period", positive=True)
        diags += _check_duration(s.earliest_start_offset, f"{loc}.earliest_start_offset")
        diags += _check_duration(s.latest_start_offset, f"{loc}.latest_start_offset")
        diags += _check_duration(s.grace, f"{loc}.grace")
        if s.severity not in SEVERITIES:
            diags.append(Diagnostic("error", f"{loc}.severity", f"unknown severity {s.severity!r}"))
        e = s.earliest_start_offset
        if e is not None:
            if e > s.latest_start_offset:
                diags.append(Diagnostic("error", f"{loc}.earliest_start_offset",
                                        f"earliest_start_offset {e}d exceeds latest_start_offset "
                                        f"{s.latest_start_offset}d"))
            elif e > s.period > 0:
                diags.append(Diagnostic("error", f"{loc}.earliest_start_offset",
                                        f"earliest_start_offset {e}d exceeds period {s.period}d"))
        diags += _check_condition(kb, s.applicability, f"{loc}.applicability")

    seen = set()
    mapped_targets = {m.target_concept for m in kb.mappings}
    for i, s in enumerate(kb.drug_steps):
        loc = f"drug_steps[{i}]"
        if s.id in seen:
            diags.append(Diagnostic("error", f"{loc}.id", f"duplicate drug step id {s.id!r}"))
        seen.add(s.id)
        for j, cid in enumerate(s.drug_mappings):
            concept = kb.concept_by_id.get(cid)
            if concept is None:
                diags.append(Diagnostic("error", f"{loc}.drug_mappings[{j}]",
                                        f"unknown concept {cid!r}", "reference"))
            elif concept.kind != "medication-class":
                diags.append(Diagnostic("error", f"{loc}.drug_mappings[{j}]",
                                        f"concept {cid!r} is {concept.kind}, expected medication-class"))
            elif cid not in mapped_targets:
                diags.append(Diagnostic("warning", f"{loc}.drug_mappings[{j}]",
                                        f"no term mapping targets {cid!r}"))
        diags += _check_duration(s.expected_within, f"{loc}.expected_within")
        diags += _check_duration(s.grace, f"{loc}.grace")
        if s.severity not in SEVERITIES:
            diags.append(Diagnostic("error", f"{loc}.severity", f"unknown severity {s.severity!r}"))
        diags += _check_condition(kb, s.indication, f"{loc}.indication")
        diags += _check_condition(kb, s.contraindication, f"{loc}.contraindication")

    return sorted(diags, key=Diagnostic.sort_key)
