"""Evaluation statistics for expert-vs-system critiquing studies.

Covers completeness by level of expert support, two-proportion z-tests,
two-rater correctness and importance summaries, (weighted) Cohen's kappa,
the Spearman-Brown rater multiplier, indirect correctness and completeness
of each expert, and a harmonic-mean summary.  Annotation loaders live here
too; table rendering is in ``gcaudit.tables``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date
from enum import Enum
from statistics import NormalDist
from typing import Iterable, Mapping, Sequence

from .compliance import CommentType


class EvalError(ValueError):
    """Bad annotation data or arguments outside a statistic's domain."""


def percent(num: int, den: int) -> int:
    """Integer percentage rounded half-up, computed exactly."""
    if den <= 0:
        raise EvalError("percentage of an empty total")
    return (200 * num + den) // (2 * den)


def round_half_up(x: float, digits: int = 0) -> float:
    """Half-up rounding for display (``round`` is half-even)."""
    q = 10 ** digits
    return math.floor(x * q + 0.5 + 1e-9) / q


# ---------------------------------------------------------------------------
# Annotation types
# ---------------------------------------------------------------------------


class Correctness(str, Enum):
    CORRECT = "correct"
    PARTIAL = "partially-correct"
    NOT_CORRECT = "not-correct"

    @property
    def rank(self) -> int:
        return _RANK[self]


_RANK = {Correctness.CORRECT: 0, Correctness.PARTIAL: 1, Correctness.NOT_CORRECT: 2}
IMPORTANCE = ("important", "less-important")
SCOPES = ("in-scope", "out-of-scope", "insight")


@dataclass(frozen=True)
class ExpertComment:
    expert_id: str
    patient_id: str
    event_date: date | None
    comment_type: str  # a CommentType wire name, or the expert's own label
    importance: str
    issue_id: str
    scope: str
    text: str = ""

    @property
    def known_type(self) -> CommentType | None:
        try:
            return CommentType(self.comment_type)
        except ValueError:
            return None


@dataclass(frozen=True)
class SupportEntry:
    experts: frozenset[str]
    detected_by_system: bool


SupportTable = Mapping[str, SupportEntry]


@dataclass(frozen=True)
class Verdict:
    expert_id: str
    system_comment_id: int
    correctness: Correctness
    importance: str
    note: str = ""


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    weights_used: tuple[tuple[float, ...], ...]
    observed_disagreement: float
    expected_disagreement: float


@dataclass(frozen=True)
class ZTestResult:
    z: float
    p_two_sided: float
    pooled_proportion: float


@dataclass(frozen=True)
class SummaryRow:
    label: str
    completeness_pct: float
    correctness_pct: float
    harmonic_mean: float

    @property
    def harmonic_mean_2dp(self) -> float:
        return round_half_up(self.harmonic_mean, 2)


# ---------------------------------------------------------------------------
# Completeness by level of support
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SupportRow:
    level: int
    issues: int
    detected: int
    exact_fraction: float
    cumulative_issues: int
    cumulative_detected: int

    @property
    def cumulative_fraction(self) -> float:
        return self.cumulative_detected / self.cumulative_issues

    @property
    def exact_pct(self) -> int:
        return percent(self.detected, self.issues)

    @property
    def cumulative_pct(self) -> int:
        return percent(self.cumulative_detected, self.cumulative_issues)


def completeness_by_support(table: SupportTable, n_experts: int = 3) -> list[SupportRow]:
    """System recall per number of supporting experts, exact and at-or-above each level.

    Levels with no issues are omitted.
    """
    if not table:
        raise EvalError("support table is empty")
    issues = [0] * (n_experts + 1)
    detected = [0] * (n_experts + 1)
    for issue_id, entry in table.items():
        k = len(entry.experts)
        if not 1 <= k <= n_experts:
            raise EvalError(f"issue {issue_id!r} has {k} supporting experts, expected 1..{n_experts}")
        issues[k] += 1
        detected[k] += entry.detected_by_system
    rows = []
    for level in range(1, n_experts + 1):
        if issues[level] == 0:
            continue
        cum_i = sum(issues[level:])
        cum_d = sum(detected[level:])
        rows.append(SupportRow(level, issues[level], detected[level], detected[level] / issues[level], cum_i, cum_d))
    return rows


def two_prop_z(x1: int, n1: int, x2: int, n2: int) -> ZTestResult:
    """Pooled two-proportion z-test, two-sided normal p-value, no continuity correction."""
    for x, n in ((x1, n1), (x2, n2)):
        if n <= 0 or not 0 <= x <= n:
            raise EvalError(f"need 0 <= x <= n and n > 0, got x={x}, n={n}")
    pooled = (x1 + x2) / (n1 + n2)
    if pooled in (0.0, 1.0):
        raise EvalError("pooled proportion is 0 or 1; the test is undefined")
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    z = (x1 / n1 - x2 / n2) / se
    p = 2 * NormalDist().cdf(-abs(z))
    return ZTestResult(z, min(1.0, p), pooled)


# ---------------------------------------------------------------------------
# Two-rater verdicts
# ---------------------------------------------------------------------------

# most to least correct, as (better, worse) rank pairs
GROUP_ORDER = ((0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2))
GROUP_LABELS = (
    "correct by both experts",
    "correct by one, partially correct by the other",
    "partially correct by both experts",
    "correct by one, not correct by the other",
    "partially correct by one, not correct by the other",
    "not correct by both experts",
)


@dataclass(frozen=True)
class GroupRow:
    label: str
    count: int
    total: int
    cumulative: int

    @property
    def fraction(self) -> float:
        return self.count / self.total

    @property
    def pct(self) -> int:
        return percent(self.count, self.total)

    @property
    def cumulative_pct(self) -> int:
        return percent(self.cumulative, self.total)


def pair_verdicts(verdicts: Iterable[Verdict], experts: Sequence[str] | None = None) -> dict[int, tuple[Verdict, Verdict]]:
    """Group verdicts by system comment; every comment must have exactly two, from different experts."""
    by_comment: dict[int, list[Verdict]] = {}
    for v in verdicts:
        by_comment.setdefault(v.system_comment_id, []).append(v)
    if not by_comment:
        raise EvalError("no verdicts")
    bad = sorted(cid for cid, vs in by_comment.items() if len(vs) != 2 or vs[0].expert_id == vs[1].expert_id)
    if bad:
        raise EvalError(f"comments without exactly two verdicts from distinct experts: {bad}")
    if experts is None:
        experts = sorted({v.expert_id for v in by_comment[min(by_comment)]})
    if len(experts) != 2:
        raise EvalError(f"expected two experts, got {list(experts)}")
    out = {}
    for cid in sorted(by_comment):
        vs = {v.expert_id: v for v in by_comment[cid]}
        if set(vs) != set(experts):
            raise EvalError(f"comment {cid} judged by {sorted(vs)}, expected {sorted(experts)}")
        out[cid] = (vs[experts[0]], vs[experts[1]])
    return out


def correctness_groups(verdicts: Iterable[Verdict]) -> list[GroupRow]:
    """Six combination rows, most to least correct, with cumulative counts."""
    pairs = pair_verdicts(verdicts)
    counts = dict.fromkeys(GROUP_ORDER, 0)
    for a, b in pairs.values():
        counts[tuple(sorted((a.correctness.rank, b.correctness.rank)))] += 1
    total = len(pairs)
    rows, cum = [], 0
    for key, label in zip(GROUP_ORDER, GROUP_LABELS):
        cum += counts[key]
        rows.append(GroupRow(label, counts[key], total, cum))
    return rows


def jointly_correct(verdicts: Iterable[Verdict]) -> set[int]:
    """Comments judged correct by both experts, or correct by one and partially correct by the other."""
    return {cid for cid, (a, b) in pair_verdicts(verdicts).items()
            if tuple(sorted((a.correctness.rank, b.correctness.rank))) in ((0, 0), (0, 1))}


@dataclass(frozen=True)
class ImportanceSummary:
    both: int
    one: int
    none: int
    important_votes: int
    total_votes: int

    @property
    def total(self) -> int:
        return self.both + self.one + self.none

    @property
    def voting_score(self) -> float:
        return self.important_votes / self.total_votes

    def pcts(self) -> tuple[int, int, int, int]:
        t = self.total
        return (percent(self.both, t), percent(self.one, t), percent(self.none, t),
                percent(self.important_votes, self.total_votes))


def importance_summary(verdicts: Iterable[Verdict]) -> ImportanceSummary:
    pairs = pair_verdicts(verdicts)
    hist = [0, 0, 0]
    for a, b in pairs.values():
        hist[(a.importance == "important") + (b.importance == "important")] += 1
    votes = hist[1] + 2 * hist[2]
    return ImportanceSummary(hist[2], hist[1], hist[0], votes, 2 * len(pairs))


def confusion(pairs: Mapping[int, tuple[Verdict, Verdict]], field: str = "correctness") -> list[list[int]]:
    """Rater-1 rows by rater-2 columns: C/P/N for correctness, important/less for importance."""
    if field == "correctness":
        k, key = 3, lambda v: v.correctness.rank
    elif field == "importance":
        k, key = 2, lambda v: IMPORTANCE.index(v.importance)
    else:
        raise ValueError(field)
    m = [[0] * k for _ in range(k)]
    for a, b in pairs.values():
        m[key(a)][key(b)] += 1
    return m


def linear_weights(k: int) -> list[list[float]]:
    return [[float(abs(i - j)) for j in range(k)] for i in range(k)]


def nominal_weights(k: int) -> list[list[float]]:
    return [[0.0 if i == j else 1.0 for j in range(k)] for i in range(k)]


def weighted_kappa(confusion: Sequence[Sequence[float]], weights: Sequence[Sequence[float]] | None = None) -> KappaResult:
    """Cohen's kappa with disagreement weights: 1 - sum(w*O) / sum(w*E).

    ``weights`` defaults to linear distance weights; pass ``nominal_weights(k)``
    for the unweighted coefficient.
    """
    k = len(confusion)
    if k == 0 or any(len(row) != k for row in confusion):
        raise EvalError("confusion matrix must be square and non-empty")
    if weights is None:
        weights = linear_weights(k)
    if len(weights) != k or any(len(row) != k for row in weights):
        raise EvalError("weights must match the confusion matrix shape")
    for i in range(k):
        if weights[i][i] != 0:
            raise EvalError("weights must be zero on the diagonal")
        for j in range(k):
            if weights[i][j] != weights[j][i]:
                raise EvalError("weights must be symmetric")
    if any(x < 0 for row in confusion for x in row):
        raise EvalError("negative counts")
    total = sum(sum(row) for row in confusion)
    if total <= 0:
        raise EvalError("confusion matrix total must be positive")
    rows = [sum(confusion[i]) / total for i in range(k)]
    cols = [sum(confusion[i][j] for i in range(k)) / total for j in range(k)]
    observed = sum(weights[i][j] * confusion[i][j] / total for i in range(k) for j in range(k))
    expected = sum(weights[i][j] * rows[i] * cols[j] for i in range(k) for j in range(k))
    if expected == 0:
        raise EvalError("expected disagreement is zero (degenerate marginals)")
    return KappaResult(1 - observed / expected, tuple(tuple(float(w) for w in row) for row in weights), observed, expected)


def spearman_brown_multiplier(kappa_observed: float, kappa_target: float) -> float:
    """Factor by which the number of raters must grow to lift reliability to the target."""
    for name, v in (("observed", kappa_observed), ("target", kappa_target)):
        if not 0 < v < 1:
            raise EvalError(f"{name} reliability must be in (0, 1), got {v}")
    return kappa_target * (1 - kappa_observed) / (kappa_observed * (1 - kappa_target))


def required_raters(current: int, multiplier: float) -> int:
    # tolerance so that an exact product is not pushed up by float noise
    return math.ceil(current * multiplier - 1e-9)


# ---------------------------------------------------------------------------
# Indirect measures for experts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndirectCorrectnessRow:
    expert_id: str
    total: int
    with_system: tuple[int, ...]  # comments mentioned by 0..n other agents (experts + system)
    experts_only: tuple[int, ...]  # comments mentioned by 0..n-1 other experts

    @property
    def supported_with_system(self) -> int:
        return self.total - self.with_system[0]

    @property
    def supported_experts_only(self) -> int:
        return self.total - self.experts_only[0]

    @property
    def fraction_with_system(self) -> float:
        return self.supported_with_system / self.total

    @property
    def fraction_experts_only(self) -> float:
        return self.supported_experts_only / self.total

    @property
    def pcts(self) -> tuple[int, int]:
        return percent(self.supported_with_system, self.total), percent(self.supported_experts_only, self.total)


def indirect_correctness(
    comments: Iterable[ExpertComment],
    table: SupportTable,
    experts: Sequence[str] | None = None,
) -> list[IndirectCorrectnessRow]:
    """Share of each expert's in-scope comments that other agents also raised.

    A comment's support is the set of other experts on its issue, plus the
    system when the issue was detected.
    """
    comments = [c for c in comments if c.scope == "in-scope"]
    if experts is None:
        experts = sorted({c.expert_id for c in comments})
    n = len(experts)
    rows = []
    for e in experts:
        mine = [c for c in comments if c.expert_id == e]
        with_sys = [0] * (n + 1)
        only = [0] * n
        for c in mine:
            entry = table.get(c.issue_id)
            if entry is None:
                raise EvalError(f"issue {c.issue_id!r} of expert {e} is missing from the support table")
            if e not in entry.experts:
                raise EvalError(f"support table entry {c.issue_id!r} does not list expert {e}")
            others = len(entry.experts - {e})
            only[others] += 1
            with_sys[others + entry.detected_by_system] += 1
        if not mine:
            raise EvalError(f"expert {e} has no in-scope comments")
        rows.append(IndirectCorrectnessRow(e, len(mine), tuple(with_sys), tuple(only)))
    return rows


@dataclass(frozen=True)
class CompletenessRow:
    label: str
    mentioned: int
    total: int

    @property
    def fraction(self) -> float:
        return self.mentioned / self.total

    @property
    def pct(self) -> int:
        return percent(self.mentioned, self.total)


def indirect_completeness(
    jointly_correct_ids: set[int],
    expert_mentions: Mapping[str, set[int]],
) -> tuple[list[CompletenessRow], CompletenessRow]:
    """Per-expert share of the jointly-correct system comments the expert also raised, plus the pooled row."""
    if not jointly_correct_ids:
        raise EvalError("no jointly-correct comments")
    rows = []
    for e in sorted(expert_mentions):
        extra = sorted(expert_mentions[e] - jointly_correct_ids)
        if extra:
            raise EvalError(f"expert {e} mentions comments that are not jointly correct: {extra}")
        rows.append(CompletenessRow(e, len(expert_mentions[e]), len(jointly_correct_ids)))
    combined = CompletenessRow("all", sum(r.mentioned for r in rows), sum(r.total for r in rows))
    return rows, combined


def harmonic_mean(a: float, b: float) -> float:
    return 2 * a * b / (a + b)


def summary_profile(rows: Iterable[tuple[str, float, float]]) -> list[SummaryRow]:
    """Rows of (label, completeness, correctness) as fractions in (0, 1]."""
    out = []
    for label, comp, corr in rows:
        for v in (comp, corr):
            if not 0 < v <= 1:
                raise EvalError(f"{label}: values must be in (0, 1], got {v}")
        out.append(SummaryRow(label, 100 * comp, 100 * corr, harmonic_mean(comp, corr)))
    return out


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

EXPERT_COMMENT_HEADER = ["expert_id", "patient_id", "event_date", "comment_type", "importance", "issue_id", "scope", "text"]
VERDICT_HEADER = ["expert_id", "system_comment_id", "correctness", "importance", "note"]
SUPPORT_HEADER = ["issue_id", "experts", "detected_by_system"]
MENTIONS_HEADER = ["system_comment_id", "expert_id"]


def _rows(path, header: list[str]):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != header:
            raise EvalError(f"{path}: header must be {','.join(header)}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise EvalError(f"{path}: line {reader.line_num}: expected {len(header)} columns, got {len(row)}")
            yield reader.line_num, row


def _collect(path, header, parse):
    out, errors = [], []
    for line, row in _rows(path, header):
        try:
            out.append(parse(row))
        except (ValueError, KeyError) as exc:
            errors.append(f"{path}: line {line}: {exc}")
    if errors:
        raise EvalError("\n".join(errors))
    return out


def load_expert_comments(path) -> list[ExpertComment]:
    def parse(row):
        eid, pid, day, ctype, imp, issue, scope, text = row
        if imp not in IMPORTANCE:
            raise ValueError(f"importance must be one of {IMPORTANCE}, got {imp!r}")
        if scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
        if scope == "in-scope" and not issue:
            raise ValueError("in-scope comment without issue_id")
        if not eid:
            raise ValueError("empty expert_id")
        return ExpertComment(eid, pid, date.fromisoformat(day) if day else None, ctype, imp, issue, scope, text)

    return _collect(path, EXPERT_COMMENT_HEADER, parse)


def load_verdicts(path) -> list[Verdict]:
    def parse(row):
        eid, cid, corr, imp, note = row
        if imp not in IMPORTANCE:
            raise ValueError(f"importance must be one of {IMPORTANCE}, got {imp!r}")
        return Verdict(eid, int(cid), Correctness(corr), imp, note)

    verdicts = _collect(path, VERDICT_HEADER, parse)
    if not verdicts:
        raise EvalError(f"{path}: no verdicts")
    seen: set[tuple[str, int]] = set()
    for v in verdicts:
        key = (v.expert_id, v.system_comment_id)
        if key in seen:
            raise EvalError(f"{path}: duplicate verdict by {v.expert_id} on comment {v.system_comment_id}")
        seen.add(key)
    return verdicts


def load_support_table(path) -> dict[str, SupportEntry]:
    def parse(row):
        issue, experts, det = row
        names = frozenset(x for x in experts.split(";") if x)
        if not issue:
            raise ValueError("empty issue_id")
        if not names:
            raise ValueError(f"issue {issue!r} has no supporting experts")
        if det not in ("0", "1"):
            raise ValueError(f"detected_by_system must be 0 or 1, got {det!r}")
        return issue, SupportEntry(names, det == "1")

    table: dict[str, SupportEntry] = {}
    for issue, entry in _collect(path, SUPPORT_HEADER, parse):
        if issue in table:
            raise EvalError(f"{path}: duplicate issue {issue!r}")
        table[issue] = entry
    return table


def load_mentions(path) -> dict[str, set[int]]:
    out: dict[str, set[int]] = {}
    for cid, eid in _collect(path, MENTIONS_HEADER, lambda r: (int(r[0]), r[1])):
        out.setdefault(eid, set()).add(cid)
    return out
