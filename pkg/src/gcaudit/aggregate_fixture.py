"""Row-level annotation fixture consistent with a published set of aggregate counts.

Only aggregates are available as targets (issue counts per support
level, per-expert mention histograms, verdict group counts and so on).  This
module builds one concrete dataset whose aggregates reproduce all of them,
so the evaluation pipeline can be exercised as a golden test.  The generated
files are committed under ``gcaudit/data/aggregates``; ``python -m
gcaudit.aggregate_fixture`` regenerates them byte for byte.
"""

from __future__ import annotations

import csv
import io
import random
from datetime import date, timedelta
from importlib import resources
from pathlib import Path

from .compliance import CommentType, CritiqueComment
from .evalstats import EXPERT_COMMENT_HEADER, MENTIONS_HEADER, SUPPORT_HEADER, VERDICT_HEADER
from .output import comment_to_line

EXPERTS = ("DE1", "DE2", "FM")
PATIENTS = tuple(f"P{i:02d}" for i in range(1, 11))
SEED = 2019

# (experts, detected by system, number of issues)
ISSUE_GROUPS = [
    (("DE1", "DE2", "FM"), True, 46),
    (("DE1", "DE2", "FM"), False, 1),
    (("DE1", "DE2"), False, 2),
    (("DE1", "FM"), False, 2),
    (("DE2", "FM"), False, 4),
    (("DE1", "DE2"), True, 9),
    (("DE1", "FM"), True, 10),
    (("DE2", "FM"), True, 21),
    (("DE1",), False, 2),
    (("DE2",), False, 11),
    (("FM",), False, 15),
    (("DE1",), True, 10),
    (("DE2",), True, 24),
    (("FM",), True, 21),
]
# all-three issues that appear in the support table without any expert comment row
UNCOMMENTED_FULL_ISSUES = 3
# extra comments an expert wrote on an already-covered, fully supported, detected issue
DUPLICATE_COMMENTS = {"DE1": 4, "DE2": 0, "FM": 5}

EXPERT_TYPE_QUOTA = {
    CommentType.LATE_ACTION: 118,
    CommentType.ACTION_ON_TIME: 61,
    CommentType.MISSING_ACTION: 59,
    CommentType.PATIENT_COMPLIANCE: 56,
    CommentType.NO_SUPPORT: 32,
    CommentType.REDUNDANT: 1,
    CommentType.EARLY_ACTION: 1,
    CommentType.GUIDELINE_CONTRADICTED: 1,
}
OTHER_SCOPES = {"DE1": (10, 7), "DE2": (11, 7), "FM": (10, 7)}  # (insight, out-of-scope)

# system comment stream: per-patient (monitoring, medication) counts
SYSTEM_COUNTS = [(15, 12), (20, 11), (16, 12), (15, 11), (19, 12), (15, 11), (16, 12), (19, 11), (15, 11), (15, 11)]
MONITORING_EVALUATED_PATIENTS = ("P02", "P05", "P08")

# DE1 rows x DE2 columns, order correct / partially-correct / not-correct
VERDICT_CONFUSION = [[139, 6, 0], [11, 6, 2], [1, 1, 6]]
# (DE1 important, DE2 important) -> count
IMPORTANCE_SPLIT = {(True, True): 153, (True, False): 7, (False, True): 7, (False, False): 5}
MENTIONS = {"DE1": 117, "DE2": 93, "FM": 86}

FILES = ("expert_comments.csv", "support.csv", "system_comments.jsonl", "verdicts.csv", "mentions.csv")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _issues() -> list[tuple[str, tuple[str, ...], bool]]:
    out = []
    n = 0
    for experts, detected, count in ISSUE_GROUPS:
        for _ in range(count):
            n += 1
            out.append((f"I{n:03d}", experts, detected))
    return out


def _assign_types(multiplicity: dict[str, int]) -> dict[str, CommentType]:
    """Give every issue one comment type so comment counts hit the quota exactly."""
    remaining = dict(EXPERT_TYPE_QUOTA)
    out = {}
    for issue in sorted(multiplicity, key=lambda i: (-multiplicity[i], i)):
        need = multiplicity[issue]
        kind = max((t for t in remaining if remaining[t] >= need), key=lambda t: (remaining[t], -list(CommentType).index(t)))
        remaining[kind] -= need
        out[issue] = kind
    assert not any(remaining.values())
    return out


def build_fixture() -> dict[str, str]:
    rng = random.Random(SEED)
    issues = _issues()
    start = date(2012, 1, 1)

    # expert comments
    owners: list[tuple[str, str]] = []  # (expert, issue) per comment
    for issue, experts, _ in issues:
        for e in experts:
            owners.append((e, issue))
    full_detected = [i for i, ex, det in issues if len(ex) == 3 and det]
    for e, k in DUPLICATE_COMMENTS.items():
        for issue in full_detected[:k]:
            owners.append((e, issue))
    multiplicity: dict[str, int] = {}
    for _, issue in owners:
        multiplicity[issue] = multiplicity.get(issue, 0) + 1
    types = _assign_types(multiplicity)

    patient_of = {issue: PATIENTS[n % len(PATIENTS)] for n, (issue, _, _) in enumerate(issues)}
    day_of = {issue: start + timedelta(days=rng.randrange(0, 5 * 365)) for issue, _, _ in issues}
    rows = []
    for e, issue in owners:
        importance = "important" if rng.random() < 0.85 else "less-important"
        rows.append([e, patient_of[issue], day_of[issue].isoformat(), types[issue].value, importance, issue,
                     "in-scope", f"{types[issue].value} noted for issue {issue}"])
    for e, (n_insight, n_oos) in OTHER_SCOPES.items():
        for k in range(n_insight + n_oos):
            scope = "insight" if k < n_insight else "out-of-scope"
            pid = PATIENTS[rng.randrange(len(PATIENTS))]
            day = start + timedelta(days=rng.randrange(0, 5 * 365))
            label = "Insight" if scope == "insight" else "Other"
            rows.append([e, pid, day.isoformat(), label, "less-important", "", scope, f"{scope} remark {k + 1}"])
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[5], r[6], r[7]))
    expert_csv = _csv(EXPERT_COMMENT_HEADER, rows)

    # support table, with the uncommented full-support issues appended
    support_rows = [[issue, ";".join(experts), int(det)] for issue, experts, det in issues]
    for k in range(UNCOMMENTED_FULL_ISSUES):
        support_rows.append([f"I{len(issues) + k + 1:03d}", ";".join(EXPERTS), 1])
    support_csv = _csv(SUPPORT_HEADER, support_rows)

    # system comment stream
    comments: list[CritiqueComment] = []
    monitoring = [("monitoring/hba1c-monitoring", "important"), ("monitoring/ldl-monitoring", "less-important"),
                  ("monitoring/kidney-function-monitoring", "important")]
    medication = [("drug-therapy/glycemic-control/initiate-metformin", "important"),
                  ("drug-therapy/intensive-glycemic-control/initiate-insulin-therapy", "important"),
                  ("drug-therapy/lipid-lowering/initiate-statin-therapy", "less-important"),
                  ("adherence/metformin", "important"), ("adherence/statin", "important")]
    mon_types = [CommentType.LATE_ACTION, CommentType.MISSING_ACTION, CommentType.ACTION_ON_TIME]
    med_types = [CommentType.MISSING_ACTION, CommentType.LATE_ACTION, CommentType.NO_SUPPORT,
                 CommentType.REDUNDANT, CommentType.GUIDELINE_CONTRADICTED]
    evaluated_ids: list[int] = []
    line = 0
    for pid, (n_mon, n_med) in zip(PATIENTS, SYSTEM_COUNTS):
        items = []
        days = sorted(rng.sample(range(0, 5 * 365), n_mon + n_med))
        kinds = ["mon"] * n_mon + ["med"] * n_med
        rng.shuffle(kinds)
        for day, kind in zip(days, kinds):
            when = start + timedelta(days=day)
            if kind == "mon":
                path, sev = monitoring[rng.randrange(len(monitoring))]
                ctype = mon_types[rng.randrange(len(mon_types))]
            else:
                path, sev = medication[rng.randrange(len(medication))]
                ctype = (CommentType.PATIENT_COMPLIANCE if path.startswith("adherence/")
                         else med_types[rng.randrange(len(med_types))])
            score = 1.0 if ctype is not CommentType.LATE_ACTION else round(rng.uniform(0.05, 0.95), 6)
            evidence = () if ctype is CommentType.MISSING_ACTION else (rng.randrange(0, 150),)
            text = f"{ctype.value} on {path}" + (f" (tx#{evidence[0]})" if evidence else "")
            items.append((kind, CritiqueComment(pid, ctype, when, path, score, sev, text, evidence)))
        items.sort(key=lambda it: it[1].sort_key())
        for kind, c in items:
            line += 1
            comments.append(c)
            if kind == "med" or pid in MONITORING_EVALUATED_PATIENTS:
                evaluated_ids.append(line)
    stream = "".join(comment_to_line(c) + "\n" for c in comments)

    # verdicts
    levels = ("correct", "partially-correct", "not-correct")
    pairs = [(levels[i], levels[j]) for i in range(3) for j in range(3) for _ in range(VERDICT_CONFUSION[i][j])]
    imps = [pair for pair, n in IMPORTANCE_SPLIT.items() for _ in range(n)]
    assert len(pairs) == len(imps) == len(evaluated_ids)
    rng.shuffle(pairs)
    rng.shuffle(imps)
    verdict_rows = []
    joint = []
    for cid, (c1, c2), (i1, i2) in zip(evaluated_ids, pairs, imps):
        verdict_rows.append(["DE1", cid, c1, "important" if i1 else "less-important", ""])
        verdict_rows.append(["DE2", cid, c2, "important" if i2 else "less-important", ""])
        if {c1, c2} <= {"correct", "partially-correct"} and "correct" in (c1, c2):
            joint.append(cid)
    verdict_csv = _csv(VERDICT_HEADER, verdict_rows)

    mention_rows = []
    for e in EXPERTS:
        for cid in sorted(rng.sample(joint, MENTIONS[e])):
            mention_rows.append([cid, e])
    mention_rows.sort()
    mentions_csv = _csv(MENTIONS_HEADER, mention_rows)

    return {
        "expert_comments.csv": expert_csv,
        "support.csv": support_csv,
        "system_comments.jsonl": stream,
        "verdicts.csv": verdict_csv,
        "mentions.csv": mentions_csv,
    }


def fixture_dir() -> Path:
    return Path(str(resources.files("gcaudit") / "data" / "aggregates"))


def write_fixture(directory: Path | str | None = None) -> Path:
    directory = Path(directory) if directory is not None else fixture_dir()
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in build_fixture().items():
        (directory / name).write_text(text, encoding="utf-8", newline="")
    return directory


if __name__ == "__main__":
    print(write_fixture())
