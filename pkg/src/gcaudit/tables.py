"""Evaluation pipeline: annotation files in, statistics JSON and text tables out."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .compliance import CommentType, CritiqueComment
from .evalstats import (
    CompletenessRow, EvalError, ExpertComment, SupportEntry, Verdict, completeness_by_support, confusion,
    correctness_groups, importance_summary, indirect_completeness, indirect_correctness, jointly_correct,
    load_expert_comments, load_mentions, load_support_table, load_verdicts, nominal_weights, pair_verdicts,
    percent, required_raters, round_half_up, spearman_brown_multiplier, summary_profile, two_prop_z,
    weighted_kappa,
)
from .output import StreamFormatError, read_comments

KAPPA_TARGET = 0.7


@dataclass
class EvalInputs:
    expert_comments: list[ExpertComment]
    support: dict[str, SupportEntry]
    verdicts: list[Verdict]
    mentions: dict[str, set[int]]
    system_comments: list[CritiqueComment]
    reference: dict = field(default_factory=dict)


def load_inputs(expert_comments, support, verdicts, mentions, system_comments, reference=None) -> EvalInputs:
    try:
        with open(system_comments, encoding="utf-8") as fh:
            stream = read_comments(fh)
    except StreamFormatError as exc:
        raise EvalError(f"{system_comments}: {exc}") from None
    ref = {}
    if reference is not None:
        with open(reference, encoding="utf-8") as fh:
            ref = json.load(fh)
    return EvalInputs(load_expert_comments(expert_comments), load_support_table(support), load_verdicts(verdicts),
                      load_mentions(mentions), stream, ref)


def load_directory(directory) -> EvalInputs:
    """Load the five annotation files (and ``reference.json`` when present) from one directory."""
    d = Path(directory)
    ref = d / "reference.json"
    return load_inputs(d / "expert_comments.csv", d / "support.csv", d / "verdicts.csv", d / "mentions.csv",
                       d / "system_comments.jsonl", ref if ref.exists() else None)


def _is_monitoring(c: CritiqueComment) -> bool:
    return c.guideline_path.startswith("monitoring/")


def evaluate(inputs: EvalInputs) -> dict:
    """All statistics as a JSON-ready dict (fractions at full precision, percentages half-up)."""
    notes: list[str] = []
    stream = inputs.system_comments
    n_stream = len(stream)
    ids = set(range(1, n_stream + 1))
    judged = {v.system_comment_id for v in inputs.verdicts}
    unknown = sorted(judged - ids)
    if unknown:
        raise EvalError(f"verdicts refer to comment ids not in the system stream (1..{n_stream}): {unknown[:10]}")

    ec = inputs.expert_comments
    in_scope = [c for c in ec if c.scope == "in-scope"]
    experts = sorted({c.expert_id for c in in_scope})
    scope_counts = Counter(c.scope for c in ec)
    type_counts = Counter(c.comment_type for c in in_scope)
    known = [t.value for t in CommentType]
    table1 = [{"type": t, "count": type_counts.get(t, 0), "fraction": type_counts.get(t, 0) / len(in_scope)}
              for t in sorted(type_counts, key=lambda t: (-type_counts[t], known.index(t) if t in known else 99, t))]

    referenced = {c.issue_id for c in in_scope}
    orphans = sorted(set(inputs.support) - referenced)
    if orphans:
        notes.append(f"{len(orphans)} support-table issue(s) have no expert comment rows: {', '.join(orphans)}; "
                     "they count towards completeness but not towards indirect correctness")

    # completeness by level of support
    support_rows = completeness_by_support(inputs.support, len(experts))
    by_level = {r.level: r for r in support_rows}
    ztests = []
    for hi in sorted(by_level, reverse=True):
        lo = hi - 1
        if lo in by_level:
            a, b = by_level[hi], by_level[lo]
            try:
                z = two_prop_z(a.detected, a.issues, b.detected, b.issues)
            except EvalError as exc:
                notes.append(f"z-test level {hi} vs {lo} skipped: {exc}")
                continue
            ztests.append({"levels": [hi, lo], "z": z.z, "p": z.p_two_sided, "pooled": z.pooled_proportion})
    majority = (len(experts) // 2) + 1
    maj_rows = [r for r in support_rows if r.level >= majority]
    system_completeness = maj_rows[0].cumulative_fraction if maj_rows else None

    # correctness and importance of system comments
    pairs = pair_verdicts(inputs.verdicts)
    raters = list(next(iter(pairs.values())))
    rater_ids = [v.expert_id for v in raters]
    groups = correctness_groups(inputs.verdicts)
    per_rater = {}
    for k, eid in enumerate(rater_ids):
        cnt = Counter(p[k].correctness.value for p in pairs.values())
        per_rater[eid] = {lvl: {"count": cnt.get(lvl, 0), "pct": percent(cnt.get(lvl, 0), len(pairs))}
                          for lvl in ("correct", "partially-correct", "not-correct")}
    conf = confusion(pairs)
    diag = sum(conf[i][i] for i in range(3))
    none_agree = conf[0][2] + conf[2][0]
    kw = None
    try:
        kw = weighted_kappa(conf)
    except EvalError as exc:
        notes.append(f"weighted kappa undefined: {exc}")
    imp = importance_summary(inputs.verdicts)
    conf_imp = confusion(pairs, "importance")
    k_imp = None
    try:
        k_imp = weighted_kappa(conf_imp, nominal_weights(2))
    except EvalError as exc:
        notes.append(f"importance kappa undefined: {exc}")
    sb = None
    if k_imp is not None and 0 < k_imp.kappa < KAPPA_TARGET:
        m = spearman_brown_multiplier(k_imp.kappa, KAPPA_TARGET)
        sb = {"kappa_observed": k_imp.kappa, "target": KAPPA_TARGET, "multiplier": m,
              "raters_now": len(rater_ids), "raters_needed": required_raters(len(rater_ids), m)}
    system_correctness = groups[1].cumulative / groups[1].total

    # indirect measures
    ind_corr = indirect_correctness(ec, inputs.support, experts)
    joint = jointly_correct(inputs.verdicts)
    mentions = {e: inputs.mentions.get(e, set()) for e in experts}
    ind_comp, combined = indirect_completeness(joint, mentions)
    comp_by = {r.label: r for r in ind_comp}

    profile_rows = []
    if system_completeness is not None:
        profile_rows.append(("system", system_completeness, system_correctness))
    for r in ind_corr:
        profile_rows.append((r.expert_id, comp_by[r.expert_id].fraction, r.fraction_with_system))
    profile = summary_profile(profile_rows)

    monitoring = [i for i, c in enumerate(stream, 1) if _is_monitoring(c)]
    stats = {
        "system_stream": {
            "comments": n_stream,
            "monitoring": len(monitoring),
            "medication": n_stream - len(monitoring),
            "evaluated": len(pairs),
            "evaluated_monitoring": len(set(monitoring) & set(pairs)),
            "evaluated_medication": len(set(pairs) - set(monitoring)),
            "by_type": {t.value: sum(c.comment_type is t for c in stream) for t in CommentType},
        },
        "expert_comments": {
            "total": len(ec),
            "by_scope": {s: scope_counts.get(s, 0) for s in ("in-scope", "out-of-scope", "insight")},
            "by_expert": {e: sum(c.expert_id == e for c in in_scope) for e in experts},
            "types": [dict(row, pct=percent(row["count"], len(in_scope))) for row in table1],
            "unique_issues": len(inputs.support),
        },
        "completeness": {
            "levels": [{"level": r.level, "issues": r.issues, "detected": r.detected,
                        "exact_fraction": r.exact_fraction, "exact_pct": r.exact_pct,
                        "cumulative_fraction": r.cumulative_fraction, "cumulative_pct": r.cumulative_pct}
                       for r in support_rows],
            "total_issues": sum(r.issues for r in support_rows),
            "total_detected": sum(r.detected for r in support_rows),
            "majority_level": majority,
            "majority_fraction": system_completeness,
            "z_tests": ztests,
        },
        "correctness": {
            "raters": rater_ids,
            "groups": [{"label": g.label, "count": g.count, "pct": g.pct, "cumulative": g.cumulative,
                        "cumulative_pct": g.cumulative_pct} for g in groups],
            "total": len(pairs),
            "per_rater": per_rater,
            "agreement": {"full": diag, "partial": len(pairs) - diag - none_agree, "none": none_agree},
            "confusion": conf,
            "weighted_kappa": None if kw is None else kw.kappa,
            "system_fraction": system_correctness,
        },
        "importance": {
            "both": imp.both, "one": imp.one, "none": imp.none, "pcts": list(imp.pcts()),
            "important_votes": imp.important_votes, "total_votes": imp.total_votes,
            "voting_score": imp.voting_score,
            "agreement": conf_imp[0][0] + conf_imp[1][1],
            "confusion": conf_imp,
            "kappa": None if k_imp is None else k_imp.kappa,
            "spearman_brown": sb,
        },
        "indirect_correctness": [
            {"expert": r.expert_id, "total": r.total, "with_system": list(r.with_system),
             "experts_only": list(r.experts_only), "fraction_with_system": r.fraction_with_system,
             "fraction_experts_only": r.fraction_experts_only, "pct_with_system": r.pcts[0],
             "pct_experts_only": r.pcts[1]} for r in ind_corr
        ],
        "indirect_completeness": {
            "jointly_correct": len(joint),
            "experts": [_comp_json(r) for r in ind_comp],
            "combined": _comp_json(combined),
        },
        "summary": [{"label": s.label, "completeness_pct": s.completeness_pct, "correctness_pct": s.correctness_pct,
                     "harmonic_mean": s.harmonic_mean, "harmonic_mean_2dp": s.harmonic_mean_2dp} for s in profile],
    }
    notes += check_reference(stats, inputs.reference)
    stats["notes"] = notes
    return stats


def _comp_json(r: CompletenessRow) -> dict:
    return {"label": r.label, "mentioned": r.mentioned, "total": r.total, "fraction": r.fraction, "pct": r.pct}


def _lookup(stats: dict, path: str):
    node = stats
    for part in path.split("."):
        if isinstance(node, list):
            if part.isdigit():
                node = node[int(part)]
            else:
                node = next(x for x in node if part in (x.get("label"), x.get("expert"), str(x.get("level"))))
        else:
            node = node[part]
    return node


def check_reference(stats: dict, reference: dict) -> list[str]:
    """Compare computed values against expected ones; one note per mismatch.

    ``reference`` maps a dotted path into ``stats`` to either an exact value
    or ``{"value": x, "tol": t}``.  A ``"why"`` string on an entry is appended
    to its note.
    """
    if not reference:
        return []
    notes = []
    matched = 0
    for path, want in reference.get("expected", {}).items():
        why = ""
        tol = None
        if isinstance(want, dict):
            why = want.get("why", "")
            tol = want.get("tol")
            want = want["value"]
        try:
            got = _lookup(stats, path)
        except (KeyError, IndexError, StopIteration, TypeError):
            notes.append(f"reference: {path} not computed")
            continue
        ok = got == want if tol is None else (got is not None and abs(got - want) <= tol)
        if ok:
            matched += 1
        else:
            msg = f"reference: {path} computed {got!r}, expected {want!r}"
            notes.append(msg + (f" ({why})" if why else ""))
    notes.insert(0, f"reference check: {matched} of {len(reference.get('expected', {}))} values match")
    return notes


# ---------------------------------------------------------------------------
# Text rendering
# ---------------------------------------------------------------------------


def _fmt_pct(count: int, total: int) -> str:
    p = percent(count, total)
    if p == 0 and count:
        return f"{round_half_up(100 * count / total, 1):.1f}%"
    return f"{p}%"


def _table(header: list[str], rows: list[list], title: str) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    out = [title, ""]
    for n, r in enumerate(cells):
        out.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def render_tables(stats: dict) -> str:
    parts = []
    e = stats["expert_comments"]
    n_in = e["by_scope"]["in-scope"]
    rows = [[t["type"], t["count"], _fmt_pct(t["count"], n_in)] for t in e["types"]]
    rows.append(["All", n_in, "100%"])
    parts.append(_table(["Comment type", "Comments", "%"], rows,
                        f"Table 1. Expert comments by type (in-scope {n_in} of {e['total']}; "
                        f"insight {e['by_scope']['insight']}, out-of-scope {e['by_scope']['out-of-scope']})"))

    c = stats["completeness"]
    rows = [[f"support {r['level']}", r["issues"], r["detected"], f"{r['exact_pct']}%", f"{r['cumulative_pct']}%"]
            for r in c["levels"]]
    rows.append(["All", c["total_issues"], c["total_detected"], "", ""])
    t2 = _table(["Level", "Unique issues", "Detected", "Exact level", "Level or higher"], rows,
                "Table 2. System completeness by number of supporting experts")
    for z in c["z_tests"]:
        t2 += f"z-test level {z['levels'][0]} vs {z['levels'][1]}: z = {z['z']:.2f}, p = {z['p']:.3f}\n"
    if c["majority_fraction"] is not None:
        t2 += f"majority (>= {c['majority_level']} experts) completeness: {round_half_up(100 * c['majority_fraction']):.0f}%\n"
    parts.append(t2)

    k = stats["correctness"]
    rows = [[g["label"], g["count"], f"{g['pct']}%", f"{g['cumulative_pct']}%"] for g in k["groups"]]
    rows.append(["All", k["total"], "100%", ""])
    t3 = _table(["Verdict combination", "Comments", "%", "Cumulative %"], rows,
                f"Table 3. Correctness of system comments ({' and '.join(k['raters'])})")
    for rid, d in k["per_rater"].items():
        t3 += f"{rid}: " + ", ".join(f"{lvl} {v['pct']}%" for lvl, v in d.items()) + "\n"
    a = k["agreement"]
    wk = "undefined" if k["weighted_kappa"] is None else f"{k['weighted_kappa']:.2f}"
    t3 += (f"agreement: full {a['full']}, partial {a['partial']}, none {a['none']} of {k['total']}; "
           f"weighted kappa = {wk}\n")
    parts.append(t3)

    i = stats["importance"]
    pb, po, pn, pv = i["pcts"]
    ti = (f"Importance. both important {i['both']} ({pb}%), one {i['one']} ({po}%), neither {i['none']} ({pn}%); "
          f"voting score {i['important_votes']}/{i['total_votes']} = {pv}%\n")
    if i["kappa"] is not None:
        ti += f"agreement {i['agreement']} of {i['both'] + i['one'] + i['none']}; kappa = {i['kappa']:.2f}\n"
    if i["spearman_brown"]:
        s = i["spearman_brown"]
        ti += (f"Spearman-Brown to kappa {s['target']}: multiply raters by {s['multiplier']:.2f} "
               f"({s['raters_now']} -> {s['raters_needed']})\n")
    parts.append(ti)

    ic = stats["indirect_correctness"]
    header = ["Mentioned by"] + [r["expert"] for r in ic]
    rows = [["All comments"] + [r["total"] for r in ic]]
    depth = len(ic[0]["with_system"])
    for m in range(depth):
        row = [f"{m} other agents / experts"]
        for r in ic:
            only = r["experts_only"][m] if m < len(r["experts_only"]) else "NA"
            row.append(f"{r['with_system'][m]} / {only}")
        rows.append(row)
    rows.append([">= 1 other agent / expert"] + [f"{r['pct_with_system']}% / {r['pct_experts_only']}%" for r in ic])
    parts.append(_table(header, rows, "Table 4. Indirect correctness of experts (with system / experts only)"))

    cp = stats["indirect_completeness"]
    cols = cp["experts"] + [cp["combined"]]
    rows = [
        ["jointly correct, mentioned"] + [r["mentioned"] for r in cols],
        ["jointly correct, not mentioned"] + [r["total"] - r["mentioned"] for r in cols],
        ["jointly correct, total"] + [r["total"] for r in cols],
        ["indirect completeness"] + [f"{r['pct']}%" for r in cols],
    ]
    parts.append(_table([""] + [r["label"] for r in cols], rows, "Table 5. Indirect completeness of experts"))

    rows = [[s["label"], f"{round_half_up(s['completeness_pct']):.0f}", f"{round_half_up(s['correctness_pct']):.0f}",
             f"{s['harmonic_mean_2dp']:.2f}"] for s in stats["summary"]]
    parts.append(_table(["Agent", "Completeness %", "Correctness %", "Harmonic mean"], rows,
                        "Table 6. Completeness and correctness summary"))

    if stats["notes"]:
        parts.append("Notes\n\n" + "\n".join(f"- {n}" for n in stats["notes"]) + "\n")
    return "\n".join(parts)


def dumps_stats(stats: dict) -> str:
    return json.dumps(_clean(stats), indent=2, ensure_ascii=False) + "\n"


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x
