"""Comment stream serialization (JSON Lines) and the per-patient text report."""

from __future__ import annotations

import json
from collections import Counter
from datetime import date
from itertools import groupby
from typing import Iterable, TextIO

from .compliance import CommentType, CritiqueComment

FIELDS = ("patient_id", "comment_type", "event_date", "guideline_path", "score", "severity", "explanation", "evidence")


class StreamFormatError(ValueError):
    pass


def comment_to_line(c: CritiqueComment) -> str:
    """One JSON object, keys in the fixed field order, score to 6 decimals."""
    # score is spliced in pre-formatted so the text is stable across platforms
    parts = [
        f'"patient_id": {json.dumps(c.patient_id, ensure_ascii=False)}',
        f'"comment_type": "{c.comment_type.value}"',
        f'"event_date": "{c.event_date.isoformat()}"',
        f'"guideline_path": {json.dumps(c.guideline_path, ensure_ascii=False)}',
        f'"score": {c.score:.6f}',
        f'"severity": {json.dumps(c.severity)}',
        f'"explanation": {json.dumps(c.explanation, ensure_ascii=False)}',
        f'"evidence": {json.dumps(list(c.evidence))}',
    ]
    return "{" + ", ".join(parts) + "}"


def line_to_comment(line: str) -> CritiqueComment:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise StreamFormatError(f"not JSON: {exc.msg}") from None
    if not isinstance(obj, dict) or tuple(obj) != FIELDS:
        raise StreamFormatError(f"expected keys {', '.join(FIELDS)}")
    try:
        kind = CommentType(obj["comment_type"])
        day = date.fromisoformat(obj["event_date"])
    except ValueError as exc:
        raise StreamFormatError(str(exc)) from None
    score = obj["score"]
    if not isinstance(score, (int, float)) or not 0 <= score <= 1:
        raise StreamFormatError(f"score out of range: {score!r}")
    evidence = obj["evidence"]
    if not isinstance(evidence, list) or not all(isinstance(i, int) for i in evidence):
        raise StreamFormatError("evidence must be a list of transaction indices")
    return CritiqueComment(obj["patient_id"], kind, day, obj["guideline_path"], float(score), obj["severity"],
                           obj["explanation"], tuple(evidence))


def write_comments(comments: Iterable[CritiqueComment], out: TextIO) -> int:
    n = 0
    for c in comments:
        out.write(comment_to_line(c))
        out.write("\n")
        n += 1
    return n


def read_comments(stream: TextIO) -> list[CritiqueComment]:
    """Parse a comment stream; errors name the offending line number."""
    out = []
    for n, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            out.append(line_to_comment(line))
        except StreamFormatError as exc:
            raise StreamFormatError(f"line {n}: {exc}") from None
    return out


def count_by_type(comments: Iterable[CritiqueComment]) -> dict[str, int]:
    counts = Counter(c.comment_type.value for c in comments)
    return {t.value: counts.get(t.value, 0) for t in CommentType}


def render_report(comments: Iterable[CritiqueComment]) -> str:
    """Plain-text report, one block per patient in stream order."""
    lines: list[str] = []
    for pid, group in groupby(comments, key=lambda c: c.patient_id):
        group = list(group)
        counts = Counter(c.comment_type.value for c in group)
        summary = ", ".join(f"{k} {v}" for k, v in sorted(counts.items()))
        lines.append(f"Patient {pid}: {len(group)} comments ({summary})")
        for c in group:
            lines.append(f"  {c.event_date.isoformat()}  {c.comment_type.value:<21} {c.guideline_path}")
            lines.append(f"      score {c.score:.3f}, {c.severity}: {c.explanation}")
        lines.append("")
    if not lines:
        return "No comments.\n"
    return "\n".join(lines)
