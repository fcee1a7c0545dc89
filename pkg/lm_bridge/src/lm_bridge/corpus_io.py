"""Minimal reader for the word-level corpus interchange format.

One JSON object per line with fields utterance_id, speaker_id, position,
token, onset_s, offset_s, syllables, pitch, energy, prominence. The bridge
only needs tokens plus the target feature's per-word value; derived kinds
(duration, pause, relative prominence) are computed here from the raw
fields using the same rules the toolkit documents.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class UtteranceData:
    tokens: tuple[str, ...]
    values: tuple[float, ...]  # nan where the feature has no sample


def _derive(feature: str, rows: list[dict]) -> list[float]:
    nan = math.nan
    if feature in ("pitch", "energy"):
        return [row[feature] if row[feature] is not None else nan for row in rows]
    if feature == "abs_prominence":
        return [row["prominence"] if row["prominence"] is not None else nan for row in rows]
    if feature == "duration":
        return [(row["offset_s"] - row["onset_s"]) / row["syllables"] for row in rows]
    if feature == "pause":
        out = []
        for i, row in enumerate(rows):
            if i == len(rows) - 1:
                out.append(nan)
            else:
                out.append(max(rows[i + 1]["onset_s"] - row["offset_s"], 0.0))
        return out
    if feature == "rel_prominence":
        prom = [row["prominence"] for row in rows]
        if any(p is None for p in prom):
            return [nan] * len(rows)
        out = [nan]
        for i in range(1, len(prom)):
            window = prom[max(0, i - 3):i]
            out.append(prom[i] - sum(window) / len(window))
        return out
    raise ValueError(f"unknown feature {feature!r}")


def read_utterances(path, feature: str, min_words: int = 3) -> list[UtteranceData]:
    path = Path(path)
    groups: dict[str, list[dict]] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            uid = row["utterance_id"]
            if uid not in groups:
                groups[uid] = []
                order.append(uid)
            groups[uid].append(row)
    out = []
    for uid in order:
        rows = sorted(groups[uid], key=lambda r: r["position"])
        if len(rows) < min_words:
            continue
        values = _derive(feature, rows)
        out.append(UtteranceData(
            tokens=tuple(r["token"] for r in rows),
            values=tuple(values),
        ))
    return out
