"""Word-level corpus model: on-disk format, validation, and feature transforms.

A corpus is a set of utterances, each an ordered list of word records with
timing, syllable counts and raw signal values. Files are UTF-8 JSON lines,
one word per line, with a sidecar manifest naming the split files.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MIN_UTTERANCE_WORDS = 3

# Fixed field order of the line format.
_FIELDS = (
    "utterance_id",
    "speaker_id",
    "position",
    "token",
    "onset_s",
    "offset_s",
    "syllables",
    "pitch",
    "energy",
    "prominence",
)


class CorpusError(Exception):
    """Invalid corpus data (file-level or record-level)."""


class CorpusFormatError(CorpusError):
    """A malformed line in a corpus file; carries path and line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class FeatureKind(enum.Enum):
    """The six word-level signals handled by the toolkit.

    PITCH, ENERGY and ABS_PROMINENCE are ingested raw; DURATION, PAUSE and
    REL_PROMINENCE are derived from timing / neighboring values.
    """

    PITCH = "pitch"
    ENERGY = "energy"
    DURATION = "duration"
    PAUSE = "pause"
    ABS_PROMINENCE = "abs_prominence"
    REL_PROMINENCE = "rel_prominence"


# Raw file column -> kind, for the three signals stored directly on disk.
RAW_COLUMNS: dict[str, FeatureKind] = {
    "pitch": FeatureKind.PITCH,
    "energy": FeatureKind.ENERGY,
    "prominence": FeatureKind.ABS_PROMINENCE,
}

DERIVED_KINDS = (FeatureKind.DURATION, FeatureKind.PAUSE, FeatureKind.REL_PROMINENCE)


@dataclass(frozen=True)
class WordRecord:
    """One word occurrence. `features` holds the current per-kind values;
    raw at load time, transformed copies after derivation / z-scoring."""

    token: str
    utterance_id: str
    speaker_id: str
    position: int
    onset_s: float
    offset_s: float
    syllables: int
    features: Mapping[FeatureKind, float] = field(default_factory=dict)

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    speaker_id: str
    words: tuple[WordRecord, ...]

    def __len__(self) -> int:
        return len(self.words)

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(w.token for w in self.words)


@dataclass(frozen=True)
class Corpus:
    """Immutable after load; transforms return new corpora."""

    utterances: tuple[Utterance, ...]
    split: Split

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def word_count(self) -> int:
        return sum(len(u) for u in self.utterances)

    def iter_words(self) -> Iterator[WordRecord]:
        for u in self.utterances:
            yield from u.words

    def speakers(self) -> list[str]:
        seen: dict[str, None] = {}
        for u in self.utterances:
            seen.setdefault(u.speaker_id, None)
        return list(seen)


# ---------------------------------------------------------------------------
# token normalization


def strip_punctuation(raw_token: str) -> str:
    """Remove punctuation codepoints (Unicode P* plus apostrophe) and lowercase.

    An empty result means the token was punctuation-only and should be dropped.
    """
    kept = [c for c in raw_token if not (unicodedata.category(c).startswith("P") or c == "'")]
    return "".join(kept).lower()


_VOWELS = set("aeiouy")


def heuristic_syllables(token: str) -> int:
    """Fallback syllable count: number of maximal vowel-letter runs, min 1.

    Only used when ingestion is explicitly told to fill missing counts.
    """
    runs = 0
    prev_vowel = False
    for c in token:
        is_vowel = c in _VOWELS
        if is_vowel and not prev_vowel:
            runs += 1
        prev_vowel = is_vowel
    return max(runs, 1)


# ---------------------------------------------------------------------------
# line format


def _fmt_float(x: float | None) -> str:
    # 17 significant digits: decimal form that round-trips the double exactly.
    return "null" if x is None else format(float(x), ".16e")


def format_record(rec: WordRecord) -> str:
    feats = rec.features
    return (
        "{"
        f'"utterance_id": {json.dumps(rec.utterance_id)}, '
        f'"speaker_id": {json.dumps(rec.speaker_id)}, '
        f'"position": {rec.position}, '
        f'"token": {json.dumps(rec.token, ensure_ascii=False)}, '
        f'"onset_s": {_fmt_float(rec.onset_s)}, '
        f'"offset_s": {_fmt_float(rec.offset_s)}, '
        f'"syllables": {rec.syllables}, '
        f'"pitch": {_fmt_float(feats.get(FeatureKind.PITCH))}, '
        f'"energy": {_fmt_float(feats.get(FeatureKind.ENERGY))}, '
        f'"prominence": {_fmt_float(feats.get(FeatureKind.ABS_PROMINENCE))}'
        "}"
    )


def _parse_line(path, lineno: int, line: str, *, allow_null_syllables: bool) -> WordRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(path, lineno, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise CorpusFormatError(path, lineno, "record is not an object")
    for key in _FIELDS:
        if key not in obj:
            raise CorpusFormatError(path, lineno, f"missing required field {key!r}")

    def _num(key, allow_null=False):
        v = obj[key]
        if v is None:
            if allow_null:
                return None
            raise CorpusFormatError(path, lineno, f"field {key!r} must not be null")
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            raise CorpusFormatError(path, lineno, f"field {key!r} is not a finite number")
        return float(v)

    position = obj["position"]
    if not isinstance(position, int) or position < 0:
        raise CorpusFormatError(path, lineno, "field 'position' must be a non-negative integer")
    syllables = obj["syllables"]
    if syllables is None and allow_null_syllables:
        syllables = 0  # filled later by the heuristic
    elif not isinstance(syllables, int) or syllables < 1:
        raise CorpusFormatError(path, lineno, "field 'syllables' must be an integer >= 1")

    onset = _num("onset_s")
    offset = _num("offset_s")
    if onset < 0:
        raise CorpusFormatError(path, lineno, "onset_s must be >= 0")
    if offset <= onset:
        raise CorpusFormatError(
            path, lineno, f"offset_s <= onset_s for token {obj['token']!r} in {obj['utterance_id']!r}"
        )
    feats = {}
    for col, kind in RAW_COLUMNS.items():
        v = _num(col, allow_null=True)
        if v is not None:
            feats[kind] = v
    if not isinstance(obj["token"], str) or not isinstance(obj["utterance_id"], str) or not isinstance(
        obj["speaker_id"], str
    ):
        raise CorpusFormatError(path, lineno, "token, utterance_id and speaker_id must be strings")
    return WordRecord(
        token=obj["token"],
        utterance_id=obj["utterance_id"],
        speaker_id=obj["speaker_id"],
        position=position,
        onset_s=onset,
        offset_s=offset,
        syllables=syllables,
        features=feats,
    )


def read_records(path, *, allow_null_syllables: bool = False) -> list[WordRecord]:
    """Parse a JSONL corpus file into records, without utterance-level checks."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            records.append(_parse_line(path, lineno, line, allow_null_syllables=allow_null_syllables))
    return records


def group_utterances(records: Sequence[WordRecord], *, source: str = "<records>") -> list[Utterance]:
    """Group consecutive records into utterances and validate ordering invariants.

    Records of one utterance must be contiguous, in position order 0..k-1,
    with non-decreasing onsets and a single speaker.
    """
    utts: list[Utterance] = []
    seen: set[str] = set()
    i = 0
    while i < len(records):
        uid = records[i].utterance_id
        if uid in seen:
            raise CorpusError(f"{source}: utterance {uid!r} appears in non-contiguous blocks")
        seen.add(uid)
        j = i
        while j < len(records) and records[j].utterance_id == uid:
            j += 1
        words = records[i:j]
        speaker = words[0].speaker_id
        prev_onset = -math.inf
        for k, w in enumerate(words):
            if w.position != k:
                raise CorpusError(
                    f"{source}: utterance {uid!r} has position {w.position} where {k} expected "
                    "(unsorted or gapped)"
                )
            if w.speaker_id != speaker:
                raise CorpusError(f"{source}: utterance {uid!r} mixes speakers {speaker!r} and {w.speaker_id!r}")
            if w.onset_s < prev_onset:
                raise CorpusError(
                    f"{source}: utterance {uid!r} word {w.token!r} at position {k} starts before its predecessor"
                )
            prev_onset = w.onset_s
        utts.append(Utterance(utterance_id=uid, speaker_id=speaker, words=tuple(words)))
        i = j
    return utts


def filter_short_utterances(utts: Iterable[Utterance], min_words: int = MIN_UTTERANCE_WORDS) -> list[Utterance]:
    kept, dropped = [], []
    for u in utts:
        (kept if len(u) >= min_words else dropped).append(u)
    if dropped:
        log.warning(
            "dropped %d utterance(s) with fewer than %d words: %s",
            len(dropped),
            min_words,
            ", ".join(u.utterance_id for u in dropped[:8]) + ("..." if len(dropped) > 8 else ""),
        )
    return kept


def load_corpus(path, split: Split, *, min_words: int = MIN_UTTERANCE_WORDS) -> Corpus:
    """Load and validate one split file. Utterances shorter than `min_words`
    are dropped with a warning."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    records = read_records(path)
    utts = group_utterances(records, source=str(path))
    utts = filter_short_utterances(utts, min_words)
    return Corpus(utterances=tuple(utts), split=split)


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for u in corpus.utterances:
            for w in u.words:
                fh.write(format_record(w) + "\n")


def save_manifest(directory, split_files: Mapping[Split, str], metadata: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "splits": {s.value: name for s, name in split_files.items()},
        "metadata": metadata or {},
    }
    out = directory / "manifest.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CorpusError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CorpusError(f"{path}: unsupported schema_version {manifest.get('schema_version')!r}")
    return manifest


def load_split(directory, split: Split, *, min_words: int = MIN_UTTERANCE_WORDS) -> Corpus:
    manifest = load_manifest(directory)
    try:
        name = manifest["splits"][split.value]
    except KeyError:
        raise CorpusError(f"manifest in {directory} has no {split.value!r} split") from None
    return load_corpus(Path(directory) / name, split, min_words=min_words)


# ---------------------------------------------------------------------------
# derived features


def per_syllable_duration(w: WordRecord) -> float:
    """Word duration divided by its syllable count."""
    if w.syllables < 1:
        raise CorpusError(f"word {w.token!r} in {w.utterance_id!r} has syllables < 1")
    return (w.offset_s - w.onset_s) / w.syllables


def compute_pause(u: Utterance) -> list[float | None]:
    """Gap to the next word's onset, per word. The final word has no pause
    sample (None). Negative gaps from overlapping alignments clamp to 0."""
    out: list[float | None] = []
    clamped = 0
    for i, w in enumerate(u.words):
        if i == len(u.words) - 1:
            out.append(None)
            continue
        gap = u.words[i + 1].onset_s - w.offset_s
        if gap < 0:
            clamped += 1
            gap = 0.0
        out.append(gap)
    if clamped:
        log.warning("utterance %s: clamped %d negative pause(s) to 0", u.utterance_id, clamped)
    return out


def relative_prominence(u: Utterance) -> list[float | None]:
    """Prominence minus the mean of up to three preceding words' prominence.

    The first word has no predecessors and gets no sample (None).
    """
    abs_vals = []
    for w in u.words:
        if FeatureKind.ABS_PROMINENCE not in w.features:
            raise CorpusError(f"utterance {u.utterance_id!r}: word {w.token!r} lacks a prominence value")
        abs_vals.append(w.features[FeatureKind.ABS_PROMINENCE])
    out: list[float | None] = []
    for i in range(len(abs_vals)):
        if i == 0:
            out.append(None)
            continue
        window = abs_vals[max(0, i - 3):i]
        out.append(abs_vals[i] - sum(window) / len(window))
    return out


def derive_features(corpus: Corpus) -> Corpus:
    """Attach DURATION, PAUSE and REL_PROMINENCE values to every record
    where they are defined. Raw kinds pass through unchanged."""
    new_utts = []
    for u in corpus.utterances:
        pauses = compute_pause(u)
        has_prom = all(FeatureKind.ABS_PROMINENCE in w.features for w in u.words)
        rels = relative_prominence(u) if has_prom else [None] * len(u)
        new_words = []
        for i, w in enumerate(u.words):
            feats = dict(w.features)
            feats[FeatureKind.DURATION] = per_syllable_duration(w)
            if pauses[i] is not None:
                feats[FeatureKind.PAUSE] = pauses[i]
            if rels[i] is not None:
                feats[FeatureKind.REL_PROMINENCE] = rels[i]
            new_words.append(replace(w, features=feats))
        new_utts.append(replace(u, words=tuple(new_words)))
    return Corpus(utterances=tuple(new_utts), split=corpus.split)


# ---------------------------------------------------------------------------
# per-speaker standardization


def speaker_stats(corpus: Corpus, kind: FeatureKind) -> dict[str, tuple[float, float]]:
    """Per-speaker (mean, population stddev) of a feature over this corpus.

    Statistics are meant to be computed on the training split and applied
    to every split of the same corpus.
    """
    values: dict[str, list[float]] = {}
    for u in corpus.utterances:
        for w in u.words:
            if kind in w.features:
                values.setdefault(u.speaker_id, []).append(w.features[kind])
    stats = {}
    for speaker, vals in values.items():
        if len(vals) < 2:
            raise CorpusError(f"speaker {speaker!r} has fewer than 2 values for {kind.value}")
        arr = np.asarray(vals, dtype=np.float64)
        mean = float(arr.mean())
        std = float(arr.std())  # population convention
        if std == 0.0:
            raise CorpusError(f"speaker {speaker!r} has zero variance for {kind.value}")
        stats[speaker] = (mean, std)
    return stats


def zscore_per_speaker(
    corpus: Corpus,
    kind: FeatureKind,
    stats: Mapping[str, tuple[float, float]] | None = None,
) -> Corpus:
    """Standardize one feature per speaker: (v - mean) / stddev.

    With `stats` omitted they are computed from this corpus (the training
    split); validation/test corpora must be given the training statistics.
    """
    if stats is None:
        stats = speaker_stats(corpus, kind)
    new_utts = []
    for u in corpus.utterances:
        new_words = []
        for w in u.words:
            if kind in w.features:
                if u.speaker_id not in stats:
                    raise CorpusError(
                        f"speaker {u.speaker_id!r} has no training statistics for {kind.value}"
                    )
                mean, std = stats[u.speaker_id]
                feats = dict(w.features)
                feats[kind] = (w.features[kind] - mean) / std
                w = replace(w, features=feats)
            new_words.append(w)
        new_utts.append(replace(u, words=tuple(new_words)))
    return Corpus(utterances=tuple(new_utts), split=corpus.split)


# ---------------------------------------------------------------------------
# model-facing views


@dataclass(frozen=True)
class UtteranceSeries:
    """Tokens plus the per-position value of one feature; NaN marks positions
    without a sample for that feature."""

    utterance_id: str
    tokens: tuple[str, ...]
    values: np.ndarray


def utterance_series(corpus: Corpus, kind: FeatureKind) -> list[UtteranceSeries]:
    out = []
    for u in corpus.utterances:
        vals = np.full(len(u), np.nan)
        for i, w in enumerate(u.words):
            if kind in w.features:
                vals[i] = w.features[kind]
        out.append(UtteranceSeries(u.utterance_id, u.tokens, vals))
    return out


def feature_values(corpus: Corpus, kind: FeatureKind) -> np.ndarray:
    """All defined values of a feature, flattened in corpus order."""
    chunks = [s.values[~np.isnan(s.values)] for s in utterance_series(corpus, kind)]
    if not chunks:
        return np.empty(0)
    return np.concatenate(chunks)
