import math

import numpy as np
import pytest

from ctxmi.corpus import Corpus, FeatureKind, Split, Utterance, WordRecord


def make_word(token, uid, pos, *, speaker="spk1", onset=None, offset=None, syllables=1, **feats):
    onset = float(pos) if onset is None else onset
    offset = onset + 0.4 if offset is None else offset
    features = {}
    for name, value in feats.items():
        features[FeatureKind(name)] = value
    return WordRecord(
        token=token,
        utterance_id=uid,
        speaker_id=speaker,
        position=pos,
        onset_s=onset,
        offset_s=offset,
        syllables=syllables,
        features=features,
    )


def make_utterance(tokens, uid="u0", *, speaker="spk1", values=None, kind=FeatureKind.PITCH):
    words = []
    for i, tok in enumerate(tokens):
        feats = {kind.value: values[i]} if values is not None else {}
        words.append(make_word(tok, uid, i, speaker=speaker, **feats))
    return Utterance(utterance_id=uid, speaker_id=speaker, words=tuple(words))


def make_corpus(utterances, split=Split.TRAIN):
    return Corpus(utterances=tuple(utterances), split=split)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance reporting: tests in test_acceptance.py register one line each


ACCEPTANCE_RESULTS: dict[str, str] = {}


def record_acceptance(criterion: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_RESULTS[criterion] = f"{status}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: [int(p) if p.isdigit() else p for p in k.split(".")]):
        terminalreporter.write_line(f"criterion {key}: {ACCEPTANCE_RESULTS[key]}")
