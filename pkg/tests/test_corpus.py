import json
import logging
import math

import numpy as np
import pytest

from ctxmi.corpus import (
    Corpus,
    CorpusError,
    CorpusFormatError,
    FeatureKind,
    Split,
    compute_pause,
    derive_features,
    feature_values,
    format_record,
    heuristic_syllables,
    load_corpus,
    load_split,
    per_syllable_duration,
    relative_prominence,
    save_corpus,
    save_manifest,
    speaker_stats,
    strip_punctuation,
    utterance_series,
    zscore_per_speaker,
)

from conftest import make_corpus, make_utterance, make_word


def _write_lines(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _row(uid, pos, token, *, speaker="s1", onset=None, offset=None, syllables=1,
         pitch=0.5, energy=None, prominence=None):
    onset = float(pos) if onset is None else onset
    offset = onset + 0.4 if offset is None else offset
    return {
        "utterance_id": uid,
        "speaker_id": speaker,
        "position": pos,
        "token": token,
        "onset_s": onset,
        "offset_s": offset,
        "syllables": syllables,
        "pitch": pitch,
        "energy": energy,
        "prominence": prominence,
    }


class TestLoadCorpus:
    def test_minimal_file(self, tmp_path):
        path = tmp_path / "c.jsonl"
        _write_lines(path, [_row("u1", i, t) for i, t in enumerate(["a", "b", "c"])])
        c = load_corpus(path, Split.TRAIN)
        assert len(c) == 1
        assert c.word_count == 3
        assert c.utterances[0].tokens == ("a", "b", "c")

    def test_short_utterance_dropped_with_warning(self, tmp_path, caplog):
        path = tmp_path / "c.jsonl"
        rows = [_row("u1", i, t) for i, t in enumerate(["a", "b"])]
        rows += [_row("u2", i, t) for i, t in enumerate(["a", "b", "c"])]
        _write_lines(path, rows)
        with caplog.at_level(logging.WARNING):
            c = load_corpus(path, Split.TRAIN)
        assert len(c) == 1
        assert c.utterances[0].utterance_id == "u2"
        assert any("u1" in rec.message for rec in caplog.records)

    def test_offset_not_after_onset_is_error(self, tmp_path):
        path = tmp_path / "c.jsonl"
        rows = [_row("u1", i, t) for i, t in enumerate(["a", "b", "c"])]
        rows[1]["offset_s"] = rows[1]["onset_s"]
        _write_lines(path, rows)
        with pytest.raises(CorpusFormatError, match="offset_s <= onset_s"):
            load_corpus(path, Split.TRAIN)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "c.jsonl"
        with open(path, "w") as fh:
            fh.write(json.dumps(_row("u1", 0, "a")) + "\n")
            fh.write("{{{not json\n")
        with pytest.raises(CorpusFormatError, match=r":2:"):
            load_corpus(path, Split.TRAIN)

    def test_missing_field_is_error(self, tmp_path):
        path = tmp_path / "c.jsonl"
        row = _row("u1", 0, "a")
        del row["syllables"]
        _write_lines(path, [row])
        with pytest.raises(CorpusFormatError, match="syllables"):
            load_corpus(path, Split.TRAIN)

    def test_position_gap_is_error(self, tmp_path):
        path = tmp_path / "c.jsonl"
        rows = [_row("u1", p, t) for p, t in [(0, "a"), (2, "b"), (3, "c")]]
        _write_lines(path, rows)
        with pytest.raises(CorpusError, match="position"):
            load_corpus(path, Split.TRAIN)

    def test_decreasing_onsets_are_error(self, tmp_path):
        path = tmp_path / "c.jsonl"
        rows = [
            _row("u1", 0, "a", onset=0.0, offset=0.4),
            _row("u1", 1, "b", onset=1.0, offset=1.4),
            _row("u1", 2, "c", onset=0.5, offset=1.6),
        ]
        _write_lines(path, rows)
        with pytest.raises(CorpusError, match="starts before"):
            load_corpus(path, Split.TRAIN)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorpusError, match="not found"):
            load_corpus(tmp_path / "nope.jsonl", Split.TRAIN)

    def test_round_trip_is_bit_exact(self, tmp_path):
        from ctxmi.corpus import Utterance

        rng = np.random.default_rng(3)
        utts = []
        for ui in range(4):
            words = []
            onset = float(rng.random())
            for i in range(5):
                offset = onset + float(rng.random()) + 1e-9
                words.append(make_word(
                    f"tok{i}", f"u{ui}", i, onset=onset, offset=offset,
                    syllables=int(rng.integers(1, 4)),
                    pitch=float(rng.standard_normal()),
                    energy=float(rng.standard_normal()),
                    abs_prominence=float(rng.standard_normal()),
                ))
                onset = offset + float(rng.random()) * 0.2
            utts.append(Utterance(utterance_id=f"u{ui}", speaker_id="spk1", words=tuple(words)))
        c = make_corpus(utts)
        p1 = tmp_path / "a.jsonl"
        p2 = tmp_path / "b.jsonl"
        save_corpus(c, p1)
        reloaded = load_corpus(p1, Split.TRAIN)
        save_corpus(reloaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for w_orig, w_new in zip(c.iter_words(), reloaded.iter_words()):
            assert w_orig == w_new

    def test_manifest_round_trip(self, tmp_path):
        c = make_corpus([make_utterance(["a", "b", "c"], uid="u1")])
        save_corpus(c, tmp_path / "train.jsonl")
        save_manifest(tmp_path, {Split.TRAIN: "train.jsonl"})
        c2 = load_split(tmp_path, Split.TRAIN)
        assert c2.utterances[0].tokens == ("a", "b", "c")


class TestStripPunctuation:
    def test_trailing_comma(self):
        assert strip_punctuation("Hello,") == "hello"

    def test_punctuation_only(self):
        assert strip_punctuation("—") == ""

    def test_apostrophe(self):
        assert strip_punctuation("don't") == "dont"
        assert strip_punctuation("don’t") == "dont"

    def test_idempotent_on_random_text(self, rng):
        pool = list("abcXYZ083,.!?'—¿é“”-") + ["don't"]
        for _ in range(300):
            s = "".join(rng.choice(pool) for _ in range(int(rng.integers(0, 12))))
            once = strip_punctuation(s)
            assert strip_punctuation(once) == once


class TestPause:
    @staticmethod
    def _two_word_utt(second_onset):
        from ctxmi.corpus import Utterance

        words = (
            make_word("a", "u", 0, onset=0.0, offset=1.0),
            make_word("b", "u", 1, onset=second_onset, offset=second_onset + 1.0),
        )
        return Utterance(utterance_id="u", speaker_id="spk1", words=words)

    def test_direct_subtraction(self):
        pauses = compute_pause(self._two_word_utt(1.3))
        assert pauses[0] == pytest.approx(0.3)
        assert pauses[1] is None

    def test_contiguous_words_have_zero_pause(self):
        assert compute_pause(self._two_word_utt(1.0))[0] == 0.0

    def test_negative_gap_clamps_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            pauses = compute_pause(self._two_word_utt(0.9))
        assert pauses[0] == 0.0
        assert any("clamped" in rec.message for rec in caplog.records)

    def test_sample_count_is_words_minus_one(self, rng):
        for _ in range(20):
            k = int(rng.integers(3, 9))
            u = make_utterance([f"t{i}" for i in range(k)])
            pauses = compute_pause(u)
            assert sum(p is not None for p in pauses) == k - 1


class TestPerSyllableDuration:
    @pytest.mark.parametrize(
        "dur,syl,expected", [(0.6, 2, 0.3), (0.25, 1, 0.25), (0.9, 3, 0.3)]
    )
    def test_examples(self, dur, syl, expected):
        w = make_word("a", "u", 0, onset=0.0, offset=dur, syllables=syl)
        assert per_syllable_duration(w) == pytest.approx(expected)

    def test_invalid_syllables(self):
        w = make_word("a", "u", 0, syllables=0)
        with pytest.raises(CorpusError, match="syllables"):
            per_syllable_duration(w)


class TestZScore:
    def test_hand_computed_population_stddev(self):
        # speaker values {1,2,3}: mean 2, population stddev sqrt(2/3)
        u = make_utterance(["a", "b", "c"], values=[1.0, 2.0, 3.0])
        c = make_corpus([u])
        z = zscore_per_speaker(c, FeatureKind.PITCH)
        got = [w.features[FeatureKind.PITCH] for w in z.iter_words()]
        assert got[0] == pytest.approx(-1.224744871391589, abs=1e-12)
        assert got[1] == pytest.approx(0.0, abs=1e-12)
        assert got[2] == pytest.approx(1.224744871391589, abs=1e-12)

    def test_zero_variance_names_speaker(self):
        u = make_utterance(["a", "b", "c"], values=[2.0, 2.0, 2.0], speaker="flat_spk")
        with pytest.raises(CorpusError, match="flat_spk"):
            zscore_per_speaker(make_corpus([u]), FeatureKind.PITCH)

    def test_single_speaker_equals_global(self, rng):
        vals = rng.standard_normal(12).tolist()
        u1 = make_utterance([f"a{i}" for i in range(6)], uid="u1", values=vals[:6])
        u2 = make_utterance([f"b{i}" for i in range(6)], uid="u2", values=vals[6:])
        c = make_corpus([u1, u2])
        z = zscore_per_speaker(c, FeatureKind.PITCH)
        arr = np.array(vals)
        expected = (arr - arr.mean()) / arr.std()
        got = [w.features[FeatureKind.PITCH] for w in z.iter_words()]
        assert np.allclose(got, expected, atol=1e-12)

    def test_train_stats_apply_to_other_split(self):
        train = make_corpus([make_utterance(["a", "b", "c"], uid="t", values=[1.0, 2.0, 3.0])])
        test = make_corpus(
            [make_utterance(["x", "y", "z"], uid="s", values=[2.0, 4.0, 6.0])], split=Split.TEST
        )
        stats = speaker_stats(train, FeatureKind.PITCH)
        z = zscore_per_speaker(test, FeatureKind.PITCH, stats)
        std = math.sqrt(2.0 / 3.0)
        got = [w.features[FeatureKind.PITCH] for w in z.iter_words()]
        assert got == pytest.approx([0.0, 2.0 / std, 4.0 / std])

    def test_missing_speaker_stats_is_error(self):
        train = make_corpus([make_utterance(["a", "b", "c"], uid="t", values=[1.0, 2.0, 3.0])])
        test = make_corpus(
            [make_utterance(["x", "y", "z"], uid="s", values=[1.0, 2.0, 3.0], speaker="other")],
            split=Split.TEST,
        )
        stats = speaker_stats(train, FeatureKind.PITCH)
        with pytest.raises(CorpusError, match="other"):
            zscore_per_speaker(test, FeatureKind.PITCH, stats)

    def test_post_transform_moments(self, rng):
        utts = []
        for s, speaker in enumerate(["sp1", "sp2", "sp3"]):
            for ui in range(3):
                vals = (rng.standard_normal(8) * (s + 1) + 5 * s).tolist()
                utts.append(
                    make_utterance(
                        [f"w{i}" for i in range(8)], uid=f"{speaker}_u{ui}",
                        speaker=speaker, values=vals,
                    )
                )
        c = make_corpus(utts)
        z = zscore_per_speaker(c, FeatureKind.PITCH)
        by_speaker = {}
        for u in z.utterances:
            for w in u.words:
                by_speaker.setdefault(u.speaker_id, []).append(w.features[FeatureKind.PITCH])
        for vals in by_speaker.values():
            arr = np.asarray(vals)
            assert abs(arr.mean()) < 1e-9
            assert abs(arr.std() - 1.0) < 1e-9


class TestRelativeProminence:
    def _utt(self, prom):
        from ctxmi.corpus import Utterance

        words = tuple(
            make_word(f"t{i}", "u", i, abs_prominence=v) for i, v in enumerate(prom)
        )
        return Utterance(utterance_id="u", speaker_id="spk1", words=words)

    def test_three_predecessors(self):
        rel = relative_prominence(self._utt([1.0, 2.0, 3.0, 4.0]))
        assert rel[3] == pytest.approx(2.0)

    def test_constant_signal(self):
        rel = relative_prominence(self._utt([5.0, 5.0, 5.0, 5.0]))
        assert rel[0] is None
        assert all(v == pytest.approx(0.0) for v in rel[1:])

    def test_short_history_uses_available(self):
        rel = relative_prominence(self._utt([1.0, 3.0]))
        assert rel[0] is None
        assert rel[1] == pytest.approx(2.0)

    def test_sample_count_is_words_minus_one(self, rng):
        for _ in range(10):
            k = int(rng.integers(3, 9))
            rel = relative_prominence(self._utt(rng.standard_normal(k).tolist()))
            assert sum(v is not None for v in rel) == k - 1


class TestDerivedFeatures:
    def test_derive_attaches_all_kinds(self):
        from ctxmi.corpus import Utterance

        words = tuple(
            make_word(f"t{i}", "u", i, onset=i * 1.0, offset=i * 1.0 + 0.5, syllables=1,
                      pitch=0.1 * i, energy=0.2, abs_prominence=float(i))
            for i in range(4)
        )
        c = make_corpus([Utterance(utterance_id="u", speaker_id="spk1", words=words)])
        d = derive_features(c)
        w0, w1, w2, w3 = d.utterances[0].words
        assert w0.features[FeatureKind.DURATION] == pytest.approx(0.5)
        assert w0.features[FeatureKind.PAUSE] == pytest.approx(0.5)
        assert FeatureKind.PAUSE not in w3.features
        assert FeatureKind.REL_PROMINENCE not in w0.features
        assert w3.features[FeatureKind.REL_PROMINENCE] == pytest.approx(3.0 - 1.0)

    def test_series_marks_missing_as_nan(self):
        c = derive_features(make_corpus([make_utterance(["a", "b", "c"], values=[1.0, 2.0, 3.0])]))
        series = utterance_series(c, FeatureKind.PAUSE)[0]
        assert np.isfinite(series.values[:-1]).all()
        assert np.isnan(series.values[-1])
        assert feature_values(c, FeatureKind.PAUSE).size == 2


class TestHeuristicSyllables:
    @pytest.mark.parametrize(
        "token,expected",
        [("cat", 1), ("hello", 2), ("idea", 2), ("rhythm", 1), ("beautiful", 3), ("xyz", 1)],
    )
    def test_vowel_groups(self, token, expected):
        assert heuristic_syllables(token) == expected
