import json
import socket

import numpy as np
import pytest
import torch

from lm_bridge.config import BridgeConfig
from lm_bridge.corpus_io import read_utterances
from lm_bridge.model import batch_windows, load_bridge, save_bridge
from lm_bridge.server import BridgeServer
from lm_bridge.training import EarlyStopping, finetune, sample_span

from conftest import write_corpus


class TestCorpusIo:
    def test_reads_tokens_and_pitch(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", n_utts=5, seed=1)
        utts = read_utterances(path, "pitch")
        assert len(utts) == 5
        assert all(len(u.tokens) >= 4 for u in utts)
        assert all(np.isfinite(u.values).all() for u in utts)

    def test_pause_excludes_final_word(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", n_utts=3, seed=2)
        for u in read_utterances(path, "pause"):
            assert np.isfinite(u.values[:-1]).all()
            assert np.isnan(u.values[-1])

    def test_rel_prominence_excludes_first_word(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", n_utts=3, seed=3)
        for u in read_utterances(path, "rel_prominence"):
            assert np.isnan(u.values[0])
            assert np.isfinite(u.values[1:]).all()

    def test_short_utterances_skipped(self, tmp_path):
        path = write_corpus(tmp_path / "c.jsonl", n_utts=4, seed=4, min_len=2, max_len=2)
        assert read_utterances(path, "pitch") == []


class TestSpanSampling:
    def test_span_inside_utterance(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            start, length = sample_span(9, rng, 1, 10)
            assert 1 <= length <= 9
            assert 0 <= start <= 9 - length


class TestEarlyStoppingParity:
    def test_crafted_sequence_matches_toolkit_semantics(self):
        stopper = EarlyStopping(patience=3)
        stops = [stopper.update(v, e) for e, v in enumerate([5, 4, 4, 4, 4], start=1)]
        assert stops == [False, False, False, False, True]
        assert stopper.best_epoch == 2


@pytest.fixture(scope="module")
def trained(tiny_base_model, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ft")
    train_path = write_corpus(tmp / "train.jsonl", n_utts=60, seed=10)
    val_path = write_corpus(tmp / "val.jsonl", n_utts=15, seed=11)
    cfg = BridgeConfig(
        base_model=tiny_base_model, feature="pitch", family="gaussian",
        seed=5, learning_rate=1e-3, batch_size=16, max_epochs=2,
        max_subword_len=64,
    )
    model, tokenizer, train_log = finetune(cfg, train_path, val_path)
    return cfg, model, tokenizer, train_log, tmp


class TestFinetune:

    def test_loss_decreases_on_tiny_corpus(self, trained):
        _, _, _, train_log, _ = trained
        assert len(train_log["trajectory"]) == 2
        assert train_log["trajectory"][1] < train_log["trajectory"][0]

    def test_weights_round_trip_through_save_and_serve(self, trained):
        cfg, model, tokenizer, _, tmp = trained
        out = tmp / "bridge_model"
        save_bridge(out, model, tokenizer, cfg)
        loaded, loaded_tok, meta = load_bridge(out)
        assert meta["feature"] == "pitch"
        assert meta["family"] == "gaussian"
        assert meta["patience"] == 3

        windows = [["toka", "tokb", "tokc"]]
        with torch.no_grad():
            before = model(*batch_windows(tokenizer, windows, 64, "cpu"))
            after = loaded(*batch_windows(loaded_tok, windows, 64, "cpu"))
        assert torch.equal(before, after)

        with BridgeServer(loaded, loaded_tok, meta["feature"], meta["family"],
                          max_subword_len=64) as server:
            sock = socket.create_connection((server.host, server.port), timeout=10)
            r = sock.makefile("r", encoding="utf-8")
            w = sock.makefile("w", encoding="utf-8")
            w.write(json.dumps({"protocol": "ctxmi-predict", "version": 1,
                                "feature": "pitch", "family": "gaussian"}) + "\n")
            w.flush()
            assert json.loads(r.readline())["status"] == "ok"
            w.write(json.dumps({"id": 0, "tokens": windows[0], "targets": [0, 1, 2]}) + "\n")
            w.flush()
            reply = json.loads(r.readline())
            sock.close()
        served = torch.tensor(reply["params"], dtype=before.dtype)
        assert torch.allclose(before[0], served, atol=1e-6)
