import json
import math
import socket
from pathlib import Path

import numpy as np
import pytest

from ctxmi.conditional import DistFamily
from ctxmi.corpus import FeatureKind, Split, derive_features, feature_values
from ctxmi.density import default_bandwidth_grid, fit_kde
from ctxmi.mi_sweep import sweep_feature
from ctxmi.predictor import ContextWindow
from ctxmi.remote import (
    PROTOCOL_VERSION,
    HandshakeRefused,
    ItemError,
    ItemFailures,
    PredictServer,
    ProtocolError,
    RemotePredictor,
    ServerConfig,
    TransportError,
    fixed_params_handler,
    handshake_line,
    model_handler,
    remote_predict,
)
from ctxmi.synthetic import SyntheticProcess, generate_splits

DATA = Path(__file__).parent / "data"


def _connect_raw(server):
    sock = socket.create_connection((server.host, server.port), timeout=10)
    return sock, sock.makefile("r", encoding="utf-8"), sock.makefile("w", encoding="utf-8")


class TestGoldenProtocol:
    def test_golden_requests_produce_golden_responses(self):
        requests = (DATA / "golden_requests.jsonl").read_text().splitlines()
        expected = (DATA / "golden_responses.jsonl").read_text().splitlines()
        with PredictServer(fixed_params_handler(0.25, -0.5)) as server:
            sock, r, w = _connect_raw(server)
            w.write(handshake_line("pitch", "gaussian") + "\n")
            w.flush()
            assert json.loads(r.readline())["status"] == "ok"
            got = []
            for line in requests:
                w.write(line + "\n")
                w.flush()
                got.append(r.readline().rstrip("\n"))
            sock.close()
        assert got == expected

    def test_client_emits_exact_golden_request_lines(self):
        requests = (DATA / "golden_requests.jsonl").read_text().splitlines()
        items = [(json.loads(l)["tokens"], json.loads(l)["targets"]) for l in requests]
        with PredictServer(fixed_params_handler(0.25, -0.5), ServerConfig(record=True)) as server:
            with RemotePredictor(server.host, server.port, "pitch", DistFamily.GAUSSIAN) as client:
                client.request_batch(items)
            assert server.received == requests


class TestHandshake:
    def test_version_mismatch_refused_with_message(self):
        with PredictServer(fixed_params_handler(0.0, 0.0)) as server:
            sock, r, w = _connect_raw(server)
            bad = json.dumps({"protocol": "ctxmi-predict", "version": PROTOCOL_VERSION + 1,
                              "feature": "pitch", "family": "gaussian"})
            w.write(bad + "\n")
            w.flush()
            reply = json.loads(r.readline())
            sock.close()
        assert reply["status"] == "error"
        assert "version" in reply["error"]

    def test_client_raises_handshake_refused(self):
        cfg = ServerConfig(feature="energy")
        with PredictServer(fixed_params_handler(0.0, 0.0), cfg) as server:
            with pytest.raises(HandshakeRefused, match="energy"):
                RemotePredictor(server.host, server.port, "pitch", DistFamily.GAUSSIAN)

    def test_unknown_protocol_refused(self):
        with PredictServer(fixed_params_handler(0.0, 0.0)) as server:
            sock, r, w = _connect_raw(server)
            w.write(json.dumps({"protocol": "other", "version": 1}) + "\n")
            w.flush()
            reply = json.loads(r.readline())
            sock.close()
        assert reply["status"] == "error"

    def test_connection_refused_is_transport_error(self):
        with pytest.raises(TransportError):
            RemotePredictor("127.0.0.1", 1, "pitch", DistFamily.GAUSSIAN, timeout=0.5)


class TestClientRobustness:
    def test_malformed_response_line_is_protocol_error(self):
        cfg = ServerConfig(inject_garbage_every=1)
        with PredictServer(fixed_params_handler(0.0, 0.0), cfg) as server:
            with RemotePredictor(server.host, server.port, "pitch", DistFamily.GAUSSIAN) as client:
                with pytest.raises(ProtocolError, match="line"):
                    client.request_batch([(["a", "b"], [0])])

    def test_per_item_errors_surface_window_ids(self):
        def handler(tokens, targets):
            if tokens[0] == "bad":
                raise ItemError("unsupported", "window rejected")
            return [(0.0, 0.0) for _ in targets]

        with PredictServer(handler) as server:
            with RemotePredictor(server.host, server.port, "pitch", DistFamily.GAUSSIAN) as client:
                with pytest.raises(ItemFailures) as err:
                    client.request_batch([(["ok"], [0]), (["bad"], [0]), (["ok"], [0])])
        assert list(err.value.failures) == [1]
        assert err.value.failures[1][0] == "unsupported"

    def test_thousand_windows_round_trip_out_of_order(self):
        # the server answers in shuffled bursts; the client reassembles by id
        def handler(tokens, targets):
            value = float(len(tokens[0]))  # recover the window identity
            return [(value, value + 0.5) for _ in targets]

        cfg = ServerConfig(shuffle_within=8, shuffle_seed=3)
        with PredictServer(handler, cfg) as server:
            with RemotePredictor(server.host, server.port, "pitch", DistFamily.GAUSSIAN) as client:
                items = [((f"{'x' * (i % 37 + 1)}",), [0]) for i in range(1000)]
                rows = client.request_batch(items)
        for i, row in enumerate(rows):
            assert row[0, 0] == float(i % 37 + 1)
            assert row[0, 1] == float(i % 37 + 1) + 0.5

    def test_remote_predict_constrains_client_side(self):
        with PredictServer(fixed_params_handler(0.3, 0.0)) as server:
            windows = [ContextWindow(tokens=("a", "b", "c"), target_index=1)]
            params = remote_predict((server.host, server.port), windows, "pitch", DistFamily.GAUSSIAN)
        assert params[0].p1 == pytest.approx(0.3)
        assert params[0].p2 == pytest.approx(math.log(2.0) + 1e-6, abs=1e-12)


class TestRemoteInSweep:
    def test_fixed_params_mock_yields_finite_grid(self):
        proc = SyntheticProcess(vocab_size=10, past_window=1, future_window=0,
                                lag_weights=(0.8, 1.0), noise_sigma=0.6,
                                length_range=(6, 9), seed=61)
        splits = generate_splits(proc, {Split.TRAIN: 80, Split.TEST: 40}, seed=62)
        tr = derive_features(splits[Split.TRAIN])
        te = derive_features(splits[Split.TEST])
        vals = feature_values(tr, FeatureKind.PITCH)
        kde = fit_kde(vals, feature_values(te, FeatureKind.PITCH),
                      default_bandwidth_grid(vals, 8, 0.05, 1.0))
        # raw2 chosen so the mock's scale roughly matches the signal spread
        with PredictServer(fixed_params_handler(0.0, 1.2)) as server:
            client = RemotePredictor(server.host, server.port, "pitch", DistFamily.GAUSSIAN)
            grid = sweep_feature(te, FeatureKind.PITCH, kde, client,
                                 past_max=2, future_max=2)
            client.close()
        assert len(grid.cells) == 9
        for cell in grid.cells.values():
            assert math.isfinite(cell.mi)

    def test_local_model_served_matches_local_predictions(self, tmp_path):
        from ctxmi.predictor import TrainConfig, train

        proc = SyntheticProcess(vocab_size=10, past_window=1, future_window=0,
                                lag_weights=(0.8, 1.0), noise_sigma=0.6,
                                length_range=(6, 9), seed=63)
        splits = generate_splits(proc, {Split.TRAIN: 60, Split.VALIDATION: 15}, seed=64)
        tr = derive_features(splits[Split.TRAIN])
        va = derive_features(splits[Split.VALIDATION])
        model = train(tr, va, FeatureKind.PITCH, DistFamily.GAUSSIAN,
                      TrainConfig(max_epochs=3, embed_dim=16, seed=9))
        windows = [
            ContextWindow(tokens=("w0001", "w0002", "w0003"), target_index=1),
            ContextWindow(tokens=("w0004",), target_index=0),
        ]
        local = model.predict_raw(windows)
        with PredictServer(model_handler(model)) as server:
            with RemotePredictor(server.host, server.port, "pitch", DistFamily.GAUSSIAN) as client:
                served = client.predict_raw(windows)
        assert np.allclose(local, served, rtol=0, atol=0)
