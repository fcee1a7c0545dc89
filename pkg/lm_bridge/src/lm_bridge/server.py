"""The ctxmi-predict wire protocol, served by the bridge.

Line-delimited JSON over TCP. The client's first line is a handshake naming
protocol, version, feature and family; the bridge refuses anything that does
not match its configuration. Requests carry an id, whole-word tokens and
target indices; responses echo the id with one [p1_raw, p2_raw] pair per
target. Parameters are unconstrained; the client constrains them.
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading

import torch

from .config import MAX_WINDOW, BridgeConfig
from .model import batch_windows

log = logging.getLogger(__name__)

PROTOCOL_NAME = "ctxmi-predict"
PROTOCOL_VERSION = 1


class BridgeServer:
    """Serves one trained model for one (feature, family) pair."""

    def __init__(self, model, tokenizer, feature: str, family: str,
                 max_subword_len: int = 128, host: str = "127.0.0.1", port: int = 0):
        self.model = model
        self.tokenizer = tokenizer
        self.feature = feature
        self.family = family
        self.max_subword_len = max_subword_len
        self._lock = threading.Lock()  # one model, potentially many connections
        outer = self

        class _Handler(socketserver.StreamRequestHandler):
            def handle(self):
                outer._serve(self)

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = _Server((host, port), _Handler)
        self.host = host
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> "BridgeServer":
        self._thread.start()
        log.info("bridge serving %s/%s on %s:%d", self.feature, self.family, self.host, self.port)
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def serve_forever(self) -> None:
        self._thread.start()
        self._thread.join()

    def __enter__(self) -> "BridgeServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- protocol ------------------------------------------------------------
    def _serve(self, h: socketserver.StreamRequestHandler) -> None:
        def send(obj) -> None:
            h.wfile.write((json.dumps(obj) + "\n").encode("utf-8"))

        line = h.rfile.readline()
        if not line:
            return
        try:
            hs = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            send({"status": "error", "error": "handshake is not valid JSON"})
            return
        if hs.get("protocol") != PROTOCOL_NAME:
            send({"status": "error", "error": f"unknown protocol {hs.get('protocol')!r}"})
            return
        if hs.get("version") != PROTOCOL_VERSION:
            send({"status": "error",
                  "error": f"unsupported version {hs.get('version')!r}, expected {PROTOCOL_VERSION}"})
            return
        if hs.get("feature") != self.feature:
            send({"status": "error", "error": f"bridge is configured for feature {self.feature!r}"})
            return
        if hs.get("family") != self.family:
            send({"status": "error", "error": f"bridge is configured for family {self.family!r}"})
            return
        send({"protocol": PROTOCOL_NAME, "version": PROTOCOL_VERSION, "status": "ok"})

        while True:
            raw = h.rfile.readline()
            if not raw:
                break
            send(self._answer(raw.decode("utf-8").rstrip("\n")))

    def _answer(self, line: str) -> dict:
        try:
            obj = json.loads(line)
            rid = obj["id"]
            tokens = [str(t) for t in obj["tokens"]]
            targets = list(obj["targets"])
        except (json.JSONDecodeError, KeyError, TypeError):
            return {"id": -1, "error": {"code": "bad-request", "message": f"malformed request: {line[:100]}"}}
        if not (1 <= len(tokens) <= MAX_WINDOW):
            return {"id": rid, "error": {"code": "bad-window",
                                         "message": f"window length must be in [1, {MAX_WINDOW}]"}}
        if not all(isinstance(t, int) and 0 <= t < len(tokens) for t in targets):
            return {"id": rid, "error": {"code": "bad-target", "message": "target index outside window"}}
        try:
            with self._lock, torch.no_grad():
                input_ids, attention, first_subword = batch_windows(
                    self.tokenizer, [tokens], self.max_subword_len, "cpu"
                )
                raw_params = self.model(input_ids, attention, first_subword)[0]
        except ValueError as exc:
            return {"id": rid, "error": {"code": "bad-window", "message": str(exc)}}
        pairs = [[float(raw_params[t, 0]), float(raw_params[t, 1])] for t in targets]
        return {"id": rid, "params": pairs}


def serve_from_config(cfg: BridgeConfig, model_dir) -> BridgeServer:
    from .model import load_bridge

    model, tokenizer, meta = load_bridge(model_dir)
    if meta["feature"] != cfg.feature or meta["family"] != cfg.family:
        raise ValueError(
            f"saved bridge is for {meta['feature']}/{meta['family']}, "
            f"config asks for {cfg.feature}/{cfg.family}"
        )
    return BridgeServer(
        model, tokenizer, cfg.feature, cfg.family,
        max_subword_len=meta.get("max_subword_len", cfg.max_subword_len),
        port=cfg.port,
    )
