"""Wire protocol for external parameter predictors.

Line-delimited JSON over a TCP stream. The client opens with a handshake
line naming the protocol, version, feature and family; the server accepts
or refuses. Each request carries an id, the window tokens and the target
indices; each response echoes the id with one raw parameter pair per
target. Responses may arrive out of order and are reassembled by id.
Parameters travel unconstrained; constraining happens client-side so local
and remote predictors share one code path.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .conditional import DistFamily, DistParams, constrain
from .predictor import ContextWindow

log = logging.getLogger(__name__)

PROTOCOL_NAME = "ctxmi-predict"
PROTOCOL_VERSION = 1
# Max requests in flight before the client drains responses; keeps the
# socket buffers from filling up in both directions at once.
PIPELINE_DEPTH = 256


class RemoteError(Exception):
    """Base class for predictor protocol failures."""


class TransportError(RemoteError):
    """Connection-level failure (refused, reset, closed mid-stream)."""


class ProtocolError(RemoteError):
    """The peer sent something outside the protocol; names the bad line."""

    def __init__(self, message: str, line: str | None = None):
        if line is not None:
            preview = line if len(line) <= 200 else line[:200] + "..."
            message = f"{message}; line: {preview!r}"
        super().__init__(message)
        self.line = line


class HandshakeRefused(RemoteError):
    """Server refused the handshake (version or configuration mismatch)."""


class ItemFailures(RemoteError):
    """Per-item errors from the server, keyed by request id."""

    def __init__(self, failures: dict[int, tuple[str, str]]):
        detail = "; ".join(f"id {i}: [{code}] {msg}" for i, (code, msg) in sorted(failures.items()))
        super().__init__(f"{len(failures)} request(s) failed: {detail}")
        self.failures = failures


def handshake_line(feature: str, family: str) -> str:
    return json.dumps(
        {"protocol": PROTOCOL_NAME, "version": PROTOCOL_VERSION, "feature": feature, "family": family}
    )


def request_line(req_id: int, tokens: Sequence[str], targets: Sequence[int]) -> str:
    return json.dumps({"id": req_id, "tokens": list(tokens), "targets": list(targets)})


class RemotePredictor:
    """Client for a predictor endpoint; usable wherever the built-in model is.

    Satisfies the sweep's predictor interface: `family` plus
    `predict_raw(windows)` returning raw parameter pairs.
    """

    def __init__(self, host: str, port: int, feature: str, family: DistFamily, timeout: float = 30.0):
        self.family = family
        self.feature = feature
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._rfile = self._sock.makefile("r", encoding="utf-8", newline="\n")
        self._wfile = self._sock.makefile("w", encoding="utf-8", newline="\n")
        self._next_id = 0
        self._handshake()

    def close(self) -> None:
        for closer in (self._rfile.close, self._wfile.close, self._sock.close):
            try:
                closer()
            except OSError:
                pass

    def __enter__(self) -> "RemotePredictor":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _handshake(self) -> None:
        self._send_line(handshake_line(self.feature, self.family.value))
        line = self._read_line()
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"invalid handshake reply: {exc.msg}", line) from exc
        if reply.get("status") != "ok":
            raise HandshakeRefused(str(reply.get("error", "handshake refused")))

    def _send_line(self, line: str) -> None:
        try:
            self._wfile.write(line + "\n")
            self._wfile.flush()
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read_line(self) -> str:
        try:
            line = self._rfile.readline()
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc
        if not line:
            raise TransportError("connection closed by server")
        return line.rstrip("\n")

    def request_batch(self, items: Sequence[tuple[Sequence[str], Sequence[int]]]) -> list[np.ndarray]:
        """Send (tokens, targets) items, reassemble responses by id.

        Returns one (len(targets), 2) raw array per item, in item order.
        Raises ItemFailures if the server reported per-item errors.
        """
        results: list[np.ndarray | None] = [None] * len(items)
        failures: dict[int, tuple[str, str]] = {}
        base = self._next_id
        self._next_id += len(items)
        for start in range(0, len(items), PIPELINE_DEPTH):
            chunk = items[start:start + PIPELINE_DEPTH]
            for off, (tokens, targets) in enumerate(chunk):
                self._send_line(request_line(base + start + off, tokens, targets))
            pending = {base + start + off for off in range(len(chunk))}
            while pending:
                line = self._read_line()
                rid, payload = self._parse_response(line)
                if rid not in pending:
                    raise ProtocolError(f"unexpected response id {rid}", line)
                pending.discard(rid)
                idx = rid - base
                if isinstance(payload, tuple):
                    failures[rid] = payload
                    continue
                if payload.shape[0] != len(items[idx][1]):
                    raise ProtocolError(
                        f"response {rid} has {payload.shape[0]} parameter pairs, "
                        f"expected {len(items[idx][1])}",
                        line,
                    )
                results[idx] = payload
        if failures:
            raise ItemFailures(failures)
        return results  # type: ignore[return-value]

    @staticmethod
    def _parse_response(line: str):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"invalid JSON in response: {exc.msg}", line) from exc
        if not isinstance(obj, dict) or "id" not in obj or not isinstance(obj["id"], int):
            raise ProtocolError("response lacks an integer id", line)
        rid = obj["id"]
        if "error" in obj:
            err = obj["error"]
            if isinstance(err, dict):
                return rid, (str(err.get("code", "error")), str(err.get("message", "")))
            return rid, ("error", str(err))
        if "params" not in obj:
            raise ProtocolError("response lacks params", line)
        try:
            arr = np.asarray(obj["params"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ProtocolError("params is not a numeric array", line) from exc
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ProtocolError(f"params must be pairs, got shape {arr.shape}", line)
        return rid, arr

    def predict_raw(self, windows: Sequence[ContextWindow]) -> np.ndarray:
        items = [(w.tokens, [w.target_index]) for w in windows]
        rows = self.request_batch(items)
        return np.vstack([r[0] for r in rows]) if rows else np.empty((0, 2))


def remote_predict(
    endpoint: tuple[str, int],
    windows: Sequence[ContextWindow],
    feature: str,
    family: DistFamily,
) -> list[DistParams]:
    """One-shot convenience: connect, predict, constrain, close."""
    host, port = endpoint
    with RemotePredictor(host, port, feature, family) as client:
        raw = client.predict_raw(windows)
    return [constrain((row[0], row[1]), family) for row in raw]


# ---------------------------------------------------------------------------
# servers


class ItemError(Exception):
    """Raised by a server handler to fail one request."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.message = message


Handler = Callable[[list[str], list[int]], Sequence[Sequence[float]]]


@dataclass
class ServerConfig:
    feature: str | None = None     # None accepts any
    family: str | None = None
    shuffle_within: int = 0        # >0: buffer and answer in seeded-shuffled order
    shuffle_seed: int = 0
    inject_garbage_every: int = 0  # >0: emit a malformed line before every k-th response
    record: bool = False           # keep received request lines for tests


class PredictServer:
    """Threaded protocol server around a `(tokens, targets) -> raw pairs`
    handler. Used as the built-in mock and as the adapter for serving a
    trained local model."""

    def __init__(self, handler: Handler, config: ServerConfig | None = None, host: str = "127.0.0.1"):
        self.handler = handler
        self.config = config or ServerConfig()
        outer = self

        class _TCPHandler(socketserver.StreamRequestHandler):
            def handle(self):
                outer._serve_connection(self)

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = _Server((host, 0), _TCPHandler)
        self.host = host
        self.port = self._server.server_address[1]
        self.received: list[str] = []
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> "PredictServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "PredictServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- connection logic ----------------------------------------------------
    def _serve_connection(self, h: socketserver.StreamRequestHandler) -> None:
        def send(obj_or_line) -> None:
            line = obj_or_line if isinstance(obj_or_line, str) else json.dumps(obj_or_line)
            h.wfile.write((line + "\n").encode("utf-8"))

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
            send({"status": "error", "error": f"unsupported version {hs.get('version')!r}, expected {PROTOCOL_VERSION}"})
            return
        cfg = self.config
        if cfg.feature is not None and hs.get("feature") != cfg.feature:
            send({"status": "error", "error": f"server is configured for feature {cfg.feature!r}"})
            return
        if cfg.family is not None and hs.get("family") != cfg.family:
            send({"status": "error", "error": f"server is configured for family {cfg.family!r}"})
            return
        send({"protocol": PROTOCOL_NAME, "version": PROTOCOL_VERSION, "status": "ok"})

        shuffle_rng = np.random.default_rng(cfg.shuffle_seed)
        buffer: list[dict] = []
        sent_count = 0

        def flush():
            nonlocal sent_count
            order = list(range(len(buffer)))
            if cfg.shuffle_within > 0:
                shuffle_rng.shuffle(order)
            for i in order:
                sent_count += 1
                if cfg.inject_garbage_every and sent_count % cfg.inject_garbage_every == 0:
                    send("this is not json {{{")
                send(buffer[i])
            buffer.clear()

        while True:
            raw_line = h.rfile.readline()
            if not raw_line:
                break
            text = raw_line.decode("utf-8").rstrip("\n")
            if cfg.record:
                self.received.append(text)
            buffer.append(self._answer(text))
            if len(buffer) >= max(cfg.shuffle_within, 1):
                flush()
        flush()

    def _answer(self, line: str) -> dict:
        try:
            obj = json.loads(line)
            rid = obj["id"]
            tokens = list(obj["tokens"])
            targets = list(obj["targets"])
        except (json.JSONDecodeError, KeyError, TypeError):
            return {"id": -1, "error": {"code": "bad-request", "message": f"malformed request: {line[:100]}"}}
        if not all(isinstance(t, int) and 0 <= t < len(tokens) for t in targets):
            return {"id": rid, "error": {"code": "bad-target", "message": "target index outside window"}}
        try:
            pairs = self.handler(tokens, targets)
        except ItemError as exc:
            return {"id": rid, "error": {"code": exc.code, "message": exc.message}}
        return {"id": rid, "params": [[float(a), float(b)] for a, b in pairs]}


def fixed_params_handler(raw1: float, raw2: float) -> Handler:
    """Mock behavior: the same raw parameter pair for every target."""

    def handler(tokens: list[str], targets: list[int]):
        return [(raw1, raw2) for _ in targets]

    return handler


def model_handler(model) -> Handler:
    """Serve a trained local model over the protocol."""

    def handler(tokens: list[str], targets: list[int]):
        ids = model.vocab.encode_tokens(tokens)[None, :]
        mask = np.ones_like(ids, dtype=np.float64)
        try:
            raw = model.raw_for_batch(ids, mask)[0]
        except ValueError as exc:
            raise ItemError("bad-window", str(exc)) from exc
        return [(float(raw[t, 0]), float(raw[t, 1])) for t in targets]

    return handler
