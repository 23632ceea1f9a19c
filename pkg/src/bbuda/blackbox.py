"""The source-model boundary.

Adaptation code only ever sees a :class:`Predictor`: something that maps a
batch of inputs to probability vectors over the K source classes. The
source network's parameters stay behind this interface, either in-process
(:class:`InProcessPredictor`) or across HTTP (:func:`serve` /
:class:`RemotePredictor`).

Wire protocol::

    POST /predict  {"instances": [[...], ...]}  -> {"probabilities": [[...], ...]}
    GET  /meta     -> {"classes": K, "input_dim": D, "schema_version": 1}
    errors         -> 4xx/5xx {"error": "<message>"}
"""
from __future__ import annotations

import http.client
import logging
import math
import threading
import time
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from . import jsonio
from .model import TargetModel, forward_batch
from .numerics import InvalidInput, softmax

log = logging.getLogger(__name__)

DEFAULT_MAX_BATCH = 256


class TransportError(RuntimeError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


class ProtocolError(RuntimeError):
    def __init__(self, status: int, message: str):
        super().__init__(f"HTTP {status}: {message}")
        self.status = status


@runtime_checkable
class Predictor(Protocol):
    def predict(self, batch) -> np.ndarray: ...

    def num_classes(self) -> int: ...

    def input_dim(self) -> int: ...


def predict_in_process(artifact: TargetModel, batch) -> np.ndarray:
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if X.shape[1] != artifact.input_dim:
        raise InvalidInput("dimension mismatch")
    _, logits, _ = forward_batch(artifact, X)
    return softmax(logits)


class InProcessPredictor:
    def __init__(self, artifact: TargetModel):
        self._artifact = artifact

    def predict(self, batch) -> np.ndarray:
        return predict_in_process(self._artifact, batch)

    def num_classes(self) -> int:
        return self._artifact.k

    def input_dim(self) -> int:
        return self._artifact.input_dim


class CountingPredictor:
    """Wraps a predictor and counts ``predict`` calls and instances queried."""

    def __init__(self, inner: Predictor):
        self.inner = inner
        self.calls = 0
        self.instances = 0

    def predict(self, batch) -> np.ndarray:
        self.calls += 1
        self.instances += len(batch)
        return self.inner.predict(batch)

    def num_classes(self) -> int:
        return self.inner.num_classes()

    def input_dim(self) -> int:
        return self.inner.input_dim()


# -- server -----------------------------------------------------------------

def _parse_instances(body: bytes, input_dim: int) -> np.ndarray:
    try:
        doc = jsonio.loads(body)
    except (ValueError, UnicodeDecodeError):
        raise InvalidInput("malformed JSON")
    if not isinstance(doc, dict) or not isinstance(doc.get("instances"), list):
        raise InvalidInput('body must be {"instances": [[...], ...]}')
    rows = doc["instances"]
    for row in rows:
        if not isinstance(row, list):
            raise InvalidInput("each instance must be a list of numbers")
        if len(row) != input_dim:
            raise InvalidInput("dimension mismatch")
        for v in row:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise InvalidInput("instances must contain finite numbers")
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), input_dim)


def _make_handler(artifact: TargetModel):
    meta = {"classes": artifact.k, "input_dim": artifact.input_dim,
            "schema_version": jsonio.SCHEMA_VERSION}

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "bbuda-predictor/1"

        def _send(self, status: int, doc: dict) -> None:
            data = jsonio.dumps(doc).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/meta":
                self._send(200, meta)
            else:
                self._send(404, {"error": f"no such endpoint {self.path}"})

        def do_POST(self):
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length)
            if self.path != "/predict":
                self._send(404, {"error": f"no such endpoint {self.path}"})
                return
            try:
                X = _parse_instances(body, artifact.input_dim)
            except InvalidInput as exc:
                self._send(400, {"error": str(exc)})
                return
            try:
                probs = predict_in_process(artifact, X) if len(X) else np.zeros((0, artifact.k))
            except Exception as exc:  # pragma: no cover - defensive
                log.exception("prediction failed")
                self._send(500, {"error": str(exc)})
                return
            self._send(200, {"probabilities": probs})

        def log_message(self, fmt, *args):
            log.debug("%s - " + fmt, self.address_string(), *args)

    return Handler


class PredictionServer:
    """HTTP server answering the prediction protocol for one artifact.

    Binding happens in the constructor, so a port clash fails immediately.
    Use :meth:`start` to serve from a background thread or
    :meth:`serve_forever` to block.
    """

    def __init__(self, artifact: TargetModel, host: str = "127.0.0.1", port: int = 0):
        self.httpd = ThreadingHTTPServer((host, port), _make_handler(artifact))
        self.httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self):
        return self.httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "PredictionServer":
        if self._thread is None:
            self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
            self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def shutdown(self) -> None:
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join()
            self._thread = None
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def serve(artifact: TargetModel, bind: str = "127.0.0.1:0") -> PredictionServer:
    """Start a background server on ``host:port``; port 0 picks a free one."""
    host, _, port = bind.rpartition(":")
    return PredictionServer(artifact, host or "127.0.0.1", int(port)).start()


# -- client -----------------------------------------------------------------

class RemotePredictor:
    """Client for a served predictor. Batches above ``max_batch`` are split."""

    def __init__(self, endpoint: str, max_batch: int = DEFAULT_MAX_BATCH,
                 timeout: float = 30.0, retries: int = 3, backoff: float = 0.2):
        u = urllib.parse.urlsplit(endpoint)
        if u.scheme != "http" or not u.hostname:
            raise InvalidInput(f"unsupported endpoint {endpoint!r}")
        self.host, self.port = u.hostname, u.port or 80
        self.max_batch = int(max_batch)
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.requests = 0
        self.predict_requests = 0
        self._meta: Optional[dict] = None

    def _request(self, method: str, path: str, body: Optional[bytes] = None) -> dict:
        last: Exception | None = None
        for attempt in range(1, self.retries + 2):
            conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
            try:
                headers = {"Content-Type": "application/json"} if body is not None else {}
                conn.request(method, path, body=body, headers=headers)
                resp = conn.getresponse()
                data = resp.read()
            except (OSError, http.client.HTTPException) as exc:
                last = exc
                log.warning("request %s %s failed (attempt %d): %s", method, path, attempt, exc)
                if attempt <= self.retries:
                    time.sleep(self.backoff * attempt)
                continue
            finally:
                conn.close()
            self.requests += 1
            try:
                doc = jsonio.loads(data)
            except ValueError:
                raise ProtocolError(resp.status, "response is not JSON")
            if resp.status != 200:
                msg = doc.get("error", "") if isinstance(doc, dict) else ""
                raise ProtocolError(resp.status, msg)
            return doc
        raise TransportError(f"cannot reach {self.host}:{self.port}: {last}", self.retries + 1)

    def meta(self) -> dict:
        if self._meta is None:
            self._meta = self._request("GET", "/meta")
        return self._meta

    def num_classes(self) -> int:
        return int(self.meta()["classes"])

    def input_dim(self) -> int:
        return int(self.meta()["input_dim"])

    def predict(self, batch) -> np.ndarray:
        X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        parts = []
        for start in range(0, len(X), self.max_batch):
            body = jsonio.dumps({"instances": X[start:start + self.max_batch]}).encode("utf-8")
            doc = self._request("POST", "/predict", body)
            self.predict_requests += 1
            parts.append(np.asarray(doc["probabilities"], dtype=np.float64).reshape(-1, self.num_classes()))
        return np.concatenate(parts) if parts else np.zeros((0, self.num_classes()))


def predict_remote(endpoint: str, batch, max_batch: int = DEFAULT_MAX_BATCH) -> np.ndarray:
    return RemotePredictor(endpoint, max_batch=max_batch).predict(batch)


# -- cache ------------------------------------------------------------------

class CacheError(RuntimeError):
    pass


class PredictionCache:
    """Write-once store of source predictions, one row per target instance."""

    def __init__(self, inputs, outputs, source: str = ""):
        inputs = np.array(inputs, dtype=np.float64)
        outputs = np.array(outputs, dtype=np.float64)
        if inputs.ndim != 2 or outputs.ndim != 2 or len(inputs) != len(outputs):
            raise InvalidInput("inputs and outputs must be 2-D with one row per instance")
        inputs.flags.writeable = False
        outputs.flags.writeable = False
        self._inputs = inputs
        self._outputs = outputs
        self.source = source

    @property
    def inputs(self) -> np.ndarray:
        return self._inputs

    @property
    def outputs(self) -> np.ndarray:
        return self._outputs

    def __len__(self) -> int:
        return len(self._outputs)

    def __setitem__(self, key, value):
        raise CacheError("prediction cache entries are write-once")

    def to_dict(self) -> dict:
        return {"schema_version": jsonio.SCHEMA_VERSION, "source": self.source,
                "inputs": self._inputs, "outputs": self._outputs}

    @classmethod
    def from_dict(cls, doc: dict) -> "PredictionCache":
        k = len(doc["outputs"][0]) if doc["outputs"] else 0
        d = len(doc["inputs"][0]) if doc["inputs"] else 0
        return cls(np.asarray(doc["inputs"], dtype=np.float64).reshape(-1, d),
                   np.asarray(doc["outputs"], dtype=np.float64).reshape(-1, k), doc.get("source", ""))

    def save(self, path: str | Path) -> None:
        jsonio.write(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "PredictionCache":
        return cls.from_dict(jsonio.read(path))


def fill_cache(predictor: Predictor, inputs, max_batch: int = DEFAULT_MAX_BATCH,
               source: str = "") -> PredictionCache:
    """Query every instance exactly once, in chunks of ``max_batch``.

    Issues ``ceil(N / max_batch)`` predictor calls. If any call fails the
    error propagates and nothing is cached.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    k = predictor.num_classes()
    out = np.empty((len(X), k))
    for start in range(0, len(X), max_batch):
        chunk = predictor.predict(X[start:start + max_batch])
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.shape != (min(max_batch, len(X) - start), k):
            raise InvalidInput(f"predictor returned shape {chunk.shape}")
        out[start:start + len(chunk)] = chunk
    return PredictionCache(X, out, source)
