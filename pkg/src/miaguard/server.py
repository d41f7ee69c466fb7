"""Mock completion server backed by toy models.

Speaks the same wire protocol as :class:`~miaguard.model_access.RemoteModel`:

* ``POST /v1/completions`` with ``echo: true, max_tokens: 0`` scores the
  prompt; without echo it generates.
* ``POST /v1/embeddings`` returns hashed bag-of-words vectors.

Handlers hold no state, so concurrent identical requests get identical bytes.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, MiaGuardError
from .model_access import MockJudge, ToyModel, distribution_moments, tokenize
from .retrieval import HashingEmbedder

MAX_BODY = 8 << 20


class _RequestError(Exception):
    def __init__(self, status: int, message: str):
        self.status, self.message = status, message
        super().__init__(message)


def _top_logprobs(model: ToyModel, lp: np.ndarray, k: int) -> dict[str, float]:
    order = np.lexsort((np.arange(lp.size), -lp))[:k]
    return {model.vocabulary[i]: float(lp[i]) for i in order}


def _echo_payload(model: ToyModel, prompt: str, top_k: int | None) -> dict:
    dists = model.distributions(prompt)
    lp = {
        "tokens": list(dists.tokens),
        "token_logprobs": [float(v[i]) for v, i in zip(dists.logprobs, dists.index)],
        "text_offset": list(dists.offsets),
        "moments": [list(distribution_moments(v)) for v in dists.logprobs],
    }
    if top_k:
        lp["top_logprobs"] = [_top_logprobs(model, v, top_k) for v in dists.logprobs]
    return {"text": prompt, "logprobs": lp}


def _generate_payload(model, prompt: str, max_tokens: int, temperature: float, seed: int) -> dict:
    if isinstance(model, MockJudge):
        text = model.complete(prompt, max_tokens, temperature, seed)
        toks = tokenize(text)
        return {"text": text, "logprobs": {
            "tokens": [t for t, _ in toks], "token_logprobs": [0.0] * len(toks),
            "text_offset": [o for _, o in toks],
        }}
    ans = model.generate(prompt, max_tokens, temperature, seed)
    s = ans.scored
    return {"text": ans.text, "logprobs": {
        "tokens": list(s.tokens),
        "token_logprobs": [-v for v in s.nll],
        "text_offset": list(s.offsets) if s.offsets is not None else None,
        "moments": [list(m) for m in s.moments] if s.moments is not None else None,
    }}


def _completion(models: Mapping[str, object], req: dict) -> dict:
    if not isinstance(req, dict):
        raise _RequestError(400, "request body must be a JSON object")
    if req.get("logprobs") is not True:
        raise _RequestError(400, "logprobs must be true")
    prompt = req.get("prompt")
    if not isinstance(prompt, str):
        raise _RequestError(400, "prompt must be a string")
    name = req.get("model")
    if name not in models:
        if len(models) == 1 and name in (None, ""):
            name = next(iter(models))
        else:
            raise _RequestError(404, f"unknown model {name!r}")
    model = models[name]
    try:
        max_tokens = int(req.get("max_tokens", 16))
        temperature = float(req.get("temperature", 0.0))
        seed = int(req.get("seed", 0))
        top_k = req.get("top_logprobs")
        top_k = int(top_k) if top_k is not None else None
    except (TypeError, ValueError):
        raise _RequestError(400, "max_tokens/temperature/seed/top_logprobs must be numbers")
    if req.get("echo"):
        if not isinstance(model, ToyModel):
            raise _RequestError(400, "echo scoring is not supported by this model")
        if max_tokens != 0:
            raise _RequestError(400, "echo requires max_tokens = 0")
        choice = _echo_payload(model, prompt, top_k)
    else:
        if max_tokens < 1:
            raise _RequestError(400, "max_tokens must be >= 1")
        choice = _generate_payload(model, prompt, max_tokens, temperature, seed)
    return {"object": "text_completion", "model": name, "choices": [{"index": 0, **choice}]}


def _embeddings(embedder: HashingEmbedder, req: dict) -> dict:
    texts = req.get("input") if isinstance(req, dict) else None
    if isinstance(texts, str):
        texts = [texts]
    if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
        raise _RequestError(400, "input must be a string or a list of strings")
    vecs = embedder(texts) if texts else np.zeros((0, embedder.dim))
    return {"object": "list", "data": [{"index": i, "embedding": v.tolist()} for i, v in enumerate(vecs)]}


def _handler(models: Mapping[str, object], embedder: HashingEmbedder, auth_token: str | None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            pass

        def _send(self, status: int, obj: dict):
            body = json.dumps(obj).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            try:
                if auth_token and self.headers.get("Authorization") != f"Bearer {auth_token}":
                    raise _RequestError(401, "missing or invalid bearer token")
                n = int(self.headers.get("Content-Length") or 0)
                if n > MAX_BODY:
                    raise _RequestError(413, "request body too large")
                try:
                    req = json.loads(self.rfile.read(n) or b"null")
                except json.JSONDecodeError as e:
                    raise _RequestError(400, f"malformed JSON: {e.msg}")
                if self.path == "/v1/completions":
                    self._send(200, _completion(models, req))
                elif self.path == "/v1/embeddings":
                    self._send(200, _embeddings(embedder, req))
                else:
                    raise _RequestError(404, f"no route {self.path}")
            except _RequestError as e:
                self._send(e.status, {"error": {"message": e.message, "type": "invalid_request_error"}})
            except MiaGuardError as e:
                self._send(400, {"error": {"message": str(e), "type": "invalid_request_error"}})
            except Exception as e:  # keep the server alive; report as a server error
                self._send(500, {"error": {"message": f"{type(e).__name__}: {e}", "type": "server_error"}})

        def do_GET(self):
            if self.path == "/v1/models":
                self._send(200, {"object": "list", "data": [{"id": m} for m in models]})
            else:
                self._send(404, {"error": {"message": f"no route {self.path}", "type": "invalid_request_error"}})

    return Handler


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128  # the default backlog of 5 drops bursts of parallel clients


class MockServer:
    """A running mock endpoint. Use as a context manager or call :meth:`close`."""

    def __init__(self, httpd: ThreadingHTTPServer, models: Mapping[str, object]):
        self.httpd = httpd
        self.models = dict(models)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def close(self) -> None:
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join()
        self.httpd.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_mock(models, host: str = "127.0.0.1", port: int = 0, *, auth_token: str | None = None,
               embedding_dim: int = 256, background: bool = True) -> MockServer:
    """Serve one toy model (or a ``{name: model}`` mapping) over HTTP.

    ``port=0`` picks a free port; read it back from ``server.url``. A judge
    can be served by mapping a name to :class:`MockJudge`.
    """
    if isinstance(models, (ToyModel, MockJudge)):
        models = {models.name: models}
    if not models:
        raise ConfigurationError("serve_mock needs at least one model")
    try:
        httpd = _Server((host, port), _handler(models, HashingEmbedder(embedding_dim), auth_token))
    except OSError as e:
        raise ConfigurationError(f"cannot bind {host}:{port}: {e}") from e
    server = MockServer(httpd, models)
    return server.start() if background else server
