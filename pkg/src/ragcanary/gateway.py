"""External-service gateway: chat completion and text embedding.

All network I/O in the package funnels through this module. The wire protocol
is the common chat-completion shape (messages array with roles, temperature,
max_tokens) plus an embeddings endpoint, so any compatible inference server
works. Tests and offline runs use the fixture store instead: responses are
replayed by request hash, byte-for-byte.

Fixture store layout (documented for interop):
  <dir>/<sha256-hex>.json
where the hash covers the canonical JSON of the request (see request_fingerprint)
and the file holds the response payload:
  chat:       {"text": ..., "finish_reason": "complete"|"truncated"|"error"}
  embedding:  {"vector": [...]}
  post_json:  {"response": {...}}
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np

from .errors import FixtureMissingError, TransportError, ValidationError

log = logging.getLogger(__name__)

FINISH_COMPLETE = "complete"
FINISH_TRUNCATED = "truncated"
FINISH_ERROR = "error"

_RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_output_tokens: int = 800

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValidationError("chat prompts must be nonempty")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 8.0


@dataclass(frozen=True)
class ChatEndpoint:
    url: str
    model: str
    api_key_env: str = "RAGCANARY_API_KEY"
    timeout: float = 60.0


@dataclass(frozen=True)
class EmbeddingEndpoint:
    url: str
    model: str
    api_key_env: str = "RAGCANARY_API_KEY"
    timeout: float = 60.0


def request_fingerprint(req: ChatRequest) -> str:
    payload = json.dumps(
        {
            "kind": "chat",
            "system_prompt": req.system_prompt,
            "user_prompt": req.user_prompt,
            "temperature": req.temperature,
            "max_output_tokens": req.max_output_tokens,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def embedding_fingerprint(text: str) -> str:
    payload = json.dumps({"kind": "embedding", "text": text}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def post_fingerprint(url: str, payload: dict) -> str:
    body = json.dumps({"kind": "post", "url": url, "payload": payload}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


class FixtureStore:
    """Directory of request-hash -> JSON response files."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def _path(self, fingerprint: str) -> Path:
        return self.directory / f"{fingerprint}.json"

    def get(self, fingerprint: str) -> dict | None:
        path = self._path(fingerprint)
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def put(self, fingerprint: str, payload: dict) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        with open(self._path(fingerprint), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, ensure_ascii=False, sort_keys=True, indent=2)
            fh.write("\n")


class Gateway:
    """Shared client for chat, embedding, and generic JSON POSTs.

    With a fixture store and record=False, no network is touched: a missing
    fixture is an explicit error. With record=True, live responses are saved
    into the store for later replay.
    """

    def __init__(
        self,
        chat_endpoint: ChatEndpoint | None = None,
        embedding_endpoint: EmbeddingEndpoint | None = None,
        fixtures: FixtureStore | None = None,
        record: bool = False,
        retry: RetryPolicy = RetryPolicy(),
        max_concurrency: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleeper=time.sleep,
    ):
        self.chat_endpoint = chat_endpoint
        self.embedding_endpoint = embedding_endpoint
        self.fixtures = fixtures
        self.record = record
        self.retry = retry
        self._sleep = sleeper
        self._client = httpx.Client(transport=transport) if transport else httpx.Client()
        self._sem = threading.BoundedSemaphore(max_concurrency)
        self._embed_dim: int | None = None
        self._lock = threading.Lock()
        self.attempt_log: list[int] = []

    def close(self) -> None:
        self._client.close()

    # -- plumbing ------------------------------------------------------------

    def _headers(self, api_key_env: str) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post_with_retries(self, url: str, body: dict, headers: dict, timeout: float) -> dict:
        attempts = 0
        last_error = "no attempt made"
        while attempts < self.retry.max_attempts:
            attempts += 1
            try:
                with self._sem:
                    resp = self._client.post(url, json=body, headers=headers, timeout=timeout)
            except httpx.HTTPError as exc:
                last_error = f"transport failure: {exc}"
            else:
                if resp.status_code == 200:
                    with self._lock:
                        self.attempt_log.append(attempts)
                    return resp.json()
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code not in _RETRYABLE_STATUS:
                    break
            if attempts < self.retry.max_attempts:
                delay = min(self.retry.backoff_base * 2 ** (attempts - 1), self.retry.backoff_cap)
                if delay > 0:
                    self._sleep(delay)
        with self._lock:
            self.attempt_log.append(attempts)
        raise TransportError(f"request to {url} failed after {attempts} attempts ({last_error})")

    # -- chat ------------------------------------------------------------------

    def chat(self, req: ChatRequest) -> ChatResponse:
        fingerprint = request_fingerprint(req)
        if self.fixtures is not None and not self.record:
            payload = self.fixtures.get(fingerprint)
            if payload is None:
                raise FixtureMissingError(
                    f"no fixture for chat request {fingerprint} "
                    f"(user prompt starts {req.user_prompt[:60]!r})"
                )
            return ChatResponse(text=payload["text"], finish_reason=payload["finish_reason"])
        if self.chat_endpoint is None:
            raise ValidationError("no chat endpoint configured and fixture replay not active")
        ep = self.chat_endpoint
        body = {
            "model": ep.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        data = self._post_with_retries(ep.url, body, self._headers(ep.api_key_env), ep.timeout)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
            reason = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat response: {exc}") from exc
        finish = FINISH_COMPLETE if reason == "stop" else (
            FINISH_TRUNCATED if reason == "length" else FINISH_ERROR
        )
        if finish == FINISH_TRUNCATED:
            log.warning("chat response truncated at %d tokens", req.max_output_tokens)
        response = ChatResponse(text=text, finish_reason=finish)
        if self.fixtures is not None and self.record:
            self.fixtures.put(fingerprint, {"text": text, "finish_reason": finish})
        return response

    # -- embeddings ------------------------------------------------------------

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValidationError("cannot embed empty text")
        fingerprint = embedding_fingerprint(text)
        if self.fixtures is not None and not self.record:
            payload = self.fixtures.get(fingerprint)
            if payload is None:
                raise FixtureMissingError(f"no fixture for embedding request {fingerprint}")
            return self._normalize(np.asarray(payload["vector"], dtype=np.float64))
        if self.embedding_endpoint is None:
            raise ValidationError("no embedding endpoint configured and fixture replay not active")
        ep = self.embedding_endpoint
        body = {"model": ep.model, "input": text}
        data = self._post_with_retries(ep.url, body, self._headers(ep.api_key_env), ep.timeout)
        try:
            vector = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed embedding response: {exc}") from exc
        if self.fixtures is not None and self.record:
            self.fixtures.put(fingerprint, {"vector": [float(x) for x in vector]})
        return self._normalize(vector)

    def _normalize(self, vector: np.ndarray) -> np.ndarray:
        if vector.ndim != 1 or vector.size == 0:
            raise TransportError("embedding response is not a flat nonempty vector")
        with self._lock:
            if self._embed_dim is None:
                self._embed_dim = vector.size
            elif self._embed_dim != vector.size:
                raise TransportError(
                    f"embedding dimension drift: got {vector.size}, expected {self._embed_dim}"
                )
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise TransportError("embedding response is a zero vector")
        return vector / norm

    # -- generic JSON POST (remote RAG responder) --------------------------------

    def post_json(self, url: str, payload: dict, timeout: float = 60.0) -> dict:
        fingerprint = post_fingerprint(url, payload)
        if self.fixtures is not None and not self.record:
            stored = self.fixtures.get(fingerprint)
            if stored is None:
                raise FixtureMissingError(f"no fixture for POST {url} ({fingerprint})")
            return stored["response"]
        data = self._post_with_retries(url, payload, {"Content-Type": "application/json"}, timeout)
        if self.fixtures is not None and self.record:
            self.fixtures.put(fingerprint, {"response": data})
        return data


class GatewayEmbedder:
    """Adapter exposing Gateway.embed under the retrieval Embedder contract."""

    def __init__(self, gateway: Gateway, dimension: int):
        self.gateway = gateway
        self.dimension = dimension

    def __call__(self, text: str) -> np.ndarray:
        vector = self.gateway.embed(text)
        if vector.size != self.dimension:
            raise ValidationError(
                f"gateway returned dimension {vector.size}, expected {self.dimension}"
            )
        return vector
