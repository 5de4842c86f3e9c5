"""Chat-completion and embedding backends.

Three interchangeable providers share one interface: a real HTTP client for
any OpenAI-compatible endpoint, a deterministic mock for offline tests, and
a replay provider that serves pre-recorded responses keyed by request digest.
A content-addressed cache wraps any of them; cache and replay fixtures use
the same on-disk format (one JSON file per digest), so recording a run with
the cache enabled produces a replayable fixture directory.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import requests

from .data import RunConfig


class ProviderError(Exception):
    """Transport failure, provider error payload, or misconfiguration."""


class ReplayMissError(ProviderError):
    """No recorded response exists for a request digest in strict replay mode."""

    def __init__(self, digest: str):
        super().__init__(f"no replay fixture for digest {digest}")
        self.digest = digest


_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[dict, ...]
    temperature: float = 0.0
    seed: int | None = None
    max_output_tokens: int = 1024
    extra: tuple[tuple[str, object], ...] = ()

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("messages must be non-empty")
        for msg in self.messages:
            if msg.get("role") not in _ROLES:
                raise ValueError(f"unknown message role {msg.get('role')!r}")
            if not isinstance(msg.get("content"), str):
                raise ValueError("message content must be a string")
        if self.messages[0]["role"] not in ("system", "user"):
            raise ValueError("first message role must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def to_payload(self) -> dict:
        payload: dict = {
            "model": self.model,
            "messages": [dict(m) for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        }
        if self.seed is not None:
            payload["seed"] = self.seed
        payload.update(dict(self.extra))
        return payload


@dataclass(frozen=True)
class EmbedRequest:
    model: str
    inputs: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.inputs:
            raise ValueError("inputs must be non-empty")
        if any(not text.strip() for text in self.inputs):
            raise ValueError("embedding inputs must be non-empty after trimming")

    def to_payload(self) -> dict:
        return {"model": self.model, "input": list(self.inputs)}


def canonical_bytes(payload: dict) -> bytes:
    """Deterministic serialization: sorted keys, no insignificant whitespace."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def cache_key(provider_id: str, canonical: bytes) -> str:
    h = hashlib.sha256()
    h.update(provider_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(canonical)
    return h.hexdigest()


def chat_digest(provider_id: str, req: ChatRequest) -> str:
    return cache_key(provider_id, canonical_bytes({"kind": "chat", **req.to_payload()}))


def embed_digest(provider_id: str, req: EmbedRequest) -> str:
    return cache_key(provider_id, canonical_bytes({"kind": "embed", **req.to_payload()}))


class ResponseStore:
    """Directory of digest-named JSON files: the cache and replay fixture format."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, digest: str) -> Path:
        return self.directory / digest

    def load(self, digest: str) -> dict | None:
        path = self.path(digest)
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def save(self, digest: str, payload: dict) -> None:
        # Atomic write so concurrent readers never observe a partial file.
        tmp = self.path(digest).with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
        os.replace(tmp, self.path(digest))


class Provider:
    """Base class: counts calls per kind and per caller-supplied purpose tag."""

    provider_id = "base"

    def __init__(self) -> None:
        self.counters: Counter[str] = Counter()
        self._lock = threading.Lock()

    def _count(self, *keys: str) -> None:
        with self._lock:
            for key in keys:
                self.counters[key] += 1

    def chat(self, req: ChatRequest, purpose: str | None = None) -> str:
        self._count("chat", *((f"chat:{purpose}",) if purpose else ()))
        return self._chat(req)

    def embed(self, req: EmbedRequest, purpose: str | None = None) -> list[list[float]]:
        self._count("embed", *((f"embed:{purpose}",) if purpose else ()))
        vectors = self._embed(req)
        dims = {len(v) for v in vectors}
        if len(vectors) != len(req.inputs) or len(dims) != 1:
            raise ProviderError("backend returned inconsistent embedding vectors")
        return vectors

    def _chat(self, req: ChatRequest) -> str:
        raise NotImplementedError

    def _embed(self, req: EmbedRequest) -> list[list[float]]:
        raise NotImplementedError


class OpenAIProvider(Provider):
    """Client for OpenAI-compatible /chat/completions and /embeddings endpoints."""

    provider_id = "openai"

    RETRIES = 3
    BACKOFF_S = 1.0

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout_s: float = 60.0,
        max_in_flight: int = 4,
        session: requests.Session | None = None,
    ):
        super().__init__()
        if not base_url:
            raise ProviderError("openai provider requires base_url")
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.session = session or requests.Session()
        self._gate = threading.Semaphore(max_in_flight)

    def _headers(self) -> dict:
        token = os.environ.get(self.api_key_env, "")
        if not token:
            raise ProviderError(f"environment variable {self.api_key_env} is not set")
        return {"Authorization": f"Bearer {token}", "Content-Type": "application/json"}

    def _post(self, endpoint: str, payload: dict) -> dict:
        url = f"{self.base_url}/{endpoint}"
        last_error: Exception | None = None
        for attempt in range(self.RETRIES):
            if attempt:
                time.sleep(self.BACKOFF_S * 2 ** (attempt - 1))
            try:
                with self._gate:
                    self._count("http")
                    resp = self.session.post(url, json=payload, headers=self._headers(), timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = ProviderError(f"{url} returned {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"{url} returned {resp.status_code}: {resp.text[:500]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderError(f"{url} returned non-JSON body") from exc
        raise ProviderError(f"{url} failed after {self.RETRIES} attempts: {last_error}")

    def _chat(self, req: ChatRequest) -> str:
        body = self._post("chat/completions", req.to_payload())
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed chat response: {body}") from exc
        if not isinstance(content, str):
            raise ProviderError("chat response content is not a string")
        return content

    def _embed(self, req: EmbedRequest) -> list[list[float]]:
        body = self._post("embeddings", req.to_payload())
        try:
            rows = sorted(body["data"], key=lambda item: item["index"])
            return [[float(x) for x in row["embedding"]] for row in rows]
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"malformed embeddings response: {body}") from exc


def hash_unit_vector(text: str, dim: int = 64) -> list[float]:
    """Deterministic pseudo-random unit vector seeded by the text's hash."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
    rng = random.Random(seed)
    vec = [rng.gauss(0.0, 1.0) for _ in range(dim)]
    norm = math.sqrt(sum(x * x for x in vec)) or 1.0
    return [x / norm for x in vec]


def scripted_vector_pair(similarity: float, dim: int = 64) -> tuple[list[float], list[float]]:
    """Two unit vectors with an exact cosine, for scripting gate outcomes."""
    if not (-1.0 <= similarity <= 1.0):
        raise ValueError("similarity must lie in [-1, 1]")
    u = [0.0] * dim
    v = [0.0] * dim
    u[0] = 1.0
    v[0] = similarity
    v[1] = math.sqrt(max(0.0, 1.0 - similarity * similarity))
    return u, v


class MockProvider(Provider):
    """Deterministic offline provider.

    Chat answers come from a response queue, a rule callable, or an echo of
    the last user message, in that order of precedence. Embeddings are
    hash-seeded unit vectors with an optional per-text override table.
    """

    provider_id = "mock"

    def __init__(
        self,
        responses: Sequence[str] | None = None,
        chat_fn: Callable[[ChatRequest], str] | None = None,
        embed_overrides: dict[str, list[float]] | None = None,
        dim: int = 64,
    ):
        super().__init__()
        self._queue = list(responses) if responses is not None else None
        self._chat_fn = chat_fn
        self._overrides = dict(embed_overrides or {})
        self._dim = dim

    def _chat(self, req: ChatRequest) -> str:
        if self._queue is not None:
            if not self._queue:
                raise ProviderError("mock response queue exhausted")
            return self._queue.pop(0)
        if self._chat_fn is not None:
            return self._chat_fn(req)
        for msg in reversed(req.messages):
            if msg["role"] == "user":
                return msg["content"]
        return ""

    def _embed(self, req: EmbedRequest) -> list[list[float]]:
        out = []
        for text in req.inputs:
            if text in self._overrides:
                out.append(list(self._overrides[text]))
            else:
                out.append(hash_unit_vector(text, self._dim))
        return out


class CachedProvider(Provider):
    """Read-through content-addressed cache over another provider.

    Doubles as the recorder: running any pipeline through it leaves behind a
    fixture directory that ``ReplayProvider`` can serve verbatim.
    """

    def __init__(self, inner: Provider, store: ResponseStore | str | Path):
        super().__init__()
        self.inner = inner
        self.store = store if isinstance(store, ResponseStore) else ResponseStore(store)
        self.provider_id = inner.provider_id

    def _chat(self, req: ChatRequest) -> str:
        digest = chat_digest(self.inner.provider_id, req)
        payload = self.store.load(digest)
        if payload is not None:
            self._count("cache_hit")
            return payload["content"]
        self._count("cache_miss")
        content = self.inner.chat(req)
        self.store.save(digest, {"kind": "chat", "content": content})
        return content

    def _embed(self, req: EmbedRequest) -> list[list[float]]:
        digest = embed_digest(self.inner.provider_id, req)
        payload = self.store.load(digest)
        if payload is not None:
            self._count("cache_hit")
            return [list(v) for v in payload["vectors"]]
        self._count("cache_miss")
        vectors = self.inner.embed(req)
        self.store.save(digest, {"kind": "embed", "vectors": vectors})
        return vectors


class ReplayProvider(Provider):
    """Serve pre-recorded responses from a fixture directory.

    ``source_id`` must match the provider id the fixtures were recorded
    from, because it is part of every digest. Without a fallback provider,
    a missing digest is an error (strict offline mode).
    """

    provider_id = "replay"

    def __init__(self, directory: str | Path, source_id: str = "mock", fallback: Provider | None = None):
        super().__init__()
        self.store = ResponseStore(directory)
        self.source_id = source_id
        self.fallback = fallback

    def _chat(self, req: ChatRequest) -> str:
        digest = chat_digest(self.source_id, req)
        payload = self.store.load(digest)
        if payload is None:
            self._count("replay_miss")
            if self.fallback is None:
                raise ReplayMissError(digest)
            content = self.fallback.chat(req)
            self.store.save(digest, {"kind": "chat", "content": content})
            return content
        self._count("replay_hit")
        return payload["content"]

    def _embed(self, req: EmbedRequest) -> list[list[float]]:
        digest = embed_digest(self.source_id, req)
        payload = self.store.load(digest)
        if payload is None:
            self._count("replay_miss")
            if self.fallback is None:
                raise ReplayMissError(digest)
            vectors = self.fallback.embed(req)
            self.store.save(digest, {"kind": "embed", "vectors": vectors})
            return vectors
        self._count("replay_hit")
        return [list(v) for v in payload["vectors"]]


def build_provider(config: RunConfig) -> Provider:
    """Instantiate the provider stack described by a run configuration."""
    if config.provider == "mock":
        provider: Provider = MockProvider()
    elif config.provider == "openai":
        provider = OpenAIProvider(
            base_url=config.base_url,
            api_key_env=config.api_key_env,
            max_in_flight=config.max_in_flight,
        )
    else:
        if not config.replay_dir:
            raise ProviderError("replay provider requires replay_dir")
        fallback = None if config.strict_replay else MockProvider()
        provider = ReplayProvider(config.replay_dir, source_id=config.replay_source, fallback=fallback)
    if config.cache_dir:
        provider = CachedProvider(provider, config.cache_dir)
    return provider
