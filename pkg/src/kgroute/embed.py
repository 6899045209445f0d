"""Text embeddings for graph nodes.

The default ``HashEmbedder`` is a signed feature-hashing vectorizer: tokens are
hashed to a bucket and a +/-1 sign by two independently keyed BLAKE2b hashes,
accumulated and L2-normalized. It is pure and platform independent.
``ExternalEmbedder`` talks to a REST embedding endpoint with an on-disk cache.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .graph import QUERY, GraphNode, RoutedGraph

logger = logging.getLogger(__name__)

TEMPLATE_VERSION = 1
QUERY_TEMPLATE = "query . {question}"

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


class EmbeddingError(RuntimeError):
    pass


class RetryableEmbeddingError(EmbeddingError):
    pass


@dataclass(frozen=True)
class EmbedderConfig:
    mode: str = "hash"
    dimension: int = 256
    seed: int = 0
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "KGROUTE_EMBED_API_KEY"
    cache_dir: str | None = None
    batch_limit: int = 64
    max_attempts: int = 3
    concurrency: int = 4

    def __post_init__(self):
        if self.mode not in ("hash", "external"):
            raise ValueError(f"embedder mode must be hash|external, got {self.mode!r}")
        if self.dimension < 8:
            raise ValueError("embedding dimension must be >= 8")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise EmbeddingError("cannot normalize a zero or non-finite vector")
    if abs(n - 1.0) <= 4 * np.finfo(float).eps:
        return v
    return v / n


def _hash_int(token: str, seed: int, purpose: bytes) -> int:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                        key=seed.to_bytes(8, "little", signed=False), person=purpose)
    return int.from_bytes(h.digest(), "little")


class HashEmbedder:
    def __init__(self, dimension: int = 256, seed: int = 0):
        if dimension < 8:
            raise ValueError("embedding dimension must be >= 8")
        self.dimension = dimension
        self.seed = seed
        self._cached = lru_cache(maxsize=65536)(self._embed)

    def _embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise EmbeddingError(f"no tokens in text {text!r}")
        v = np.zeros(self.dimension)
        for tok in tokens:
            idx = _hash_int(tok, self.seed, b"kgr-index") % self.dimension
            sign = 1.0 if _hash_int(tok, self.seed, b"kgr-sign") & 1 else -1.0
            v[idx] += sign
        if not v.any():
            # every token cancelled out; fall back to the unsigned bag
            for tok in tokens:
                v[_hash_int(tok, self.seed, b"kgr-index") % self.dimension] += 1.0
        v = normalize(v)
        v.setflags(write=False)
        return v

    def embed_text(self, text: str) -> np.ndarray:
        return self._cached(text)

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed_text(t) for t in texts]


class ExternalEmbedder:
    """Client for an embedding endpoint speaking ``{model, input} -> {data: [{embedding}]}``.

    Vectors are re-normalized locally and cached on disk under
    ``cache_dir/<sha256(model \\0 text)>.f64`` as raw little-endian float64.
    """

    def __init__(self, config: EmbedderConfig, client=None):
        import httpx

        if not config.endpoint or not config.model:
            raise ValueError("external embedder needs endpoint and model")
        self.config = config
        self.dimension = config.dimension
        self.cache_dir = Path(config.cache_dir or ".kgroute-cache/embeddings")
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._client = client or httpx.Client(timeout=30.0)
        self.upstream_calls = 0

    def _key(self, text: str) -> Path:
        digest = hashlib.sha256(f"{self.config.model}\0{text}".encode("utf-8")).hexdigest()
        return self.cache_dir / f"{digest}.f64"

    def _read_cache(self, text: str) -> np.ndarray | None:
        path = self._key(text)
        if not path.exists():
            return None
        return np.frombuffer(path.read_bytes(), dtype="<f8").copy()

    def _write_cache(self, text: str, vec: np.ndarray) -> None:
        path = self._key(text)
        fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(np.asarray(vec, dtype="<f8").tobytes())
        os.replace(tmp, path)

    def _post(self, texts: list[str]) -> list[np.ndarray]:
        import httpx

        headers = {}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        delay = 0.5
        for attempt in range(1, self.config.max_attempts + 1):
            self.upstream_calls += 1
            try:
                resp = self._client.post(self.config.endpoint, json={"model": self.config.model, "input": texts},
                                         headers=headers)
            except httpx.TransportError as exc:
                err: EmbeddingError = RetryableEmbeddingError(f"transport failure: {exc}")
            else:
                if resp.status_code in (401, 403):
                    raise EmbeddingError(f"embedding auth failed ({resp.status_code}): {resp.text[:200]}")
                if resp.status_code >= 400:
                    err = RetryableEmbeddingError(f"embedding request failed ({resp.status_code}): {resp.text[:200]}")
                else:
                    vectors = _extract_vectors(resp.json())
                    if len(vectors) == len(texts):
                        return vectors
                    err = RetryableEmbeddingError(f"partial batch: {len(vectors)} of {len(texts)} vectors")
            if attempt == self.config.max_attempts:
                raise EmbeddingError(f"giving up after {attempt} attempts: {err}") from err
            logger.warning("%s; retrying in %.1fs", err, delay)
            time.sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")

    def fetch_embeddings_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            return []
        found: dict[str, np.ndarray] = {}
        todo: list[str] = []
        for t in dict.fromkeys(texts):
            if not t.strip():
                raise EmbeddingError("empty text")
            cached = self._read_cache(t)
            if cached is not None:
                found[t] = cached
            else:
                todo.append(t)
        chunks = [todo[i: i + self.config.batch_limit] for i in range(0, len(todo), self.config.batch_limit)]
        with ThreadPoolExecutor(max_workers=max(1, self.config.concurrency)) as pool:
            results = list(pool.map(self._post, chunks))
        for chunk, vecs in zip(chunks, results):
            for t, v in zip(chunk, vecs):
                v = normalize(np.asarray(v, dtype=np.float64))
                self._write_cache(t, v)
                found[t] = self._read_cache(t)
        out = [found[t] for t in texts]
        dims = {len(v) for v in out}
        if len(dims) != 1:
            raise EmbeddingError(f"mixed embedding dimensions from provider: {sorted(dims)}")
        return out

    def embed_text(self, text: str) -> np.ndarray:
        return self.fetch_embeddings_batch([text])[0]

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        return self.fetch_embeddings_batch(list(texts))


def _extract_vectors(body) -> list[list[float]]:
    if isinstance(body, Mapping):
        if "data" in body:
            items = sorted(body["data"], key=lambda d: d.get("index", 0))
            return [d["embedding"] for d in items]
        if "embeddings" in body:
            return list(body["embeddings"])
    raise EmbeddingError(f"unrecognized embedding response shape: {str(body)[:200]}")


def make_embedder(config: EmbedderConfig, client=None):
    if config.mode == "hash":
        return HashEmbedder(config.dimension, config.seed)
    return ExternalEmbedder(config, client=client)


def node_text(node: GraphNode) -> str:
    """Templated surface text for a node (agents already carry their template text)."""
    if node.kind.kind == QUERY:
        return QUERY_TEMPLATE.format(question=node.text)
    return node.text


def embed_node(node: GraphNode, embedder) -> np.ndarray:
    return embedder.embed_text(node_text(node))


def embed_graph(g: RoutedGraph, embedder) -> dict[str, np.ndarray]:
    """Embed every node of ``g``; rejects mixed dimensions."""
    vecs = embedder.embed_many([node_text(n) for n in g.nodes])
    dims = {v.shape[0] for v in vecs}
    if len(dims) > 1:
        raise EmbeddingError(f"mixed embedding dimensions in one graph: {sorted(dims)}")
    return {n.id: v for n, v in zip(g.nodes, vecs)}

