"""Dense retrieval for RAG-style targets: embed, index, top-k by cosine, prompt."""

from __future__ import annotations

import hashlib
import json
import re
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError, TransportError

DEFAULT_K = 5
MAGIC = b"MIAGIDX\x00"
VERSION = 1
_WORD = re.compile(r"\w+", re.UNICODE)


class HashingEmbedder:
    """Signed feature hashing of lowercase word counts, L2-normalised."""

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ConfigurationError("embedding dimension must be >= 1")
        self.dim = dim

    def _bucket(self, word: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(word.encode(), digest_size=8).digest(), "little")
        return h % self.dim, (1.0 if (h >> 63) & 1 else -1.0)

    def embed_one(self, text: str) -> np.ndarray:
        words = _WORD.findall(text.lower())
        if not words:
            stripped = text.strip()
            if not stripped:
                raise InputError("cannot embed empty text")
            words = [stripped]
        v = np.zeros(self.dim)
        for w in words:
            i, sign = self._bucket(w)
            v[i] += sign
        norm = np.linalg.norm(v)
        if norm == 0:
            # every feature cancelled out; fall back to unsigned counts
            for w in words:
                v[self._bucket(w)[0]] += 1.0
            norm = np.linalg.norm(v)
        return v / norm

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed_one(t) for t in texts])


class RemoteEmbedder:
    """Embedding endpoint speaking ``POST /v1/embeddings`` ({model, input})."""

    def __init__(self, base_url: str, model: str, auth_token: str | None = None, timeout: float = 30.0):
        self.base_url, self.model, self.auth_token, self.timeout = base_url, model, auth_token, timeout

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        body = json.dumps({"model": self.model, "input": list(texts)}).encode()
        headers = {"Content-Type": "application/json"}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        req = urllib.request.Request(self.base_url.rstrip("/") + "/v1/embeddings", body, headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                data = json.loads(resp.read())["data"]
        except (OSError, KeyError, ValueError) as e:
            raise TransportError(f"embedding request failed: {e}") from e
        v = np.array([d["embedding"] for d in data], dtype=float)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        # leave already-unit rows untouched so served vectors arrive bit-exact
        return np.where(np.abs(norms - 1.0) <= 1e-12, v, v / norms)


def embed(provider, texts: Sequence[str]) -> np.ndarray:
    if not texts:
        raise InputError("no texts to embed")
    return np.asarray(provider(list(texts)), dtype=float)


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    ids: tuple[str, ...]
    passages: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        if len(self.ids) != len(self.passages) or len(self.ids) != self.vectors.shape[0]:
            raise InputError("ids, passages and vectors must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("duplicate passage id")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise InputError("index vectors must be unit-normalised")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __eq__(self, other):
        if not isinstance(other, RetrievalIndex):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.passages == other.passages
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<III", VERSION, self.dim, len(self)))
            for pid, text in zip(self.ids, self.passages):
                for s in (pid, text):
                    b = s.encode("utf-8")
                    f.write(struct.pack("<I", len(b)))
                    f.write(b)
            f.write(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())
        path.with_name(path.name + ".ids").write_text("".join(i + "\n" for i in self.ids), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        data = Path(path).read_bytes()
        if data[: len(MAGIC)] != MAGIC:
            raise InputError(f"{path}: not a retrieval index file")
        pos = len(MAGIC)
        version, dim, count = struct.unpack_from("<III", data, pos)
        if version != VERSION:
            raise InputError(f"{path}: unsupported index version {version}")
        pos += 12
        ids, passages = [], []
        for _ in range(count):
            pair = []
            for _ in range(2):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                pair.append(data[pos : pos + n].decode("utf-8"))
                pos += n
            ids.append(pair[0])
            passages.append(pair[1])
        vectors = np.frombuffer(data, dtype="<f8", count=count * dim, offset=pos).reshape(count, dim).astype(float)
        return cls(tuple(ids), tuple(passages), vectors)


def build_index(provider, passages: Sequence[tuple[str, str]]) -> RetrievalIndex:
    """Index ``(id, text)`` pairs in input order."""
    if not passages:
        raise ConfigurationError("cannot build an index over an empty corpus")
    ids = tuple(p[0] for p in passages)
    if any("\n" in i for i in ids):
        raise InputError("passage ids may not contain newlines")
    texts = tuple(p[1] for p in passages)
    return RetrievalIndex(ids, texts, embed(provider, texts))


def retrieve_topk(index: RetrievalIndex, query: np.ndarray, k: int = DEFAULT_K) -> list[tuple[str, float]]:
    """Exhaustive cosine scan; ties keep ascending passage order."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    q = np.asarray(query, dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > 1e-9:
        raise InputError("query vector must be unit-normalised")
    # row-wise reduction so identical rows always produce identical sims
    sims = np.sum(index.vectors * q, axis=1)
    order = np.lexsort((np.arange(len(sims)), -sims))[:k]
    return [(index.ids[i], float(sims[i])) for i in order]


def assemble_rag_prompt(question: str, contexts: Sequence[str]) -> str:
    """Numbered contexts in retrieval order, then the question."""
    if not contexts:
        return f"Question: {question}"
    block = "\n".join(f"[{i}] {c}" for i, c in enumerate(contexts, 1))
    return f"Context:\n{block}\n\nQuestion: {question}"


def rag_prompt(index: RetrievalIndex, provider, question: str, k: int = DEFAULT_K) -> str:
    q = embed(provider, [question])[0]
    by_id = dict(zip(index.ids, index.passages))
    return assemble_rag_prompt(question, [by_id[i] for i, _ in retrieve_topk(index, q, k)])


class RagModel:
    """A generator that sees retrieved passages in front of every user query.

    ``prefix``/``prompt`` arguments are the user's query; the model is then
    conditioned on the assembled RAG prompt. Unconditioned scoring retrieves
    with the scored text itself as the query.
    """

    def __init__(self, model, index: RetrievalIndex, provider, k: int = DEFAULT_K):
        if k < 1:
            raise ConfigurationError("k must be >= 1")
        self.model, self.index, self.provider, self.k = model, index, provider, k
        self.name = f"rag({getattr(model, 'name', 'model')})"
        self.max_parallel = getattr(model, "max_parallel", 1)
        self._by_id = dict(zip(index.ids, index.passages))

    def contexts(self, query: str) -> list[str]:
        q = embed(self.provider, [query])[0]
        return [self._by_id[i] for i, _ in retrieve_topk(self.index, q, self.k)]

    def prompt_for(self, prefix: str | None, text: str | None = None) -> str:
        if prefix:
            return assemble_rag_prompt(prefix, self.contexts(prefix))
        block = "\n".join(f"[{i}] {c}" for i, c in enumerate(self.contexts(text or ""), 1))
        return f"Context:\n{block}"

    def distributions(self, text: str, prefix: str | None = None):
        return self.model.distributions(text, self.prompt_for(prefix, text))

    def score(self, text: str, prefix: str | None = None):
        return self.model.score(text, self.prompt_for(prefix, text))

    def generate(self, prompt: str, max_tokens: int, temperature: float = 0.0, seed: int = 0):
        return self.model.generate(self.prompt_for(prompt), max_tokens, temperature, seed)
