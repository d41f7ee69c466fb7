"""Uniform access to generation endpoints.

Every model-like object in the package (the in-process :class:`ToyModel`,
:class:`RemoteModel` speaking the completion wire protocol, and the defended
wrappers in :mod:`miaguard.defenses`) exposes the same three methods::

    score(text, prefix=None) -> TokenScoredText
    distributions(text, prefix=None) -> TokenDistributions
    generate(prompt, max_tokens, temperature=0.0, seed=0) -> GeneratedAnswer

Conditioning on a prefix always means scoring ``prefix + " " + text`` and
keeping the positions that start inside ``text``; the toy model, the mock
server and the HTTP client all follow this convention so results agree
bit-for-bit across transports.
"""

from __future__ import annotations

import json
import math
import re
import socket
import time
import urllib.error
import urllib.request
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CapabilityError, ConfigurationError, InputError, ProtocolError, TransportError
from .utils import exact_mean

UNK = "<unk>"
BOS = "<s>"
TOKENIZERS = ("whitespace", "byte")

_WS = re.compile(r"\S+")


def tokenize(text: str, kind: str = "whitespace") -> list[tuple[str, int]]:
    """Split ``text`` into ``(token, char_offset)`` pairs."""
    if kind == "whitespace":
        return [(m.group(), m.start()) for m in _WS.finditer(text)]
    if kind == "byte":
        out = []
        for i, ch in enumerate(text):
            out.extend((chr(b), i) for b in ch.encode("utf-8"))
        return out
    raise ConfigurationError(f"unknown tokenizer {kind!r}; expected one of {TOKENIZERS}")


def detokenize(tokens: Sequence[str], kind: str = "whitespace") -> str:
    if kind == "whitespace":
        return " ".join(tokens)
    return bytes(ord(t) for t in tokens).decode("utf-8", errors="replace")


def join_prompt(prefix: str | None, text: str) -> str:
    return f"{prefix} {text}" if prefix else text


def region_start(prefix: str | None) -> int:
    """Character offset where ``text`` begins inside ``join_prompt(prefix, text)``."""
    return len(prefix) + 1 if prefix else 0


def distribution_moments(logprobs: np.ndarray) -> tuple[float, float]:
    """Mean and standard deviation of log p under p itself."""
    lp = np.asarray(logprobs, dtype=float)
    finite = np.isfinite(lp)
    lp = lp[finite]
    if lp.size == 0:
        raise InputError("distribution has no finite log-probabilities")
    if lp.max() == lp.min():
        return float(lp[0]), 0.0
    p = np.exp(lp)
    p = p / p.sum()
    mu = float(np.dot(p, lp))
    var = float(np.dot(p, (lp - mu) ** 2))
    return mu, math.sqrt(max(var, 0.0))


@dataclass(frozen=True)
class TokenScoredText:
    """Per-token negative log-likelihoods (nats) of a piece of text."""

    tokens: tuple[str, ...]
    nll: tuple[float, ...]
    text: str
    moments: tuple[tuple[float, float], ...] | None = None
    offsets: tuple[int, ...] | None = None
    approximate: bool = False

    def __post_init__(self):
        if len(self.tokens) != len(self.nll):
            raise InputError(f"{len(self.tokens)} tokens but {len(self.nll)} nll values")
        if any(not (v >= 0.0) for v in self.nll):
            raise InputError("nll values must be non-negative")
        if self.moments is not None:
            if len(self.moments) != len(self.tokens):
                raise InputError("moments must have one (mu, sigma) pair per token")
            if any(s < 0 for _, s in self.moments):
                raise InputError("sigma must be non-negative")
        if self.offsets is not None and len(self.offsets) != len(self.tokens):
            raise InputError("offsets must have one entry per token")

    def __len__(self):
        return len(self.tokens)

    @property
    def mean_nll(self) -> float:
        if not self.nll:
            return 0.0
        return exact_mean(self.nll)

    def truncated(self, n: int) -> "TokenScoredText":
        if n >= len(self):
            return self
        if self.offsets is not None:
            text = self.text[: self.offsets[n]].rstrip() if n else ""
        else:
            text = "".join(self.tokens[:n])
        return TokenScoredText(
            tokens=self.tokens[:n],
            nll=self.nll[:n],
            text=text,
            moments=None if self.moments is None else self.moments[:n],
            offsets=None if self.offsets is None else self.offsets[:n],
            approximate=self.approximate,
        )


@dataclass(frozen=True)
class GeneratedAnswer:
    """Generated text with the scores of the generated region only."""

    text: str
    scored: TokenScoredText

    @property
    def empty(self) -> bool:
        return len(self.scored) == 0

    @property
    def mean_loss(self) -> float:
        # Defined as 0 for an empty answer; check ``empty`` to tell them apart.
        return self.scored.mean_nll

    @classmethod
    def empty_answer(cls) -> "GeneratedAnswer":
        return cls("", TokenScoredText((), (), ""))

    def truncated(self, n: int) -> "GeneratedAnswer":
        scored = self.scored.truncated(n)
        return self if scored is self.scored else GeneratedAnswer(scored.text, scored)


@dataclass(frozen=True)
class TokenDistributions:
    """Next-token log-probability vectors at each position of a text.

    ``index[t]`` locates the observed token inside ``logprobs[t]``. Vectors
    may cover a truncated support (top-k plus one residual pseudo-token), in
    which case ``approximate`` is set.
    """

    tokens: tuple[str, ...]
    logprobs: tuple[np.ndarray, ...]
    index: tuple[int, ...]
    text: str
    offsets: tuple[int, ...] | None = None
    approximate: bool = False

    def to_scored(self) -> TokenScoredText:
        nll = tuple(max(0.0, 0.0 - float(lp[i])) for lp, i in zip(self.logprobs, self.index))
        return TokenScoredText(
            tokens=self.tokens,
            nll=nll,
            text=self.text,
            moments=tuple(distribution_moments(lp) for lp in self.logprobs),
            offsets=self.offsets,
            approximate=self.approximate,
        )

    def replace_logprobs(self, logprobs: Sequence[np.ndarray]) -> "TokenDistributions":
        return TokenDistributions(
            self.tokens, tuple(logprobs), self.index, self.text, self.offsets, self.approximate
        )


# ---------------------------------------------------------------------------
# toy n-gram model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyModel:
    """Add-lambda smoothed n-gram model with uniform backoff for unseen contexts.

    ``cache_weight`` > 0 mixes in an unsmoothed n-gram cache built from the
    tokens preceding each position (prompt included), which lets the toy
    model copy from retrieved passages in RAG-style runs.
    """

    order: int
    vocabulary: tuple[str, ...]
    counts: Mapping[tuple[str, ...], Mapping[str, int]]
    smoothing: float
    tokenizer: str = "whitespace"
    cache_weight: float = 0.0
    name: str = "toy"
    max_parallel: int = 8

    def __post_init__(self):
        if self.order < 1:
            raise ConfigurationError("order must be >= 1")
        if not self.smoothing > 0:
            raise ConfigurationError("smoothing must be > 0")
        if not 0.0 <= self.cache_weight < 1.0:
            raise ConfigurationError("cache_weight must lie in [0, 1)")
        if not self.vocabulary:
            raise ConfigurationError("empty vocabulary")

    @cached_property
    def _ids(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.vocabulary)}

    @cached_property
    def _table(self) -> dict[tuple[str, ...], np.ndarray]:
        V = len(self.vocabulary)
        table = {}
        for ctx, nexts in self.counts.items():
            p = np.full(V, self.smoothing)
            for tok, c in nexts.items():
                p[self._ids[tok]] += c
            p /= sum(nexts.values()) + self.smoothing * V
            table[ctx] = np.log(p)
        return table

    @cached_property
    def _uniform(self) -> np.ndarray:
        V = len(self.vocabulary)
        return np.full(V, -math.log(V))

    def with_options(self, **kw) -> "ToyModel":
        fields = dict(
            order=self.order, vocabulary=self.vocabulary, counts=self.counts,
            smoothing=self.smoothing, tokenizer=self.tokenizer,
            cache_weight=self.cache_weight, name=self.name, max_parallel=self.max_parallel,
        )
        fields.update(kw)
        return ToyModel(**fields)

    def _canon(self, tok: str) -> str:
        if tok in self._ids:
            return tok
        if UNK in self._ids:
            return UNK
        raise InputError(f"token {tok!r} is outside the vocabulary and the model has no {UNK}")

    def _context(self, seq: Sequence[str]) -> tuple[str, ...]:
        k = self.order - 1
        if k == 0:
            return ()
        ctx = list(seq[-k:])
        return (BOS,) * (k - len(ctx)) + tuple(ctx)

    def next_logprobs(self, history: Sequence[str], cache=None) -> np.ndarray:
        """Log-probabilities over the vocabulary after canonical tokens ``history``."""
        ctx = self._context(history)
        lp = self._table.get(ctx, self._uniform)
        if self.cache_weight > 0 and cache is not None:
            nexts = cache.get(ctx)
            if nexts:
                total = sum(nexts.values())
                pc = np.zeros(len(self.vocabulary))
                for tok, c in nexts.items():
                    pc[self._ids[tok]] = c / total
                p = (1.0 - self.cache_weight) * np.exp(lp) + self.cache_weight * pc
                lp = np.log(p)
        return lp

    def _cache_add(self, cache, history: Sequence[str], tok: str) -> None:
        if self.cache_weight > 0 and history:
            # only transitions with a real (unpadded) context enter the cache
            if len(history) >= self.order - 1:
                cache[self._context(history)][tok] += 1

    def _walk(self, pieces: Sequence[tuple[str, int]], start: int) -> tuple[list, list, list, list]:
        history: list[str] = []
        cache: dict = defaultdict(Counter)
        toks, lps, idx, offs = [], [], [], []
        for tok, off in pieces:
            canon = self._canon(tok)
            if off >= start:
                lp = self.next_logprobs(history, cache)
                toks.append(tok)
                lps.append(lp)
                idx.append(self._ids[canon])
                offs.append(off - start)
            self._cache_add(cache, history, canon)
            history.append(canon)
        return toks, lps, idx, offs

    def distributions(self, text: str, prefix: str | None = None) -> TokenDistributions:
        pieces = tokenize(join_prompt(prefix, text), self.tokenizer)
        toks, lps, idx, offs = self._walk(pieces, region_start(prefix))
        if not toks:
            raise InputError("text tokenizes to zero tokens")
        return TokenDistributions(tuple(toks), tuple(lps), tuple(idx), text, tuple(offs))

    def score(self, text: str, prefix: str | None = None) -> TokenScoredText:
        return self.distributions(text, prefix).to_scored()

    def generate(self, prompt: str, max_tokens: int, temperature: float = 0.0, seed: int = 0) -> GeneratedAnswer:
        if max_tokens < 1:
            raise ConfigurationError("max_tokens must be >= 1")
        if temperature < 0:
            raise ConfigurationError("temperature must be >= 0")
        rng = np.random.default_rng(seed)
        ctx_text = prompt + " " if prompt else ""
        history: list[str] = []
        cache: dict = defaultdict(Counter)
        for tok, _ in tokenize(ctx_text, self.tokenizer):
            canon = self._canon(tok)
            self._cache_add(cache, history, canon)
            history.append(canon)
        out, lps, idx = [], [], []
        for _ in range(max_tokens):
            lp = self.next_logprobs(history, cache)
            if temperature == 0:
                i = int(np.argmax(lp))
            else:
                z = lp / temperature
                p = np.exp(z - z.max())
                i = int(rng.choice(len(p), p=p / p.sum()))
            tok = self.vocabulary[i]
            out.append(tok)
            lps.append(lp)
            idx.append(i)
            self._cache_add(cache, history, tok)
            history.append(tok)
        text = detokenize(out, self.tokenizer)
        offs = tuple(off for _, off in tokenize(text, self.tokenizer))
        if len(offs) != len(out):
            offs = None
        dist = TokenDistributions(tuple(out), tuple(lps), tuple(idx), text, offs)
        return GeneratedAnswer(text, dist.to_scored())


def fit_toy_lm(
    corpus: Iterable[str],
    order: int = 3,
    smoothing: float = 0.1,
    tokenizer: str = "whitespace",
    *,
    unk: bool = True,
    name: str = "toy",
    cache_weight: float = 0.0,
) -> ToyModel:
    """Count n-grams of ``corpus``. Refitting the same corpus gives an equal model."""
    corpus = list(corpus)
    if not corpus:
        raise ConfigurationError("cannot fit a toy model on an empty corpus")
    if order < 1:
        raise ConfigurationError("order must be >= 1")
    if not smoothing > 0:
        raise ConfigurationError("smoothing must be > 0")
    counts: dict[tuple[str, ...], Counter] = defaultdict(Counter)
    vocab = set()
    k = order - 1
    for doc in corpus:
        toks = [t for t, _ in tokenize(doc, tokenizer)]
        vocab.update(toks)
        padded = [BOS] * k + toks
        for i, tok in enumerate(toks):
            counts[tuple(padded[i : i + k])][tok] += 1
    if not vocab:
        raise ConfigurationError("corpus contains no tokens")
    vocabulary = tuple(sorted(vocab))
    if unk and UNK not in vocab:
        vocabulary += (UNK,)
    frozen = {ctx: dict(sorted(c.items())) for ctx, c in sorted(counts.items())}
    return ToyModel(order, vocabulary, frozen, float(smoothing), tokenizer, cache_weight, name)


def toy_lm_score(model: ToyModel, text: str) -> TokenScoredText:
    return model.score(text)


# ---------------------------------------------------------------------------
# remote endpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Endpoint:
    """Locator for a completion-style HTTP endpoint."""

    base_url: str
    model: str
    auth_token: str | None = field(default=None, repr=False)
    timeout: float = 30.0
    max_parallel: int = 4
    retries: int = 3
    top_k: int = 20

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ConfigurationError("max_parallel must be >= 1")
        if not self.timeout > 0:
            raise ConfigurationError("timeout must be > 0")
        if self.retries < 1:
            raise ConfigurationError("retries must be >= 1")


def approximate_moments(top: Mapping[str, float], observed_token: str, observed_lp: float) -> tuple[np.ndarray, int, bool]:
    """Support vector built from top-k log-probs plus a residual pseudo-token.

    Returns ``(logprobs, observed_index, approximate)``.
    """
    items = dict(top)
    items.setdefault(observed_token, observed_lp)
    keys = list(items)
    lps = [float(items[k]) for k in keys]
    mass = math.fsum(math.exp(v) for v in lps)
    approx = mass < 1.0 - 1e-12
    if approx:
        lps.append(math.log(1.0 - mass))
    return np.array(lps), keys.index(observed_token), approx


class RemoteModel:
    """Client for the completion wire protocol (``POST {base_url}/v1/completions``)."""

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint
        self.name = endpoint.model
        self.max_parallel = endpoint.max_parallel

    def __repr__(self):
        return f"RemoteModel({self.endpoint.base_url!r}, model={self.name!r})"

    def _post(self, payload: dict) -> dict:
        ep = self.endpoint
        body = json.dumps(payload).encode()
        headers = {"Content-Type": "application/json"}
        if ep.auth_token:
            headers["Authorization"] = f"Bearer {ep.auth_token}"
        url = ep.base_url.rstrip("/") + "/v1/completions"
        last = ""
        for attempt in range(1, ep.retries + 1):
            req = urllib.request.Request(url, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=ep.timeout) as resp:
                    return json.loads(resp.read())
            except urllib.error.HTTPError as e:
                detail = _error_message(e)
                if e.code < 500:
                    if "echo" in detail.lower():
                        raise CapabilityError("echo", detail) from e
                    raise ProtocolError(f"HTTP {e.code}: {detail}") from e
                last = f"HTTP {e.code}: {detail}"
            except (urllib.error.URLError, socket.timeout, ConnectionError) as e:
                last = str(getattr(e, "reason", e))
            except json.JSONDecodeError as e:
                raise ProtocolError(f"unparseable response body: {e}") from e
            if attempt < ep.retries:
                time.sleep(0.05 * 2 ** (attempt - 1))
        raise TransportError(f"request to {url} failed: {last}", attempts=ep.retries)

    @staticmethod
    def _logprobs(resp: dict) -> tuple[dict, str]:
        try:
            choice = resp["choices"][0]
        except (KeyError, IndexError, TypeError) as e:
            raise ProtocolError("response has no choices") from e
        lp = choice.get("logprobs")
        if not lp or "tokens" not in lp or "token_logprobs" not in lp:
            raise CapabilityError("logprobs", "response carries no token log-probabilities")
        return lp, choice.get("text", "")

    def _region(self, lp: dict, prefix: str | None) -> list[int]:
        n = len(lp["tokens"])
        offsets = lp.get("text_offset")
        if offsets is None:
            if prefix:
                raise CapabilityError("text_offset", "needed to split prefix from text")
            keep = list(range(n))
        else:
            start = region_start(prefix)
            keep = [i for i in range(n) if offsets[i] >= start]
        # positions without a log-prob (the very first prompt token) are dropped
        while keep and lp["token_logprobs"][keep[0]] is None:
            keep.pop(0)
        return keep

    def _scored(self, lp: dict, keep: list[int], text: str, base_offset: int) -> TokenScoredText:
        tokens = tuple(lp["tokens"][i] for i in keep)
        vals = [lp["token_logprobs"][i] for i in keep]
        if any(v is None for v in vals):
            raise ProtocolError("missing token log-probability inside the scored region")
        nll = tuple(max(0.0, -float(v)) for v in vals)
        approx = False
        moments = None
        if lp.get("moments") is not None:
            moments = tuple((float(lp["moments"][i][0]), float(lp["moments"][i][1])) for i in keep)
        elif lp.get("top_logprobs") is not None:
            ms = []
            for i in keep:
                vec, _, a = approximate_moments(lp["top_logprobs"][i] or {}, lp["tokens"][i], lp["token_logprobs"][i])
                approx |= a
                ms.append(distribution_moments(vec))
            moments = tuple(ms)
        offsets = None
        if lp.get("text_offset") is not None:
            offs = tuple(lp["text_offset"][i] - base_offset for i in keep)
            if all(0 <= o <= len(text) for o in offs):
                offsets = offs
        return TokenScoredText(tokens, nll, text, moments, offsets, approx)

    def score(self, text: str, prefix: str | None = None) -> TokenScoredText:
        resp = self._post({
            "model": self.name, "prompt": join_prompt(prefix, text), "max_tokens": 0,
            "temperature": 0.0, "seed": 0, "logprobs": True, "echo": True,
        })
        lp, _ = self._logprobs(resp)
        keep = self._region(lp, prefix)
        if not keep:
            raise InputError("text tokenizes to zero scoreable tokens")
        return self._scored(lp, keep, text, region_start(prefix))

    def distributions(self, text: str, prefix: str | None = None, top_k: int | None = None) -> TokenDistributions:
        resp = self._post({
            "model": self.name, "prompt": join_prompt(prefix, text), "max_tokens": 0,
            "temperature": 0.0, "seed": 0, "logprobs": True, "echo": True,
            "top_logprobs": top_k or self.endpoint.top_k,
        })
        lp, _ = self._logprobs(resp)
        if lp.get("top_logprobs") is None:
            raise CapabilityError("top_logprobs")
        keep = self._region(lp, prefix)
        if not keep:
            raise InputError("text tokenizes to zero scoreable tokens")
        vecs, idx, approx = [], [], False
        for i in keep:
            vec, j, a = approximate_moments(lp["top_logprobs"][i] or {}, lp["tokens"][i], lp["token_logprobs"][i])
            vecs.append(vec)
            idx.append(j)
            approx |= a
        scored = self._scored(lp, keep, text, region_start(prefix))
        return TokenDistributions(scored.tokens, tuple(vecs), tuple(idx), text, scored.offsets, approx)

    def generate(self, prompt: str, max_tokens: int, temperature: float = 0.0, seed: int = 0) -> GeneratedAnswer:
        if max_tokens < 1:
            raise ConfigurationError("max_tokens must be >= 1")
        if temperature < 0:
            raise ConfigurationError("temperature must be >= 0")
        resp = self._post({
            "model": self.name, "prompt": prompt, "max_tokens": int(max_tokens),
            "temperature": float(temperature), "seed": int(seed), "logprobs": True, "echo": False,
        })
        lp, text = self._logprobs(resp)
        if not lp["tokens"]:
            return GeneratedAnswer.empty_answer()
        keep = list(range(len(lp["tokens"])))
        return GeneratedAnswer(text, self._scored(lp, keep, text, 0))


def _error_message(e: urllib.error.HTTPError) -> str:
    try:
        body = json.loads(e.read())
        return str(body.get("error", {}).get("message", body))
    except Exception:
        return e.reason if isinstance(e.reason, str) else str(e)


def connect(target) -> object:
    """Turn an :class:`Endpoint` into a model object; pass model objects through."""
    return RemoteModel(target) if isinstance(target, Endpoint) else target


def score_tokens(endpoint, text: str, prefix: str | None = None) -> TokenScoredText:
    model = connect(endpoint)
    if not hasattr(model, "score"):
        raise CapabilityError("echo")
    return model.score(text, prefix)


def generate(endpoint, prompt: str, max_tokens: int, temperature: float = 0.0, seed: int = 0) -> GeneratedAnswer:
    return connect(endpoint).generate(prompt, max_tokens, temperature, seed)


# ---------------------------------------------------------------------------
# offline judge
# ---------------------------------------------------------------------------

_CLAUSE = re.compile(r"[,;:.!?\n]")


def first_clause(text: str) -> str:
    return _CLAUSE.split(text.strip(), maxsplit=1)[0].strip()


def mock_judge_policy(target_answer: str, base_answer: str, f1_threshold: float = 0.8) -> str:
    """Deterministic stand-in for an instruction-following judge.

    Identical candidates pass through; near-duplicates (token F1 at or above
    ``f1_threshold``) resolve to the base answer; anything else becomes a
    templated synthesis of both.
    """
    from .metrics import token_f1

    t, b = target_answer.strip(), base_answer.strip()
    if t == b:
        return t
    if not t:
        return b
    if b and token_f1(t, b) >= f1_threshold:
        return b
    clause = first_clause(t)
    if not b:
        return f"Combining both: ({clause})"
    return f"Combining both: {b} ({clause})"


_PHI = re.compile(
    r"Answer A \(target\): (?P<target>.*?)\nAnswer B \(base\): (?P<base>.*?)\n\nModel confidence",
    re.DOTALL,
)


class MockJudge:
    """Judge that reads the two candidates back out of the judge prompt."""

    name = "mock-judge"
    max_parallel = 64

    def __init__(self, f1_threshold: float = 0.8):
        self.f1_threshold = f1_threshold

    def complete(self, prompt: str, max_tokens: int = 128, temperature: float = 0.0, seed: int = 0) -> str:
        m = _PHI.search(prompt)
        if m is None:
            raise InputError("prompt is not a judge prompt")
        return mock_judge_policy(m.group("target"), m.group("base"), self.f1_threshold)

    def decide(self, target_answer: str, base_answer: str) -> str:
        return mock_judge_policy(target_answer, base_answer, self.f1_threshold)
