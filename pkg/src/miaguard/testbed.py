"""Synthetic offline testbed.

Text comes from a sparse random Markov chain over pseudo-words. A record is a
question (chain text ending in an entity and a relation word) and an answer
(a string of dedicated fact words), i.e. a fact that can only be known by memorising it.
Entity/relation pairs are drawn from a shared pool, so some non-member
questions collide with member ones and separation stays imperfect.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigurationError
from .model_access import ToyModel, fit_toy_lm

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")


@dataclass(frozen=True)
class TestbedConfig:
    __test__ = False  # not a pytest class

    n_members: int = 500
    n_eval: int = 200
    n_background: int = 2000
    vocab_size: int = 50
    branching: int = 3
    zipf: float = 1.1
    question_len: int = 8
    answer_len: int = 12
    n_entities: int = 150
    n_relations: int = 4
    clause_len: int = 3
    fact_vocab: int = 100
    order: int = 3
    smoothing: float = 0.1
    epochs: int = 2
    rag_cache_weight: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_eval > self.n_members:
            raise ConfigurationError("n_eval cannot exceed n_members")
        if min(self.n_members, self.n_eval, self.vocab_size, self.branching,
               self.answer_len, self.epochs) < 1 or min(self.n_entities, self.n_relations) < 0:
            raise ConfigurationError("testbed sizes must be positive")
        if self.question_len < 3:
            raise ConfigurationError("question_len must be >= 3")
        if self.branching > self.vocab_size:
            raise ConfigurationError("branching cannot exceed vocabulary size")

    def to_dict(self) -> dict:
        return asdict(self)


def pseudo_words(n: int, rng: np.random.Generator) -> list[str]:
    words: set[str] = set()
    while len(words) < n:
        k = int(rng.integers(2, 4))
        words.add("".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                          for _ in range(k)))
    return sorted(words)


class MarkovSource:
    """Each word has ``branching`` successors with Zipf-shaped weights."""

    def __init__(self, vocab_size: int, branching: int, zipf: float, seed: int, n_extra: int = 0):
        rng = np.random.default_rng(seed)
        words = pseudo_words(vocab_size + n_extra, rng)
        order = rng.permutation(len(words))
        self.words = sorted(words[i] for i in order[:vocab_size])
        self.extra = [words[i] for i in order[vocab_size:]]
        self.succ = np.stack([rng.choice(vocab_size, size=branching, replace=False) for _ in range(vocab_size)])
        w = 1.0 / np.arange(1, branching + 1) ** zipf
        self.weights = w / w.sum()

    def document(self, length: int, rng: np.random.Generator) -> str:
        i = int(rng.integers(len(self.words)))
        out = [i]
        for _ in range(length - 1):
            i = int(self.succ[i, rng.choice(len(self.weights), p=self.weights)])
            out.append(i)
        return " ".join(self.words[j] for j in out)


@dataclass(frozen=True)
class Testbed:
    __test__ = False

    config: TestbedConfig
    members: tuple[tuple[str, str], ...]
    nonmembers: tuple[tuple[str, str], ...]
    background: tuple[str, ...]
    reference_corpus: tuple[str, ...]
    recall_prefix: str
    target: ToyModel
    base: ToyModel
    reference: ToyModel

    @property
    def member_documents(self) -> list[str]:
        return [f"{q} {a}" for q, a in self.members]

    def records(self):
        from .harness import DatasetRecord

        n = self.config.n_eval
        recs = [DatasetRecord(f"m{i:04d}", q, None, a, "member") for i, (q, a) in enumerate(self.members[:n])]
        recs += [DatasetRecord(f"n{i:04d}", q, None, a, "nonmember") for i, (q, a) in enumerate(self.nonmembers)]
        return recs

    def rag_target(self) -> ToyModel:
        """Base model with a copy cache, to be paired with a retrieval index."""
        return self.base.with_options(cache_weight=self.config.rag_cache_weight, name="rag-target")


def build_testbed(config: TestbedConfig = TestbedConfig()) -> Testbed:
    c = config
    src = MarkovSource(c.vocab_size, c.branching, c.zipf, c.seed, c.n_entities + c.n_relations + c.fact_vocab)
    entities = src.extra[: c.n_entities]
    relations = src.extra[c.n_entities : c.n_entities + c.n_relations]
    fact_words = src.extra[c.n_entities + c.n_relations :]
    rng = np.random.default_rng([c.seed, 1])
    L = c.question_len + c.answer_len

    facts: dict[tuple[str, str], str] = {}
    fact_rng = np.random.default_rng([c.seed, 2])

    def pair():
        if not (entities and relations):
            return src.document(c.question_len, rng), src.document(c.answer_len, rng)
        e, r = entities[rng.integers(len(entities))], relations[rng.integers(len(relations))]
        q = f"{src.document(c.question_len - 2, rng)} {e} {r}"
        # one fixed answer per (entity, relation): a fresh chain walk, so it can
        # only be known by memorising some record that asks about it
        if (e, r) not in facts:
            if fact_words:
                words = [fact_words[i] for i in fact_rng.integers(len(fact_words), size=c.answer_len)]
            else:
                words = src.document(c.answer_len, fact_rng).split()
            if 0 < c.clause_len < len(words):
                words[c.clause_len - 1] += ","
            facts[(e, r)] = " ".join(words)
        return q, facts[(e, r)]

    members = tuple(pair() for _ in range(c.n_members))
    nonmembers = tuple(pair() for _ in range(c.n_eval))
    background = tuple(src.document(L, rng) for _ in range(c.n_background))
    reference_corpus = tuple(src.document(L, rng) for _ in range(max(c.n_background, 1)))
    recall_prefix = src.document(L, rng)

    # every model knows every pseudo-word so base and target share a vocabulary
    lexicon = " ".join(src.words + src.extra + [f"{w}," for w in (fact_words or src.words)])
    member_docs = [f"{q} {a}" for q, a in members]
    target = fit_toy_lm(list(background) + member_docs * c.epochs + [lexicon], c.order, c.smoothing, name="target")
    base = fit_toy_lm(list(background) + [lexicon], c.order, c.smoothing, name="base")
    reference = fit_toy_lm(list(reference_corpus) + [lexicon], c.order, c.smoothing, name="reference")
    return Testbed(c, members, nonmembers, background, reference_corpus, recall_prefix, target, base, reference)
