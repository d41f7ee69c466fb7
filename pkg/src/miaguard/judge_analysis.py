"""Post-hoc judge-bias analysis: label each judge decision target/base/mixed."""

from __future__ import annotations

import string
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from .errors import InputError
from .metrics import f1_tokens

F1_FLOOR = 0.3
DOMINANCE = 1.15
PREFIX_WIDTH = 50

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class Category(str, Enum):
    TARGET = "target"
    BASE = "base"
    MIXED = "mixed"


class Reason(str, Enum):
    EXACT = "exact"
    PREFIX = "prefix"
    F1 = "f1"
    BOTH = "both"
    SIMILARITY_TIE = "similarity tie"
    F1_TIE = "f1 tie"


@dataclass(frozen=True)
class JudgeDecisionRecord:
    judge_answer: str
    target_answer: str
    base_answer: str
    category: Category
    reason: Reason


@dataclass(frozen=True)
class BiasReport:
    n_target: int
    n_base: int
    n_mixed: int
    p_target: float
    p_base: float
    p_mixed: float
    bias: float

    @property
    def total(self) -> int:
        return self.n_target + self.n_base + self.n_mixed


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace (articles are kept)."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def prefix_similarity(a: str, b: str, width: int = PREFIX_WIDTH) -> float:
    """Longest-common-prefix length over the first ``width`` characters,
    divided by ``min(width, max(len(a), len(b)))``."""
    a, b = a[:width], b[:width]
    denom = min(width, max(len(a), len(b)))
    if denom == 0:
        return 1.0
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n / denom


def categorize(judge: str, target: str, base: str) -> JudgeDecisionRecord:
    j, t, b = normalize_answer(judge), normalize_answer(target), normalize_answer(base)

    def rec(cat, why):
        return JudgeDecisionRecord(judge, target, base, cat, why)

    if j == t and j == b:
        return rec(Category.MIXED, Reason.BOTH)
    if j == t:
        return rec(Category.TARGET, Reason.EXACT)
    if j == b:
        return rec(Category.BASE, Reason.EXACT)

    jt, tt, bt = j.split(), t.split(), b.split()
    f1_t, f1_b = f1_tokens(jt, tt), f1_tokens(jt, bt)
    if f1_t < F1_FLOOR and f1_b < F1_FLOOR:
        p_t = prefix_similarity(j, t)
        p_b = prefix_similarity(j, b)
        if p_t > p_b:
            return rec(Category.TARGET, Reason.PREFIX)
        if p_b > p_t:
            return rec(Category.BASE, Reason.PREFIX)
        return rec(Category.MIXED, Reason.SIMILARITY_TIE)
    if f1_t > DOMINANCE * f1_b:
        return rec(Category.TARGET, Reason.F1)
    if f1_b > DOMINANCE * f1_t:
        return rec(Category.BASE, Reason.F1)
    return rec(Category.MIXED, Reason.F1_TIE)


def bias_from_counts(n_target: int, n_base: int, n_mixed: int) -> BiasReport:
    n = n_target + n_base + n_mixed
    if n == 0:
        raise InputError("bias report needs at least one decision")
    return BiasReport(
        n_target, n_base, n_mixed,
        p_target=n_target / n,
        p_base=n_base / n,
        p_mixed=n_mixed / n,
        # from counts, so 199/104/1000 gives exactly 0.095
        bias=abs(n_target - n_base) / n,
    )


def bias_report(records: Iterable[JudgeDecisionRecord]) -> BiasReport:
    counts = {c: 0 for c in Category}
    for r in records:
        counts[r.category] += 1
    return bias_from_counts(counts[Category.TARGET], counts[Category.BASE], counts[Category.MIXED])
