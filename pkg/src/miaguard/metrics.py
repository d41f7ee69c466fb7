"""Privacy metrics (ROC, AUC, ASR, TPR at fixed FPR) and QA utility metrics."""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InputError


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise InputError("scores and labels must be 1-D and of equal length")
    if not np.isin(y, (0, 1)).all():
        raise InputError("labels must be 0 (non-member) or 1 (member)")
    if not np.isfinite(s).all():
        raise InputError("scores must be finite")
    n_pos = int((y == 1).sum())
    if n_pos == 0 or n_pos == len(y):
        raise InputError("need at least one member and one non-member")
    return s, y.astype(int)


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """ROC points for the rule ``score >= t`` over every distinct score.

    Starts at (0, 0) and ends at (1, 1); tied scores move along a diagonal.
    """
    s, y = _split(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    pts = [(0.0, 0.0)]
    pts += [(fp[i] / n_neg, tp[i] / n_pos) for i in ends]
    return [(float(f), float(t)) for f, t in pts]


def auc(scores, labels) -> float:
    """P(member score > non-member score) + P(tie)/2 (Mann-Whitney U / n+ n-)."""
    s, y = _split(scores, labels)
    ranks = rankdata(s, method="average")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_trapezoid(points) -> float:
    f = np.array([p[0] for p in points])
    t = np.array([p[1] for p in points])
    return float(np.sum((f[1:] - f[:-1]) * (t[1:] + t[:-1]) / 2.0))


def asr(scores, labels) -> float:
    """Best-threshold accuracy of the rule ``score > t => member``.

    The sweep covers t = -inf and every distinct score.
    """
    s, y = _split(scores, labels)
    n = len(y)
    n_pos = int(y.sum())
    best = n_pos / n  # t = -inf: everything predicted member
    order = np.argsort(s, kind="mergesort")
    s, y = s[order], y[order]
    # at threshold s[i] (end of a tie run), samples 0..i predicted non-member
    neg_below = np.cumsum(1 - y)
    pos_below = np.cumsum(y)
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    correct = neg_below[ends] + (n_pos - pos_below[ends])
    return float(max(best, correct.max() / n))


def tpr_at_fpr(scores, labels, fpr_target: float = 0.01) -> float:
    """Highest TPR over ROC operating points with FPR <= target (no interpolation)."""
    if not 0.0 <= fpr_target <= 1.0:
        raise InputError("fpr target must lie in [0, 1]")
    return max(t for f, t in roc_curve(scores, labels) if f <= fpr_target)


@dataclass(frozen=True)
class RocSummary:
    points: list[tuple[float, float]]
    auc: float
    asr: float
    tpr_at: dict[float, float] = field(default_factory=dict)


def summarize(scores, labels, fpr_targets=(0.01,)) -> RocSummary:
    pts = roc_curve(scores, labels)
    return RocSummary(
        points=pts,
        auc=auc(scores, labels),
        asr=asr(scores, labels),
        tpr_at={float(f): tpr_at_fpr(scores, labels, f) for f in fpr_targets},
    )


# -- utility ---------------------------------------------------------------

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_qa(text: str) -> str:
    """Lowercase, drop punctuation and English articles, collapse whitespace."""
    text = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, gold: str) -> int:
    return int(normalize_qa(prediction) == normalize_qa(gold))


def f1_tokens(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, gold: str) -> float:
    return f1_tokens(normalize_qa(prediction).split(), normalize_qa(gold).split())


# -- reporting ---------------------------------------------------------------


def relative_change(defended: float, baseline: float) -> float | None:
    """Signed percent change; ``None`` when the baseline is zero."""
    if baseline == 0:
        return None
    return 100.0 * (defended - baseline) / baseline


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def format_change(change: float | None) -> str:
    if change is None:
        return "n/a"
    r = round_half_away(change)
    return f"+{r}" if r > 0 else str(r)


def format_cell(value: float, change: float | None = None) -> str:
    """Table cell such as ``0.601(-21)``."""
    return f"{value:.3f}({format_change(change)})"
