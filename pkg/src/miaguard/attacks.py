"""Membership-inference score functions.

Every scorer returns an :class:`AttackScore` oriented so that a higher value
means "more likely a member".
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import CapabilityError, ConfigurationError, InputError
from .model_access import TokenScoredText, connect, join_prompt
from .utils import derive_seed, exact_mean

ATTACKS = ("spv", "lira", "recall", "logloss", "zlib", "mink", "minkpp")
ZLIB_LEVEL = 6
DEFAULT_K = 0.2
PARAPHRASE_INSTRUCTION = "Paraphrase the following text:"


@dataclass(frozen=True)
class AttackScore:
    attack: str
    value: float
    approximate: bool = False
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ConfigurationError(f"unknown attack {self.attack!r}")
        if not math.isfinite(self.value):
            raise InputError(f"{self.attack} produced a non-finite score")


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    label: int
    score: AttackScore

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InputError("label must be 0 or 1")


def _require_tokens(scored: TokenScoredText):
    if len(scored) == 0:
        raise InputError("cannot score an empty token list")


def _n_select(k: float, T: int) -> int:
    if not 0 < k <= 1:
        raise ConfigurationError("k fraction must lie in (0, 1]")
    # guard against k*T landing a hair above an integer (0.1 * 30 = 3.0000000000000004)
    return max(1, math.ceil(k * T - 1e-9))


def score_logloss(scored: TokenScoredText) -> AttackScore:
    _require_tokens(scored)
    return AttackScore("logloss", -exact_mean(scored.nll), scored.approximate)


def zlib_length(text: str, level: int = ZLIB_LEVEL) -> int:
    return len(zlib.compress(text.encode("utf-8"), level))


def score_zlib(scored: TokenScoredText) -> AttackScore:
    if not scored.text:
        raise InputError("zlib score needs non-empty raw text")
    n = zlib_length(scored.text)
    if n == 0:
        raise RuntimeError("DEFLATE returned an empty stream")
    return AttackScore("zlib", -math.fsum(scored.nll) / n, scored.approximate)


def score_mink(scored: TokenScoredText, k: float = DEFAULT_K) -> AttackScore:
    """Mean log-prob of the ceil(k*T) highest-loss tokens."""
    _require_tokens(scored)
    n = _n_select(k, len(scored))
    worst = sorted(scored.nll, reverse=True)[:n]
    return AttackScore("mink", -exact_mean(worst), scored.approximate)


def minkpp_z(scored: TokenScoredText) -> np.ndarray:
    if scored.moments is None:
        raise CapabilityError("moments", "Min-K++ needs per-token distribution moments")
    lp = -np.asarray(scored.nll, dtype=float)
    mu = np.array([m for m, _ in scored.moments])
    sigma = np.array([s for _, s in scored.moments])
    z = np.zeros(len(lp))
    ok = sigma > 0
    z[ok] = (lp[ok] - mu[ok]) / sigma[ok]
    return z


def score_minkpp(scored: TokenScoredText, k: float = DEFAULT_K) -> AttackScore:
    """Mean of the ceil(k*T) smallest per-token z-scores (log p - mu) / sigma.

    Zero-spread positions contribute z = 0.
    """
    _require_tokens(scored)
    z = minkpp_z(scored)
    n = _n_select(k, len(scored))
    return AttackScore("minkpp", exact_mean(np.sort(z)[:n].tolist()), scored.approximate)


def recall_ratio(unconditional: float, conditional: float, invert: bool = False) -> AttackScore:
    if unconditional == 0:
        return AttackScore("recall", 1.0, flags=("degenerate",))
    value = conditional / unconditional
    return AttackScore("recall", -value if invert else value)


def score_recall(endpoint, text: str, nonmember_prefix: str, *, context: str | None = None,
                 invert: bool = False) -> AttackScore:
    """Ratio of text NLL with a known non-member prefix to text NLL without it.

    ``context`` is an optional prompt that both measurements condition on
    (the non-member prefix is placed in front of it).
    """
    if not nonmember_prefix:
        raise ConfigurationError("recall needs a non-empty non-member prefix")
    model = connect(endpoint)
    u = model.score(text, context)
    c = model.score(text, join_prompt(nonmember_prefix, context) if context else nonmember_prefix)
    out = recall_ratio(u.mean_nll, c.mean_nll, invert)
    if u.approximate or c.approximate:
        out = AttackScore(out.attack, out.value, True, out.flags)
    return out


def score_lira(target_scored: TokenScoredText, reference_scored: TokenScoredText) -> AttackScore:
    """Reference-model mean NLL minus target-model mean NLL on the same text."""
    if target_scored.text != reference_scored.text:
        raise InputError("target and reference must score the same raw text")
    _require_tokens(target_scored)
    _require_tokens(reference_scored)
    return AttackScore(
        "lira",
        reference_scored.mean_nll - target_scored.mean_nll,
        target_scored.approximate or reference_scored.approximate,
    )


class DropoutParaphraser:
    """Offline perturbation: drop each non-first word with probability ``rate``."""

    def __init__(self, rate: float = 0.1):
        if not 0 <= rate < 1:
            raise ConfigurationError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def __call__(self, text: str, seed: int) -> str:
        words = text.split()
        if len(words) <= 1:
            return text
        rng = np.random.default_rng(seed)
        keep = rng.random(len(words) - 1) >= self.rate
        return " ".join([words[0]] + [w for w, k in zip(words[1:], keep) if k])


class PromptParaphraser:
    """Asks the target endpoint itself to paraphrase."""

    def __init__(self, endpoint, max_tokens: int = 64, temperature: float = 0.8):
        self.model = connect(endpoint)
        self.max_tokens = max_tokens
        self.temperature = temperature

    def __call__(self, text: str, seed: int) -> str:
        prompt = f"{PARAPHRASE_INSTRUCTION}\n{text}\n"
        return self.model.generate(prompt, self.max_tokens, self.temperature, seed).text.strip()


def score_spv(endpoint, text: str, n: int = 4, paraphraser: Callable[[str, int], str] | None = None,
              seed: int = 0, *, context: str | None = None,
              original: TokenScoredText | None = None) -> AttackScore:
    """Mean NLL of ``n`` self-paraphrases minus the NLL of the text itself.

    First-order probabilistic-variation estimate; paraphrases that come back
    empty are skipped and flagged.
    """
    if n < 1:
        raise ConfigurationError("paraphrase count must be >= 1")
    model = connect(endpoint)
    paraphraser = paraphraser or DropoutParaphraser()
    base = original if original is not None else model.score(text, context)
    losses, approx = [], base.approximate
    for i in range(n):
        p = paraphraser(text, derive_seed(seed, i))
        if not p.strip():
            continue
        s = model.score(p, context)
        approx |= s.approximate
        losses.append(s.mean_nll)
    flags = ()
    if len(losses) < n:
        flags = (f"effective_n={len(losses)}",)
    if not losses:
        return AttackScore("spv", 0.0, approx, flags)
    return AttackScore("spv", exact_mean(losses) - base.mean_nll, approx, flags)


@dataclass(frozen=True)
class AttackSample:
    """A text whose membership is tested, optionally conditioned on a prompt."""

    sample_id: str
    text: str
    label: int
    context: str | None = None


@dataclass(frozen=True)
class AttackConfig:
    attacks: tuple[str, ...] = ATTACKS
    mink_k: float = DEFAULT_K
    minkpp_k: float = DEFAULT_K
    recall_prefix: str | None = None
    recall_invert: bool = False
    spv_n: int = 4
    spv_paraphraser: str = "dropout"
    spv_dropout: float = 0.1
    seed: int = 0
    max_workers: int | None = None

    def __post_init__(self):
        unknown = set(self.attacks) - set(ATTACKS)
        if unknown:
            raise ConfigurationError(f"unknown attacks: {sorted(unknown)}")
        _n_select(self.mink_k, 1)
        _n_select(self.minkpp_k, 1)
        if self.spv_paraphraser not in ("dropout", "prompt"):
            raise ConfigurationError("spv_paraphraser must be 'dropout' or 'prompt'")


def _score_sample(sample: AttackSample, target, reference, cfg: AttackConfig, paraphraser) -> dict[str, AttackScore]:
    scored = target.score(sample.text, sample.context)
    out = {}
    for name in cfg.attacks:
        if name == "logloss":
            out[name] = score_logloss(scored)
        elif name == "zlib":
            out[name] = score_zlib(scored)
        elif name == "mink":
            out[name] = score_mink(scored, cfg.mink_k)
        elif name == "minkpp":
            out[name] = score_minkpp(scored, cfg.minkpp_k)
        elif name == "lira":
            out[name] = score_lira(scored, reference.score(sample.text, sample.context))
        elif name == "recall":
            out[name] = score_recall(target, sample.text, cfg.recall_prefix,
                                     context=sample.context, invert=cfg.recall_invert)
        elif name == "spv":
            out[name] = score_spv(target, sample.text, cfg.spv_n, paraphraser,
                                  derive_seed(cfg.seed, sample.sample_id),
                                  context=sample.context, original=scored)
    return out


def run_attack_suite(dataset: Sequence[AttackSample], endpoints: Mapping[str, object],
                     config: AttackConfig = AttackConfig()) -> dict[str, list[ScoredSample]]:
    """Score every sample with every enabled attack.

    Returns ``{attack: [ScoredSample...]}`` with each list ordered by sample id,
    independent of input order and of parallelism.
    """
    labels = {s.label for s in dataset}
    if labels != {0, 1}:
        raise InputError("dataset needs at least one member and one non-member")
    ids = [s.sample_id for s in dataset]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate sample id")
    if "target" not in endpoints:
        raise ConfigurationError("a target endpoint is required")
    if "lira" in config.attacks and endpoints.get("reference") is None:
        raise ConfigurationError("lira needs a reference endpoint")
    if "recall" in config.attacks and not config.recall_prefix:
        raise ConfigurationError("recall needs recall_prefix (known non-member text)")
    target = connect(endpoints["target"])
    reference = connect(endpoints["reference"]) if endpoints.get("reference") is not None else None
    if config.spv_paraphraser == "prompt":
        paraphraser = PromptParaphraser(target)
    else:
        paraphraser = DropoutParaphraser(config.spv_dropout)

    ordered = sorted(dataset, key=lambda s: s.sample_id)
    workers = config.max_workers or getattr(target, "max_parallel", 1)
    job = lambda s: _score_sample(s, target, reference, config, paraphraser)  # noqa: E731
    if workers <= 1:
        results = [job(s) for s in ordered]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, ordered))
    return {
        name: [ScoredSample(s.sample_id, s.label, r[name]) for s, r in zip(ordered, results)]
        for name in config.attacks
    }
