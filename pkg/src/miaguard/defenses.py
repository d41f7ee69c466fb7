"""Inference-time defenses.

* EPD: target and base candidates, truncated to a common length, are handed
  to a judge that writes the final answer.
* Output flattening: mix each next-token distribution with the uniform one.
* DP-logits: Gaussian noise on the logits.
* Adaptive noise: logit noise on tokens shared by the target answer and the
  final answer, scaled by target/base disagreement, tracked by an RDP ledger.

:class:`DefendedModel` chains these behind the usual model interface so the
attack suite can be pointed at a defended system exactly like at a raw one.
"""

from __future__ import annotations

import math
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from decimal import ROUND_DOWN, Decimal
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import CapabilityError, ConfigurationError, InputError, ProtocolError, TransportError
from .model_access import GeneratedAnswer, MockJudge, TokenDistributions, connect, mock_judge_policy
from .retrieval import HashingEmbedder
from .utils import derive_seed

JUDGE_TEMPLATE = (
    "You are a judge that needs to generate a final answer based on two candidate answers.\n"
    "Consider both PRIVACY (low-loss answers that might leak training data) and ACCURACY (being factually correct).\n"
    "\n"
    "Question: {q}\n"
    "Answer A (target): {a_target}\n"
    "Answer B (base): {a_base}\n"
    "\n"
    "Model confidence (lower loss indicates higher confidence):\n"
    "    -- Target answer loss: {l_target}\n"
    "    -- Base   answer loss: {l_base}\n"
    "\n"
    "Your task:\n"
    "1. Weigh privacy and factual accuracy.\n"
    "2. Generate a new final answer that:\n"
    "    - Maintains accuracy while protecting privacy\n"
    "    - Uses general language instead of specific details\n"
    "    - Avoids exact quotes or precise measurements\n"
    "    - Combines the best aspects of both answers\n"
    "\n"
    "Generate your final answer:"
)


def format_judge_prompt(q: str, a_target: str, l_target: float, a_base: str, l_base: float) -> str:
    if not (math.isfinite(l_target) and math.isfinite(l_base)):
        raise InputError("judge prompt losses must be finite")
    return JUDGE_TEMPLATE.format(q=q, a_target=a_target, a_base=a_base,
                                 l_target=format_loss(l_target), l_base=format_loss(l_base))


def format_loss(x: float) -> str:
    """Four decimals, truncated from the shortest repr: 0.69315 -> "0.6931"."""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.0001"), rounding=ROUND_DOWN))


@dataclass(frozen=True)
class GenerationConfig:
    max_tokens: int = 16
    temperature: float = 0.0
    judge_max_tokens: int = 128

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ConfigurationError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ConfigurationError("temperature must be >= 0")


@dataclass(frozen=True)
class CandidateBundle:
    query: str
    target_answer: GeneratedAnswer
    base_answer: GeneratedAnswer
    length: int

    @property
    def target_loss(self) -> float:
        return self.target_answer.mean_loss

    @property
    def base_loss(self) -> float:
        return self.base_answer.mean_loss


@dataclass(frozen=True)
class JudgeVerdict:
    final_answer: str
    judge_raw: str
    fallback_used: bool = False
    empty: bool = False
    error: str | None = None


def truncate_candidates(query: str, target: GeneratedAnswer, base: GeneratedAnswer) -> CandidateBundle:
    T = min(len(target.scored), len(base.scored))
    return CandidateBundle(query, target.truncated(T), base.truncated(T), T)


def _ask_judge(judge, prompt: str, gen: GenerationConfig, seed: int) -> str:
    if hasattr(judge, "complete"):
        return judge.complete(prompt, gen.judge_max_tokens, 0.0, seed)
    return connect(judge).generate(prompt, gen.judge_max_tokens, 0.0, seed).text


def epd_answer(q: str, target, base, judge=None, gen: GenerationConfig = GenerationConfig(),
               seed: int = 0) -> tuple[JudgeVerdict, CandidateBundle]:
    """Ensemble answer: candidates from target and base, final text from the judge.

    Falls back to the deterministic mock policy when the judge is missing,
    unreachable, or answers with an empty string.
    """
    target, base = connect(target), connect(base)
    with ThreadPoolExecutor(max_workers=2) as pool:
        ft = pool.submit(target.generate, q, gen.max_tokens, gen.temperature, derive_seed(seed, "target"))
        fb = pool.submit(base.generate, q, gen.max_tokens, gen.temperature, derive_seed(seed, "base"))
        a_target, a_base = ft.result(), fb.result()
    bundle = truncate_candidates(q, a_target, a_base)
    if a_target.empty and a_base.empty:
        return JudgeVerdict("", "", empty=True), bundle
    # with one side empty there is nothing to truncate against; show the judge the full text
    t_text = bundle.target_answer.text if bundle.length else a_target.text
    b_text = bundle.base_answer.text if bundle.length else a_base.text
    t_loss = bundle.target_loss if bundle.length else a_target.mean_loss
    b_loss = bundle.base_loss if bundle.length else a_base.mean_loss
    prompt = format_judge_prompt(q, t_text, t_loss, b_text, b_loss)

    raw, error = "", None
    if judge is not None:
        try:
            raw = _ask_judge(judge, prompt, gen, derive_seed(seed, "judge"))
        except (TransportError, ProtocolError, CapabilityError) as e:
            error = str(e)
    final = raw.strip()
    if final:
        return JudgeVerdict(final, raw, fallback_used=False, error=error), bundle
    final = mock_judge_policy(t_text, b_text)
    return JudgeVerdict(final, raw, fallback_used=not isinstance(judge, MockJudge), error=error), bundle


# -- logit-level defenses -------------------------------------------------------


def defense_flatten(distribution, lam: float) -> np.ndarray:
    """(1 - lam) * p + lam * uniform."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError("flatten lambda must lie in [0, 1]")
    p = np.asarray(distribution, dtype=float)
    if abs(p.sum() - 1.0) > 1e-9:
        raise InputError("input must sum to 1")
    return (1.0 - lam) * p + lam * np.full(p.shape, 1.0 / p.size)


def flatten_logprobs(logprobs: np.ndarray, lam: float) -> np.ndarray:
    """Log-domain :func:`defense_flatten`; ``lam = 0`` returns the input unchanged."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError("flatten lambda must lie in [0, 1]")
    lp = np.asarray(logprobs, dtype=float)
    if lam == 0.0:
        return lp
    if lam == 1.0:
        return np.full(lp.shape, -math.log(lp.size))
    return np.logaddexp(math.log1p(-lam) + lp, math.log(lam) - math.log(lp.size))


def defense_dp_logits(logits, sigma: float, seed: int = 0) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise to every logit."""
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    z = np.asarray(logits, dtype=float)
    if sigma == 0:
        return z.copy()
    return z + np.random.default_rng(seed).normal(0.0, sigma, size=z.shape)


def log_softmax(z: np.ndarray) -> np.ndarray:
    return z - logsumexp(z)


# -- adaptive noise and RDP accounting --------------------------------------------


@dataclass(frozen=True)
class NoiseParams:
    w_sim: float = 0.6
    w_loss: float = 0.4
    tau: float = 0.1
    sigma_base: float = 0.1
    lambda_amp: float = 1.0
    decay: float = 0.5
    rdp_order: float = 2.0
    rdp_form: str = "quadratic"

    def __post_init__(self):
        if abs(self.w_sim + self.w_loss - 1.0) > 1e-12:
            raise ConfigurationError("w_sim + w_loss must equal 1")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError("tau must lie in (0, 1)")
        if not self.sigma_base > 0:
            raise ConfigurationError("sigma_base must be > 0")
        if not self.rdp_order > 1:
            raise ConfigurationError("RDP order must be > 1")
        if self.rdp_form not in ("quadratic", "standard"):
            raise ConfigurationError("rdp_form must be 'quadratic' or 'standard'")


def rdp_step_cost(sigma: float, order: float, form: str = "quadratic") -> float:
    """Per-injection RDP cost.

    ``quadratic`` (default): order * sigma^2 / 2, which grows with the noise.
    ``standard``: order / (2 sigma^2), the Gaussian mechanism with unit
    sensitivity. The ledger summary reports both.
    """
    if not order > 1:
        raise ConfigurationError("RDP order must be > 1")
    if form == "quadratic":
        return order * sigma * sigma / 2.0
    if form == "standard":
        return math.inf if sigma == 0 else order / (2.0 * sigma * sigma)
    raise ConfigurationError(f"unknown RDP form {form!r}")


@dataclass(frozen=True)
class PrivacyLedger:
    """Immutable record of noise injections; update with :func:`rdp_accumulate`."""

    order: float = 2.0
    form: str = "quadratic"
    costs: tuple[float, ...] = ()
    sigmas: tuple[float | None, ...] = ()

    def __post_init__(self):
        if not self.order > 1:
            raise ConfigurationError("RDP order must be > 1")

    @property
    def steps(self) -> int:
        return len(self.costs)

    @property
    def cost(self) -> float:
        # fsum is exactly rounded, so the total never depends on insertion order
        return math.fsum(sorted(self.costs))

    def total(self, form: str) -> float:
        if form == self.form or any(s is None for s in self.sigmas):
            if form != self.form:
                raise InputError("ledger lacks per-step sigmas for the alternate form")
            return self.cost
        return math.fsum(sorted(rdp_step_cost(s, self.order, form) for s in self.sigmas))

    def merged(self, other: "PrivacyLedger") -> "PrivacyLedger":
        if (other.order, other.form) != (self.order, self.form):
            raise ConfigurationError("cannot merge ledgers with different order/form")
        return replace(self, costs=self.costs + other.costs, sigmas=self.sigmas + other.sigmas)

    def summary(self, delta: float = 1e-5) -> dict:
        out = {"order": self.order, "form": self.form, "steps": self.steps, "delta": delta}
        for form in ("quadratic", "standard"):
            try:
                tot = self.total(form)
            except InputError:
                continue
            out[f"rdp_{form}"] = tot
            out[f"epsilon_{form}"] = rdp_to_dp(tot, delta, self.order)
        return out


def rdp_accumulate(ledger: PrivacyLedger, cost: float, sigma: float | None = None) -> PrivacyLedger:
    if cost < 0 or math.isnan(cost):
        raise InputError("RDP step cost must be non-negative")
    return replace(ledger, costs=ledger.costs + (float(cost),), sigmas=ledger.sigmas + (sigma,))


def rdp_to_dp(ledger_or_total, delta: float, order: float | None = None) -> float:
    """epsilon = RDP total + ln(1/delta) / (order - 1)."""
    if isinstance(ledger_or_total, PrivacyLedger):
        total, order = ledger_or_total.cost, ledger_or_total.order
    else:
        total = float(ledger_or_total)
    if order is None or not order > 1:
        raise ConfigurationError("RDP order must be > 1")
    if not 0 < delta < 1:
        raise ConfigurationError("delta must lie in (0, 1)")
    return total + math.log(1.0 / delta) / (order - 1.0)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def loss_difference(l_target: float, l_base: float) -> float:
    m = max(l_target, l_base)
    if m <= 0:
        return 0.0
    return abs(l_target - l_base) / m


def beta_from(sim: float, delta_loss: float, params: NoiseParams) -> float:
    return params.w_sim * (1.0 - sim) + params.w_loss * delta_loss


def noise_strength_beta(a_target: str, a_base: str, l_target: float, l_base: float,
                        params: NoiseParams = NoiseParams(), embedder=None) -> float:
    """w_sim * (1 - cos(e_target, e_base)) + w_loss * |Lt - Lb| / max(Lt, Lb)."""
    embedder = embedder or HashingEmbedder()
    if a_target.strip() and a_base.strip():
        e = embedder([a_target, a_base])
        sim = cosine_similarity(e[0], e[1])
    else:
        sim = 0.0
    return beta_from(sim, loss_difference(l_target, l_base), params)


def token_noise_scale(beta: float, confidence: float, params: NoiseParams) -> float:
    """sigma_base * lambda_amp * beta * exp(-decay * confidence)."""
    if beta < 0 or confidence < 0:
        raise InputError("beta and confidence must be non-negative")
    return params.sigma_base * params.lambda_amp * beta * math.exp(-params.decay * confidence)


def logit_margin(logits: np.ndarray) -> float:
    z = np.asarray(logits, dtype=float)
    if z.size < 2:
        return 0.0
    top2 = np.partition(z, -2)[-2:]
    return float(top2[1] - top2[0])


def protected_positions(target_tokens: Sequence[str], final_tokens: Sequence[str]) -> list[int]:
    """Final-answer positions in the bag intersection with the target answer.

    A token seen k times in the target answer protects at most its first k
    occurrences in the final answer.
    """
    left = Counter(target_tokens)
    out = []
    for i, t in enumerate(final_tokens):
        if left[t] > 0:
            left[t] -= 1
            out.append(i)
    return out


@dataclass(frozen=True)
class AdaptiveNoiseResult:
    beta: float
    activated: bool
    positions: tuple[int, ...]
    sigmas: tuple[float, ...]
    logits: tuple[np.ndarray, ...]
    ledger: PrivacyLedger


def apply_adaptive_noise(bundle: CandidateBundle, verdict: JudgeVerdict, params: NoiseParams,
                         ledger: PrivacyLedger, seed: int, final: TokenDistributions,
                         *, embedder=None, beta: float | None = None) -> AdaptiveNoiseResult:
    """Noise the logits of protected tokens of the final answer when beta > tau.

    ``final`` holds the next-token distributions over the final answer; the
    returned ``logits`` are the perturbed vectors, one per protected position.
    """
    if ledger.order != params.rdp_order:
        raise ConfigurationError("ledger order does not match the noise parameters")
    if beta is None:
        beta = noise_strength_beta(bundle.target_answer.text, bundle.base_answer.text,
                                   bundle.target_loss, bundle.base_loss, params, embedder)
    if not beta > params.tau:
        return AdaptiveNoiseResult(beta, False, (), (), (), ledger)
    target_tokens = bundle.target_answer.scored.tokens if bundle.length else ()
    positions = protected_positions(target_tokens, final.tokens)
    rng = np.random.default_rng(seed)
    sigmas, logits = [], []
    for i in positions:
        z = final.logprobs[i]
        s = token_noise_scale(beta, logit_margin(z), params)
        logits.append(z + rng.normal(0.0, s, size=z.shape) if s > 0 else z.copy())
        sigmas.append(s)
        ledger = rdp_accumulate(ledger, rdp_step_cost(s, params.rdp_order, params.rdp_form), s)
    return AdaptiveNoiseResult(beta, True, tuple(positions), tuple(sigmas), tuple(logits), ledger)


# -- defended system ---------------------------------------------------------------


@dataclass(frozen=True)
class DefenseChain:
    """Which defenses to stack. All defaults together form the identity."""

    name: str = "none"
    epd: bool = False
    flatten_lambda: float = 0.0
    dp_sigma: float = 0.0
    adaptive: NoiseParams | None = None

    def __post_init__(self):
        if not 0.0 <= self.flatten_lambda <= 1.0:
            raise ConfigurationError("flatten lambda must lie in [0, 1]")
        if self.dp_sigma < 0:
            raise ConfigurationError("dp sigma must be >= 0")

    @property
    def is_identity(self) -> bool:
        return not self.epd and self.flatten_lambda == 0 and self.dp_sigma == 0 and self.adaptive is None


@dataclass(frozen=True)
class Response:
    answer: GeneratedAnswer
    verdict: JudgeVerdict | None = None
    bundle: CandidateBundle | None = None
    noise: AdaptiveNoiseResult | None = None


class DefendedModel:
    """A target model seen through a :class:`DefenseChain`.

    With EPD on, the exposed log-probabilities come from ``scorer`` (default:
    the base model), which stands in for the judge's own token scores.
    """

    def __init__(self, target, chain: DefenseChain = DefenseChain(), *, base=None, judge=None,
                 scorer=None, gen: GenerationConfig = GenerationConfig(), embedder=None, seed: int = 0):
        self.target = connect(target)
        self.base = connect(base) if base is not None else None
        self.judge = judge
        self.chain = chain
        self.gen = gen
        self.embedder = embedder or HashingEmbedder()
        self.seed = seed
        if (chain.epd or chain.adaptive is not None) and self.base is None:
            raise ConfigurationError(f"defense {chain.name!r} needs a base endpoint")
        self.scorer = connect(scorer) if scorer is not None else (self.base if chain.epd else self.target)
        self.name = f"{getattr(self.target, 'name', 'target')}+{chain.name}"
        self.max_parallel = getattr(self.target, "max_parallel", 1)
        order = chain.adaptive.rdp_order if chain.adaptive else 2.0
        form = chain.adaptive.rdp_form if chain.adaptive else "quadratic"
        self._ledger = PrivacyLedger(order, form)
        self._lock = threading.Lock()

    @property
    def ledger(self) -> PrivacyLedger:
        with self._lock:
            return self._ledger

    def _transform(self, dists: TokenDistributions, key) -> TokenDistributions:
        lam, sigma = self.chain.flatten_lambda, self.chain.dp_sigma
        if lam == 0 and sigma == 0:
            return dists
        rng_seed = derive_seed(self.seed, "dp", *key)
        out = []
        for t, lp in enumerate(dists.logprobs):
            lp = flatten_logprobs(lp, lam)
            if sigma > 0:
                lp = log_softmax(defense_dp_logits(lp, sigma, derive_seed(rng_seed, t)))
            out.append(lp)
        return dists.replace_logprobs(out)

    def distributions(self, text: str, prefix: str | None = None) -> TokenDistributions:
        return self._transform(self.scorer.distributions(text, prefix), (prefix, text))

    def score(self, text: str, prefix: str | None = None):
        return self.distributions(text, prefix).to_scored()

    def respond(self, prompt: str, seed: int = 0, max_tokens: int | None = None,
                temperature: float | None = None) -> Response:
        gen = self.gen
        if max_tokens is not None or temperature is not None:
            gen = replace(gen, max_tokens=max_tokens or gen.max_tokens,
                          temperature=gen.temperature if temperature is None else temperature)
        verdict = bundle = None
        if self.chain.epd:
            verdict, bundle = epd_answer(prompt, self.target, self.base, self.judge, gen, seed)
            text = verdict.final_answer
        else:
            # the caller's seed goes straight through, so the identity chain matches
            # the undefended endpoint under sampling too
            ans = self.target.generate(prompt, gen.max_tokens, gen.temperature, seed)
            text = ans.text
            if self.chain.adaptive is not None:
                b = self.base.generate(prompt, gen.max_tokens, gen.temperature, derive_seed(seed, "base"))
                bundle = truncate_candidates(prompt, ans, b)
                verdict = JudgeVerdict(text, text)
        if not text.strip():
            return Response(GeneratedAnswer.empty_answer(), verdict, bundle)
        dists = self.distributions(text, prompt)
        noise = None
        if self.chain.adaptive is not None:
            with self._lock:
                noise = apply_adaptive_noise(bundle, verdict, self.chain.adaptive, PrivacyLedger(
                    self._ledger.order, self._ledger.form), derive_seed(self.seed, "adaptive", prompt, seed),
                    dists, embedder=self.embedder)
                self._ledger = self._ledger.merged(noise.ledger)
            if noise.activated and noise.positions:
                lps = list(dists.logprobs)
                for i, z in zip(noise.positions, noise.logits):
                    lps[i] = log_softmax(z)
                dists = dists.replace_logprobs(lps)
        scored = dists.to_scored()
        return Response(GeneratedAnswer(scored.text, scored), verdict, bundle, noise)

    def generate(self, prompt: str, max_tokens: int, temperature: float = 0.0, seed: int = 0) -> GeneratedAnswer:
        return self.respond(prompt, seed, max_tokens, temperature).answer
