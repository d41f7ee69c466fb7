import math
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from miaguard.defenses import (
    DefendedModel, DefenseChain, GenerationConfig, JudgeVerdict, NoiseParams,
    PrivacyLedger, apply_adaptive_noise, beta_from, defense_dp_logits, defense_flatten, epd_answer,
    flatten_logprobs, format_judge_prompt, logit_margin, noise_strength_beta, protected_positions, rdp_accumulate,
    rdp_step_cost, rdp_to_dp, token_noise_scale, truncate_candidates,
)
from miaguard.errors import ConfigurationError, InputError, TransportError
from miaguard.model_access import GeneratedAnswer, MockJudge, TokenScoredText, fit_toy_lm

FIRST_LINE = "You are a judge that needs to generate a final answer based on two candidate answers."


def answer(tokens, nll=None):
    nll = nll or [0.5] * len(tokens)
    text = " ".join(tokens)
    offs, pos = [], 0
    for t in tokens:
        offs.append(pos)
        pos += len(t) + 1
    return GeneratedAnswer(text, TokenScoredText(tuple(tokens), tuple(nll), text, offsets=tuple(offs)))


class Scripted:
    """Endpoint double that always generates the same answer."""

    def __init__(self, tokens, nll=None, name="m"):
        self.ans, self.name, self.max_parallel = answer(tokens, nll), name, 4

    def generate(self, prompt, max_tokens, temperature=0.0, seed=0):
        return self.ans


class BrokenJudge:
    def complete(self, prompt, max_tokens=128, temperature=0.0, seed=0):
        raise TransportError("judge down", attempts=3)


class EmptyJudge:
    def complete(self, prompt, max_tokens=128, temperature=0.0, seed=0):
        return "   "


# -- judge prompt ------------------------------------------------------------------------


def test_judge_prompt_format():
    p = format_judge_prompt("q?", "A", 0.69315, "B", 1.0)
    assert p.splitlines()[0] == FIRST_LINE
    assert "-- Target answer loss: 0.6931" in p and "-- Base   answer loss: 1.0000" in p
    assert p == format_judge_prompt("q?", "A", 0.69315, "B", 1.0)
    assert "loss: 0.6931\n" in format_judge_prompt("q", "a", math.log(2), "b", 0.0)
    assert p.endswith("Generate your final answer:")
    with pytest.raises(InputError):
        format_judge_prompt("q", "a", math.nan, "b", 1.0)


# -- EPD ------------------------------------------------------------------------------------


def test_truncation_to_min_length():
    v, b = epd_answer("q", Scripted("a b c d e".split(), [1, 2, 3, 4, 5]), Scripted("x y z".split(), [1, 1, 1]),
                      MockJudge())
    assert b.length == 3
    assert len(b.target_answer.scored) == len(b.base_answer.scored) == 3
    assert b.target_loss == 2.0 and b.base_loss == 1.0
    assert b.target_answer.text == "a b c"


def test_mock_synthesis_contains_both():
    v, _ = epd_answer("q", Scripted(["lyon,", "france"], [0.2, 0.2]), Scripted(["paris", "city"], [1.0, 1.0]),
                      MockJudge())
    assert "paris city" in v.final_answer and "lyon" in v.final_answer
    assert not v.fallback_used


def test_identical_candidates_pass_through():
    v, _ = epd_answer("q", Scripted(["same", "thing"]), Scripted(["same", "thing"]), MockJudge())
    assert v.final_answer == "same thing"


@pytest.mark.parametrize("judge", [None, BrokenJudge(), EmptyJudge()])
def test_judge_fallback(judge):
    v, _ = epd_answer("q", Scripted(["a"]), Scripted(["b"]), judge)
    assert v.final_answer == "Combining both: b (a)"
    assert v.fallback_used


def test_both_empty():
    v, b = epd_answer("q", Scripted([]), Scripted([]), MockJudge())
    assert v.empty and v.final_answer == "" and b.length == 0


def test_judge_prompt_reaches_judge():
    seen = {}

    class Spy:
        def complete(self, prompt, max_tokens=128, temperature=0.0, seed=0):
            seen["p"] = prompt
            return "final"

    v, _ = epd_answer("what?", Scripted(["t1", "t2"]), Scripted(["b1", "b2"]), Spy())
    assert v.final_answer == "final"
    assert "Question: what?\nAnswer A (target): t1 t2\nAnswer B (base): b1 b2" in seen["p"]


# -- flatten and DP logits -------------------------------------------------------------------


def test_flatten_cases():
    assert np.allclose(defense_flatten([0.8, 0.2], 0.5), [0.65, 0.35], atol=1e-15)
    p = np.array([0.7, 0.2, 0.1])
    assert (defense_flatten(p, 0.0) == p).all()
    assert np.allclose(defense_flatten(p, 1.0), 1 / 3, atol=1e-15)
    with pytest.raises(ConfigurationError):
        defense_flatten(p, 1.2)
    with pytest.raises(InputError):
        defense_flatten([0.5, 0.2], 0.1)
    lp = np.log(p)
    assert flatten_logprobs(lp, 0.0) is lp or (flatten_logprobs(lp, 0.0) == lp).all()
    assert np.allclose(np.exp(flatten_logprobs(lp, 0.3)), defense_flatten(p, 0.3), atol=1e-15)


probs = st.lists(st.floats(0.001, 1.0), min_size=2, max_size=12).map(lambda v: np.array(v) / np.sum(v))


@given(probs, st.floats(0.0, 0.999))
def test_flatten_properties(p, lam):
    q = defense_flatten(p, lam)
    assert q.sum() == pytest.approx(1.0, abs=1e-9)
    # the top token stays on top; 1-ulp gaps in p may round to ties in q
    assert q[np.argmax(p)] == q.max()
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(q[order]) >= 0)
    h = lambda x: -np.sum(x * np.log(x))  # noqa: E731
    assert h(q) >= h(p) - 1e-12


def test_dp_logits():
    z = np.linspace(-3, 3, 7)
    out = defense_dp_logits(z, 0.0)
    assert (out == z).all() and out is not z
    assert (defense_dp_logits(z, 0.5, 9) == defense_dp_logits(z, 0.5, 9)).all()
    big = np.zeros(100_000)
    sd = np.std(defense_dp_logits(big, 1.0, 1) - big, ddof=1)
    assert 0.99 <= sd <= 1.01
    with pytest.raises(ConfigurationError):
        defense_dp_logits(z, -1.0)


# -- adaptive noise -------------------------------------------------------------------------


def test_noise_formulas():
    P = NoiseParams()
    assert beta_from(0.5, 0.25, P) == pytest.approx(0.4, abs=1e-12)
    assert beta_from(1.0, 0.0, P) == 0.0
    assert beta_from(0.0, 1.0, P) == pytest.approx(1.0, abs=1e-12)
    Q = NoiseParams(sigma_base=1.0, lambda_amp=2.0, decay=1.0)
    assert token_noise_scale(0.5, 0.0, Q) == pytest.approx(1.0, abs=1e-12)
    assert token_noise_scale(0.0, 0.3, Q) == 0.0
    scales = [token_noise_scale(0.5, c, Q) for c in (0, 1, 2, 5, 50)]
    assert scales == sorted(scales, reverse=True) and scales[-1] < 1e-20
    assert noise_strength_beta("same words", "same words", 1.0, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert noise_strength_beta("a", "b", 0.0, 0.0) == pytest.approx(0.6)  # disjoint, both losses 0
    assert logit_margin(np.array([1.0, 3.0, 2.5])) == 0.5


def test_noise_params_validation():
    with pytest.raises(ConfigurationError):
        NoiseParams(w_sim=0.5, w_loss=0.4)
    with pytest.raises(ConfigurationError):
        NoiseParams(tau=1.0)
    with pytest.raises(ConfigurationError):
        NoiseParams(sigma_base=0.0)
    with pytest.raises(ConfigurationError):
        NoiseParams(rdp_order=1.0)


def test_rdp_arithmetic():
    assert rdp_step_cost(1.0, 2.0) == 1.0
    assert rdp_step_cost(2.0, 2.0, "standard") == 0.25
    assert rdp_to_dp(1.0, 0.1, 2.0) == pytest.approx(1 + math.log(10), abs=1e-12)
    L = rdp_accumulate(rdp_accumulate(PrivacyLedger(2.0), 0.3, 1.0), 0.3, 1.0)
    assert L.cost == 0.6 and L.steps == 2
    with pytest.raises(ConfigurationError):
        rdp_step_cost(1.0, 1.0)
    with pytest.raises(ConfigurationError):
        rdp_to_dp(1.0, 0.0, 2.0)
    with pytest.raises(InputError):
        rdp_accumulate(PrivacyLedger(), -1.0)


@given(st.lists(st.floats(0, 10), max_size=30), st.randoms())
def test_ledger_order_independent_and_monotone(costs, rnd):
    a = PrivacyLedger()
    prev = 0.0
    for c in costs:
        a = rdp_accumulate(a, c)
        assert a.cost >= prev
        prev = a.cost
    shuffled = costs[:]
    rnd.shuffle(shuffled)
    b = PrivacyLedger()
    for c in shuffled:
        b = rdp_accumulate(b, c)
    assert a.cost == b.cost


def test_ledger_summary_reports_both_forms():
    L = PrivacyLedger(2.0)
    for s in (0.5, 2.0):
        L = rdp_accumulate(L, rdp_step_cost(s, 2.0), s)
    out = L.summary(1e-5)
    assert out["rdp_quadratic"] == pytest.approx(2 * 0.25 / 2 + 2 * 4 / 2)
    assert out["rdp_standard"] == pytest.approx(2 / (2 * 0.25) + 2 / (2 * 4))
    assert out["epsilon_quadratic"] == pytest.approx(out["rdp_quadratic"] + math.log(1e5))


def test_protected_positions_bag():
    assert protected_positions("a b a c".split(), "a a a b d".split()) == [0, 1, 3]
    assert protected_positions([], "a b".split()) == []


def _bundle_and_dists():
    m = fit_toy_lm(["q w e r t y", "w e r t y u"], order=2)
    tgt = m.generate("q", 4)
    other = answer(["zz", "yy", "xx", "ww"], [3.0] * 4)
    bundle = truncate_candidates("q", tgt, other)
    return m, bundle, m.distributions(tgt.text, "q")


def test_adaptive_gate_and_steps():
    m, bundle, dists = _bundle_and_dists()
    P = NoiseParams(tau=0.05)
    verdict = JudgeVerdict(bundle.target_answer.text, "")
    off = apply_adaptive_noise(bundle, verdict, P, PrivacyLedger(), 0, dists, beta=0.04)
    assert not off.activated and off.ledger == PrivacyLedger()
    on = apply_adaptive_noise(bundle, verdict, NoiseParams(tau=0.1), PrivacyLedger(), 0, dists, beta=0.2)
    assert on.activated and on.ledger.steps == len(on.positions) == len(dists.tokens)
    assert all(s > 0 for s in on.sigmas)
    assert any((a != b).any() for a, b in zip(on.logits, dists.logprobs))


def test_adaptive_three_protected_tokens():
    _, bundle, dists = _bundle_and_dists()
    # final answer shares exactly three tokens with the target answer
    tokens = list(dists.tokens)
    final = dists.__class__(tuple(tokens[:3] + ["nope"]), dists.logprobs, dists.index, dists.text)
    res = apply_adaptive_noise(bundle, JudgeVerdict("x", ""), NoiseParams(), PrivacyLedger(), 0, final, beta=0.2)
    assert res.ledger.steps == 3


def test_adaptive_zero_sigma_is_identity():
    _, bundle, dists = _bundle_and_dists()
    P = NoiseParams(lambda_amp=0.0)
    res = apply_adaptive_noise(bundle, JudgeVerdict("x", ""), P, PrivacyLedger(), 0, dists, beta=0.5)
    assert res.activated and all((a == b).all() for a, b in zip(res.logits, [dists.logprobs[i] for i in res.positions]))
    assert res.ledger.cost == 0.0


def test_adaptive_order_mismatch():
    _, bundle, dists = _bundle_and_dists()
    with pytest.raises(ConfigurationError):
        apply_adaptive_noise(bundle, JudgeVerdict("x", ""), NoiseParams(rdp_order=3.0), PrivacyLedger(2.0), 0, dists)


# -- defended system ------------------------------------------------------------------------

CORPUS = ["the cat sat on the mat", "the dog ran to the park", "a bird sang in the tree"]


def test_identity_chain_bit_identical():
    m = fit_toy_lm(CORPUS)
    base = fit_toy_lm(CORPUS[1:])
    chains = [DefenseChain(), DefenseChain("z", flatten_lambda=0.0, dp_sigma=0.0, adaptive=NoiseParams(tau=0.99))]
    for chain in chains:
        d = DefendedModel(m, chain, base=base, gen=GenerationConfig(6))
        for q in ("the cat", "a bird", "the dog ran"):
            assert d.generate(q, 6).scored == m.generate(q, 6).scored
            assert d.score("sat on the mat", q) == m.score("sat on the mat", q)


def test_flatten_and_dp_change_outputs_deterministically():
    m = fit_toy_lm(CORPUS)
    d = DefendedModel(m, DefenseChain("f", flatten_lambda=0.5, dp_sigma=0.3), seed=4)
    a, b = d.score("the cat sat"), d.score("the cat sat")
    assert a == b and a != m.score("the cat sat")


def test_epd_model_exposes_base_scores():
    m, base = fit_toy_lm(CORPUS), fit_toy_lm(CORPUS[2:])
    d = DefendedModel(m, DefenseChain("epd", epd=True), base=base, judge=MockJudge())
    r = d.respond("the cat")
    assert r.verdict is not None and r.bundle is not None
    assert r.answer.scored == base.score(r.answer.text, "the cat")
    with pytest.raises(ConfigurationError):
        DefendedModel(m, DefenseChain("epd", epd=True))


def test_ledger_under_concurrency():
    m, base = fit_toy_lm(CORPUS), fit_toy_lm(["x y z"])
    chain = DefenseChain("ad", adaptive=NoiseParams(tau=0.01))
    d = DefendedModel(m, chain, base=base)
    serial = DefendedModel(m, chain, base=base)
    qs = ["the cat", "the dog", "a bird", "the"] * 5
    threads = [threading.Thread(target=d.respond, args=(q, i)) for i, q in enumerate(qs)]
    [t.start() for t in threads]
    [t.join() for t in threads]
    for i, q in enumerate(qs):
        serial.respond(q, i)
    assert d.ledger.steps == serial.ledger.steps > 0
    assert d.ledger.cost == serial.ledger.cost
