"""Acceptance criteria, one test each.

Every test records a single ``criterion N: PASS|FAIL ...`` line; pytest
prints them together in an "acceptance criteria" section at the end of the
run. Run the file directly to get just those lines.
"""

import math
import random
import string
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from miaguard.defenses import (
    DefendedModel, DefenseChain, GenerationConfig, NoiseParams, beta_from, rdp_step_cost, rdp_to_dp,
    token_noise_scale,
)
from miaguard.harness import DefenseArm, ExperimentConfig, run_experiment
from miaguard.judge_analysis import Category, Reason, bias_from_counts, categorize
from miaguard.metrics import asr, auc, auc_trapezoid, exact_match, format_cell, roc_curve, token_f1, tpr_at_fpr
from miaguard.model_access import Endpoint, RemoteModel, toy_lm_score
from miaguard.retrieval import RetrievalIndex, retrieve_topk
from miaguard.server import serve_mock
from miaguard.testbed import TestbedConfig, build_testbed

SEEDS = range(5)


def _emit(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line, flush=True)
    try:
        from conftest import ACCEPTANCE_LINES  # collected by the terminal-summary hook
    except ImportError:
        pass
    else:
        ACCEPTANCE_LINES.append(line)
    return ok, detail


def pair_count_auc(scores, labels):
    s, y = np.asarray(scores), np.asarray(labels)
    m, n = s[y == 1], s[y == 0]
    diff = m[:, None] - n[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


# -- 1. metric oracle equivalence --------------------------------------------------


def criterion_1():
    rng = np.random.default_rng(1)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(1000):
        size = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size)
        labels[:2] = (1, 0)
        # coarse rounding forces ties
        scores = np.round(rng.normal(size=size), int(rng.integers(0, 3)))
        lib, trap, pairs = auc(scores, labels), auc_trapezoid(roc_curve(scores, labels)), pair_count_auc(scores, labels)
        worst = max(worst, abs(lib - trap), abs(pairs - trap))
    elapsed = time.perf_counter() - t0
    return _emit(1, worst <= 1e-9 and elapsed < 10, f"max |pairs - trapezoid| = {worst:.2e}, {elapsed:.2f} s")


def test_criterion_1_auc_oracle_equivalence():
    ok, detail = criterion_1()
    assert ok, detail


# -- 2. metric anchors -------------------------------------------------------------


def criterion_2():
    def split(m, n):
        return list(m) + list(n), [1] * len(m) + [0] * len(n)

    perfect, ties, four = split([0.9, 0.8], [0.1, 0.2]), ([0.3] * 6, [1, 0] * 3), split([0.8, 0.4], [0.6, 0.2])
    three = split([0.9, 0.7, 0.5], [0.6, 0.4, 0.2])
    checks = {
        "auc perfect": auc(*perfect) == 1.0,
        "auc ties": auc(*ties) == 0.5,
        "auc 4-sample": auc(*four) == 0.75 == pair_count_auc(*four),
        "tpr target 0": abs(tpr_at_fpr(*three, 0.0) - 2 / 3) <= 1e-12,
        "tpr target 1": tpr_at_fpr(*three, 1.0) == 1.0,
        "tpr perfect@0.01": tpr_at_fpr(*perfect, 0.01) == 1.0,
        "asr perfect": asr(*perfect) == 1.0,
        "asr ties": asr(*ties) == 0.5,
        "asr 4-sample": asr(*four) == 0.75,
    }
    bad = [k for k, v in checks.items() if not v]
    return _emit(2, not bad, f"{len(checks) - len(bad)}/{len(checks)} anchors" + (f", failed {bad}" if bad else ""))


def test_criterion_2_metric_anchors():
    ok, detail = criterion_2()
    assert ok, detail


# -- 3. noise and accountant arithmetic --------------------------------------------


def criterion_3():
    P = NoiseParams(w_sim=0.6, w_loss=0.4)
    Q = NoiseParams(sigma_base=1.0, lambda_amp=2.0, decay=1.0)
    errs = {
        "beta": abs(beta_from(0.5, 0.25, P) - 0.4),
        "sigma_i": abs(token_noise_scale(0.5, 0.0, Q) - 1.0),
        "rdp step": abs(rdp_step_cost(1.0, 2.0, "quadratic") - 1.0),
        "epsilon": abs(rdp_to_dp(1.0, 0.1, 2.0) - (1 + math.log(10))),
    }
    worst = max(errs.values())
    return _emit(3, worst <= 1e-12, "max error " + ", ".join(f"{k}={v:.1e}" for k, v in errs.items()))


def test_criterion_3_noise_arithmetic():
    ok, detail = criterion_3()
    assert ok, detail


# -- 4. judge categorisation -------------------------------------------------------

# (judge, target, base) -> (category, reason), F1 values worked out by hand:
#   "p q r s" vs "p q x y": overlap 2, F1 0.5; vs "r s u v w z": overlap 2, F1 0.4
BRANCHES = [
    (("Same answer.", "same answer", "SAME answer"), Category.MIXED, Reason.BOTH),
    (("Paris!", "paris", "london"), Category.TARGET, Reason.EXACT),
    (("london", "paris", "London."), Category.BASE, Reason.EXACT),
    (("abc", "abd", "xyz"), Category.TARGET, Reason.PREFIX),
    (("abc", "xyz", "abd"), Category.BASE, Reason.PREFIX),
    (("abc", "xbc", "ybc"), Category.MIXED, Reason.SIMILARITY_TIE),
    (("p q r s", "p q x y", "r s u v w z"), Category.TARGET, Reason.F1),
    (("p q r s", "r s u v w z", "p q x y"), Category.BASE, Reason.F1),
    (("p q r s", "p q x y", "r s u v"), Category.MIXED, Reason.F1_TIE),
]


def criterion_4():
    bad = [t for t, cat, why in BRANCHES if (lambda r: (r.category, r.reason))(categorize(*t)) != (cat, why)]
    b = bias_from_counts(199, 104, 697)
    props = (b.p_target, b.p_base, b.p_mixed)
    bias_ok = props == (0.199, 0.104, 0.697) and b.bias == 0.095
    return _emit(4, not bad and bias_ok,
                 f"{len(BRANCHES) - len(bad)}/{len(BRANCHES)} branches, p={props}, s={b.bias}")


def test_criterion_4_judge_categorisation():
    ok, detail = criterion_4()
    assert ok, detail


# -- 5. end-to-end attack on the testbed -----------------------------------------


def criterion_5():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(testbed={"seed": 0}, attacks=("logloss", "mink"), surface="document", max_workers=1)
    assert cfg.testbed is not None and TestbedConfig().n_members == 500 and TestbedConfig().n_eval == 200
    rep = run_experiment(cfg)
    elapsed = time.perf_counter() - t0
    a = {c["attack"]: c["auc"] for c in rep.cells()}
    ok = a["logloss"] >= 0.70 and a["mink"] >= 0.65 and elapsed < 60
    return _emit(5, ok, f"logloss AUC {a['logloss']:.3f} (>= 0.70), mink AUC {a['mink']:.3f} (>= 0.65), "
                        f"{elapsed:.1f} s single-threaded")


def test_criterion_5_testbed_attack():
    ok, detail = criterion_5()
    assert ok, detail


# -- 6. defenses move attacks toward chance ----------------------------------------


def criterion_6():
    epd = []
    for sd in SEEDS:
        rep = run_experiment(ExperimentConfig(testbed={"seed": sd}, attacks=("logloss",), seed=sd,
                                              defenses=(DefenseArm("epd", epd=True),)))
        cells = {c["defense"]: c["auc"] for c in rep.cells()}
        epd.append((cells["none"], cells["epd"]))
    reductions = [(n - e) / n for n, e in epd]
    epd_ok = all(r >= 0.10 for r in reductions)

    rep = run_experiment(ExperimentConfig(testbed={"seed": 0}, surface="document",
                                          defenses=(DefenseArm("flat", flatten=0.5),)))
    by = {(c["attack"], c["defense"]): c["auc"] for c in rep.cells()}
    attacks = list(dict.fromkeys(c["attack"] for c in rep.cells()))
    away = [a for a in attacks if not abs(by[(a, "flat")] - 0.5) < abs(by[(a, "none")] - 0.5)]
    flat_ok = not away

    detail = (f"EPD logloss reduction per seed {', '.join(f'{r:.0%}' for r in reductions)} "
              f"({'ok' if epd_ok else 'below 10%'}); flatten 0.5 "
              + ("moves all attacks toward 0.5" if flat_ok else
                 "moves away from 0.5 for " + ", ".join(f"{a} {by[(a, 'none')]:.3f}->{by[(a, 'flat')]:.3f}"
                                                       for a in away)))
    return _emit(6, epd_ok and flat_ok, detail)


def test_criterion_6_defense_direction():
    ok, detail = criterion_6()
    assert ok, detail


# -- 7. identity chain -------------------------------------------------------------


def criterion_7():
    tb = build_testbed(TestbedConfig(n_members=100, n_eval=50, n_background=300))
    rng = random.Random(7)
    chain = DefenseChain("id", flatten_lambda=0.0, dp_sigma=0.0, adaptive=NoiseParams(tau=0.999))
    system = DefendedModel(tb.target, chain, base=tb.base, gen=GenerationConfig(12), seed=3)
    words = tb.target.vocabulary[:-1]
    mismatches, gated = 0, 0
    for i in range(100):
        q = " ".join(rng.choice(words) for _ in range(rng.randint(1, 10)))
        temp = 0.0 if i % 2 else 1.0
        resp = system.respond(q, seed=i, temperature=temp)
        gated += resp.noise is not None and not resp.noise.activated
        plain = tb.target.generate(q, 12, temp, i)
        same = resp.answer.scored == plain.scored and system.score(plain.text, q) == tb.target.score(plain.text, q)
        mismatches += not same
    return _emit(7, mismatches == 0 and gated == 100,
                 f"{100 - mismatches}/100 queries bit-identical, beta <= tau on {gated}/100")


def test_criterion_7_identity_chain():
    ok, detail = criterion_7()
    assert ok, detail


# -- 8. EM / F1 ---------------------------------------------------------------------


def _variant(s, rng):
    """A string with the same normalised form: case, punctuation, articles, spacing."""
    out = []
    for w in s.split():
        if rng.random() < 0.3:
            out.append(rng.choice(["the", "A", "an", "The"]))
        w = w.upper() if rng.random() < 0.3 else w
        out.append(w + (rng.choice("!?.,;") if rng.random() < 0.3 else ""))
    return ("  " if rng.random() < 0.5 else "") + "   ".join(out)


def criterion_8():
    cases = [("The Cat!", "cat", 1, 1.0), ("the cat sat", "cat", 0, 2 / 3), ("a b c", "a b c", 1, 1.0)]
    case_ok = all(exact_match(p, g) == em and abs(token_f1(p, g) - f1) <= 1e-9 for p, g, em, f1 in cases)
    rng = random.Random(8)
    vocab = ["cat", "dog", "sat", "mat", "x", "y", "red", "z9"]
    violations, em_hits = 0, 0
    for i in range(10_000):
        gold = " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 5)))
        pred = _variant(gold, rng) if i % 2 else " ".join(rng.choice(vocab + list(string.punctuation))
                                                          for _ in range(rng.randint(0, 5)))
        if exact_match(pred, gold):
            em_hits += 1
            violations += token_f1(pred, gold) != 1.0
    ok = case_ok and violations == 0 and em_hits >= 5000
    return _emit(8, ok, f"hand cases {'exact' if case_ok else 'WRONG'}, EM=1 => F1=1 on {em_hits} EM pairs "
                        f"of 10000, {violations} violations")


def test_criterion_8_em_f1():
    ok, detail = criterion_8()
    assert ok, detail


# -- 9. retrieval exactness ---------------------------------------------------------


def criterion_9(tmp_dir):
    rng = np.random.default_rng(9)
    bad = 0
    tie_cases = 0
    for c in range(500):
        n = int(rng.integers(1, 1001))
        v = rng.normal(size=(n, 256))
        if n > 3 and c % 2 == 0:
            dup = rng.integers(n, size=max(2, n // 10))
            v[dup] = v[dup[0]]
            tie_cases += 1
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        idx = RetrievalIndex(tuple(f"p{i}" for i in range(n)), tuple(f"t{i}" for i in range(n)), v)
        q = v[int(rng.integers(n))] if c % 3 == 0 else rng.normal(size=256)
        q = q / np.linalg.norm(q)
        k = int(rng.integers(1, 11))
        sims = [math.fsum(row * q) for row in v]
        oracle = sorted(range(n), key=lambda i: (-sims[i], i))[:k]
        got = retrieve_topk(idx, q, k)
        bad += [g for g, _ in got] != [idx.ids[i] for i in oracle]
        if c == 0:
            path = tmp_dir / "index.bin"
            idx.save(path)
            back = RetrievalIndex.load(path)
            round_trip = (back.ids == idx.ids and back.passages == idx.passages
                          and back.vectors.tobytes() == idx.vectors.tobytes())
    return _emit(9, bad == 0 and round_trip,
                 f"{500 - bad}/500 corpora match the exhaustive oracle ({tie_cases} with tied rows), "
                 f"save/load {'lossless' if round_trip else 'LOSSY'}")


def test_criterion_9_retrieval(tmp_path):
    ok, detail = criterion_9(tmp_path)
    assert ok, detail


# -- 10. transport identity ----------------------------------------------------------


def criterion_10():
    tb = build_testbed(TestbedConfig(n_members=100, n_eval=50, n_background=300))
    model = tb.target
    rng = random.Random(10)
    words = list(model.vocabulary[:-1]) + ["oov-word", "zzz"]
    texts = [" ".join(rng.choice(words) for _ in range(rng.randint(1, 30))) for _ in range(1000)]
    with serve_mock({"target": model}) as server:
        remote = RemoteModel(Endpoint(server.url, "target", max_parallel=32))
        with ThreadPoolExecutor(32) as pool:
            got = list(pool.map(remote.score, texts))
    mismatches = sum(g != toy_lm_score(model, t) for g, t in zip(got, texts))
    return _emit(10, mismatches == 0, f"{1000 - mismatches}/1000 texts bit-identical over HTTP with 32 workers")


def test_criterion_10_transport_identity():
    ok, detail = criterion_10()
    assert ok, detail


# -- 11. reproducibility ------------------------------------------------------------


def criterion_11():
    cfg = ExperimentConfig(testbed={"n_members": 100, "n_eval": 50, "n_background": 300}, seed=11,
                           defenses=(DefenseArm("epd", epd=True), DefenseArm("flat", flatten=0.5),
                                     DefenseArm("ad", adaptive={"tau": 0.05})))
    a, b = run_experiment(cfg).body_bytes(), run_experiment(cfg).body_bytes()
    cell = format_cell(0.6013, -21.2)
    return _emit(11, a == b and cell == "0.601(-21)",
                 f"report body {'byte-identical' if a == b else 'DIFFERS'} across runs ({len(a)} bytes), "
                 f"cell renders {cell!r}")


def test_criterion_11_reproducibility():
    ok, detail = criterion_11()
    assert ok, detail


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        results = [criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6(),
                   criterion_7(), criterion_8(), criterion_9(Path(d)), criterion_10(), criterion_11()]
    sys.exit(0 if all(ok for ok, _ in results) else 1)
