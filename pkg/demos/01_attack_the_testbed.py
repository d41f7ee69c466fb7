"""
Attacking the toy testbed
=========================

Build the synthetic testbed, score member and non-member records with every
attack, and look at AUC, ASR and TPR at 1% FPR.
"""

from miaguard.attacks import ATTACKS, AttackConfig, AttackSample, run_attack_suite
from miaguard.metrics import summarize
from miaguard.model_access import join_prompt
from miaguard.testbed import TestbedConfig, build_testbed

# A smaller testbed than the default keeps this under a few seconds.
tb = build_testbed(TestbedConfig(n_members=200, n_eval=100, n_background=800))
records = tb.records()
print(f"{len(records)} records, vocabulary of {len(tb.target.vocabulary)} tokens")

# The document surface: the attacker scores question + gold answer directly.
samples = [AttackSample(r.id, join_prompt(r.question, r.answer), r.label) for r in records]
config = AttackConfig(recall_prefix=tb.recall_prefix)
suite = run_attack_suite(samples, {"target": tb.target, "reference": tb.reference}, config)

# Higher scores mean "member" for every attack, so the metrics read the same way.
for name in ATTACKS:
    s = summarize([x.score.value for x in suite[name]], [x.label for x in suite[name]])
    print(f"{name:8s} AUC={s.auc:.3f} ASR={s.asr:.3f} TPR@1%={s.tpr_at[0.01]:.3f}")
