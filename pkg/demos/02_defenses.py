"""
Inference-time defenses side by side
====================================

Run the no-defense arm next to the judge ensemble, output flattening and
adaptive noise, on the response surface (the attacker sees the answers the
system returns, together with their log-probabilities).
"""

from miaguard.harness import DefenseArm, ExperimentConfig, render_table, run_experiment

config = ExperimentConfig(
    testbed={"n_members": 200, "n_eval": 100, "n_background": 800},
    defenses=(
        DefenseArm("epd", epd=True),
        DefenseArm("flat", flatten=0.5),
        DefenseArm("adaptive", adaptive={"tau": 0.05}),
    ),
    max_workers=4,
)
report = run_experiment(config)

# Defended cells carry the relative change against the no-defense arm, in percent.
print(render_table(report))

# The ensemble arm also reports how often the judge sided with each candidate.
epd = next(a for a in report.body["arms"] if a["name"] == "epd")
print("judge bias:", epd["judge_bias"])
