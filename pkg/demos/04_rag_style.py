"""
Retrieval-augmented target
==========================

In RAG-style mode the members are passages in a retrieval index instead of
training documents. The testbed target is then the base model with a copy
cache over the retrieved prompt.
"""

from miaguard.harness import DefenseArm, ExperimentConfig, render_table, run_experiment
from miaguard.retrieval import HashingEmbedder, assemble_rag_prompt, build_index, retrieve_topk
from miaguard.testbed import TestbedConfig, build_testbed

# Retrieval on its own: hashed bag-of-words vectors, exact cosine top-k.
tb = build_testbed(TestbedConfig(n_members=50, n_eval=20, n_background=200))
embedder = HashingEmbedder(256)
index = build_index(embedder, [(f"d{i}", d) for i, d in enumerate(tb.member_documents)])
question = tb.members[0][0]
hits = retrieve_topk(index, embedder([question])[0], k=3)
print(hits)
print(assemble_rag_prompt(question, [index.passages[index.ids.index(i)] for i, _ in hits]))

# The whole experiment in rag-style mode.
report = run_experiment(ExperimentConfig(
    mode="rag-style",
    testbed={"n_members": 50, "n_eval": 20, "n_background": 200},
    attacks=("logloss", "mink", "zlib"),
    defenses=(DefenseArm("epd", epd=True),),
))
print(render_table(report))
