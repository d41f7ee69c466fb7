"""
Talking to a model over HTTP
============================

Serve a toy model with the mock completion server and attack it through the
same client a real endpoint would use. Scores arrive bit-identical to local
scoring.
"""

from miaguard.model_access import Endpoint, RemoteModel, fit_toy_lm
from miaguard.server import serve_mock

corpus = ["the cat sat on the mat", "the dog sat on the log", "a cat saw a dog"]
model = fit_toy_lm(corpus, order=3, smoothing=0.1, name="toy")

with serve_mock(model) as server:
    remote = RemoteModel(Endpoint(server.url, "toy"))
    for text in ("the cat sat on the mat", "the mat sat on the cat"):
        scored = remote.score(text)
        assert scored == model.score(text)
        print(f"{text!r}: mean NLL {scored.mean_nll:.4f} over {len(scored)} tokens")

    # Generation goes through the same endpoint.
    print("continuation:", remote.generate("the cat", max_tokens=4).text)
