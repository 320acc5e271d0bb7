"""
One counterfactual edit
=======================

Rewrite a single fact with the ROME baseline and with the graph-augmented
editor, then compare loss traces, the installed update and the evaluation
of the edited models.
"""

import sys

import numpy as np

from glame_lab import editor as E
from glame_lab import evalkit as V
from glame_lab import experiments as X
from glame_lab import lm

cache = sys.argv[1] if len(sys.argv) > 1 else "runs/hosts"
spec = X.HostSpec()
g = spec.world()
model = X.cached_host(spec, cache)

case = X.desk_cases(g, 1, seed=0)[0]
e = case.edit
print(e.prompt, ":", g.entities[e.o], "->", g.entities[e.o_new])

config = E.EditConfig()
cov = X.covariance_for(model, g, config.layer)

for method in ("rome", "glame"):
    edited, sol = E.edit(model, g, e, cov, X.with_method(config, method), case.leak_filter)
    # the loss trace of the value fit, every tenth step
    print(method, sol.stop_reason, np.round(sol.trace[::10], 3))
    # the update is rank one and installs k* -> m* exactly
    sv = sol.update_singular_values()
    print("  sigma2/sigma1", sv[1] / sv[0], "constraint", sol.constraint_residual)
    if sol.subgraph is not None:
        print("  subgraph edges", len(sol.subgraph.edges))
    prompt = model.tokenizer.encode(e.prompt, bos=True)
    print("  generation:", model.tokenizer.decode(lm.generate(edited, prompt, 3)))
    print("  scores:", V.score_case(edited, g, case))
