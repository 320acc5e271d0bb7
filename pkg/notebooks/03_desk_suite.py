"""
Desk-scale comparison
=====================

Run the 50-edit counterfactual suite with the graph-augmented editor and
the ROME baseline on the same cases and print the aggregate scores.
"""

import json
import sys

from glame_lab import editor as E
from glame_lab import experiments as X

cache = sys.argv[1] if len(sys.argv) > 1 else "runs/hosts"
edits = int(sys.argv[2]) if len(sys.argv) > 2 else 50

spec = X.HostSpec()
g = spec.world()
model = X.cached_host(spec, cache)

# cases: edit prompt, paraphrases, neighbors and 2-hop questions
cases = X.desk_cases(g, edits, seed=0)
config = E.EditConfig()
cov = X.covariance_for(model, g, config.layer)

for method in ("glame", "rome"):
    result = X.run_suite(model, g, cases, cov, X.with_method(config, method))
    print(json.dumps(result.summary(), indent=1))

# per-case rows, identical across reruns with the same seed
print(result.csv()[:400])
