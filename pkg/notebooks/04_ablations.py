"""
Encoder ablations
=================

Swap the graph encoder for its two ablations (no relation vectors, and a
plain MLP on the subject) and compare with the full encoder and ROME.
"""

import sys

from glame_lab import editor as E
from glame_lab import experiments as X

cache = sys.argv[1] if len(sys.argv) > 1 else "runs/hosts"
edits = int(sys.argv[2]) if len(sys.argv) > 2 else 10

spec = X.HostSpec()
g = spec.world()
model = X.cached_host(spec, cache)
cases = X.desk_cases(g, edits, seed=0)
config = E.EditConfig()
cov = X.covariance_for(model, g, config.layer)

print("method       eff    para   neigh  port   early-stop  max-drift")
for method in E.METHODS:
    r = X.run_suite(model, g, cases, cov, X.with_method(config, method))
    s = r.scores()
    print(f"{method:12s} {s.efficacy:6.1f} {s.paraphrase:6.1f} {s.neighborhood:6.1f} "
          f"{s.portability:6.1f} {r.early_stop_rate():8.0%}   {r.summary()['max_drift']:.3f}")

# the encoder output is nonnegative; ROME's free vector is not
