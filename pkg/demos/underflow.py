"""Why the voxel map keeps its posteriors in log space.

Two sensors keep disagreeing with near-certainty. A plain running product
of probabilities underflows to all zeros after a few dozen updates and can
never be normalized again; the log-space update stays finite and normalized.

    python demos/underflow.py
"""

import numpy as np

from semfuse.core import logsumexp, to_log
from semfuse.voxel_map import NaiveProductFusion, log_bayes_update

eps = 1e-9
obs = (np.array([1 - eps, eps]), np.array([eps, 1 - eps]))
L = np.log([0.5, 0.5])
naive = NaiveProductFusion(2)

for k in range(10_000):
    p = obs[k % 2]
    L = log_bayes_update(L, to_log(p, 1e-12))
    naive.update(p)
    if k in (0, 1, 9, 39, 99, 9_999):
        print(f"step {k + 1:>6}: log posterior {L}, logsumexp {float(logsumexp(L)):+.1e}, "
              f"naive product {naive.product}")

print("log space finite:", bool(np.all(np.isfinite(L))))
print("naive product normalizable:", naive.normalizable)
