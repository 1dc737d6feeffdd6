"""
Choose the number of clusters by BIC.

Fits K = 1..4 to one simulated dataset with the same seed and prints the
sweep table. Non-converged fits are listed but never chosen.

Run with ``python demos/choosing_k.py [N] [seed]``.
"""

import sys

from mmm import RunConfig, generate, benchmark_config, select_k
from mmm.selection import nu_k

N = int(sys.argv[1]) if len(sys.argv) > 1 else 300
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

ds, _ = generate(benchmark_config(N, seed=seed))
report = select_k(ds, 4, RunConfig(seed=seed))

print(" K   params      loglik         BIC  converged  iterations")
for r in report.rows:
    print(f"{r.K:2d} {nu_k(r.K, ds.J, ds.T):8d} {r.loglik:11.2f} {r.bic:11.2f} {str(r.converged):>10s} {r.iterations:11d}")
print(f"\nselected K = {report.best_k}")
