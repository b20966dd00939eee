"""
Entropic and partial transport on a tiny problem
================================================

Four source atoms, three targets.  We solve the balanced problem with
Sinkhorn, then ship only part of the mass with the partial solver, and
compare both against the exact linear program.
"""

import numpy as np

from madpot import SolverConfig, exact_lp_oracle, partial_ot, sinkhorn
from madpot.numkit import Rng

np.set_printoptions(precision=4, suppress=True)

rng = Rng(7)
c = rng.uniform(0, 2, (4, 3))
alpha = np.full(4, 1 / 4)
beta = np.full(3, 1 / 3)
print("cost matrix\n", c)

# balanced problem: every row and column marginal is met exactly
for lam in (0.5, 0.1, 0.02):
    tp = sinkhorn(c, alpha, beta, SolverConfig(lam=lam, max_iter=5000, early_stop_tol=1e-10))
    print(f"lambda={lam:<5} cost={tp.cost(c):.5f} iters={tp.iterations} converged={tp.converged}")
plan, lp = exact_lp_oracle(c, alpha, beta)
print(f"exact LP      cost={lp:.5f}")

# smaller lambda gives sharper plans; the exact plan is a vertex of the polytope
print("LP plan\n", plan)

# partial transport moves only frac of the mass; rows may keep some back
for frac in (0.4, 0.8, 1.0):
    cfg = SolverConfig(lam=0.02, frac=frac, max_iter=5000, early_stop_tol=1e-10)
    tp = partial_ot(c, alpha, frac * beta, cfg)
    _, lp = exact_lp_oracle(c, alpha, frac * beta, frac=frac)
    print(f"frac={frac}: mass={tp.plan.sum():.4f} cost={tp.cost(c):.5f} (LP {lp:.5f}) rows={tp.plan.sum(axis=1)}")

# with frac < 1 the expensive rows are the ones left partly untransported
