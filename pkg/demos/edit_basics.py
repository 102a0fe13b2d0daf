"""A single low-rank edit on a random hidden vector.

Shows the three facts the rest of the package leans on: the edit that copies
R into W is exactly the identity, any edit only moves h inside the row space
of R, and its size never exceeds sigma_max(R) * ||W h + b - R h||.
"""

import numpy as np

from core_reft.linalg import SeededRng, sigma_max
from core_reft.reft import InterventionConfig, InterventionParams, delta_bound_check, init_interventions, loreft

dim, rank = 32, 4
rng = SeededRng(7)
h = rng.normal(size=dim)

iv = init_interventions(InterventionConfig(layers=[0], rank=rank, init_seed=7), dim)[0]
print("fresh edit changes h by", np.max(np.abs(loreft(h, iv) - h)))

# a trained-looking edit: perturb W and b away from the identity
edit = InterventionParams(iv.R, iv.W + rng.normal(size=iv.W.shape, scale=0.5), rng.normal(size=rank))
moved = loreft(h, edit) - h
outside = moved - iv.R.T @ (iv.R @ moved)
print(f"edit norm {np.linalg.norm(moved):.4f}, component outside the row space {np.linalg.norm(outside):.1e}")

check = delta_bound_check(edit, h)
print(f"bound {check.bound:.4f} >= edit {check.delta_norm:.4f}: {check.holds}")

# with non-orthonormal R the bound carries sigma_max(R) > 1
skewed = InterventionParams(2.0 * iv.R + rng.normal(size=iv.R.shape, scale=0.3), edit.W, edit.b)
check = delta_bound_check(skewed, h)
print(f"sigma_max(R) = {sigma_max(skewed.R):.3f}; bound {check.bound:.3f} >= edit {check.delta_norm:.3f}: {check.holds}")
