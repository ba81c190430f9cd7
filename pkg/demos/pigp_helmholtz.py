"""Kernel collocation for Helmholtz and the posterior variance it provides.

The solution is the minimum-norm function in a Gaussian-kernel space that
meets the PDE at collocation points and the boundary data; since Helmholtz is
linear one Gauss-Newton step solves it.  The posterior variance is small where
constraints are dense, which is what the variance criterion exploits when
picking pseudo-labels.
"""
import numpy as np

from pilabel.pde import helmholtz_exact, make_helmholtz, sample_points
from pilabel.pigp import KernelConfig, gp_posterior, pigp_solve
from pilabel.semisup import FidelityCriteria, GpEvaluator, select_pseudo_labels

problem = make_helmholtz()
sets = sample_points(problem, 400, 20, 2000, seed=0)
sol = pigp_solve(problem, sets, KernelConfig((0.15, 0.15), nugget=1e-5, beta=1e-10))
print("gauss-newton iterations:", sol.iterations, "converged:", sol.converged)

Q = np.random.default_rng(1).uniform(size=(5000, 2))
mean, var = gp_posterior(sol, Q)
u = helmholtz_exact(Q)
print("relative l2 error:", np.linalg.norm(mean - u) / np.linalg.norm(u))
print("posterior variance: median %.1e, max %.1e" % (np.median(var), var.max()))

crit = FidelityCriteria(residual_threshold=1e-1, variance_threshold=1e-4)
labels = select_pseudo_labels(GpEvaluator(sol), problem, sets.test, crit)
err = [abs(p.value - helmholtz_exact(np.array([p.point]))[0]) for p in labels]
print(f"{len(labels)} of {len(sets.test)} test points qualify as pseudo-labels; "
      f"worst label error {max(err):.1e}")
