"""A physics-informed network on viscous Burgers, from derivatives to training.

The network's input derivatives come from forward-propagated jets; the loss
gradient from a reverse pass through the same computation.  Both are checked
against finite differences before a short Adam run.
"""
import numpy as np

from pilabel.diffengine import DerivativeSpec, eval_jet, fd_check
from pilabel.oracle import burgers_reference, error_metrics, uniform_grid
from pilabel.pde import make_vburgers, sample_points
from pilabel.pinn import TrainConfig, init_mlp, pinn_loss, predict, train_adam

problem = make_vburgers(0.05)
model = init_mlp(2, [20, 20, 20], seed=0)

spec = DerivativeSpec(first_order=(0, 1), second_order=(1,))
jet = eval_jet(model, np.array([0.3, 0.2]), spec)
print("u, u_t, u_x, u_xx at (0.3, 0.2):", jet.u, jet.du[0], jet.du[1], jet.d2u[1])
print("finite-difference disagreement:", fd_check(model, np.array([0.3, 0.2]), spec))

sets = sample_points(problem, 1000, [100, 50, 50], 0, seed=0)
weights = [1, 1, 1, 1, 0.1]
print("initial loss:", pinn_loss(model, problem, sets, weights).total)

model, history = train_adam(model, problem, sets, TrainConfig(3000, 2e-3, weights, snapshot_stride=500))
for step, b in history:
    print(f"step {step:5d}  total {b.total:.3e}  residual {b.residual:.3e}")

ref = burgers_reference(problem.params["nu"], uniform_grid(problem.domain, 64), use_cache=False)
print("relative l2 error vs Cole-Hopf:", error_metrics(predict(model, ref.points()), ref)["l2_rel"])
