"""Self-training a PINN: its own trustworthy predictions become labels.

After each round, test points whose PDE residual is below a threshold and
which lie close to already-labelled points are labelled with the network's
prediction.  Labels spread inward from the boundary round by round.
"""
import numpy as np

from pilabel.oracle import burgers_reference, error_metrics, uniform_grid
from pilabel.pde import make_vburgers, sample_points
from pilabel.pinn import TrainConfig, init_mlp, predict
from pilabel.semisup import FidelityCriteria, PinnTrainer, self_train

problem = make_vburgers(0.05)
sets = sample_points(problem, 1000, [100, 50, 50], 1000, seed=0)
ref = burgers_reference(0.05, uniform_grid(problem.domain, 64), use_cache=False)

trainer = PinnTrainer(init_mlp(2, [20, 20, 20], seed=0), TrainConfig(1000, 2e-3, [1, 1, 1, 1, 0.1]))
criteria = FidelityCriteria(residual_threshold=2e-2, proximity_threshold=0.1)


def metrics(ev):
    return {"l2": error_metrics(predict(ev.model, ref.points()), ref)["l2_rel"]}


_, snaps = self_train(trainer, problem, sets, criteria, i_max=4, metrics_fn=metrics)
for s in snaps:
    added = sum(len(v) for v in s.selected.values())
    print(f"round {s.iteration}: trained with {s.sizes['self']:4d} labels, l2 {s.metrics['l2']:.3e}, "
          f"selected {added} more")

labels = snaps[-1].pseudo["self"]
if labels:
    P = np.array([p.point for p in labels])
    print("label depth (distance from x = +-1): median %.2f, max %.2f"
          % (np.median(1 - np.abs(P[:, 1])), (1 - np.abs(P[:, 1])).max()))
