"""Neural collocation solver: weighted residual/boundary/pseudo-label loss trained with Adam."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .diffengine import (
    DivergenceError,
    MlpModel,
    Traced,
    Var,
    eval_jet,
    value_and_grad,
)
from .pde import PdeProblem, PointSets

__all__ = [
    "MlpModel",
    "LossBreakdown",
    "TrainConfig",
    "Adam",
    "init_mlp",
    "pinn_loss",
    "train_adam",
    "predict",
    "save_mlp",
    "load_mlp",
    "write_history_csv",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def init_mlp(d, hidden, seed, activation="tanh", domain=None) -> MlpModel:
    """Glorot-normal weights, zero biases; deterministic in ``seed``.

    With ``domain`` (``d`` pairs ``(lo, hi)``) inputs are mapped affinely onto
    ``[-1, 1]`` before the first layer.
    """
    hidden = [int(h) for h in hidden]
    if not hidden:
        raise ValueError("at least one hidden layer is required")
    if d < 1 or min(hidden) < 1:
        raise ValueError("layer widths must be >= 1")
    widths = (int(d), *hidden, 1)
    rng = np.random.default_rng(seed)
    parts = []
    for a, b in zip(widths[:-1], widths[1:]):
        parts.append(rng.normal(0.0, np.sqrt(2.0 / (a + b)), size=a * b))
        parts.append(np.zeros(b))
    shift = scale = None
    if domain is not None:
        dom = np.asarray(domain, dtype=np.float64)
        if dom.shape != (d, 2) or np.any(dom[:, 1] <= dom[:, 0]):
            raise ValueError("domain must hold one increasing (lo, hi) pair per input")
        shift = tuple(dom.mean(axis=1))
        scale = tuple(2.0 / (dom[:, 1] - dom[:, 0]))
    return MlpModel(widths, np.concatenate(parts), activation, shift, scale)


@dataclass
class LossBreakdown:
    residual: float
    boundary: dict
    pseudo: float
    weights: dict
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.recompute_total()

    def recompute_total(self):
        total = self.weights["residual"] * self.residual
        for name, v in self.boundary.items():
            total += self.weights[name] * v
        total += self.weights.get("pseudo", 0.0) * self.pseudo
        return total

    def row(self):
        return [self.total, self.residual, *self.boundary.values(), self.pseudo]


def normalize_weights(weights, problem: PdeProblem):
    """Weights as ``{"residual", <group names>, "pseudo"}``.

    A sequence is read in the order residual, boundary groups, pseudo
    (pseudo optional, default 0).
    """
    names = ["residual"] + [g.name for g in problem.groups]
    if isinstance(weights, dict):
        missing = [n for n in names if n not in weights]
        if missing:
            raise ValueError(f"missing loss weights for {missing}")
        out = {n: float(weights[n]) for n in names}
        out["pseudo"] = float(weights.get("pseudo", 0.0))
    else:
        w = [float(v) for v in weights]
        if len(w) not in (len(names), len(names) + 1):
            raise ValueError(f"expected {len(names)} or {len(names) + 1} weights, got {len(w)}")
        out = dict(zip(names, w))
        out["pseudo"] = w[len(names)] if len(w) > len(names) else 0.0
    if any(v < 0 for v in out.values()):
        raise ValueError("loss weights must be non-negative")
    return out


class _LossPlan:
    """Point arrays and targets laid out once per (problem, point sets)."""

    def __init__(self, problem: PdeProblem, sets: PointSets):
        self.problem = problem
        self.col = sets.collocation
        if len(self.col) == 0 and len(sets.boundary) == 0:
            raise ValueError("nothing to fit: empty collocation and boundary sets")
        blocks, self.groups = [], []
        k = 0
        for gid, g in enumerate(problem.groups):
            P = sets.group_points(gid)
            n = len(P)
            if g.kind == "periodic_pair":
                blocks += [P, g.partner(P, problem.domain)]
                self.groups.append((g.name, "periodic", slice(k, k + n), slice(k + n, k + 2 * n), None))
                k += 2 * n
            else:
                blocks.append(P)
                self.groups.append((g.name, "dirichlet", slice(k, k + n), None, g.values(P)))
                k += n
        pp = sets.pseudo_points
        blocks.append(pp)
        self.pseudo = slice(k, k + len(pp))
        self.pseudo_values = sets.pseudo_values
        self.values_at = np.concatenate(blocks) if blocks else np.zeros((0, problem.dim))

    def terms(self, tr: Traced):
        zero = Var(0.0)
        if len(self.col):
            jet = tr.jet(self.col, self.problem.spec)
            res = self.problem.interior_residual(self.col, jet).square().mean()
        else:
            res = zero
        vals = tr.value(self.values_at) if len(self.values_at) else None
        bnd = {}
        for name, kind, s0, s1, target in self.groups:
            if s0.stop == s0.start:
                bnd[name] = zero
            elif kind == "periodic":
                bnd[name] = (vals[s0] - vals[s1]).square().mean()
            else:
                bnd[name] = (vals[s0] - target).square().mean()
        if self.pseudo.stop > self.pseudo.start:
            pse = (vals[self.pseudo] - self.pseudo_values).square().mean()
        else:
            pse = zero
        return res, bnd, pse


def _total(weights, res, bnd, pse, has_pseudo):
    total = res * weights["residual"]
    for name, v in bnd.items():
        total = total + v * weights[name]
    if has_pseudo:
        total = total + pse * weights["pseudo"]
    return total


def pinn_loss(model: MlpModel, problem: PdeProblem, sets: PointSets, weights) -> LossBreakdown:
    """Mean-square residual, per-group boundary and pseudo-label terms with their weighted sum."""
    w = normalize_weights(weights, problem)
    plan = _LossPlan(problem, sets)
    res, bnd, pse = plan.terms(Traced(model))
    if not sets.pseudo:
        w = dict(w, pseudo=0.0)
    return LossBreakdown(float(res.value), {k: float(v.value) for k, v in bnd.items()},
                         float(pse.value), w)


@dataclass
class TrainConfig:
    steps: int
    learning_rate: float
    weights: object
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stop_total_loss: Optional[float] = None
    snapshot_stride: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot stride must be >= 1")


class Adam:
    """Bias-corrected Adam over a flat parameter vector."""

    def __init__(self, n, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, g):
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train_adam(model: MlpModel, problem: PdeProblem, sets: PointSets, config: TrainConfig,
               optimizer: Optional[Adam] = None):
    """Full-batch Adam on the weighted PINN loss.

    Returns ``(trained model, history)`` where history is a list of
    ``(step, LossBreakdown)`` recorded every ``snapshot_stride`` steps and at
    the final state.  A fresh optimizer state is used unless one is passed.
    Raises :class:`DivergenceError` (``state`` holds the last finite model and
    history) if the loss becomes non-finite.
    """
    w = normalize_weights(config.weights, problem)
    has_pseudo = bool(sets.pseudo) and w["pseudo"] > 0
    if not has_pseudo:
        # labels with zero weight are left out so the trajectory cannot depend on them
        w["pseudo"] = 0.0
        sets = sets.with_pseudo([])
    plan = _LossPlan(problem, sets)
    model = model.copy()
    opt = optimizer or Adam(model.n_params, config.learning_rate, config.beta1, config.beta2,
                            config.eps)
    history = []
    terms = {}

    def loss(tr):
        res, bnd, pse = plan.terms(tr)
        terms.update(res=res, bnd=bnd, pse=pse)
        return _total(w, res, bnd, pse, has_pseudo)

    def breakdown():
        return LossBreakdown(float(terms["res"].value),
                             {k: float(v.value) for k, v in terms["bnd"].items()},
                             float(terms["pse"].value), w)

    step = 0
    while True:
        try:
            _, g = value_and_grad(loss, model)
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient")
        except DivergenceError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}",
                                  state=(model, history)) from None
        bd = breakdown()
        stop = config.stop_total_loss is not None and bd.total < config.stop_total_loss
        if step % config.snapshot_stride == 0 or step == config.steps or stop:
            history.append((step, bd))
        if step == config.steps or stop:
            break
        prev = model.theta.copy()
        opt.step(model.theta, g)
        if not np.all(np.isfinite(model.theta)):
            model.theta = prev
            raise DivergenceError(f"parameters became non-finite at step {step}",
                                  state=(model, history))
        step += 1
    return model, history


def predict(model: MlpModel, grid, chunk=65536):
    """Network values at the points of ``grid`` (shape ``(n, d)``)."""
    X = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if len(X) == 0:
        return np.zeros(0)
    return np.concatenate([eval_jet(model, X[i:i + chunk]).u for i in range(0, len(X), chunk)])


def save_mlp(path, model: MlpModel):
    """Versioned ``.npz`` checkpoint with layer widths, activation and flat parameters."""
    with open(path, "wb") as fh:
        np.savez(fh, version=CHECKPOINT_VERSION, widths=np.array(model.widths),
                 activation=model.activation, theta=model.theta,
                 input_shift=np.array(model.input_shift), input_scale=np.array(model.input_scale))


def load_mlp(path) -> MlpModel:
    with np.load(path) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z['version'])}")
        return MlpModel(tuple(int(w) for w in z["widths"]), z["theta"], str(z["activation"]),
                        tuple(z["input_shift"]), tuple(z["input_scale"]))


def write_history_csv(path, history, group_names, offset=0):
    """``step,total,residual,bc_<group>...,pseudo`` rows; ``offset`` shifts step numbers."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "total", "residual", *[f"bc_{n}" for n in group_names], "pseudo"])
        for step, bd in history:
            w.writerow([step + offset, *(repr(float(v)) for v in bd.row())])
