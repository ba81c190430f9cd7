"""Pseudo-labelling: fidelity-based selection, pruning, self-training and co-training loops."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .diffengine import DivergenceError, eval_jet
from .pde import PdeProblem, PointSets
from .pigp import GpSolution, KernelConfig, gp_jet, gp_posterior, gp_regress, pigp_solve
from .pinn import TrainConfig, predict, train_adam

__all__ = [
    "PseudoLabel",
    "FidelityCriteria",
    "RoundSnapshot",
    "PinnEvaluator",
    "GpEvaluator",
    "PinnTrainer",
    "PigpTrainer",
    "select_pseudo_labels",
    "prune_pseudo_labels",
    "self_train",
    "co_train",
    "gp_bootstrap_labels",
    "bootstrap_train",
]

log = logging.getLogger(__name__)

SOURCES = ("self_pinn", "self_pigp", "from_pinn", "from_pigp", "from_plain_gp")


@dataclass(frozen=True)
class PseudoLabel:
    point: tuple
    value: float
    residual_score: float
    variance_score: Optional[float]
    source: str
    iteration_added: int
    index: int = -1  # position in the test set, -1 if not drawn from it

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown pseudo-label source {self.source!r}")


@dataclass(frozen=True)
class FidelityCriteria:
    """Conjunctive thresholds; ``None`` disables a criterion.

    ``residual_threshold`` bounds ``|P(u) - f|`` (or its square when
    ``squared_residual``), ``variance_threshold`` the GP posterior variance,
    ``proximity_threshold`` the distance to the nearest labelled point and
    ``total_loss_gate`` the trainer's total loss for selection to run at all.
    """

    residual_threshold: Optional[float] = None
    variance_threshold: Optional[float] = None
    proximity_threshold: Optional[float] = None
    total_loss_gate: Optional[float] = None
    squared_residual: bool = False
    hysteresis: float = 2.0
    prune: bool = True

    def __post_init__(self):
        for name in ("residual_threshold", "variance_threshold", "proximity_threshold",
                     "total_loss_gate"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.hysteresis < 1:
            raise ValueError("hysteresis must be >= 1")

    def score(self, r):
        r = np.abs(np.asarray(r, dtype=np.float64))
        return r * r if self.squared_residual else r


@dataclass
class RoundSnapshot:
    iteration: int
    pseudo: dict  # channel name -> list of PseudoLabel held during this round's training
    metrics: dict
    losses: dict
    seconds: float = 0.0
    selected: dict = field(default_factory=dict)  # channel -> labels added after the round

    @property
    def sizes(self):
        return {k: len(v) for k, v in self.pseudo.items()}


class PinnEvaluator:
    source_self = "self_pinn"
    source_other = "from_pinn"

    def __init__(self, model, total_loss=None):
        self.model = model
        self.total_loss = total_loss

    def jet(self, X, spec):
        return eval_jet(self.model, np.atleast_2d(X), spec)

    def values(self, X):
        return predict(self.model, X)

    variance = None


class GpEvaluator:
    source_self = "self_pigp"
    source_other = "from_pigp"

    def __init__(self, solution: GpSolution, total_loss=None):
        self.solution = solution
        self.total_loss = total_loss

    def jet(self, X, spec):
        return gp_jet(self.solution, X, spec)

    def values(self, X):
        return gp_posterior(self.solution, np.atleast_2d(X))[0]

    def variance(self, X):
        return gp_posterior(self.solution, np.atleast_2d(X))[1]


def _scores(evaluator, problem, X, criteria, need_variance):
    jet = evaluator.jet(X, problem.spec)
    res = criteria.score(problem.interior_residual(X, jet))
    var = None
    if need_variance:
        if evaluator.variance is None:
            raise ValueError("a variance criterion needs an evaluator with posterior variance")
        var = evaluator.variance(X)
    return jet.u, res, var


def select_pseudo_labels(evaluator, problem: PdeProblem, test_points, criteria: FidelityCriteria,
                         labeled=None, iteration=0, source=None, exclude=()):
    """Test points passing every active criterion, labelled with the evaluator's prediction.

    ``labeled`` holds the points used by the proximity criterion; ``exclude``
    test indices already carrying a label.  Order follows ``test_points``.
    """
    X = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    source = source or evaluator.source_self
    gate = criteria.total_loss_gate
    if gate is not None and evaluator.total_loss is not None and not evaluator.total_loss < gate:
        return []
    mask = np.ones(len(X), dtype=bool)
    if len(exclude):
        mask[np.asarray(list(exclude), dtype=np.int64)] = False
    if criteria.proximity_threshold is not None:
        if labeled is None or len(labeled) == 0:
            return []
        dist, _ = cKDTree(np.asarray(labeled)).query(X)
        mask &= dist < criteria.proximity_threshold
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return []
    need_var = criteria.variance_threshold is not None
    u, res, var = _scores(evaluator, problem, X[idx], criteria, need_var)
    ok = np.ones(len(idx), dtype=bool)
    if criteria.residual_threshold is not None:
        ok &= res < criteria.residual_threshold
    if need_var:
        ok &= var < criteria.variance_threshold
    out = []
    for j in np.flatnonzero(ok):
        out.append(PseudoLabel(tuple(float(c) for c in X[idx[j]]), float(u[j]), float(res[j]),
                               None if var is None else float(var[j]), source, iteration,
                               int(idx[j])))
    return out


def prune_pseudo_labels(evaluator, problem: PdeProblem, current, criteria: FidelityCriteria):
    """Drop labels whose residual (or variance) under the current model exceeds
    ``hysteresis`` times the threshold."""
    current = list(current)
    if not current or not criteria.prune:
        return current
    X = np.array([p.point for p in current])
    need_var = criteria.variance_threshold is not None and evaluator.variance is not None
    _, res, var = _scores(evaluator, problem, X, criteria, need_var)
    keep = np.ones(len(current), dtype=bool)
    h = criteria.hysteresis
    if criteria.residual_threshold is not None:
        keep &= res < h * criteria.residual_threshold
    if need_var:
        keep &= var < h * criteria.variance_threshold
    return [p for p, k in zip(current, keep) if k]


class PinnTrainer:
    """Continues training one network across rounds; Adam moments restart every round."""

    kind = "pinn"

    def __init__(self, model, config: TrainConfig, initial_steps=None):
        self.model = model
        self.config = config
        self.initial_steps = initial_steps
        self.history = []  # (global step, LossBreakdown)
        self.steps_done = 0

    def train(self, problem, sets):
        steps = self.config.steps
        if self.steps_done == 0 and self.initial_steps is not None:
            steps = self.initial_steps
        cfg = replace(self.config, steps=steps)
        try:
            self.model, hist = train_adam(self.model, problem, sets, cfg)
        except DivergenceError as exc:
            model, hist = exc.state
            self.history += [(s + self.steps_done, b) for s, b in hist]
            raise
        self.history += [(s + self.steps_done, b) for s, b in hist]
        self.steps_done += steps
        last = hist[-1][1]
        return PinnEvaluator(self.model, last.total), {
            "total": last.total, "residual": last.residual,
            **{f"bc_{k}": v for k, v in last.boundary.items()}, "pseudo": last.pseudo}


class PigpTrainer:
    """Re-solves the kernel collocation problem from scratch each round."""

    kind = "pigp"

    def __init__(self, kernel: KernelConfig, max_gn_iters=30, tol=1e-12):
        self.kernel = kernel
        self.max_gn_iters = max_gn_iters
        self.tol = tol
        self.solution = None

    def train(self, problem, sets):
        self.solution = pigp_solve(problem, sets, self.kernel, self.max_gn_iters, self.tol)
        h = self.solution.history[-1] if self.solution.history else {}
        return GpEvaluator(self.solution), {
            "objective": h.get("objective", float("nan")),
            "gn_iterations": self.solution.iterations,
            "converged": int(self.solution.converged)}


def _labeled_points(sets: PointSets, pseudo):
    pts = [sets.boundary]
    if pseudo:
        pts.append(np.array([p.point for p in pseudo]))
    return np.concatenate(pts) if pts else np.zeros((0, sets.test.shape[1]))


def _merge(kept, added):
    return list(kept) + list(added)


def self_train(trainer, problem: PdeProblem, sets: PointSets, criteria: FidelityCriteria, i_max,
               metrics_fn: Optional[Callable] = None, on_round: Optional[Callable] = None):
    """Algorithm: train, select pseudo-labels from the model's own predictions, retrain.

    Runs training rounds 0..i_max with a selection pass after every round but
    the last; stops early when a selection pass adds no new label.  Returns
    ``(last evaluator, snapshots)``.
    """
    if i_max < 1:
        raise ValueError("i_max must be >= 1")
    pseudo = list(sets.pseudo)
    snapshots = []
    evaluator = None
    for it in range(i_max + 1):
        t0 = time.perf_counter()
        cur = sets.with_pseudo(pseudo)
        try:
            evaluator, losses = trainer.train(problem, cur)
        except DivergenceError as exc:
            exc.snapshots = snapshots
            raise
        snap = RoundSnapshot(it, {"self": list(pseudo)},
                             metrics_fn(evaluator) if metrics_fn else {}, losses)
        snapshots.append(snap)
        done = it == i_max
        if not done:
            kept = prune_pseudo_labels(evaluator, problem, pseudo, criteria)
            used = {p.index for p in kept if p.index >= 0}
            added = select_pseudo_labels(evaluator, problem, sets.test, criteria,
                                         _labeled_points(sets, kept), it + 1,
                                         evaluator.source_self, used)
            snap.selected = {"self": added}
            pseudo = _merge(kept, added)
            log.info("round %d: kept %d, added %d", it, len(kept), len(added))
            done = not added
        snap.seconds = time.perf_counter() - t0
        if on_round:
            on_round(snap)
        if done:
            break
    return evaluator, snapshots


def co_train(pinn_trainer, gp_trainer, problem: PdeProblem, sets: PointSets,
             pinn_criteria: Optional[FidelityCriteria], gp_criteria: Optional[FidelityCriteria],
             i_max, freeze_pinn=False, freeze_gp=False, metrics_fn: Optional[Callable] = None,
             on_round: Optional[Callable] = None, gp_sets: Optional[PointSets] = None):
    """Two solvers labelling points for each other.

    ``pinn_criteria`` gates PINN predictions that become labels for the GP,
    ``gp_criteria`` GP predictions that become labels for the PINN; ``None``
    disables that channel.  A frozen model is trained in round 0 only.  The
    loop stops after round ``i_max`` or as soon as an active channel adds no
    new label.  ``gp_sets`` gives the GP its own collocation and boundary
    points (default: ``sets``); candidates always come from ``sets.test``.
    Returns ``((pinn evaluator, gp evaluator), snapshots)``.
    """
    gp_sets = sets if gp_sets is None else gp_sets
    if i_max < 1:
        raise ValueError("i_max must be >= 1")
    if pinn_criteria is None and gp_criteria is None:
        raise ValueError("at least one labelling channel must be active")
    pd_nn, pd_gp = list(sets.pseudo), []
    ev_nn = ev_gp = None
    loss_nn = loss_gp = {}
    snapshots = []
    for it in range(i_max + 1):
        t0 = time.perf_counter()
        try:
            if ev_nn is None or not freeze_pinn:
                ev_nn, loss_nn = pinn_trainer.train(problem, sets.with_pseudo(pd_nn))
            if ev_gp is None or not freeze_gp:
                ev_gp, loss_gp = gp_trainer.train(problem, gp_sets.with_pseudo(pd_gp))
        except DivergenceError as exc:
            exc.snapshots = snapshots
            raise
        snap = RoundSnapshot(it, {"pinn": list(pd_nn), "pigp": list(pd_gp)},
                             metrics_fn(ev_nn, ev_gp) if metrics_fn else {},
                             {"pinn": loss_nn, "pigp": loss_gp})
        snapshots.append(snap)
        done = it == i_max
        if not done:
            empty = False
            snap.selected = {}
            if pinn_criteria is not None:
                kept = prune_pseudo_labels(ev_nn, problem, pd_gp, pinn_criteria)
                added = select_pseudo_labels(ev_nn, problem, sets.test, pinn_criteria,
                                             _labeled_points(gp_sets, kept), it + 1, "from_pinn",
                                             {p.index for p in kept if p.index >= 0})
                pd_gp = _merge(kept, added)
                snap.selected["pigp"] = added
                empty |= not added
            if gp_criteria is not None:
                kept = prune_pseudo_labels(ev_gp, problem, pd_nn, gp_criteria)
                added = select_pseudo_labels(ev_gp, problem, sets.test, gp_criteria,
                                             _labeled_points(sets, kept), it + 1, "from_pigp",
                                             {p.index for p in kept if p.index >= 0})
                pd_nn = _merge(kept, added)
                snap.selected["pinn"] = added
                empty |= not added
            log.info("round %d: |PD_nn|=%d |PD_gp|=%d", it, len(pd_nn), len(pd_gp))
            done = empty
        snap.seconds = time.perf_counter() - t0
        if on_round:
            on_round(snap)
        if done:
            break
    return (ev_nn, ev_gp), snapshots


def gp_bootstrap_labels(evaluator, problem: PdeProblem, sets: PointSets, near_boundary_dist,
                        residual_tol, gp_kernel: KernelConfig, noise=1e-4, prediction_points=None,
                        iteration=0, labeled=None):
    """Smooth trustworthy PINN predictions with a plain GP and return them as labels.

    Test points within ``near_boundary_dist`` of the labelled set whose
    residual is below ``residual_tol`` are fitted by :func:`gp_regress`; its
    posterior mean at ``prediction_points`` (default: the selected points) is
    returned.  Fewer than three qualifying points give an empty list.
    """
    X = sets.test
    labeled = sets.boundary if labeled is None else labeled
    mask = np.ones(len(X), dtype=bool)
    if np.isfinite(near_boundary_dist):
        dist, _ = cKDTree(labeled).query(X)
        mask &= dist < near_boundary_dist
    idx = np.flatnonzero(mask)
    if len(idx) < 3:
        return []
    jet = evaluator.jet(X[idx], problem.spec)
    res = np.abs(problem.interior_residual(X[idx], jet))
    ok = res < residual_tol
    idx, u, res = idx[ok], jet.u[ok], res[ok]
    if len(idx) < 3:
        return []
    gp = gp_regress(X[idx], u, noise, gp_kernel)
    if prediction_points is None:
        P, pidx, pres = X[idx], idx, res
    else:
        P = np.atleast_2d(prediction_points)
        pidx = np.full(len(P), -1)
        pres = np.abs(problem.interior_residual(P, evaluator.jet(P, problem.spec)))
    mean, var = gp_posterior(gp, P)
    return [PseudoLabel(tuple(float(c) for c in p), float(m), float(r), float(v), "from_plain_gp",
                        iteration, int(i))
            for p, m, r, v, i in zip(P, mean, pres, var, pidx)]


def bootstrap_train(trainer, problem: PdeProblem, sets: PointSets, near_boundary_dist,
                    residual_tol, gp_kernel: KernelConfig, i_max, noise=1e-4,
                    metrics_fn: Optional[Callable] = None, on_round: Optional[Callable] = None):
    """PINN co-trained with a plain GP: each round the GP is refitted to the PINN's
    trustworthy predictions near the labelled set and its mean replaces the
    PINN's pseudo-labels.  The labelled set grows with the labels, so the
    trusted region propagates inward.  Stops after round ``i_max`` or when no
    test point gains a label.
    """
    if i_max < 1:
        raise ValueError("i_max must be >= 1")
    pseudo = []
    snapshots = []
    evaluator = None
    for it in range(i_max + 1):
        t0 = time.perf_counter()
        try:
            evaluator, losses = trainer.train(problem, sets.with_pseudo(pseudo))
        except DivergenceError as exc:
            exc.snapshots = snapshots
            raise
        snap = RoundSnapshot(it, {"self": list(pseudo)},
                             metrics_fn(evaluator) if metrics_fn else {}, losses)
        snapshots.append(snap)
        done = it == i_max
        if not done:
            labels = gp_bootstrap_labels(evaluator, problem, sets, near_boundary_dist,
                                         residual_tol, gp_kernel, noise, iteration=it + 1,
                                         labeled=_labeled_points(sets, pseudo))
            old = {p.index: p for p in pseudo}
            # labels already held keep their round of origin
            labels = [replace(p, iteration_added=old[p.index].iteration_added)
                      if p.index in old else p for p in labels]
            added = [p for p in labels if p.index not in old]
            snap.selected = {"self": added}
            pseudo = labels
            log.info("round %d: %d labels (%d new)", it, len(labels), len(added))
            done = not added
        snap.seconds = time.perf_counter() - t0
        if on_round:
            on_round(snap)
        if done:
            break
    return evaluator, snapshots
