"""Kernel collocation (physics-informed GP) solver and plain GP regression.

Measurements are linear functionals ``L u = sum_c coeff_c * (D_c u)(x)`` with
``D_c`` one of the channel tags ``"u"``, ``"d<k>"`` (first partial in
coordinate k) or ``"dd<k>"`` (pure second partial).  Functionals are kept in
blocks sharing a point array and a tag -> coefficient mapping.

For a nonlinear operator the collocation constraints are linearised around the
current posterior mean and the regularised problem is re-solved (Gauss-Newton).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .diffengine import DerivativeSpec, Jet
from .pde import PdeProblem, PointSets, linearize_residual

__all__ = [
    "KernelConfig",
    "FunctionalBlock",
    "GpSolution",
    "ConditioningError",
    "kernel_eval",
    "cross_matrix",
    "assemble_gram",
    "pigp_solve",
    "gp_posterior",
    "gp_jet",
    "gp_regress",
    "save_gp",
    "load_gp",
    "write_posterior_csv",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConditioningError(np.linalg.LinAlgError):
    """Cholesky of the regularised Gram matrix failed."""


@dataclass(frozen=True)
class KernelConfig:
    """Anisotropic Gaussian kernel with nugget and constraint regulariser.

    ``beta`` is the noise variance attached to PDE and boundary constraint
    rows; ``pseudo_noise`` the one attached to pseudo-label rows.
    ``literal=True`` switches :func:`kernel_eval` to ``exp(sum |dx_i| / s_i)``
    (value evaluations only, kept for auditing).
    """

    lengthscales: tuple
    nugget: float = 1e-5
    beta: float = 1e-5
    pseudo_noise: float = 1e-4
    literal: bool = False

    def __post_init__(self):
        ls = tuple(float(s) for s in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if min(ls) <= 0 or self.nugget <= 0 or self.beta <= 0 or self.pseudo_noise < 0:
            raise ValueError("lengthscales, nugget and beta must be positive")

    @property
    def inv_sq(self):
        return np.array([1.0 / s**2 for s in self.lengthscales])


def kernel_eval(config: KernelConfig, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.shape != (len(config.lengthscales),):
        raise ValueError("point dimensions do not match the kernel")
    if config.literal:
        return float(np.exp(np.sum(np.abs(x - y) / np.array(config.lengthscales))))
    return float(np.exp(-0.5 * np.sum((x - y) ** 2 * config.inv_sq)))


def _orders(tag, d):
    """Multi-index of derivative orders for a channel tag."""
    o = [0] * d
    if tag == "u":
        return tuple(o)
    if tag.startswith("dd"):
        o[int(tag[2:])] = 2
    elif tag.startswith("d"):
        o[int(tag[1:])] = 1
    else:
        raise ValueError(f"unknown functional tag {tag!r}")
    return tuple(o)


def _hermite_factor(n, a, r):
    """k^(n)(r) / k(r) for the 1-D Gaussian k(r) = exp(-a r^2 / 2)."""
    if n == 0:
        return None
    if n == 1:
        return -a * r
    r2 = r * r
    if n == 2:
        return a * a * r2 - a
    if n == 3:
        return (-a * a * r2 + 3 * a) * a * r
    if n == 4:
        return a * a * (a * a * r2 * r2 - 6 * a * r2 + 3)
    raise ValueError("derivative order above 4 is not supported")


@dataclass
class FunctionalBlock:
    """Functionals ``sum_tag coeffs[tag][j] * D_tag u (points[j])`` for j in the block."""

    kind: str
    points: np.ndarray
    coeffs: dict

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        n = len(self.points)
        self.coeffs = {t: np.broadcast_to(np.asarray(c, dtype=np.float64), (n,)).copy()
                       for t, c in self.coeffs.items()}

    def __len__(self):
        return len(self.points)

    @classmethod
    def values(cls, kind, points):
        return cls(kind, points, {"u": 1.0})


def cross_matrix(config: KernelConfig, A: FunctionalBlock, B: FunctionalBlock) -> np.ndarray:
    """Matrix of ``L_i^A L_j^B' K`` (functional of A on the first argument, B on the second)."""
    if config.literal:
        if set(A.coeffs) != {"u"} or set(B.coeffs) != {"u"}:
            raise ValueError("the literal kernel supports value functionals only")
        R = np.abs(A.points[:, None, :] - B.points[None, :, :])
        K = np.exp((R / np.array(config.lengthscales)).sum(axis=2))
        return A.coeffs["u"][:, None] * K * B.coeffs["u"][None, :]
    d = A.points.shape[1]
    if B.points.shape[1] != d or d != len(config.lengthscales):
        raise ValueError("point dimensions do not match the kernel")
    a = config.inv_sq
    R = [A.points[:, i, None] - B.points[None, :, i] for i in range(d)]
    K = np.exp(-0.5 * sum(a[i] * R[i] ** 2 for i in range(d)))
    factors = {}

    def factor(i, n):
        if (i, n) not in factors:
            factors[(i, n)] = _hermite_factor(n, a[i], R[i])
        return factors[(i, n)]

    acc = np.zeros_like(K)
    for ta, ca in A.coeffs.items():
        oa = _orders(ta, d)
        for tb, cb in B.coeffs.items():
            ob = _orders(tb, d)
            F = None
            sign = 1.0
            for i in range(d):
                n = oa[i] + ob[i]
                if ob[i] % 2:
                    sign = -sign
                f = factor(i, n)
                if f is not None:
                    F = f if F is None else F * f
            w = ca[:, None] * cb[None, :] * sign
            acc += w if F is None else w * F
    return acc * K


def _gram(config, blocks):
    n = [len(b) for b in blocks]
    off = np.concatenate([[0], np.cumsum(n)])
    G = np.zeros((off[-1], off[-1]))
    for i, bi in enumerate(blocks):
        for j in range(i + 1):
            G[off[i]:off[i + 1], off[j]:off[j + 1]] = cross_matrix(config, bi, blocks[j])
    # lower triangle only, mirrored: exact symmetry
    G = np.tril(G)
    return G + np.tril(G, -1).T


def _cholesky(M):
    c, info = sla.lapack.dpotrf(M, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        k = abs(int(info)) - 1
        sub = M[:k + 1, :k + 1]
        pivot = float(np.linalg.eigvalsh(sub).min()) if k < 4000 else float("nan")
        raise ConditioningError(
            f"Cholesky failed at pivot {k} of {len(M)} (smallest eigenvalue of the leading "
            f"block {pivot:.3e}); increase the nugget")
    return c


def assemble_gram(config: KernelConfig, blocks, noise=None):
    """Return ``(G, L)`` with G the Gram matrix of the functionals and L the lower
    Cholesky factor of ``G + nugget*I (+ diag(noise))``."""
    blocks = list(blocks)
    G = _gram(config, blocks)
    M = G.copy()
    diag = np.full(len(G), config.nugget)
    if noise is not None:
        diag += noise
    M[np.diag_indices_from(M)] += diag
    return G, _cholesky(M)


@dataclass
class GpSolution:
    kernel: KernelConfig
    blocks: list
    coefficients: np.ndarray
    cholesky: np.ndarray
    noise: np.ndarray
    data: np.ndarray
    linearization_state: Optional[Jet] = None
    converged: bool = True
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def n_functionals(self):
        return sum(len(b) for b in self.blocks)

    def cross(self, Q: FunctionalBlock):
        return np.hstack([cross_matrix(self.kernel, Q, b) for b in self.blocks])


def _tags_for(spec: DerivativeSpec):
    tags = ["u"] + [f"d{k}" for k in spec.first_channels] + [f"dd{k}" for k in spec.second_channels]
    return tags


def gp_jet(sol: GpSolution, X, spec: DerivativeSpec = DerivativeSpec(), chunk=4096) -> Jet:
    """Posterior mean and its requested partials at points ``X`` (shape (n, d))."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = {t: np.empty(len(X)) for t in _tags_for(spec)}
    for i in range(0, len(X), chunk):
        P = X[i:i + chunk]
        for t in out:
            out[t][i:i + chunk] = sol.cross(FunctionalBlock("query", P, {t: 1.0})) @ sol.coefficients
    return Jet(out["u"], {k: out[f"d{k}"] for k in spec.first_channels},
               {k: out[f"dd{k}"] for k in spec.second_channels})


def gp_posterior(sol: GpSolution, X, chunk=4096, clamp=True):
    """Posterior mean and variance of the value at points ``X``.

    The variance is ``K(x, x) - k_x^T (G + nugget I + noise)^{-1} k_x``; with
    ``clamp`` negative round-off is set to zero.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    mean = np.empty(len(X))
    var = np.empty(len(X))
    for i in range(0, len(X), chunk):
        P = X[i:i + chunk]
        k = sol.cross(FunctionalBlock.values("query", P))
        mean[i:i + chunk] = k @ sol.coefficients
        v = sla.solve_triangular(sol.cholesky, k.T, lower=True, check_finite=False)
        var[i:i + chunk] = 1.0 - np.einsum("ij,ij->j", v, v)
    if clamp:
        var = np.maximum(var, 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def _solve(config, blocks, y, noise):
    G, L = assemble_gram(config, blocks, noise)
    alpha = sla.cho_solve((L, True), y, check_finite=False)
    return G, L, alpha


def _boundary_blocks(problem: PdeProblem, sets: PointSets):
    blocks, ys = [], []
    for gid, g in enumerate(problem.groups):
        P = sets.group_points(gid)
        if len(P) == 0:
            continue
        if g.kind != "dirichlet":
            raise ValueError(f"boundary group {g.name!r}: only Dirichlet data is supported here")
        blocks.append(FunctionalBlock.values(f"bc:{g.name}", P))
        ys.append(g.values(P))
    return blocks, ys


def pigp_solve(problem: PdeProblem, sets: PointSets, config: KernelConfig, max_gn_iters=30,
               tol=1e-12, stagnation=5, initial_state: Optional[Jet] = None) -> GpSolution:
    """Minimise ``||u||^2 + sum_i |y_i - O(u)(x_i)|^2 / noise_i`` over the RKHS.

    Interior rows enforce the (linearised) PDE, boundary rows the Dirichlet
    data, pseudo-label rows the imputed values.  Nonlinear operators are
    handled by Gauss-Newton: the residual is linearised around the current
    posterior mean at the collocation points and the problem re-solved until
    the mean there changes by less than ``tol`` (max-abs) or ``max_gn_iters``
    is reached.  An iteration makes progress if the objective decreases or the
    step at least halves; after ``stagnation`` iterations without progress the
    latest progressing iterate is returned with ``converged=False``.
    The first linearisation is taken around ``initial_state`` (a jet at the
    collocation points) or around zero.
    """
    col = sets.collocation
    if len(col) == 0 and len(sets.boundary) == 0:
        raise ValueError("empty point sets")
    spec = problem.spec
    bblocks, bys = _boundary_blocks(problem, sets)
    pblocks, pys = [], []
    if sets.pseudo:
        pblocks.append(FunctionalBlock.values("pseudo", sets.pseudo_points))
        pys.append(sets.pseudo_values)
    noise_b = np.full(sum(len(b) for b in bblocks), config.beta)
    noise_p = np.full(sum(len(b) for b in pblocks), config.pseudo_noise)

    if initial_state is None:
        state = Jet(np.zeros(len(col)), {k: np.zeros(len(col)) for k in spec.first_channels},
                    {k: np.zeros(len(col)) for k in spec.second_channels})
    else:
        state = initial_state
        if np.shape(state.u) != (len(col),):
            raise ValueError("initial state must hold one value per collocation point")
    linear = len(col) == 0 or _is_linear(problem, col, state)
    best, best_obj, since_best = None, np.inf, 0
    history = []
    converged = False
    last_change = np.inf
    for it in range(1, max_gn_iters + 1):
        if len(col):
            coeffs, rhs = linearize_residual(problem, col, state)
            iblocks = [FunctionalBlock("pde", col, coeffs)]
        else:
            rhs, iblocks = np.zeros(0), []
        blocks = iblocks + bblocks + pblocks
        y = np.concatenate([rhs] + bys + pys)
        noise = np.concatenate([np.full(len(col), config.beta), noise_b, noise_p])
        G, L, alpha = _solve(config, blocks, y, noise)
        sol = GpSolution(config, blocks, alpha, L, noise, y)
        new = gp_jet(sol, col, spec) if len(col) else state
        # objective of the nonlinear problem at the new iterate
        misfit = np.concatenate([
            problem.interior_residual(col, new) if len(col) else np.zeros(0),
            *(gp_jet(sol, b.points).u - yb for b, yb in zip(bblocks + pblocks, bys + pys)),
        ])
        obj = float(alpha @ G @ alpha + np.sum(misfit**2 / noise))
        change = float(np.max(np.abs(new.u - state.u))) if len(col) else 0.0
        history.append({"iteration": it, "objective": obj, "change": change})
        log.debug("gauss-newton %d: objective %.6e change %.3e", it, obj, change)
        sol.linearization_state = new
        sol.iterations = it
        state = new
        if linear or change < tol:
            best, converged = sol, True
            break
        # near the optimum the objective only moves at round-off level, so a
        # contracting step also counts as progress
        progress = obj < best_obj or change < 0.5 * last_change
        last_change = change
        if progress:
            best, best_obj, since_best = sol, min(obj, best_obj), 0
        else:
            since_best += 1
            if since_best >= stagnation:
                log.warning("gauss-newton stagnated after %d iterations", it)
                break
    best.converged = converged
    best.history = history
    return best


def _is_linear(problem, col, state):
    """True when the linearisation coefficients do not depend on the state."""
    c0, _ = linearize_residual(problem, col, state)
    probe = Jet(state.u + 1.0, {k: v + 0.5 for k, v in state.du.items()},
                {k: v + 0.25 for k, v in state.d2u.items()})
    c1, _ = linearize_residual(problem, col, probe)
    return set(c0) == set(c1) and all(np.array_equal(c0[t], c1[t]) for t in c0)


def gp_regress(points, values, noise, kernel: KernelConfig) -> GpSolution:
    """Plain GP regression on value observations (``noise`` added to the nugget)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    values = np.asarray(values, dtype=np.float64)
    if len(points) != len(values):
        raise ValueError("points and values differ in length")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    block = FunctionalBlock.values("data", points)
    nz = np.full(len(points), float(noise))
    G, L, alpha = _solve(kernel, [block], values, nz)
    return GpSolution(kernel, [block], alpha, L, nz, values)


def save_gp(path, sol: GpSolution):
    """Versioned ``.npz`` with kernel settings, functional blocks, noise and coefficients."""
    arrays = dict(version=CHECKPOINT_VERSION,
                  lengthscales=np.array(sol.kernel.lengthscales),
                  kernel=np.array([sol.kernel.nugget, sol.kernel.beta, sol.kernel.pseudo_noise,
                                   float(sol.kernel.literal)]),
                  coefficients=sol.coefficients, noise=sol.noise, data=sol.data,
                  n_blocks=len(sol.blocks))
    for i, b in enumerate(sol.blocks):
        arrays[f"b{i}_kind"] = b.kind
        arrays[f"b{i}_points"] = b.points
        arrays[f"b{i}_tags"] = np.array(list(b.coeffs), dtype=str)
        arrays[f"b{i}_coeffs"] = np.array(list(b.coeffs.values())).reshape(len(b.coeffs), len(b))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_gp(path) -> GpSolution:
    """Load a checkpoint written by :func:`save_gp`; the Cholesky factor is recomputed."""
    with np.load(path) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z['version'])}")
        nug, beta, pn, lit = (float(v) for v in z["kernel"])
        kernel = KernelConfig(tuple(z["lengthscales"]), nug, beta, pn, bool(lit))
        blocks = []
        for i in range(int(z["n_blocks"])):
            tags = [str(t) for t in z[f"b{i}_tags"]]
            blocks.append(FunctionalBlock(str(z[f"b{i}_kind"]), z[f"b{i}_points"],
                                          dict(zip(tags, z[f"b{i}_coeffs"]))))
        noise = z["noise"]
        _, L = assemble_gram(kernel, blocks, noise)
        return GpSolution(kernel, blocks, z["coefficients"], L, noise, z["data"])


def write_posterior_csv(path, sol: GpSolution, X, coords=("c0", "c1")):
    mean, var = gp_posterior(sol, X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(coords) + ["mean", "variance"])
        for p, m, v in zip(np.atleast_2d(X), mean, var):
            w.writerow([repr(float(c)) for c in p] + [repr(float(m)), repr(float(v))])
