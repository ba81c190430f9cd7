"""PDE problems ``P(u) = f`` in a box with boundary data ``B(u) = g``, and point sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .diffengine import DerivativeSpec, Jet, Var, backward

__all__ = [
    "BoundaryGroup",
    "PdeProblem",
    "PointSets",
    "make_vburgers",
    "make_allen_cahn",
    "make_helmholtz",
    "helmholtz_exact",
    "sample_points",
    "linearize_residual",
    "write_points_csv",
    "read_points_csv",
]


@dataclass(frozen=True)
class BoundaryGroup:
    """Points on one face of the box.

    ``kind`` is ``"dirichlet"`` (fit ``u = target(x)``) or ``"periodic_pair"``
    (fit ``u(x) = u(partner(x))``).  ``face`` is ``(axis, side)`` with side 0
    for the lower and 1 for the upper bound.
    """

    name: str
    kind: str
    face: tuple
    target: Optional[Callable] = None
    partner_axis: Optional[int] = None

    def partner(self, X, domain):
        """Reflect points onto the opposite face (an involution)."""
        if self.kind != "periodic_pair":
            raise ValueError(f"group {self.name!r} has no partner map")
        X = np.array(X, dtype=np.float64, copy=True)
        ax = self.partner_axis
        lo, hi = domain[ax]
        X[:, ax] = lo + hi - X[:, ax]
        return X

    def values(self, X):
        if self.kind == "periodic_pair":
            return np.zeros(len(X))
        return np.asarray(self.target(X), dtype=np.float64)


@dataclass
class PdeProblem:
    name: str
    dim: int
    domain: np.ndarray
    residual: Callable  # (X, jet) -> P(u)(X) - f(X); works on arrays and Vars
    groups: list
    spec: DerivativeSpec
    coords: tuple = ("t", "x")
    reference: Optional[Callable] = None
    params: dict = field(default_factory=dict)
    evolution: bool = True

    def __post_init__(self):
        self.domain = np.asarray(self.domain, dtype=np.float64)
        self.spec.check(self.dim)

    def interior_residual(self, X, jet: Jet):
        return self.residual(np.asarray(X, dtype=np.float64), jet)

    def group_index(self, name):
        return [g.name for g in self.groups].index(name)

    def on_face(self, X, group: BoundaryGroup):
        ax, side = group.face
        return np.asarray(X)[:, ax] == self.domain[ax, side]


@dataclass
class PointSets:
    """Collocation, boundary (with group ids), test and pseudo-label sets."""

    collocation: np.ndarray
    boundary: np.ndarray
    boundary_group: np.ndarray
    test: np.ndarray
    pseudo: list = field(default_factory=list)

    def group_points(self, gid):
        return self.boundary[self.boundary_group == gid]

    def with_pseudo(self, pseudo):
        return PointSets(self.collocation, self.boundary, self.boundary_group, self.test,
                         list(pseudo))

    @property
    def pseudo_points(self):
        d = self.collocation.shape[1] if self.collocation.size else self.test.shape[1]
        if not self.pseudo:
            return np.zeros((0, d))
        return np.array([p.point for p in self.pseudo], dtype=np.float64)

    @property
    def pseudo_values(self):
        return np.array([p.value for p in self.pseudo], dtype=np.float64)


def make_vburgers(nu, T=1.0, a=-1.0, b=1.0, u0=None, ua=0.0, ub=0.0):
    """Viscous Burgers ``u_t + u u_x - nu u_xx = 0`` on ``(0, T) x (a, b)``.

    The initial condition is a Dirichlet group on ``t = 0``; ``u0`` defaults
    to ``sin(pi x)``.
    """
    if nu <= 0:
        raise ValueError(f"viscosity must be positive, got {nu}")
    if not a < b or T <= 0:
        raise ValueError("need a < b and T > 0")
    exact_known = u0 is None and a == -1.0 and b == 1.0 and ua == 0.0 and ub == 0.0
    if u0 is None:
        def u0(x):
            return np.sin(np.pi * x)

    def residual(X, j):
        return j.du[0] + j.u * j.du[1] - nu * j.d2u[1]

    groups = [
        BoundaryGroup("ic", "dirichlet", (0, 0), lambda X: u0(X[:, 1])),
        BoundaryGroup("left", "dirichlet", (1, 0), lambda X: np.full(len(X), float(ua))),
        BoundaryGroup("right", "dirichlet", (1, 1), lambda X: np.full(len(X), float(ub))),
    ]

    def ref(X, _nu=nu):
        from .oracle import burgers_values
        return burgers_values(_nu, X)

    return PdeProblem("vburgers", 2, [[0.0, T], [a, b]], residual, groups,
                      DerivativeSpec((0, 1), (1,)), ("t", "x"), ref if exact_known else None,
                      dict(nu=nu, T=T, a=a, b=b, ua=ua, ub=ub))


def _ac_ic(x):
    return x**2 * np.cos(np.pi * x)


def make_allen_cahn(diffusion=1e-4, reaction=5.0):
    """Allen-Cahn ``u_t - 1e-4 u_xx + 5(u^3 - u) = 0`` on ``(0, 1] x (-1, 1)``, periodic in x."""

    def residual(X, j):
        u = j.u
        return j.du[0] - diffusion * j.d2u[1] + reaction * (u**3 - u)

    groups = [
        BoundaryGroup("ic", "dirichlet", (0, 0), lambda X: _ac_ic(X[:, 1])),
        BoundaryGroup("periodic", "periodic_pair", (1, 0), None, partner_axis=1),
    ]

    def ref(X):
        from .oracle import allen_cahn_values
        return allen_cahn_values(X)

    return PdeProblem("allen_cahn", 2, [[0.0, 1.0], [-1.0, 1.0]], residual, groups,
                      DerivativeSpec((0, 1), (1,)), ("t", "x"), ref,
                      dict(diffusion=diffusion, reaction=reaction))


def helmholtz_exact(X):
    X = np.atleast_2d(X)
    return np.sin(np.pi * X[:, 0]) * np.sin(4 * np.pi * X[:, 1])


def make_helmholtz(k=1.0, domain=((0.0, 1.0), (0.0, 1.0))):
    """Helmholtz ``u_xx + u_yy + k^2 u = f`` with manufactured solution sin(pi x) sin(4 pi y)."""
    k2 = float(k) ** 2

    def forcing(X):
        return (k2 - 17 * np.pi**2) * helmholtz_exact(X)

    def residual(X, j):
        return j.d2u[0] + j.d2u[1] + k2 * j.u - forcing(X)

    groups = [
        BoundaryGroup("left", "dirichlet", (0, 0), helmholtz_exact),
        BoundaryGroup("right", "dirichlet", (0, 1), helmholtz_exact),
        BoundaryGroup("bottom", "dirichlet", (1, 0), helmholtz_exact),
        BoundaryGroup("top", "dirichlet", (1, 1), helmholtz_exact),
    ]
    prob = PdeProblem("helmholtz", 2, domain, residual, groups,
                      DerivativeSpec((0, 1), (0, 1)), ("x", "y"), helmholtz_exact,
                      dict(k=float(k)), evolution=False)
    prob.forcing = forcing
    return prob


def linearize_residual(problem: PdeProblem, X, jet0: Jet):
    """Pointwise linearisation of the residual around ``jet0``.

    Returns ``(coeffs, rhs)`` where ``coeffs`` maps a channel tag (``"u"``,
    ``"d0"``, ``"dd1"``, ...) to per-point coefficients, such that the
    linearised equation reads ``sum_c coeffs[c] * c(u) = rhs``.  Coefficients
    are obtained by reverse accumulation through the residual expression.
    """
    leaves = {"u": Var(jet0.u)}
    leaves.update({f"d{k}": Var(v) for k, v in jet0.du.items()})
    leaves.update({f"dd{k}": Var(v) for k, v in jet0.d2u.items()})
    jet = Jet(leaves["u"],
              {k: leaves[f"d{k}"] for k in jet0.du},
              {k: leaves[f"dd{k}"] for k in jet0.d2u})
    r = problem.interior_residual(X, jet)
    backward(r.sum())
    n = len(X)
    coeffs = {}
    rhs = -r.value.copy()
    for tag, leaf in leaves.items():
        if leaf.grad is None:
            continue
        c = np.broadcast_to(leaf.grad, (n,)).copy()
        if np.any(c != 0):
            coeffs[tag] = c
            rhs += c * leaf.value
    return coeffs, rhs


def _counts_per_group(n_per_group, groups):
    if np.isscalar(n_per_group):
        return [int(n_per_group)] * len(groups)
    if isinstance(n_per_group, dict):
        return [int(n_per_group.get(g.name, 0)) for g in groups]
    counts = [int(c) for c in n_per_group]
    if len(counts) != len(groups):
        raise ValueError(f"expected {len(groups)} boundary counts, got {len(counts)}")
    return counts


def _uniform_open(rng, lo, hi, n):
    x = rng.uniform(lo, hi, size=n)
    bad = (x <= lo) | (x >= hi)
    while np.any(bad):
        x[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
        bad = (x <= lo) | (x >= hi)
    return x


def sample_points(problem: PdeProblem, n_collocation, n_per_boundary_group, n_test, seed,
                  rng_name="PCG64") -> PointSets:
    """Uniform i.i.d. points in the open box and on each boundary face.

    ``n_per_boundary_group`` is an int (same for every group), a sequence in
    group order or a ``{group name: count}`` mapping.
    """
    counts = _counts_per_group(n_per_boundary_group, problem.groups)
    if min([n_collocation, n_test] + counts) < 0:
        raise ValueError("point counts must be non-negative")
    rng = np.random.Generator(getattr(np.random, rng_name)(seed))
    dom = problem.domain
    d = problem.dim

    def interior(n):
        return np.column_stack([_uniform_open(rng, lo, hi, n) for lo, hi in dom]) if n else \
            np.zeros((0, d))

    col = interior(int(n_collocation))
    pts, gid = [], []
    for i, (g, n) in enumerate(zip(problem.groups, counts)):
        ax, side = g.face
        P = np.column_stack([rng.uniform(lo, hi, size=n) for lo, hi in dom]) if n else \
            np.zeros((0, d))
        P[:, ax] = dom[ax, side]
        pts.append(P)
        gid.append(np.full(n, i, dtype=np.int64))
    test = interior(int(n_test))
    return PointSets(col, np.concatenate(pts) if pts else np.zeros((0, d)),
                     np.concatenate(gid) if gid else np.zeros(0, dtype=np.int64), test, [])


def write_points_csv(path, sets: PointSets, coords=("c0", "c1")):
    """One row per point: coordinates, set tag (CL|BC|TEST|PD) and group id."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(coords) + ["tag", "group"])
        for p in sets.collocation:
            w.writerow([repr(float(v)) for v in p] + ["CL", ""])
        for p, g in zip(sets.boundary, sets.boundary_group):
            w.writerow([repr(float(v)) for v in p] + ["BC", int(g)])
        for p in sets.test:
            w.writerow([repr(float(v)) for v in p] + ["TEST", ""])
        for lab in sets.pseudo:
            w.writerow([repr(float(v)) for v in lab.point] + ["PD", lab.source])


def read_points_csv(path):
    """Inverse of :func:`write_points_csv` for the CL, BC and TEST sets (PD rows are skipped)."""
    col, bc, gid, test = [], [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = header.index("tag")
        for row in r:
            p = [float(v) for v in row[:d]]
            tag = row[d]
            if tag == "CL":
                col.append(p)
            elif tag == "BC":
                bc.append(p)
                gid.append(int(row[d + 1]))
            elif tag == "TEST":
                test.append(p)
            elif tag != "PD":
                raise ValueError(f"unknown set tag {tag!r}")

    def arr(a):
        return np.array(a, dtype=np.float64).reshape(-1, d)

    return PointSets(arr(col), arr(bc), np.array(gid, dtype=np.int64), arr(test), [])
