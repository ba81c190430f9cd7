"""Exact value/derivative jets of small tanh networks plus reverse accumulation.

The forward pass pushes a *jet* through every layer: the value, the first
partials with respect to the requested input coordinates and the pure second
partials.  Arrays are stored feature-major with shape ``(width, channels, n)``
so that each affine layer is a single matrix product over all channels.

Every operation is recorded on a small tape (:class:`Var`), so a loss built
from jets can be differentiated with respect to the network parameters,
including through the derivative-propagation steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

__all__ = [
    "DerivativeSpec",
    "Jet",
    "MlpModel",
    "Var",
    "DivergenceError",
    "eval_jet",
    "jet_var",
    "loss_gradient",
    "value_and_grad",
    "fd_check",
    "fd_gradient",
]


class DivergenceError(ArithmeticError):
    """Raised when a loss evaluates to a non-finite value."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """Node of the reverse-mode tape holding a float64 array."""

    __slots__ = ("value", "parents", "vjp", "grad")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        if not isinstance(other, Var):
            return Var(self.value + other, (self,), lambda g, s=self.shape: (_unbroadcast(g, s),))
        sa, sb = self.shape, other.shape
        return Var(self.value + other.value, (self, other),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Var):
            c = np.asarray(other, dtype=np.float64)
            return Var(self.value * c, (self,),
                       lambda g, s=self.shape: (_unbroadcast(g * c, s),))
        a, b = self.value, other.value
        return Var(a * b, (self, other),
                   lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a traced value is not supported")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __pow__(self, p):
        if p == 2:
            return self.square()
        if p == 3:
            a = self.value
            return Var(a * a * a, (self,), lambda g: (3.0 * a * a * g,))
        raise ValueError("only integer powers 2 and 3 are recorded")

    def __getitem__(self, idx):
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            if isinstance(idx, (slice, int)):
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return Var(self.value[idx], (self,), vjp)

    def square(self):
        a = self.value
        return Var(a * a, (self,), lambda g: (2.0 * a * g,))

    def sum(self):
        shape = self.shape
        return Var(self.value.sum(), (self,), lambda g: (np.full(shape, float(g)),))

    def mean(self):
        n = self.value.size
        if n == 0:
            return Var(0.0)
        shape = self.shape
        return Var(self.value.mean(), (self,), lambda g: (np.full(shape, float(g) / n),))


def backward(root: Var):
    """Accumulate d(root)/d(node) into ``node.grad`` for every ancestor."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for p, gp in zip(node.parents, node.vjp(node.grad)):
            if gp is None:
                continue
            p.grad = gp if p.grad is None else p.grad + gp


# --------------------------------------------------------------------------
# jets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DerivativeSpec:
    """Which partials a jet carries: first-order and pure second-order coordinates."""

    first_order: frozenset = frozenset()
    second_order: frozenset = frozenset()

    def __init__(self, first_order=(), second_order=()):
        object.__setattr__(self, "first_order", frozenset(int(i) for i in first_order))
        object.__setattr__(self, "second_order", frozenset(int(i) for i in second_order))

    def check(self, d):
        bad = [i for i in self.first_order | self.second_order if not 0 <= i < d]
        if bad:
            raise ValueError(f"derivative indices {bad} out of range for input dimension {d}")

    @property
    def first_channels(self):
        # a pure second partial needs the matching first partial
        return tuple(sorted(self.first_order | self.second_order))

    @property
    def second_channels(self):
        return tuple(sorted(self.second_order))

    @property
    def n_channels(self):
        return 1 + len(self.first_channels) + len(self.second_channels)


VALUE_ONLY = DerivativeSpec()


@dataclass
class Jet:
    """Value and requested partials; entries of ``d2u`` exist only if requested."""

    u: object
    du: dict = field(default_factory=dict)
    d2u: dict = field(default_factory=dict)


@dataclass
class MlpModel:
    """Fully connected network ``d -> hidden... -> 1`` with a flat parameter vector.

    Weights of layer ``l`` have shape ``(fan_in, fan_out)`` and are stored
    row-major followed by the bias, layer after layer.  Inputs are first
    mapped by ``(x - input_shift) * input_scale`` (identity when unset).
    """

    widths: tuple
    theta: np.ndarray
    activation: str = "tanh"
    input_shift: Optional[tuple] = None
    input_scale: Optional[tuple] = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise ValueError(f"invalid layer widths {self.widths}")
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.theta.shape}")
        d = self.widths[0]
        self.input_shift = tuple(float(v) for v in (self.input_shift or (0.0,) * d))
        self.input_scale = tuple(float(v) for v in (self.input_scale or (1.0,) * d))
        if len(self.input_shift) != d or len(self.input_scale) != d:
            raise ValueError("input normalisation must match the input width")

    @staticmethod
    def count_params(widths):
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))

    @property
    def n_params(self):
        return self.count_params(self.widths)

    @property
    def input_dim(self):
        return self.widths[0]

    def slices(self):
        out, k = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            out.append(((k, k + a * b, (a, b)), (k + a * b, k + a * b + b)))
            k += a * b + b
        return out

    def layers(self, theta=None):
        """Views ``[(W, b), ...]`` into ``theta`` (defaults to the model's own)."""
        theta = self.theta if theta is None else theta
        return [(theta[w0:w1].reshape(shape), theta[b0:b1])
                for (w0, w1, shape), (b0, b1) in self.slices()]

    def copy(self):
        return MlpModel(self.widths, self.theta.copy(), self.activation, self.input_shift,
                        self.input_scale)


def _view(theta: Var, start, stop, shape):
    size = theta.shape[0]

    def vjp(g):
        out = np.zeros(size)
        out[start:stop] = g.ravel()
        return (out,)

    return Var(theta.value[start:stop].reshape(shape), (theta,), vjp)


def _input_jet(X, spec, shift, scale):
    """Constant input jet of shape (d, C, n)."""
    n, d = X.shape
    first = spec.first_channels
    H = np.zeros((d, spec.n_channels, n))
    H[:, 0, :] = ((X - np.array(shift)) * np.array(scale)).T
    for j, k in enumerate(first):
        H[k, 1 + j, :] = scale[k]
    return H


def _affine(H, W: Var, b: Var):
    Hv = H.value if isinstance(H, Var) else H
    fan_in, C, n = Hv.shape
    fan_out = W.shape[1]
    Hf = Hv.reshape(fan_in, C * n)
    Z = (W.value.T @ Hf).reshape(fan_out, C, n)
    Z[:, 0, :] += b.value[:, None]

    def vjp(g):
        gf = g.reshape(fan_out, C * n)
        gW = Hf @ gf.T
        gb = g[:, 0, :].sum(axis=1)
        gH = (W.value @ gf).reshape(fan_in, C, n) if isinstance(H, Var) else None
        return gH, gW, gb

    parents = (H, W, b) if isinstance(H, Var) else (Var(H), W, b)
    return Var(Z, parents, vjp)


@njit(cache=True)
def _tanh_jet_fwd(z, s, sp, spp, nf, pair):
    w, C, n = z.shape
    H = np.empty_like(z)
    for i in range(w):
        H[i, 0, :] = s[i]
        for c in range(1, 1 + nf):
            for k in range(n):
                H[i, c, k] = sp[i, k] * z[i, c, k]
        for m in range(pair.shape[0]):
            c = 1 + nf + m
            j = pair[m]
            for k in range(n):
                zj = z[i, j, k]
                H[i, c, k] = spp[i, k] * zj * zj + sp[i, k] * z[i, c, k]
    return H


@njit(cache=True)
def _tanh_jet_bwd(g, z, s, sp, spp, nf, pair):
    w, C, n = z.shape
    gz = np.empty_like(z)
    for i in range(w):
        for k in range(n):
            gz[i, 0, k] = g[i, 0, k] * sp[i, k]
        for c in range(1, 1 + nf):
            for k in range(n):
                gz[i, c, k] = g[i, c, k] * sp[i, k]
                gz[i, 0, k] += spp[i, k] * g[i, c, k] * z[i, c, k]
        for m in range(pair.shape[0]):
            c = 1 + nf + m
            j = pair[m]
            for k in range(n):
                sppp = -2.0 * (sp[i, k] * sp[i, k] + s[i, k] * spp[i, k])
                gc = g[i, c, k]
                zj = z[i, j, k]
                gz[i, 0, k] += gc * (sppp * zj * zj + spp[i, k] * z[i, c, k])
                gz[i, j, k] += 2.0 * gc * spp[i, k] * zj
                gz[i, c, k] = gc * sp[i, k]
    return gz


def _tanh_jet(Z: Var, spec: DerivativeSpec):
    z = Z.value
    nf = len(spec.first_channels)
    # channel index of the first partial matching each second partial
    pair = np.array([1 + spec.first_channels.index(k) for k in spec.second_channels],
                    dtype=np.int64)
    s = np.tanh(z[:, 0, :])
    sp = 1.0 - s * s
    spp = -2.0 * s * sp
    H = _tanh_jet_fwd(z, s, sp, spp, nf, pair)
    return Var(H, (Z,),
               lambda g: (_tanh_jet_bwd(np.ascontiguousarray(g), z, s, sp, spp, nf, pair),))


def _split(U: Var, spec: DerivativeSpec, squeeze):
    """Turn the (1, C, n) network output into a Jet of (n,) Vars."""
    shape = U.shape

    def take(c):
        def vjp(g):
            out = np.zeros(shape)
            out[0, c, :] = g
            return (out,)
        v = U.value[0, c, :]
        return Var(v, (U,), vjp)

    first, sec = spec.first_channels, spec.second_channels
    jet = Jet(take(0))
    jet.du = {k: take(1 + j) for j, k in enumerate(first)}
    jet.d2u = {k: take(1 + len(first) + m) for m, k in enumerate(sec)}
    return jet


def _as_points(model, x):
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(
            f"point dimension {X.shape[-1]} does not match model input width {model.input_dim}")
    return X, single


def jet_var(model: MlpModel, theta: Var, x, spec: DerivativeSpec = VALUE_ONLY) -> Jet:
    """Traced jet of ``model`` (parameters taken from ``theta``) at points ``x`` of shape (n, d)."""
    X, _ = _as_points(model, x)
    spec.check(model.input_dim)
    H = _input_jet(X, spec, model.input_shift, model.input_scale)
    n_layers = len(model.widths) - 1
    for i, ((w0, w1, shape), (b0, b1)) in enumerate(model.slices()):
        W = _view(theta, w0, w1, shape)
        b = _view(theta, b0, b1, (b1 - b0,))
        H = _affine(H, W, b)
        if i < n_layers - 1 and model.activation == "tanh":
            H = _tanh_jet(H, spec)
    return _split(H, spec, squeeze=False)


def eval_jet(model: MlpModel, x, spec: DerivativeSpec = VALUE_ONLY) -> Jet:
    """Value and requested input partials of ``model`` at ``x``.

    ``x`` is a single point of shape ``(d,)`` (scalar entries in the result)
    or a batch of shape ``(n, d)`` (arrays of length ``n``).
    """
    X, single = _as_points(model, x)
    jet = jet_var(model, Var(model.theta), X, spec)

    def out(v):
        return float(v.value[0]) if single else v.value.copy()

    return Jet(out(jet.u),
               {k: out(v) for k, v in jet.du.items()},
               {k: out(v) for k, v in jet.d2u.items()})


class Traced:
    """Handle passed to loss callables: parameters as a tape leaf plus jet evaluation."""

    def __init__(self, model: MlpModel):
        self.model = model
        self.theta = Var(model.theta)

    def jet(self, x, spec: DerivativeSpec = VALUE_ONLY) -> Jet:
        return jet_var(self.model, self.theta, x, spec)

    def value(self, x):
        return self.jet(x).u


def value_and_grad(loss: Callable[[Traced], Var], model: MlpModel):
    """Return ``(loss value, flat gradient)``; raises DivergenceError on non-finite loss."""
    tr = Traced(model)
    out = loss(tr)
    if not isinstance(out, Var):
        out = Var(out)
    val = float(out.value)
    if not np.isfinite(val):
        raise DivergenceError(f"loss evaluated to {val}")
    if out.parents or out is tr.theta:
        backward(out)
    g = tr.theta.grad
    return val, (np.zeros(model.n_params) if g is None else g)


def loss_gradient(loss: Callable[[Traced], Var], model: MlpModel) -> np.ndarray:
    """Gradient of a scalar traced loss with respect to all model parameters."""
    return value_and_grad(loss, model)[1]


def fd_gradient(loss: Callable[[Traced], Var], model: MlpModel, step=1e-4, index=None):
    """Central finite-difference gradient of ``loss`` (all entries or the listed ones)."""
    idx = range(model.n_params) if index is None else index
    out = np.zeros(len(idx))
    probe = model.copy()
    for i, k in enumerate(idx):
        probe.theta[k] = model.theta[k] + step
        fp = float(loss(Traced(probe)).value)
        probe.theta[k] = model.theta[k] - step
        fm = float(loss(Traced(probe)).value)
        probe.theta[k] = model.theta[k]
        out[i] = (fp - fm) / (2.0 * step)
    return out


def fd_check(model: MlpModel, x, spec: DerivativeSpec, step: float = 1e-4) -> float:
    """Max relative discrepancy of jet derivatives against central differences at ``x``.

    The first partial is compared with the central difference of values and
    the pure second partial with the central difference of the first partial,
    which avoids the ``eps / step**2`` round-off of a three-point stencil on
    values.  Relative error uses ``max(|fd|, 1)`` in the denominator so that vanishing
    derivatives do not blow up the ratio.
    """
    x = np.asarray(x, dtype=np.float64)
    if step <= 0:
        raise ValueError("step must be positive")
    jet = eval_jet(model, x, spec)
    probe = DerivativeSpec(first_order=spec.first_channels)

    worst = 0.0
    for k in spec.first_channels:
        e = np.zeros_like(x)
        e[k] = step
        jp, jm = eval_jet(model, x + e, probe), eval_jet(model, x - e, probe)
        d1 = (jp.u - jm.u) / (2 * step)
        worst = max(worst, abs(jet.du[k] - d1) / max(abs(d1), 1.0))
        if k in spec.second_order:
            d2 = (jp.du[k] - jm.du[k]) / (2 * step)
            worst = max(worst, abs(jet.d2u[k] - d2) / max(abs(d2), 1.0))
    return worst


def stack_jets(jets: Sequence[Jet]) -> Jet:
    """Concatenate batched jets with identical derivative entries."""
    u = np.concatenate([j.u for j in jets])
    du = {k: np.concatenate([j.du[k] for j in jets]) for k in jets[0].du}
    d2u = {k: np.concatenate([j.d2u[k] for j in jets]) for k in jets[0].d2u}
    return Jet(u, du, d2u)
