import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilabel.diffengine import DerivativeSpec
from pilabel.pde import helmholtz_exact, make_helmholtz, make_vburgers, sample_points
from pilabel.pigp import (
    ConditioningError,
    FunctionalBlock,
    KernelConfig,
    assemble_gram,
    cross_matrix,
    gp_jet,
    gp_posterior,
    gp_regress,
    kernel_eval,
    load_gp,
    pigp_solve,
    save_gp,
    write_posterior_csv,
)

BURGERS_SIGMA = (1 / (3 * np.sqrt(2)), 1 / (21 * np.sqrt(2)))
HELM_SIGMA = 1156 ** -0.25


@pytest.fixture(scope="module")
def helmholtz_solution():
    prob = make_helmholtz()
    sets = sample_points(prob, 1024, 33, 0, seed=0)
    return prob, sets, pigp_solve(prob, sets, KernelConfig((HELM_SIGMA, HELM_SIGMA)))


def test_kernel_values():
    k = KernelConfig((1.0, 1.0))
    assert kernel_eval(k, [0.3, -0.2], [0.3, -0.2]) == 1.0
    assert kernel_eval(k, [0, 0], [1, 0]) == pytest.approx(np.exp(-0.5), rel=1e-15)
    assert kernel_eval(k, [0, 0], [1, 0]) == pytest.approx(0.6065, abs=1e-4)
    kb = KernelConfig(BURGERS_SIGMA)
    assert kernel_eval(kb, [0, 0], [0.1, 0]) == pytest.approx(np.exp(-0.09), rel=1e-14)
    assert kernel_eval(kb, [0, 0], [0.1, 0]) == pytest.approx(0.9139, abs=1e-4)


def test_literal_kernel_flag():
    k = KernelConfig((1.0, 2.0), literal=True)
    assert kernel_eval(k, [0, 0], [1, 1]) == pytest.approx(np.exp(1.5))
    with pytest.raises(ValueError):
        cross_matrix(k, FunctionalBlock("a", [[0, 0]], {"d0": 1.0}), FunctionalBlock.values("b", [[0, 0]]))


@pytest.mark.parametrize("bad", [dict(lengthscales=(0.0, 1.0)), dict(lengthscales=(1.0,), nugget=0.0),
                                 dict(lengthscales=(1.0,), beta=-1.0)])
def test_kernel_config_validation(bad):
    with pytest.raises(ValueError):
        KernelConfig(**bad)


def test_kernel_dimension_mismatch():
    with pytest.raises(ValueError):
        kernel_eval(KernelConfig((1.0, 1.0)), [0.0], [0.0])


@settings(max_examples=30, deadline=None)
@given(x=st.lists(st.floats(-2, 2), min_size=2, max_size=2),
       y=st.lists(st.floats(-2, 2), min_size=2, max_size=2),
       s=st.lists(st.floats(0.05, 3), min_size=2, max_size=2))
def test_kernel_symmetric_and_bounded(x, y, s):
    k = KernelConfig(tuple(s))
    a, b = kernel_eval(k, x, y), kernel_eval(k, y, x)
    assert a == b and 0 <= a <= 1


def test_duplicate_point_gram():
    k = KernelConfig((0.5, 0.5), nugget=1e-5)
    G, L = assemble_gram(k, [FunctionalBlock.values("v", [[0.2, 0.4], [0.2, 0.4]])])
    assert G.tolist() == [[1.0, 1.0], [1.0, 1.0]]
    np.testing.assert_allclose(L @ L.T, G + 1e-5 * np.eye(2), rtol=0, atol=1e-15)


def test_value_derivative_pair_at_same_point():
    k = KernelConfig((0.7, 0.7))
    p = [[0.1, 0.9]]
    G, _ = assemble_gram(k, [FunctionalBlock.values("v", p), FunctionalBlock("d", p, {"d0": 1.0})])
    assert G[0, 1] == 0.0 and G[1, 0] == 0.0
    assert G[1, 1] == pytest.approx(1 / 0.49)


def test_value_gram_matches_entrywise():
    k = KernelConfig((1.0, 1.0))
    P = np.random.default_rng(0).uniform(size=(5, 2))
    G, _ = assemble_gram(k, [FunctionalBlock.values("v", P)])
    E = np.array([[kernel_eval(k, a, b) for b in P] for a in P])
    np.testing.assert_allclose(G, E, rtol=1e-14, atol=1e-15)
    assert np.array_equal(G, G.T)


def _fd_kernel(k, x, y, ta, tb, h=1e-3):
    """Apply the derivative tags to each kernel argument by central differences."""
    def stencil(tag):
        if tag == "u":
            return [(0.0, 1.0)]
        i = int(tag.lstrip("d"))
        e = np.zeros(2)
        e[i] = h
        if tag.startswith("dd"):
            return [(e, 1 / h**2), (0 * e, -2 / h**2), (-e, 1 / h**2)]
        return [(e, 0.5 / h), (-e, -0.5 / h)]

    return sum(wa * wb * kernel_eval(k, x + da, y + db)
               for da, wa in stencil(ta) for db, wb in stencil(tb))


@pytest.mark.parametrize("ta", ["u", "d0", "d1", "dd0", "dd1"])
@pytest.mark.parametrize("tb", ["u", "d0", "dd1"])
def test_derivative_entries_against_finite_differences(ta, tb):
    k = KernelConfig((0.6, 0.8))
    x, y = np.array([0.2, -0.1]), np.array([0.5, 0.3])
    exact = cross_matrix(k, FunctionalBlock("a", [x], {ta: 1.0}), FunctionalBlock("b", [y], {tb: 1.0}))
    # a second difference on both arguments carries eps / h**4 round-off
    rel = 1e-3 if ta.startswith("dd") and tb.startswith("dd") else 1e-4
    assert exact[0, 0] == pytest.approx(_fd_kernel(k, x, y, ta, tb), rel=rel, abs=1e-5)


def test_mixed_functional_gram_symmetric_and_factorable():
    k = KernelConfig(BURGERS_SIGMA)
    rng = np.random.default_rng(3)
    P = rng.uniform([0, -1], [1, 1], size=(40, 2))
    op = FunctionalBlock("pde", P, {"u": rng.normal(size=40), "d0": 1.0, "d1": rng.normal(size=40),
                                    "dd1": -0.02})
    blocks = [op, FunctionalBlock.values("bc", rng.uniform(size=(10, 2)))]
    G, L = assemble_gram(k, blocks, noise=np.full(50, 1e-5))
    assert np.array_equal(G, G.T)
    np.testing.assert_allclose(L @ L.T, G + 2e-5 * np.eye(50), rtol=1e-12, atol=1e-9)


def test_cholesky_failure_reports_pivot():
    k = KernelConfig((1.0,), nugget=1e-300)
    with pytest.raises(ConditioningError, match="pivot"):
        assemble_gram(k, [FunctionalBlock.values("v", [[0.0], [0.0]])])


def test_helmholtz_solve_accuracy(helmholtz_solution):
    _, _, sol = helmholtz_solution
    assert sol.converged and sol.iterations == 1
    g = np.random.default_rng(1).uniform(size=(10_000, 2))
    mean, var = gp_posterior(sol, g, clamp=False)
    ref = helmholtz_exact(g)
    assert np.linalg.norm(mean - ref) / np.linalg.norm(ref) < 5e-2
    assert var.min() >= -1e-8
    assert gp_posterior(sol, g)[1].min() >= 0.0


def test_helmholtz_linear_optimality(helmholtz_solution):
    _, _, sol = helmholtz_solution
    G, _ = assemble_gram(sol.kernel, sol.blocks, sol.noise)
    # the nugget acts as extra observation noise in the quadratic functional
    w = 1.0 / (sol.noise + sol.kernel.nugget)

    def loss(a):
        r = sol.data - G @ a
        return a @ G @ a + np.sum(w * r * r)

    base = loss(sol.coefficients)
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = rng.normal(size=len(sol.coefficients))
        assert loss(sol.coefficients + 1e-3 * d / np.linalg.norm(d)) >= base


def test_zero_data_gives_zero_solution():
    prob = make_helmholtz(k=np.sqrt(17) * np.pi)  # forcing vanishes identically
    sets = sample_points(prob, 100, 10, 0, seed=0)
    sol = pigp_solve(prob, sets, KernelConfig((0.3, 0.3)))
    # the forcing is zero up to round-off in k**2 - 17 pi**2
    assert np.abs(sol.coefficients).max() < 1e-8
    assert np.abs(gp_posterior(sol, np.random.default_rng(0).uniform(size=(50, 2)))[0]).max() < 1e-10


@pytest.fixture(scope="module")
def burgers_solution():
    prob = make_vburgers(0.1)
    sets = sample_points(prob, 200, [40, 20, 20], 0, seed=0)
    return prob, sets, pigp_solve(prob, sets, KernelConfig((0.2, 0.15)), tol=1e-9)


def test_gauss_newton_converges(burgers_solution):
    _, _, sol = burgers_solution
    assert sol.converged and 1 < sol.iterations < 30
    assert sol.history[-1]["change"] < 1e-9
    assert len(sol.coefficients) == sol.n_functionals


def test_gauss_newton_fixed_point(burgers_solution):
    prob, sets, sol = burgers_solution
    again = pigp_solve(prob, sets, sol.kernel, max_gn_iters=1, initial_state=sol.linearization_state)
    assert np.abs(again.linearization_state.u - sol.linearization_state.u).max() < 1e-9 * 10


def test_gauss_newton_residual_small(burgers_solution):
    prob, sets, sol = burgers_solution
    X = np.random.default_rng(4).uniform([0.05, -0.95], [1, 0.95], size=(200, 2))
    jet = gp_jet(sol, X, prob.spec)
    assert np.median(np.abs(prob.interior_residual(X, jet))) < 0.05


def test_stagnation_flags_non_converged(burgers_solution):
    prob, sets, sol = burgers_solution
    short = pigp_solve(prob, sets, sol.kernel, max_gn_iters=2, tol=1e-9)
    assert not short.converged and short.iterations == 2


def test_periodic_boundary_unsupported(allen_cahn):
    sets = sample_points(allen_cahn, 20, 5, 0, seed=0)
    with pytest.raises(ValueError, match="Dirichlet"):
        pigp_solve(allen_cahn, sets, KernelConfig((0.1, 0.1)))


def test_gp_jet_derivatives_match_finite_differences(burgers_solution):
    _, _, sol = burgers_solution
    spec = DerivativeSpec(first_order=(0, 1), second_order=(0, 1))
    x = np.array([[0.4, 0.25]])
    jet = gp_jet(sol, x, spec)
    h = 1e-4
    for i in (0, 1):
        e = np.zeros(2)
        e[i] = h
        vp, v0, vm = (gp_jet(sol, x + s * e).u[0] for s in (1, 0, -1))
        assert jet.du[i][0] == pytest.approx((vp - vm) / (2 * h), rel=1e-6, abs=1e-8)
        assert jet.d2u[i][0] == pytest.approx((vp - 2 * v0 + vm) / h**2, rel=1e-4, abs=1e-4)


@pytest.mark.parametrize("nugget, tol", [(1e-8, 1e-6), (1e-5, 1e-4)])
def test_interpolation_at_data(nugget, tol):
    # the nugget shifts the mean at a datum by nugget * coefficient
    k = KernelConfig((0.3,), nugget=nugget)
    X = np.array([[0.1], [0.4], [0.8]])
    y = np.array([0.5, -1.0, 2.0])
    sol = gp_regress(X, y, 0.0, k)
    mean, var = gp_posterior(sol, X)
    assert np.abs(mean - y).max() < tol
    assert var.max() < 10 * k.nugget


def test_prior_recovered_far_from_data():
    sol = gp_regress([[0.0, 0.0]], [1.0], 0.0, KernelConfig((0.1, 0.1)))
    mean, var = gp_posterior(sol, np.array([5.0, 5.0]))
    assert var == pytest.approx(1.0, abs=1e-12) and abs(mean) < 1e-12


def test_one_dimensional_closed_form():
    s, eta = 0.25, 1e-5
    X = np.array([0.0, 0.5, 1.0])
    y = np.sin(X)
    sol = gp_regress(X[:, None], y, 0.0, KernelConfig((s,), nugget=eta))
    grid = np.linspace(0, 1, 101)

    def k(a, b):
        return np.exp(-((a[:, None] - b[None, :]) ** 2) / (2 * s * s))

    K = k(X, X) + eta * np.eye(3)
    ks = k(grid, X)
    mean = ks @ np.linalg.solve(K, y)
    var = 1 - np.sum(ks * np.linalg.solve(K, ks.T).T, axis=1)
    m, v = gp_posterior(sol, grid[:, None])
    assert np.abs(m - mean).max() < 1e-10
    assert np.abs(v - var).max() < 1e-10


def test_regress_single_point():
    sol = gp_regress([[0.0]], [2.0], 0.0, KernelConfig((1.0,), nugget=1e-5))
    assert gp_posterior(sol, np.array([0.0]))[0] == pytest.approx(2.0, abs=1e-4)


def test_regress_constant_field():
    P = np.random.default_rng(0).uniform(size=(10, 2))
    sol = gp_regress(P, np.full(10, 3.5), 0.0, KernelConfig((0.3, 0.3)))
    assert np.abs(gp_posterior(sol, P)[0] - 3.5).max() < 1e-3


def test_regress_noisy_quadratic():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(20, 1))
    y = X[:, 0] ** 2 + rng.normal(scale=0.1, size=20)
    sol = gp_regress(X, y, 1e-2, KernelConfig((0.2,)))
    assert np.mean((gp_posterior(sol, X)[0] - y) ** 2) <= 1e-2 * 10


def test_regress_validation():
    with pytest.raises(ValueError):
        gp_regress([[0.0], [1.0]], [1.0], 0.0, KernelConfig((1.0,)))
    with pytest.raises(ValueError):
        gp_regress([[0.0]], [1.0], -1.0, KernelConfig((1.0,)))


def test_posterior_scalar_and_batch_agree(helmholtz_solution):
    _, _, sol = helmholtz_solution
    P = np.array([[0.3, 0.6], [0.7, 0.2]])
    mean, var = gp_posterior(sol, P)
    for i, p in enumerate(P):
        m, v = gp_posterior(sol, p)
        assert m == pytest.approx(mean[i], rel=1e-10) and v == pytest.approx(var[i], abs=1e-12)


def test_checkpoint_round_trip(tmp_path, burgers_solution):
    _, _, sol = burgers_solution
    save_gp(tmp_path / "gp.npz", sol)
    back = load_gp(tmp_path / "gp.npz")
    assert back.kernel == sol.kernel and back.n_functionals == sol.n_functionals
    P = np.random.default_rng(2).uniform([0, -1], [1, 1], size=(30, 2))
    m0, v0 = gp_posterior(sol, P)
    m1, v1 = gp_posterior(back, P)
    np.testing.assert_array_equal(m0, m1)
    np.testing.assert_allclose(v0, v1, atol=1e-15)


def test_posterior_csv(tmp_path, burgers_solution):
    _, _, sol = burgers_solution
    path = tmp_path / "post.csv"
    write_posterior_csv(path, sol, np.array([[0.5, 0.0], [0.2, 0.3]]), coords=("t", "x"))
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x,mean,variance" and len(lines) == 3
