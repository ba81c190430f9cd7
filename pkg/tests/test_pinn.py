import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilabel.diffengine import DivergenceError, MlpModel
from pilabel.pde import sample_points
from pilabel.pinn import (
    Adam,
    TrainConfig,
    init_mlp,
    load_mlp,
    normalize_weights,
    pinn_loss,
    predict,
    save_mlp,
    train_adam,
    write_history_csv,
)
from pilabel.semisup import PseudoLabel

BURGERS_W = (0.1, 1, 0.5, 0.5)


def label(point, value):
    return PseudoLabel(tuple(point), float(value), 0.0, None, "self_pinn", 0)


def test_parameter_count_and_shapes():
    m = init_mlp(2, [20] * 7, seed=0)
    assert m.n_params == 2601
    assert m.layers()[0][0].shape == (2, 20)
    ac = init_mlp(2, [50] * 4, seed=0)
    assert ac.layers()[0][0].shape == (2, 50)
    assert all(not b.any() for _, b in ac.layers())


def test_init_deterministic():
    assert init_mlp(2, [8, 8], seed=4).theta.tobytes() == init_mlp(2, [8, 8], seed=4).theta.tobytes()
    assert not np.array_equal(init_mlp(2, [8, 8], seed=4).theta, init_mlp(2, [8, 8], seed=5).theta)


@pytest.mark.parametrize("hidden", [[], [0], [3, -1]])
def test_init_rejects_bad_widths(hidden):
    with pytest.raises(ValueError):
        init_mlp(2, hidden, seed=0)


def test_init_domain_normalisation():
    m = init_mlp(2, [4], seed=0, domain=[(0, 1), (-1, 1)])
    assert m.input_shift == (0.5, 0.0) and m.input_scale == (2.0, 1.0)
    with pytest.raises(ValueError):
        init_mlp(2, [4], seed=0, domain=[(1, 0), (-1, 1)])


def test_weights_normalisation(burgers):
    w = normalize_weights(BURGERS_W, burgers)
    assert w == {"residual": 0.1, "ic": 1.0, "left": 0.5, "right": 0.5, "pseudo": 0.0}
    assert normalize_weights(list(BURGERS_W) + [0.1], burgers)["pseudo"] == 0.1
    with pytest.raises(ValueError):
        normalize_weights((1, 1), burgers)
    with pytest.raises(ValueError):
        normalize_weights((1, -1, 1, 1), burgers)


def test_zero_solution_has_zero_residual(allen_cahn):
    # u = 0 solves the Allen-Cahn equation in the interior
    m = init_mlp(2, [6], seed=0)
    m.layers()[-1][0][:] = 0.0
    sets = sample_points(allen_cahn, 100, 10, 0, seed=0)
    bd = pinn_loss(m, allen_cahn, sets, (1, 1, 1))
    assert bd.residual < 1e-6
    assert bd.boundary["periodic"] == 0.0


def test_loss_without_pseudo(burgers):
    m = init_mlp(2, [6, 6], seed=1)
    sets = sample_points(burgers, 40, 10, 0, seed=1)
    bd = pinn_loss(m, burgers, sets, list(BURGERS_W) + [0.3])
    assert bd.pseudo == 0.0
    expect = 0.1 * bd.residual + bd.boundary["ic"] + 0.5 * (bd.boundary["left"] + bd.boundary["right"])
    assert bd.total == pytest.approx(expect, rel=1e-15)
    assert bd.total == bd.recompute_total()


def test_self_consistent_pseudo_label(burgers):
    m = init_mlp(2, [6, 6], seed=1)
    sets = sample_points(burgers, 40, 10, 5, seed=1)
    p = sets.test[0]
    sets = sets.with_pseudo([label(p, predict(m, p[None])[0])])
    bd = pinn_loss(m, burgers, sets, list(BURGERS_W) + [0.3])
    assert bd.pseudo < 1e-30  # zero up to batched-evaluation round-off
    moved = sets.with_pseudo([label(p, predict(m, p[None])[0] + 0.5)])
    assert pinn_loss(m, burgers, moved, list(BURGERS_W) + [0.3]).pseudo == pytest.approx(0.25)


def test_empty_sets_rejected(burgers):
    m = init_mlp(2, [4], seed=0)
    with pytest.raises(ValueError):
        pinn_loss(m, burgers, sample_points(burgers, 0, 0, 10, seed=0), BURGERS_W)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=-1, learning_rate=1e-3, weights=BURGERS_W)
    with pytest.raises(ValueError):
        TrainConfig(steps=1, learning_rate=0.0, weights=BURGERS_W)


def test_zero_steps_is_identity(burgers):
    m = init_mlp(2, [5, 5], seed=2)
    sets = sample_points(burgers, 20, 5, 0, seed=0)
    out, hist = train_adam(m, burgers, sets, TrainConfig(0, 1e-3, BURGERS_W))
    assert out.theta.tobytes() == m.theta.tobytes()
    assert [s for s, _ in hist] == [0]


def test_single_adam_step():
    opt = Adam(1, 0.1)
    theta = np.array([1.0])
    opt.step(theta, 2 * theta.copy())
    assert theta[0] == pytest.approx(1 - 0.1 * 2 / (2 + 1e-8), abs=1e-15)
    assert theta[0] == pytest.approx(0.9, abs=1e-8)


@pytest.fixture(scope="module")
def small_run():
    from pilabel.pde import make_vburgers
    prob = make_vburgers(0.01 / np.pi)
    sets = sample_points(prob, 400, [100, 50, 50], 0, seed=0)
    m = init_mlp(2, [20, 20, 20], seed=1000)
    cfg = TrainConfig(2000, 5e-3, BURGERS_W, snapshot_stride=250)
    out, hist = train_adam(m, prob, sets, cfg)
    return prob, sets, m, cfg, out, hist


def test_training_decreases_loss(small_run):
    *_, hist = small_run
    assert hist[0][0] == 0 and hist[-1][0] == 2000
    assert hist[0][1].total / hist[-1][1].total >= 10


def test_history_decomposition_exact(small_run):
    for _, bd in small_run[-1]:
        assert bd.total == bd.recompute_total()
        assert bd.residual >= 0 and all(v >= 0 for v in bd.boundary.values())


def test_training_bit_reproducible(burgers):
    sets = sample_points(burgers, 50, 10, 0, seed=3)
    cfg = TrainConfig(30, 5e-3, BURGERS_W)
    a, _ = train_adam(init_mlp(2, [8, 8], seed=1), burgers, sets, cfg)
    b, _ = train_adam(init_mlp(2, [8, 8], seed=1), burgers, sets, cfg)
    assert a.theta.tobytes() == b.theta.tobytes()


def test_zero_pseudo_weight_ignores_labels(burgers):
    sets = sample_points(burgers, 50, 10, 4, seed=3)
    cfg = TrainConfig(20, 5e-3, list(BURGERS_W) + [0.0])
    plain, h0 = train_adam(init_mlp(2, [8], seed=1), burgers, sets, cfg)
    labelled = sets.with_pseudo([label(p, 3.0) for p in sets.test])
    other, h1 = train_adam(init_mlp(2, [8], seed=1), burgers, labelled, cfg)
    assert plain.theta.tobytes() == other.theta.tobytes()
    assert [b.total for _, b in h0] == [b.total for _, b in h1]


def test_early_stop(burgers):
    sets = sample_points(burgers, 30, 5, 0, seed=0)
    _, hist = train_adam(init_mlp(2, [5], seed=0), burgers, sets,
                         TrainConfig(500, 1e-2, BURGERS_W, stop_total_loss=1e3))
    assert [s for s, _ in hist] == [0]


def test_divergence_returns_last_finite_state(burgers):
    sets = sample_points(burgers, 30, 5, 0, seed=0)
    m = init_mlp(2, [5], seed=0)
    with pytest.raises(DivergenceError) as info:
        train_adam(m, burgers, sets, TrainConfig(5, 1e308, BURGERS_W))
    model, history = info.value.state
    assert np.all(np.isfinite(model.theta))
    assert history


def test_predict(burgers):
    m = init_mlp(2, [4, 4], seed=0)
    W, b = m.layers()[-1]
    W[:] = 0
    b[:] = -0.25
    grid = np.random.default_rng(0).uniform(size=(7, 2))
    assert predict(m, grid).tolist() == [-0.25] * 7
    m2 = init_mlp(2, [4, 4], seed=1)
    assert predict(m2, grid).tobytes() == predict(m2, grid).tobytes()
    assert predict(m2, np.zeros((0, 2))).shape == (0,)


def test_checkpoint_round_trip(tmp_path):
    m = init_mlp(2, [3, 4], seed=9, domain=[(0, 1), (-1, 1)])
    save_mlp(tmp_path / "m.npz", m)
    r = load_mlp(tmp_path / "m.npz")
    assert r.widths == m.widths and r.activation == m.activation
    assert r.theta.tobytes() == m.theta.tobytes()
    assert (r.input_shift, r.input_scale) == (m.input_shift, m.input_scale)


def test_history_csv(tmp_path, small_run):
    prob, *_, hist = small_run
    path = tmp_path / "h.csv"
    write_history_csv(path, hist, [g.name for g in prob.groups], offset=100)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["step", "total", "residual", "bc_ic", "bc_left", "bc_right", "pseudo"]
    assert int(rows[1][0]) == 100 and len(rows) == len(hist) + 1


@settings(max_examples=15, deadline=None)
@given(w=st.lists(st.floats(0, 10), min_size=4, max_size=4), seed=st.integers(0, 1000))
def test_total_is_weighted_sum(w, seed):
    from pilabel.pde import make_vburgers
    burgers = make_vburgers(0.1)
    sets = sample_points(burgers, 15, 4, 0, seed=seed)
    bd = pinn_loss(init_mlp(2, [4], seed=seed), burgers, sets, w)
    expect = w[0] * bd.residual + w[1] * bd.boundary["ic"] + w[2] * bd.boundary["left"] + \
        w[3] * bd.boundary["right"]
    assert bd.total == pytest.approx(expect, rel=1e-14, abs=1e-300)


def test_model_validation():
    with pytest.raises(ValueError):
        MlpModel((2, 3), np.zeros(9))
    with pytest.raises(ValueError):
        MlpModel((2, 1), np.zeros(2))


@pytest.mark.slow
def test_burgers_paper_config_training():
    from _runs import paper_run

    _, out = paper_run("exp_pinn_self_vburgers")
    with open(out / "history_pinn.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= 5000]
    assert float(rows[0]["total"]) / float(rows[-1]["total"]) >= 10
    model = load_mlp(out / "model_pinn.npz")
    assert abs(predict(model, np.array([[0.0, 0.5]]))[0] - 1.0) < 0.05
