import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustsci import autodiff as ad, nn, poisson
from robustsci.attacks import PerturbationSpec, domain_filter, fgsm, random_sign_noise
from robustsci.errors import TrainingError
from robustsci.numerics import least_squares_solve

PROBLEM = poisson.PoissonProblem()


class Stub:
    def __init__(self, fn):
        self.fn = fn

    def predict(self, points):
        return self.fn(points)


@pytest.fixture(scope="module")
def rnn():
    return poisson.rnn_solve(PROBLEM, 0)


@pytest.fixture(scope="module")
def small_pinn():
    cfg = poisson.PinnConfig(hidden=(20,) * 3, lr=1e-2, n_interior=500, n_boundary=80, batch_size=64,
                             max_steps=300, eval_every=100, dtype="float64")
    return poisson.pinn_train(PROBLEM, cfg, seed=0)


def test_forcing_examples():
    assert poisson.forcing_f(0.0, 0.0) == 0.0
    assert poisson.forcing_f(0.125, 0.125) == pytest.approx(32 * math.pi**2, rel=1e-14)
    assert 32 * math.pi**2 == pytest.approx(315.83, abs=0.01)


def test_exact_solution_satisfies_pde():
    pts = np.random.default_rng(0).uniform(-1, 1, (1000, 2))
    lap = ad.laplacian(poisson.exact_u, pts)
    f = PROBLEM.forcing(pts)
    assert np.max(np.abs(-lap - f) / (np.abs(f) + 1e-9)) < 1e-6 or np.max(np.abs(-lap - f)) < 1e-9 * 316


def test_boundary_data_matches_exact():
    edge = poisson.edge_points(50)
    np.testing.assert_array_equal(PROBLEM.boundary(edge), np.asarray(poisson.exact_u(edge)))
    assert np.max(np.abs(PROBLEM.boundary(edge))) < 1e-14


def test_collocation_counts():
    interior, boundary = poisson.rnn_collocation(poisson.RnnConfig(), PROBLEM)
    assert interior.shape == (900, 2) and boundary.shape == (2000, 2)
    assert np.all(np.abs(interior) < 1)
    cfg = poisson.PinnConfig()
    interior, boundary = poisson.pinn_collocation(cfg, PROBLEM, 3)
    assert interior.shape == (10_000, 2) and boundary.shape == (400, 2)
    assert len(np.unique(boundary, axis=0)) == 400


def test_system_shape_and_rows():
    solver = poisson.new_random_feature_solver(1)
    A, b = poisson.assemble_rnn_system(solver, PROBLEM)
    assert A.shape == (2900, 400) and b.shape == (2900,)
    interior, boundary = poisson.rnn_collocation(solver.config, PROBLEM)
    np.testing.assert_allclose(A[900:], 100 * solver.features(boundary))
    np.testing.assert_allclose(b[:900], PROBLEM.forcing(interior))


def test_feature_laplacians_match_closed_form():
    solver = poisson.new_random_feature_solver(2)
    pts = np.random.default_rng(2).uniform(-1, 1, (5, 2))
    W, c = solver.hidden_weights, solver.hidden_bias
    t = np.tanh(pts @ W + c)
    expected = -2 * t * (1 - t**2) * np.sum(W**2, axis=0)
    np.testing.assert_allclose(solver.feature_laplacians(pts), expected, rtol=1e-12, atol=1e-14)


@pytest.mark.filterwarnings("ignore::robustsci.numerics.RankDeficiencyWarning")
def test_zero_data_gives_zero_weights():
    solver = poisson.new_random_feature_solver(0)
    A, _ = poisson.assemble_rnn_system(solver, PROBLEM)
    x = least_squares_solve(A, np.zeros(len(A)))
    assert np.all(x == 0)


def test_duplicate_interior_row_keeps_fit():
    solver = poisson.new_random_feature_solver(0)
    A, b = poisson.assemble_rnn_system(solver, PROBLEM)
    x = least_squares_solve(A, b, rcond=1e-17)
    x2 = least_squares_solve(np.vstack([A, A[17]]), np.append(b, b[17]), rcond=1e-17)
    # the features are nearly dependent, so the weights themselves are not stable;
    # the predicted solution is
    grid = poisson.uniform_grid()
    F = solver.features(grid)
    u = np.asarray(PROBLEM.exact(grid))
    assert np.linalg.norm(F @ x2 - F @ x) / np.linalg.norm(u) < 0.01
    assert np.linalg.norm(F @ x2 - u) / np.linalg.norm(u) < 0.05


def test_rnn_quality_and_frozen_layer(rnn):
    fresh = poisson.new_random_feature_solver(0)
    assert rnn.hidden_weights.tobytes() == fresh.hidden_weights.tobytes()
    assert rnn.hidden_bias.tobytes() == fresh.hidden_bias.tobytes()
    assert rnn.rank == 400
    err = poisson.evaluate_grid(rnn)
    assert err.rel_l2 < 0.05 and err.n_points == 10201


def test_rnn_output_linear_in_weights(rnn):
    pts = np.random.default_rng(4).uniform(-1, 1, (200, 2))
    base = np.asarray(rnn.predict(pts))
    doubled = poisson.RandomFeatureSolver(rnn.network.copy(), rnn.config)
    doubled.network.weights[1] = 2 * rnn.network.weights[1]
    assert np.array_equal(np.asarray(doubled.predict(pts)), 2 * base)


def test_evaluate_grid_stubs():
    exact = poisson.evaluate_grid(Stub(poisson.exact_u))
    assert exact.mse == 0 and exact.rel_l2 == 0
    zero = poisson.evaluate_grid(Stub(lambda p: np.zeros(len(p))))
    assert zero.rel_l2 == pytest.approx(1.0, rel=1e-14)
    assert poisson.uniform_grid().shape == (10201, 2)


def test_rel_mse():
    assert poisson.rel_mse(1.0, 1.0) == 0
    assert poisson.rel_mse(1.0, 1.5) == 0.5
    assert poisson.rel_mse(2.0, 1.0) == 0.5
    with pytest.raises(ValueError):
        poisson.rel_mse(0.0, 1.0)


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-6, 0.5))
def test_positive_shift_always_removes_points(eps):
    grid = poisson.uniform_grid(101)
    assert domain_filter(grid + eps, -1, 1).removed > 0


def test_fixed_truth_gradient_direction():
    # a model offset by +c: the gradient of (u_m(x) - u(x0))^2 is 2c * grad u_m
    model = Stub(lambda p: ad.add(poisson.exact_u(p), 0.3))
    x0 = np.array([[0.1, -0.05], [0.6, 0.3]])
    loss = poisson.fixed_truth_loss(model, PROBLEM, x0)
    g = ad.grad_wrt_input(loss, x0)
    gu = ad.grad_wrt_input(lambda p: ad.reduce_sum(poisson.exact_u(p)), x0)
    np.testing.assert_allclose(g, 0.6 * gu, rtol=1e-10)


def test_pinn_normalization_identity_on_unit_box(small_pinn):
    pts = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    np.testing.assert_allclose(np.asarray(small_pinn.normalize(pts)), pts, atol=1e-15)
    shifted = replace(small_pinn, lower=0.0, upper=2.0)
    np.testing.assert_allclose(np.asarray(shifted.normalize(pts + 1)), pts, atol=1e-14)


def test_pinn_training_records(small_pinn):
    assert small_pinn.steps == 300
    assert small_pinn.network.dtype == np.float64
    cfg = small_pinn.config
    untrained = poisson.PinnSolver(nn.network_new(nn.mlp_spec(2, cfg.hidden, 1), 0), cfg)
    interior, boundary = poisson.pinn_collocation(cfg, PROBLEM, 0)
    start = poisson.collocation_loss(untrained, interior, PROBLEM.forcing(interior), boundary,
                                     PROBLEM.boundary(boundary))
    assert small_pinn.final_loss < 0.9 * start
    assert 0 < small_pinn.best_step <= 300


def test_pinn_laplacian_matches_nested_autodiff(small_pinn):
    pts = np.random.default_rng(5).uniform(-1, 1, (6, 2))
    nested = ad.laplacian(small_pinn.predict, pts)
    np.testing.assert_allclose(np.asarray(small_pinn.laplacian(pts)), nested, rtol=1e-9)


def test_pinn_divergence_raises():
    cfg = poisson.PinnConfig(hidden=(8,), n_interior=64, n_boundary=8, batch_size=32, max_steps=5,
                             divergence=1.0, dtype="float64")
    with pytest.raises(TrainingError):
        poisson.pinn_train(PROBLEM, cfg, seed=0)


def test_fgsm_first_order_dominance_on_dnn(small_pinn):
    grid = poisson.uniform_grid(41)
    loss = poisson.fixed_truth_loss(small_pinn, PROBLEM, grid)
    eps = 1e-3
    f_loss = float(ad.value_of(loss(fgsm(loss, grid, PerturbationSpec("fgsm", eps)))))
    r_losses = [float(ad.value_of(loss(random_sign_noise(grid, PerturbationSpec("random-sign", eps, seed=s)))))
                for s in range(20)]
    assert f_loss >= np.mean(r_losses)


def test_attack_experiment_rows(rnn):
    failures = []
    rows = poisson.poisson_attack_experiment({"rnn": rnn}, [0.05, 0.3], seeds=[0, 1], grid_n=21,
                                             failures=failures)
    assert not failures
    keys = {(r.model, r.epsilon, r.mode, r.seed, r.metric) for r in rows}
    assert len(keys) == len(rows) == 2 * (2 + 2 * 2 * 3)
    rel = {(r.epsilon, r.mode, r.seed): r.value for r in rows if r.metric == "rel_mse"}
    att = {(r.epsilon, r.mode, r.seed): r.value for r in rows if r.metric == "attacked_mse"}
    base = {r.seed: r.value for r in rows if r.metric == "mse"}
    for (eps, mode, seed), v in rel.items():
        assert v == pytest.approx(abs(att[(eps, mode, seed)] - base[seed]) / base[seed])
    removed = {(r.epsilon, r.mode, r.seed): r.value for r in rows if r.metric == "removed"}
    assert all(v > 0 for v in removed.values())
    # FGSM is deterministic, so it does not depend on the seed
    assert rel[(0.3, "fgsm", 0)] == rel[(0.3, "fgsm", 1)]
