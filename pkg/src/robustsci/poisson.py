"""Poisson problem on [-1, 1]^2 solved two ways, then attacked.

-Lap(u) = f with the exact solution u = sin(4 pi x) sin(4 pi y) and Dirichlet
data taken from u.  A randomized network (frozen random tanh features, output
weights by least squares) and a physics-informed deep network (Adam on the PDE
residual) are trained and compared under FGSM and random-sign coordinate
perturbations.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.stats import qmc

from . import autodiff as ad
from . import nn
from .attacks import PerturbationSpec, ReportRow, domain_filter, perturb
from .errors import NumericalError, TrainingError
from .numerics import RngStream, least_squares_solve

log = logging.getLogger(__name__)

WAVENUMBER = 4.0 * math.pi
TABLE1_EPSILONS = (0.01, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


def exact_u(points):
    """sin(4 pi x) sin(4 pi y) for an (n, 2) array or node."""
    x = ad.getitem(points, (slice(None), 0))
    y = ad.getitem(points, (slice(None), 1))
    return ad.mul(ad.sin(ad.mul(WAVENUMBER, x)), ad.sin(ad.mul(WAVENUMBER, y)))


def forcing_f(x, y):
    """-Lap(u) for the exact solution: 32 pi^2 sin(4 pi x) sin(4 pi y)."""
    return 2.0 * WAVENUMBER**2 * np.sin(WAVENUMBER * np.asarray(x)) * np.sin(WAVENUMBER * np.asarray(y))


@dataclass(frozen=True)
class PoissonProblem:
    lower: float = -1.0
    upper: float = 1.0

    def exact(self, points):
        return exact_u(points)

    def forcing(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return forcing_f(p[:, 0], p[:, 1])

    def boundary(self, points) -> np.ndarray:
        return np.asarray(exact_u(np.asarray(points, dtype=float)))

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.lower) & (p <= self.upper), axis=-1)


def uniform_grid(n: int = 101, lower: float = -1.0, upper: float = 1.0) -> np.ndarray:
    g = np.linspace(lower, upper, n)
    X, Y = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def edge_points(per_edge: int, lower: float = -1.0, upper: float = 1.0, closed: bool = True) -> np.ndarray:
    """Points on the four edges; ``closed`` includes both ends of every edge."""
    t = np.linspace(lower, upper, per_edge) if closed else np.linspace(lower, upper, per_edge + 1)[:-1]
    lo = np.full_like(t, lower)
    hi = np.full_like(t, upper)
    if closed:
        edges = [(t, lo), (t, hi), (lo, t), (hi, t)]
    else:
        # walk the perimeter once, counter-clockwise, without repeating corners
        edges = [(t, lo), (hi, t), (-t, hi), (lo, -t)]
    return np.concatenate([np.column_stack(e) for e in edges])


class Surrogate(Protocol):
    def predict(self, points): ...


# ---------------------------------------------------------------------------
# randomized network


@dataclass(frozen=True)
class RnnConfig:
    hidden: int = 400
    interior_per_side: int = 30
    boundary_per_edge: int = 500
    penalty: float = 100.0
    # pivots are kept down to this relative size; the random tanh features are
    # nearly dependent and truncating at machine epsilon costs accuracy
    rcond: float = 1e-17


@dataclass
class RandomFeatureSolver:
    network: nn.Network
    config: RnnConfig
    rank: int = 0
    residual_norm: float = float("nan")
    solve_seconds: float = float("nan")

    @property
    def hidden_weights(self) -> np.ndarray:
        return self.network.weights[0]

    @property
    def hidden_bias(self) -> np.ndarray:
        return self.network.biases[0]

    @property
    def output_weights(self) -> np.ndarray:
        return self.network.weights[1][:, 0]

    def predict(self, points):
        out = self.network.forward(points)
        return ad.reshape(out, (ad.value_of(out).shape[0],))

    def features(self, points) -> np.ndarray:
        z = np.asarray(points) @ self.hidden_weights + self.hidden_bias
        return np.tanh(z)

    def feature_laplacians(self, points) -> np.ndarray:
        """Lap(phi_j) at each point, by pushing a derivative jet through the hidden layer."""
        x = np.asarray(points, dtype=float)
        n, d = x.shape
        jet = np.zeros((1 + 2 * d, n, d))
        jet[0] = x
        for k in range(d):
            jet[1 + k, :, k] = 1.0
        out = nn.jet_dense(jet, self.hidden_weights, self.hidden_bias, "tanh")
        return out[1 + d:].sum(axis=0)


def rnn_spec(hidden: int = 400) -> nn.NetworkSpec:
    return nn.NetworkSpec(2, (
        nn.LayerSpec(hidden, "tanh", trainable=False),
        nn.LayerSpec(1, "identity", trainable=True, bias=False),
    ))


def rnn_collocation(config: RnnConfig, problem: PoissonProblem) -> tuple[np.ndarray, np.ndarray]:
    k = config.interior_per_side
    g = np.linspace(problem.lower, problem.upper, k + 2)[1:-1]
    X, Y = np.meshgrid(g, g, indexing="ij")
    interior = np.column_stack([X.ravel(), Y.ravel()])
    boundary = edge_points(config.boundary_per_edge, problem.lower, problem.upper, closed=True)
    return interior, boundary


def new_random_feature_solver(seed: int, config: RnnConfig = RnnConfig()) -> RandomFeatureSolver:
    net = nn.network_new(rnn_spec(config.hidden), seed)
    return RandomFeatureSolver(net, config)


def assemble_rnn_system(solver: RandomFeatureSolver, problem: PoissonProblem,
                        interior: np.ndarray | None = None,
                        boundary: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rows: -Lap(phi_j)(x_i) = f(x_i) inside, penalty * phi_j(x_i) = penalty * g(x_i) on the edge."""
    if interior is None or boundary is None:
        interior, boundary = rnn_collocation(solver.config, problem)
    pen = solver.config.penalty
    A = np.vstack([-solver.feature_laplacians(interior), pen * solver.features(boundary)])
    b = np.concatenate([problem.forcing(interior), pen * problem.boundary(boundary)])
    return A, b


def rnn_solve(problem: PoissonProblem, seed: int, config: RnnConfig = RnnConfig()) -> RandomFeatureSolver:
    solver = new_random_feature_solver(seed, config)
    t0 = time.perf_counter()
    A, b = assemble_rnn_system(solver, problem)
    result = least_squares_solve(A, b, rcond=config.rcond, full_output=True)
    solver.network.weights[1] = result.x.reshape(-1, 1)
    solver.rank = result.rank
    solver.residual_norm = result.residual_norm
    solver.solve_seconds = time.perf_counter() - t0
    log.info("rnn seed %d: rank %d, residual %.3e, %.2fs", seed, result.rank,
             result.residual_norm, solver.solve_seconds)
    return solver


# ---------------------------------------------------------------------------
# physics-informed deep network


@dataclass(frozen=True)
class PinnConfig:
    hidden: tuple[int, ...] = (100,) * 5
    lr: float = 8e-4
    n_interior: int = 10_000
    n_boundary: int = 400
    boundary_weight: float = 100.0
    batch_size: int = 256
    loss_threshold: float = 1e-4
    max_steps: int = 50_000
    divergence: float = 1e6
    history_every: int = 100
    # the full collocation loss is measured this often and the best iterate kept
    eval_every: int = 1000
    dtype: str = "float32"


@dataclass
class PinnSolver:
    network: nn.Network
    config: PinnConfig
    lower: float = -1.0
    upper: float = 1.0
    final_loss: float = float("nan")
    steps: int = 0
    best_step: int = 0
    loss_history: list = field(default_factory=list)
    train_seconds: float = float("nan")

    @property
    def input_scale(self) -> float:
        return 2.0 / (self.upper - self.lower)

    def normalize(self, points):
        """Affine map of the box onto [-1, 1]^2 (the identity for the default box)."""
        return ad.sub(ad.mul(ad.sub(points, self.lower), self.input_scale), 1.0)

    def predict(self, points, params=None):
        out = self.network.forward(self.normalize(points), params)
        return ad.reshape(out, (ad.value_of(out).shape[0],))

    def laplacian(self, points, params=None):
        _, _, d2 = self.network.forward_jet(self.normalize(points), params)
        lap = ad.mul(ad.add(d2[0], d2[1]), self.input_scale**2)
        return ad.reshape(lap, (ad.value_of(lap).shape[0],))


def pinn_collocation(config: PinnConfig, problem: PoissonProblem, seed: int) -> tuple[np.ndarray, np.ndarray]:
    sampler = qmc.LatinHypercube(d=2, seed=RngStream(seed, 11).generator)
    interior = qmc.scale(sampler.random(config.n_interior), [problem.lower] * 2, [problem.upper] * 2)
    boundary = edge_points(config.n_boundary // 4, problem.lower, problem.upper, closed=False)
    return interior, boundary


def pinn_loss(solver: PinnSolver, params, interior, f_interior, boundary, g_boundary):
    resid = ad.sub(ad.neg(solver.laplacian(interior, params)), f_interior)
    mismatch = ad.sub(solver.predict(boundary, params), g_boundary)
    return ad.add(ad.mean(ad.mul(resid, resid)),
                  ad.mul(solver.config.boundary_weight, ad.mean(ad.mul(mismatch, mismatch))))


def collocation_loss(solver: PinnSolver, interior, f_interior, boundary, g_boundary,
                     chunk: int = 2048) -> float:
    """Training loss over the whole collocation set, without a tape."""
    sq = 0.0
    for lo in range(0, len(interior), chunk):
        r = -np.asarray(solver.laplacian(interior[lo:lo + chunk]), dtype=float) - f_interior[lo:lo + chunk]
        sq += float(np.dot(r, r))
    mismatch = np.asarray(solver.predict(boundary), dtype=float) - g_boundary
    return sq / len(interior) + solver.config.boundary_weight * float(np.mean(mismatch**2))


def pinn_train(problem: PoissonProblem, config: PinnConfig = PinnConfig(), seed: int = 0,
               progress: Callable[[int, float], None] | None = None) -> PinnSolver:
    """Adam on mean squared residual + weight * mean squared boundary mismatch.

    Interior collocation points are visited in shuffled minibatches of
    ``config.batch_size``; every step uses all boundary points.  Training stops
    once the minibatch loss drops below ``loss_threshold`` or after
    ``max_steps`` steps.  Every ``eval_every`` steps the loss over the full
    collocation set is measured and the parameters with the lowest value are
    the ones returned.  Arithmetic runs in ``config.dtype``; the returned
    network is float64.
    """
    dtype = np.dtype(config.dtype)
    spec = nn.mlp_spec(2, config.hidden, 1, activation="tanh")
    solver = PinnSolver(nn.network_new(spec, seed).astype(dtype), config, problem.lower, problem.upper)
    interior, boundary = pinn_collocation(config, problem, seed)
    f_int = problem.forcing(interior)
    g_bnd = problem.boundary(boundary)
    interior_t, boundary_t = interior.astype(dtype), boundary.astype(dtype)
    f_int_t, g_bnd_t = f_int.astype(dtype), g_bnd.astype(dtype)
    rng = RngStream(seed, 12).generator
    state = nn.AdamState(lr=config.lr)
    params = solver.network.parameters()
    order = rng.permutation(len(interior))
    cursor = 0
    loss_value = float("nan")
    best = (float("inf"), 0, solver.network.copy())
    t0 = time.perf_counter()
    step = 0
    for step in range(1, config.max_steps + 1):
        if cursor + config.batch_size > len(order):
            order = rng.permutation(len(interior))
            cursor = 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        loss_value, grads = nn.loss_and_grads(
            solver.network,
            lambda bound: pinn_loss(solver, bound, interior_t[idx], f_int_t[idx], boundary_t, g_bnd_t))
        if not np.isfinite(loss_value) or loss_value > config.divergence:
            raise TrainingError(f"PINN training diverged at step {step} (loss={loss_value})",
                                {"step": step, "history": solver.loss_history[-20:]})
        if step % config.history_every == 0 or step == 1:
            solver.loss_history.append((step, loss_value))
            if progress is not None:
                progress(step, loss_value)
        if loss_value < config.loss_threshold:
            break
        params = nn.adam_step(state, params, grads)
        solver.network.set_parameters(params)
        if step % config.eval_every == 0:
            full = collocation_loss(solver, interior_t, f_int, boundary_t, g_bnd)
            log.debug("pinn step %d: collocation loss %.4g", step, full)
            if full < best[0]:
                best = (full, step, solver.network.copy())
    full = collocation_loss(solver, interior_t, f_int, boundary_t, g_bnd)
    if full < best[0]:
        best = (full, step, solver.network.copy())
    solver.network = best[2].astype(np.float64)
    solver.steps = step
    solver.best_step = best[1]
    solver.final_loss = best[0]
    solver.train_seconds = time.perf_counter() - t0
    return solver


# ---------------------------------------------------------------------------
# evaluation and attacks


@dataclass(frozen=True)
class GridError:
    mse: float
    rel_l2: float
    n_points: int


def evaluate_grid(model: Surrogate, problem: PoissonProblem = PoissonProblem(), n: int = 101) -> GridError:
    """MSE and relative L2 error of ``model`` against the exact solution on an n x n grid."""
    grid = uniform_grid(n, problem.lower, problem.upper)
    pred = np.asarray(ad.value_of(model.predict(grid)), dtype=float).reshape(-1)
    exact = np.asarray(problem.exact(grid), dtype=float)
    diff = pred - exact
    return GridError(float(np.mean(diff**2)), float(np.linalg.norm(diff) / np.linalg.norm(exact)), len(grid))


def rel_mse(original_mse: float, attacked_mse: float) -> float:
    """``|attacked - original| / original``."""
    if not original_mse > 0:
        raise ValueError(f"relative MSE is undefined for original MSE {original_mse}")
    return abs(attacked_mse - original_mse) / original_mse


def fixed_truth_loss(model: Surrogate, problem: PoissonProblem, x0: np.ndarray):
    """Squared error against the exact value at the unperturbed points, summed.

    Summing keeps each point's gradient equal to the gradient of its own loss.
    """
    target = np.asarray(problem.exact(x0), dtype=float)

    def loss(x):
        r = ad.sub(model.predict(x), target)
        return ad.reduce_sum(ad.mul(r, r))

    return loss


def attacked_mse(model: Surrogate, problem: PoissonProblem, x_adv: np.ndarray) -> tuple[float, int]:
    """MSE at the perturbed points that stay inside the domain, against the exact solution there."""
    kept = domain_filter(x_adv, problem.lower, problem.upper)
    if len(kept.points) == 0:
        raise NumericalError("every perturbed point left the domain")
    pred = np.asarray(ad.value_of(model.predict(kept.points)), dtype=float).reshape(-1)
    exact = np.asarray(problem.exact(kept.points), dtype=float)
    return float(np.mean((pred - exact) ** 2)), kept.removed


def poisson_attack_experiment(
    models: dict,
    epsilons: Sequence[float] = TABLE1_EPSILONS,
    modes: Sequence[str] = ("fgsm", "random-sign"),
    seeds: Sequence[int] = (0,),
    problem: PoissonProblem = PoissonProblem(),
    grid_n: int = 101,
    failures: list | None = None,
) -> list[ReportRow]:
    """Attack every model on the evaluation grid and report Rel MSE per cell.

    ``models`` maps a model name to either one surrogate (used for every seed)
    or a dict ``{seed: surrogate}``.  For each seed the rows are: the clean
    grid MSE (mode ``none``), then for each (epsilon, mode) the attacked MSE,
    the Rel MSE and the number of points removed by the domain filter.
    The random stream of a cell is ``(seed, cell index)``.
    """
    grid = uniform_grid(grid_n, problem.lower, problem.upper)
    rows: list[ReportRow] = []
    for name, entry in models.items():
        for seed in seeds:
            model = entry[seed] if isinstance(entry, dict) else entry
            clean = evaluate_grid(model, problem, grid_n)
            rows.append(ReportRow("poisson", name, 0.0, "none", seed, "mse", clean.mse))
            rows.append(ReportRow("poisson", name, 0.0, "none", seed, "rel_l2", clean.rel_l2))
            loss = fixed_truth_loss(model, problem, grid)
            cells = [(float(eps), mode) for eps in epsilons for mode in modes]
            for cell_index, (eps, mode) in enumerate(cells, start=1):
                spec = PerturbationSpec(mode, eps, seed=seed, stream=cell_index)
                try:
                    x_adv = perturb(loss, grid, spec)
                    mse, removed = attacked_mse(model, problem, x_adv)
                    value = rel_mse(clean.mse, mse)
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    log.warning("poisson cell %s %s eps=%g seed=%s failed: %s", name, mode, eps, seed, exc)
                    if failures is not None:
                        failures.append({"experiment": "poisson", "model": name, "epsilon": eps,
                                         "mode": mode, "seed": seed, "error": str(exc)})
                    continue
                rows.append(ReportRow("poisson", name, eps, mode, seed, "attacked_mse", mse))
                rows.append(ReportRow("poisson", name, eps, mode, seed, "rel_mse", value))
                rows.append(ReportRow("poisson", name, eps, mode, seed, "removed", float(removed)))
    return rows
