"""Input perturbations: FGSM, equal-amplitude random signs, and sweep helpers."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .errors import AttackError, NumericalError
from .numerics import RngStream, rng_sign

log = logging.getLogger(__name__)

MODES = ("fgsm", "random-sign", "none")


@dataclass(frozen=True)
class PerturbationSpec:
    mode: str
    epsilon: float
    mask: np.ndarray | None = None
    seed: int = 0
    stream: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown perturbation mode {self.mode!r}; expected one of {MODES}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")

    def mask_for(self, x: np.ndarray) -> np.ndarray:
        if self.mask is None:
            return np.ones(x.shape, dtype=bool)
        return np.broadcast_to(np.asarray(self.mask, dtype=bool), x.shape)


def fgsm(loss_fn: Callable, x, spec: PerturbationSpec) -> np.ndarray:
    """``x + eps * sign(grad_x loss)`` on masked coordinates.

    ``sign(0) = 0``, so coordinates with a vanishing gradient stay put.
    """
    if spec.mode != "fgsm":
        raise ValueError(f"fgsm() called with mode {spec.mode!r}")
    x = np.asarray(x, dtype=float)
    if spec.epsilon == 0:
        return x.copy()
    try:
        g = ad.grad_wrt_input(loss_fn, x)
    except NumericalError as exc:
        raise AttackError(f"FGSM gradient is not finite: {exc}", index=exc.index) from exc
    return x + spec.epsilon * np.sign(g) * spec.mask_for(x)


def random_sign_noise(x, spec: PerturbationSpec) -> np.ndarray:
    """Independent +-eps per masked coordinate, drawn from ``(spec.seed, spec.stream)``."""
    if spec.mode != "random-sign":
        raise ValueError(f"random_sign_noise() called with mode {spec.mode!r}")
    x = np.asarray(x, dtype=float)
    signs = rng_sign(RngStream(spec.seed, spec.stream), x.shape)
    return x + spec.epsilon * signs * spec.mask_for(x)


def perturb(loss_fn: Callable | None, x, spec: PerturbationSpec) -> np.ndarray:
    if spec.mode == "none":
        return np.array(x, dtype=float)
    if spec.mode == "fgsm":
        return fgsm(loss_fn, x, spec)
    return random_sign_noise(x, spec)


def symmetric_average_error_1d(error_fn: Callable[[float], float], x: float, eps: float) -> float:
    """Expected error of a scalar input hit by +eps or -eps with equal odds."""
    return 0.5 * (error_fn(x + eps) + error_fn(x - eps))


class FilterResult(NamedTuple):
    points: np.ndarray
    removed: int
    keep: np.ndarray


def domain_filter(points, lower, upper, tol: float = 1e-12) -> FilterResult:
    """Keep the rows of ``points`` that lie inside the closed box [lower, upper].

    Points within ``tol`` (relative to the box width) of a face count as on it,
    so a grid point shifted exactly onto the boundary is not lost to rounding.
    """
    pts = np.asarray(points, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    slack = tol * np.maximum(np.abs(upper - lower), 1.0)
    keep = np.all((pts >= lower - slack) & (pts <= upper + slack), axis=-1)
    return FilterResult(pts[keep], int(np.count_nonzero(~keep)), keep)


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    model: str
    epsilon: float
    mode: str
    seed: int
    metric: str
    value: float


def epsilon_sweep(
    x,
    loss_fn: Callable,
    eval_fn: Callable[[np.ndarray], dict],
    epsilons: Sequence[float],
    modes: Iterable[str],
    seeds: Sequence[int],
    *,
    experiment: str = "",
    model: str = "",
    mask=None,
    failures: list | None = None,
) -> list[ReportRow]:
    """Evaluate ``eval_fn`` on perturbed copies of ``x`` for every (eps, mode, seed).

    ``mode="none"`` is emitted once per seed with ``epsilon=0``.  A cell that
    raises is logged and appended to ``failures``; the sweep carries on.
    """
    rows: list[ReportRow] = []
    modes = list(modes)
    for seed in seeds:
        cells = []
        if "none" in modes:
            cells.append(("none", 0.0))
        cells += [(mode, float(eps)) for eps in epsilons for mode in modes if mode != "none"]
        for cell_index, (mode, eps) in enumerate(cells):
            spec = PerturbationSpec(mode, eps, mask=mask, seed=seed, stream=cell_index)
            try:
                x_adv = perturb(loss_fn, x, spec)
                metrics = eval_fn(x_adv)
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                log.warning("sweep cell %s eps=%g seed=%s failed: %s", mode, eps, seed, exc)
                if failures is not None:
                    failures.append({"experiment": experiment, "model": model, "epsilon": eps,
                                     "mode": mode, "seed": seed, "error": str(exc)})
                continue
            for name, value in metrics.items():
                rows.append(ReportRow(experiment, model, eps, mode, seed, name, float(value)))
    return rows
