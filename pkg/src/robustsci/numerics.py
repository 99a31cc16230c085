"""Quadrature, least squares and seeded random streams."""

from __future__ import annotations

import functools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .errors import NumericalError

log = logging.getLogger(__name__)

DEFAULT_ORDER = 64
TRUNCATION_FACTOR = 50.0


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return len(self.nodes)

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.weights, fn(self.nodes)))


@functools.lru_cache(maxsize=64)
def _gauss_legendre(n: int) -> QuadratureRule:
    k = np.arange(1, n + 1)
    # Tricomi's initial guess for the k-th root, largest first
    x = np.cos(np.pi * (k - 0.25) / (n + 0.5)) * (1.0 - (n - 1.0) / (8.0 * n**3))
    for _ in range(100):
        p0 = np.ones_like(x)
        p1 = x.copy()
        for j in range(2, n + 1):
            p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
        dp = n * (x * p1 - p0) / (x * x - 1.0)
        step = p1 / dp
        x = x - step
        if np.max(np.abs(step)) < 1e-16:
            break
    else:
        raise NumericalError(f"Legendre root iteration did not converge for n={n}")
    # recompute the derivative at the converged roots for the weights
    p0 = np.ones_like(x)
    p1 = x.copy()
    for j in range(2, n + 1):
        p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
    dp = n * (x * p1 - p0) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    x = x[::-1].copy()
    w = w[::-1].copy()
    # enforce exact symmetry
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    x.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(x, w)


def gauss_legendre(n: int) -> QuadratureRule:
    """Gauss-Legendre nodes (ascending) and weights on [-1, 1]."""
    n = int(n)
    if not 2 <= n <= 256:
        raise ValueError(f"quadrature order must be in [2, 256], got {n}")
    return _gauss_legendre(n)


def integrate_semi_infinite(integrand: Callable, scale, n: int = DEFAULT_ORDER):
    """Approximate the integral of ``integrand`` over p in [0, inf).

    The range is truncated at ``50 * scale`` and mapped onto the Legendre
    interval through ``p = p_max * u**2`` with ``u = (x + 1) / 2``; the
    quadratic map removes the ``p^2 ln p`` endpoint behaviour of massless Bose
    integrands.  ``scale`` may be an array (one integral per entry); the
    integrand then receives momenta of shape ``scale.shape + (n,)`` and the
    result has the shape of ``scale``.  The integrand may return a tape node,
    in which case the result is differentiable.
    """
    rule = gauss_legendre(n)
    scale = np.asarray(ad.value_of(scale), dtype=float)
    if np.any(scale <= 0):
        raise ValueError("integration scale must be positive")
    p_max = TRUNCATION_FACTOR * scale[..., None]
    u = 0.5 * (rule.nodes + 1.0)
    p = p_max * u * u
    w = rule.weights * p_max * u
    values = integrand(p)
    raw = ad.value_of(values)
    bad = ~np.isfinite(raw)
    if np.any(bad):
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        at = np.broadcast_to(p, raw.shape)[loc]
        raise NumericalError(f"non-finite integrand at p={at!r}", index=loc, location=float(at))
    return ad.reduce_sum(ad.mul(values, w), axis=-1)


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass
class LeastSquaresResult:
    x: np.ndarray
    rank: int
    n: int
    residual_norm: float

    @property
    def rank_deficient(self) -> bool:
        return self.rank < self.n


def least_squares_solve(A, b, rcond: float | None = None, full_output: bool = False):
    """Minimise ||Ax - b|| with a column-pivoted QR (complete orthogonal) solve.

    Columns are equilibrated to unit norm first.  ``rcond`` is the relative
    threshold below which pivots count as zero; the default is machine epsilon
    times max(m, n).  If the numerical rank is below n a
    :class:`RankDeficiencyWarning` is issued and the minimum-norm solution of
    the original (unscaled) system is returned.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2:
        raise ValueError("A must be a matrix")
    m, n = A.shape
    if m < n:
        raise ValueError(f"least squares needs m >= n, got {m}x{n}")
    if b.shape[0] != m:
        raise ValueError(f"right-hand side has {b.shape[0]} rows, A has {m}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise NumericalError("least squares input contains non-finite values")
    if rcond is None:
        rcond = np.finfo(float).eps * max(m, n)
    col = np.linalg.norm(A, axis=0)
    col[col == 0] = 1.0
    x, _, rank, _ = scipy.linalg.lstsq(A / col, b, cond=rcond, lapack_driver="gelsy")
    rank = int(rank)
    if rank < n:
        warnings.warn(f"least-squares matrix has numerical rank {rank} < {n}; "
                      "returning the minimum-norm solution", RankDeficiencyWarning, stacklevel=2)
        x, _, _, _ = scipy.linalg.lstsq(A, b, cond=rcond, lapack_driver="gelsd")
    else:
        x = x / (col if x.ndim == 1 else col[:, None])
    if full_output:
        return LeastSquaresResult(x, rank, n, float(np.linalg.norm(b - A @ x)))
    return x


@dataclass
class RngStream:
    """Deterministic random stream keyed by ``(seed, stream)``."""

    seed: int
    stream: int = 0
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(int(self.stream) & (2**64 - 1),))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, stream: int) -> "RngStream":
        """Independent stream derived from this one's seed."""
        return RngStream(self.seed, (self.stream * 0x9E3779B1 + stream + 1) % 2**63)


def rng_uniform(stream: RngStream, lo: float, hi: float, size=None):
    if not lo < hi:
        raise ValueError(f"rng_uniform needs lo < hi, got [{lo}, {hi}]")
    return stream.generator.uniform(lo, hi, size)


def rng_sign(stream: RngStream, size=None):
    """Independent +1/-1 draws with equal probability."""
    bits = stream.generator.integers(0, 2, size=size)
    return 2.0 * bits - 1.0
