"""Quasi-parton model of the QCD equation of state.

Temperature-dependent masses for u/d quarks, s quarks and gluons come from
three small residual networks.  Pressure, energy density and entropy follow
from the ideal-gas partition function of each species, integrated over
momentum with Gauss-Legendre quadrature.  Everything is per unit volume:
``P = T * lnZ/V`` and ``e = T^2 * d(lnZ/V)/dT``.

Temperatures are in GeV, pressures and energy densities in GeV^4.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import autodiff as ad
from . import nn
from .attacks import symmetric_average_error_1d
from .errors import DataError, TrainingError
from .numerics import DEFAULT_ORDER, integrate_semi_infinite

log = logging.getLogger(__name__)

D_GLUON = 16
D_STRANGE = 12
D_LIGHT = 24
SPECIES = ("light", "strange", "gluon")
DEGENERACY = {"light": D_LIGHT, "strange": D_STRANGE, "gluon": D_GLUON}
IS_BOSON = {"light": False, "strange": False, "gluon": True}

T_SUPPORTED = (0.10, 0.50)
T_SHIFT = 0.25
T_SCALE = 0.1


@dataclass(frozen=True)
class DofConstants:
    d_g: int = D_GLUON
    d_q_s: int = D_STRANGE
    d_q_ud: int = D_LIGHT


def stefan_boltzmann_p_over_t4(d_boson: float = 0.0, d_fermion: float = 0.0) -> float:
    return (d_boson + 7.0 / 8.0 * d_fermion) * math.pi**2 / 90.0


# ---------------------------------------------------------------------------
# partition-function densities


def _as_column(x):
    v = ad.value_of(x)
    return ad.reshape(x, v.shape + (1,))


def _energy_over_t(p: np.ndarray, T, m):
    m_col = _as_column(m)
    t_col = _as_column(T)
    energy = ad.sqrt(ad.add(p * p, ad.mul(m_col, m_col)))
    return ad.div(energy, t_col)


def ln_z_density_boson(T, m, d: float, order: int = DEFAULT_ORDER):
    """lnZ/V for a bosonic species: -(d / 2 pi^2) * int p^2 ln(1 - e^{-E/T}) dp."""
    _check_temperature(T)
    integral = integrate_semi_infinite(
        lambda p: ad.mul(p * p, ad.log1mexp(_energy_over_t(p, T, m))), ad.value_of(T), order)
    return ad.mul(-d / (2.0 * math.pi**2), integral)


def ln_z_density_fermion(T, m, d: float, order: int = DEFAULT_ORDER):
    """lnZ/V for a fermionic species: +(d / 2 pi^2) * int p^2 ln(1 + e^{-E/T}) dp."""
    _check_temperature(T)
    integral = integrate_semi_infinite(
        lambda p: ad.mul(p * p, ad.softplus(ad.neg(_energy_over_t(p, T, m)))), ad.value_of(T), order)
    return ad.mul(d / (2.0 * math.pi**2), integral)


def _check_temperature(T) -> None:
    if np.any(ad.value_of(T) <= 0):
        raise ValueError("temperature must be positive")


def ln_z_density(T, m, species: str, order: int = DEFAULT_ORDER):
    fn = ln_z_density_boson if IS_BOSON[species] else ln_z_density_fermion
    return fn(T, m, DEGENERACY[species], order)


# ---------------------------------------------------------------------------
# equation-of-state tables


@dataclass
class EosTable:
    T: np.ndarray
    p_over_t4: np.ndarray
    e_over_t4: np.ndarray | None = None
    provenance: str = "lattice-csv"

    def __post_init__(self) -> None:
        self.T = np.asarray(self.T, dtype=float)
        self.p_over_t4 = np.asarray(self.p_over_t4, dtype=float)
        if self.e_over_t4 is not None:
            self.e_over_t4 = np.asarray(self.e_over_t4, dtype=float)
        if self.T.ndim != 1 or self.T.shape != self.p_over_t4.shape:
            raise DataError("T and P/T^4 columns must be 1-d and equally long")
        if len(self.T) == 0:
            raise DataError("equation-of-state table is empty")
        if np.any(np.diff(self.T) <= 0):
            raise DataError("temperatures must be strictly increasing")
        if np.any(self.p_over_t4 <= 0):
            raise DataError("P/T^4 must be positive")
        if not (np.all(np.isfinite(self.T)) and np.all(np.isfinite(self.p_over_t4))):
            raise DataError("table contains non-finite values")

    def __len__(self) -> int:
        return len(self.T)

    @property
    def t_range(self) -> tuple[float, float]:
        return float(self.T[0]), float(self.T[-1])

    def interpolant(self) -> PchipInterpolator:
        return PchipInterpolator(self.T, self.p_over_t4, extrapolate=False)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["T_GeV", "P_over_T4"] + (["e_over_T4"] if self.e_over_t4 is not None else [])
        writer.writerow(header)
        for i in range(len(self.T)):
            row = [repr(float(self.T[i])), repr(float(self.p_over_t4[i]))]
            if self.e_over_t4 is not None:
                row.append(repr(float(self.e_over_t4[i])))
            writer.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def load_eos_csv(path) -> EosTable:
    """Read ``T_GeV,P_over_T4[,e_over_T4]`` rows; rows are sorted by T."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{path}: empty file") from None
    if header[:2] != ["T_GeV", "P_over_T4"] or len(header) > 3 or (len(header) == 3 and header[2] != "e_over_T4"):
        raise DataError(f"{path}: header must be T_GeV,P_over_T4[,e_over_T4], got {','.join(header)}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            rows.append([float(c) for c in row])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.array(rows)
    order = np.argsort(data[:, 0], kind="stable")
    data = data[order]
    e = data[:, 2] if data.shape[1] == 3 else None
    return EosTable(data[:, 0], data[:, 1], e, provenance="lattice-csv")


FIXTURE_LOW = 0.3
FIXTURE_HIGH = 4.0
FIXTURE_TC = 0.155
FIXTURE_WIDTH = 0.03
FIXTURE_RANGE = (0.13, 0.40)


def fixture_p_over_t4(T):
    T = np.asarray(T, dtype=float)
    return FIXTURE_LOW + (FIXTURE_HIGH - FIXTURE_LOW) * (1.0 + np.tanh((T - FIXTURE_TC) / FIXTURE_WIDTH)) / 2.0


def synth_eos_fixture(n: int = 50) -> EosTable:
    """Smooth synthetic crossover curve; not lattice data.

    e/T^4 is filled in from the thermodynamic identity
    e/T^4 = T d(P/T^4)/dT + 3 P/T^4.
    """
    T = np.linspace(*FIXTURE_RANGE, n)
    p = fixture_p_over_t4(T)
    sech2 = 1.0 / np.cosh((T - FIXTURE_TC) / FIXTURE_WIDTH) ** 2
    dp = (FIXTURE_HIGH - FIXTURE_LOW) * sech2 / (2.0 * FIXTURE_WIDTH)
    return EosTable(T, p, T * dp + 3.0 * p, provenance="synthetic-fixture")


# ---------------------------------------------------------------------------
# model


@dataclass
class ThermoState:
    T: np.ndarray
    pressure: np.ndarray
    energy_density: np.ndarray
    entropy: np.ndarray


def mass_network_spec(width: int = 32, blocks: int = 3) -> nn.NetworkSpec:
    return nn.resnet_spec(1, width, blocks, 1, activation="tanh", output_activation="softplus")


@dataclass
class QuasiPartonModel:
    networks: dict[str, nn.Network]
    order: int = DEFAULT_ORDER

    @classmethod
    def create(cls, seed: int = 0, width: int = 32, blocks: int = 3, order: int = DEFAULT_ORDER):
        spec = mass_network_spec(width, blocks)
        nets = {name: nn.network_new(spec, seed, stream=i + 1) for i, name in enumerate(SPECIES)}
        return cls(nets, order)

    def bind(self, tape: ad.Tape) -> dict:
        return {name: net.bind(tape) for name, net in self.networks.items()}

    def parameters(self) -> list[np.ndarray]:
        return [p for name in SPECIES for p in self.networks[name].parameters()]

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        params = list(params)
        for name in SPECIES:
            k = len(self.networks[name].parameters())
            self.networks[name].set_parameters(params[:k])
            params = params[k:]

    def mass(self, species: str, T, bound=None):
        """Quasi-particle mass in GeV; positive by construction (softplus output)."""
        t_hat = ad.div(ad.sub(T, T_SHIFT), T_SCALE)
        x = ad.reshape(t_hat, (-1, 1))
        params = None if bound is None else bound[species]
        out = self.networks[species].forward(x, params)
        return ad.reshape(out, ad.value_of(T).shape)

    def masses(self, T) -> dict[str, np.ndarray]:
        T = np.atleast_1d(np.asarray(T, dtype=float))
        return {s: ad.value_of(self.mass(s, T)) for s in SPECIES}

    def ln_z(self, T, bound=None):
        total = None
        for s in SPECIES:
            term = ln_z_density(T, self.mass(s, T, bound), s, self.order)
            total = term if total is None else ad.add(total, term)
        return total

    def pressure(self, T, bound=None):
        return ad.mul(T, self.ln_z(T, bound))

    def p_over_t4(self, T, bound=None):
        return ad.div(self.pressure(T, bound), ad.power(T, 4.0))

    def d_ln_z_dT(self, T) -> np.ndarray:
        T = np.atleast_1d(np.asarray(T, dtype=float))
        return _elementwise_derivative(self.ln_z, T)

    def energy_density(self, T) -> np.ndarray:
        T = np.atleast_1d(np.asarray(T, dtype=float))
        return T**2 * self.d_ln_z_dT(T)

    def thermo(self, T) -> ThermoState:
        T = np.atleast_1d(np.asarray(T, dtype=float))
        P = ad.value_of(self.pressure(T))
        e = self.energy_density(T)
        return ThermoState(T, P, e, (e + P) / T)

    def dP_dT(self, T) -> np.ndarray:
        T = np.atleast_1d(np.asarray(T, dtype=float))
        return _elementwise_derivative(self.pressure, T)


def _elementwise_derivative(fn: Callable, T: np.ndarray) -> np.ndarray:
    """d fn(T_i) / d T_i for a function acting independently on each entry."""
    tape = ad.Tape()
    t = tape.leaf(T)
    ad.backward(ad.reduce_sum(fn(t)))
    return np.asarray(t.grad)


def pressure(model: QuasiPartonModel, T) -> np.ndarray:
    return ad.value_of(model.pressure(np.atleast_1d(np.asarray(T, dtype=float))))


def energy_density(model: QuasiPartonModel, T) -> np.ndarray:
    return model.energy_density(T)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: QuasiPartonModel
    loss_history: list[float]
    final_mse: float
    predicted_e_over_t4: np.ndarray
    epochs: int


def train(model: QuasiPartonModel, eos: EosTable, epochs: int = 50_000, lr: float = 1e-3,
          log_every: int = 0, history_every: int = 100, divergence: float = 1e6) -> TrainResult:
    """Fit P/T^4 to the table with full-batch Adam; energy density is never a target."""
    if len(eos) == 0:
        raise ValueError("empty equation-of-state table")
    T = eos.T.copy()
    target = eos.p_over_t4
    state = nn.AdamState(lr=lr)
    history: list[float] = []
    params = model.parameters()
    loss_value = float("nan")
    for epoch in range(epochs):
        tape = ad.Tape()
        bound = model.bind(tape)
        resid = ad.sub(model.p_over_t4(T, bound), target)
        loss = ad.mean(ad.mul(resid, resid))
        leaves = [leaf for name in SPECIES for leaf in nn.Network.param_leaves(bound[name])]
        ad.backward(loss)
        loss_value = float(loss.value)
        if not np.isfinite(loss_value) or loss_value > divergence:
            raise TrainingError(f"quasi-parton training diverged at epoch {epoch} (loss={loss_value})",
                                {"epoch": epoch, "history": history[-20:]})
        if epoch % history_every == 0:
            history.append(loss_value)
        if log_every and epoch % log_every == 0:
            log.info("dlqp epoch %d loss %.3e", epoch, loss_value)
        params = nn.adam_step(state, params, [leaf.grad for leaf in leaves])
        model.set_parameters(params)
    final = float(np.mean((ad.value_of(model.p_over_t4(T)) - target) ** 2))
    history.append(final)
    e_pred = model.energy_density(T) / T**4
    return TrainResult(model, history, final, e_pred, epochs)


# ---------------------------------------------------------------------------
# attacks and landscapes


def truth_node(eos: EosTable):
    """Differentiable P/T^4 truth: monotone cubic interpolation of the table."""
    interp = eos.interpolant()
    deriv = interp.derivative()

    def fn(T):
        return ad.custom_scalar_fn(T, interp, deriv)

    return fn


def pointwise_loss(model: QuasiPartonModel, eos: EosTable, label: str = "interpolated",
                   T0: float | None = None) -> Callable:
    """Squared P/T^4 error as a function of temperature.

    With ``label="interpolated"`` the truth moves with T (the loss landscape
    seen by the input); ``label="fixed"`` pins it at its value at ``T0``.
    """
    truth = truth_node(eos)
    if label == "fixed":
        if T0 is None:
            raise ValueError("fixed-label loss needs T0")
        y = float(truth(np.asarray(T0)))

        def loss(T):
            r = ad.sub(model.p_over_t4(T), y)
            return ad.mul(r, r)
    elif label == "interpolated":
        def loss(T):
            r = ad.sub(model.p_over_t4(T), truth(T))
            return ad.mul(r, r)
    else:
        raise ValueError(f"unknown label mode {label!r}")
    return loss


def absolute_error(model: QuasiPartonModel, eos: EosTable) -> Callable[[float], float]:
    """|P_model/T^4 - P_true/T^4| at temperature T."""
    interp = eos.interpolant()

    def err(T: float) -> float:
        T = float(T)
        lo, hi = eos.t_range
        if not lo <= T <= hi:
            raise ValueError(f"T={T} outside the table range [{lo}, {hi}]")
        return float(abs(ad.value_of(model.p_over_t4(np.array([T])))[0] - interp(T)))

    return err


@dataclass
class TemperatureAttack:
    T: float
    epsilon: float
    baseline_error: float
    fgsm_error: float
    random_error: float
    direction: float


def attack_temperature(model: QuasiPartonModel, eos: EosTable, T: float, eps: float,
                       label: str = "interpolated") -> TemperatureAttack:
    """FGSM and symmetric-random errors for one temperature."""
    lo, hi = eos.t_range
    if eps < 0:
        raise ValueError("epsilon must be >= 0")
    if not (lo <= T - eps and T + eps <= hi):
        raise ValueError(f"T={T} +- {eps} leaves the table range [{lo}, {hi}]")
    err = absolute_error(model, eos)
    base = err(T)
    if eps == 0:
        return TemperatureAttack(T, eps, base, base, base, 0.0)
    loss = pointwise_loss(model, eos, label, T0=T)
    g = ad.grad_wrt_input(lambda t: ad.reduce_sum(loss(ad.reshape(t, (1,)))), np.asarray(T))
    direction = float(np.sign(g))
    return TemperatureAttack(T, eps, base, err(T + eps * direction),
                             symmetric_average_error_1d(err, T, eps), direction)


def attack_scan(model: QuasiPartonModel, eos: EosTable, temperatures: Sequence[float],
                eps: float, label: str = "interpolated") -> list[TemperatureAttack]:
    return [attack_temperature(model, eos, float(T), eps, label) for T in temperatures]


def landscape_scan(model: QuasiPartonModel, eos: EosTable, T_center: float, half_width: float,
                   steps: int, label: str = "interpolated") -> tuple[np.ndarray, np.ndarray]:
    """Loss at ``T_center + offset`` for evenly spaced offsets in [-half_width, half_width]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    lo, hi = eos.t_range
    if not (lo <= T_center - half_width and T_center + half_width <= hi):
        raise ValueError("scan window leaves the table range")
    offsets = np.zeros(1) if steps == 1 else np.linspace(-half_width, half_width, steps)
    loss = pointwise_loss(model, eos, label, T0=T_center)
    losses = np.asarray(ad.value_of(loss(T_center + offsets)), dtype=float)
    return offsets, losses
