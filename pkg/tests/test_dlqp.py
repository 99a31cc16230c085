import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustsci import autodiff as ad, dlqp
from robustsci.errors import DataError

SB_GLUON = 16 * math.pi**2 / 90
SB_TOTAL = (16 + 7 / 8 * 36) * math.pi**2 / 90


def p_over_t4_massless(T, boson_d=0.0, fermion_d=0.0, order=64):
    T = np.atleast_1d(np.asarray(T, dtype=float))
    lnz = ad.add(dlqp.ln_z_density_boson(T, np.zeros_like(T), boson_d, order),
                 dlqp.ln_z_density_fermion(T, np.zeros_like(T), fermion_d, order))
    return np.asarray(ad.value_of(lnz)) / T**3


@pytest.fixture(scope="module")
def model():
    return dlqp.QuasiPartonModel.create(seed=0)


def test_constants():
    dof = dlqp.DofConstants()
    assert (dof.d_g, dof.d_q_s, dof.d_q_ud) == (16, 12, 24)
    assert dlqp.stefan_boltzmann_p_over_t4(16, 36) == pytest.approx(47.5 * math.pi**2 / 90, rel=1e-15)
    assert dlqp.stefan_boltzmann_p_over_t4(16, 36) == pytest.approx(5.209, abs=1e-3)


@pytest.mark.parametrize("T", [0.13, 0.2, 0.4])
def test_stefan_boltzmann_limits(T):
    assert p_over_t4_massless(T, boson_d=16)[0] == pytest.approx(SB_GLUON, rel=1e-8)
    assert p_over_t4_massless(T, boson_d=16, fermion_d=36)[0] == pytest.approx(SB_TOTAL, rel=1e-8)
    ratio = p_over_t4_massless(T, fermion_d=1)[0] / p_over_t4_massless(T, boson_d=1)[0]
    assert ratio == pytest.approx(7 / 8, rel=1e-8)


def test_boltzmann_suppression_and_linearity():
    T = np.array([0.2])
    for fn in (dlqp.ln_z_density_boson, dlqp.ln_z_density_fermion):
        heavy = float(ad.value_of(fn(T, 100 * T, 16))[0])
        assert abs(heavy) < 1e-30 * 0.2**3
        one = ad.value_of(fn(T, np.array([0.3]), 5.0))
        two = ad.value_of(fn(T, np.array([0.3]), 10.0))
        assert two[0] == 2 * one[0]


def test_nonpositive_temperature_rejected():
    with pytest.raises(ValueError):
        dlqp.ln_z_density_boson(np.array([0.0]), np.array([0.1]), 16)


def test_massless_energy_is_three_pressures():
    T = np.array([0.15, 0.3])

    def lnz(t):
        zero = ad.mul(t, 0.0)
        return ad.add(dlqp.ln_z_density_boson(t, zero, 16), dlqp.ln_z_density_fermion(t, zero, 36))

    tape = ad.Tape()
    t = tape.leaf(T)
    ad.backward(ad.reduce_sum(lnz(t)))
    energy = T**2 * t.grad
    pressure = T * ad.value_of(lnz(T))
    np.testing.assert_allclose(energy, 3 * pressure, rtol=1e-6)


def test_energy_matches_finite_difference(model):
    T = np.array([0.16, 0.22, 0.35])
    h = 1e-5
    fd = (ad.value_of(model.ln_z(T + h)) - ad.value_of(model.ln_z(T - h))) / (2 * h)
    np.testing.assert_allclose(model.energy_density(T), T**2 * fd, rtol=1e-5)


def test_thermodynamic_consistency(model):
    T = np.linspace(0.13, 0.40, 28)
    state = model.thermo(T)
    np.testing.assert_allclose(state.entropy * T, state.energy_density + state.pressure, rtol=1e-10)
    np.testing.assert_allclose(state.entropy, model.dP_dT(T), rtol=1e-6)


def test_quadrature_order_stability(model):
    T = np.linspace(0.13, 0.40, 10)
    p64 = dlqp.pressure(model, T)
    model128 = dlqp.QuasiPartonModel(model.networks, order=128)
    assert np.max(np.abs(dlqp.pressure(model128, T) / p64 - 1)) < 1e-9


def test_masses_positive(model):
    T = np.random.default_rng(0).uniform(*dlqp.T_SUPPORTED, 1000)
    for m in model.masses(T).values():
        assert np.all(m > 0)


def test_fixture_table():
    eos = dlqp.synth_eos_fixture()
    assert len(eos) == 50 and eos.provenance == "synthetic-fixture"
    assert eos.t_range == pytest.approx((0.13, 0.40))
    assert np.all(np.diff(eos.T) > 0) and np.all(eos.p_over_t4 > 0)
    # e/T^4 = T d(P/T^4)/dT + 3 P/T^4, checked against a numerical derivative
    h = 1e-6
    dp = (dlqp.fixture_p_over_t4(eos.T + h) - dlqp.fixture_p_over_t4(eos.T - h)) / (2 * h)
    np.testing.assert_allclose(eos.e_over_t4, eos.T * dp + 3 * eos.p_over_t4, rtol=1e-7)


def test_csv_round_trip(tmp_path):
    eos = dlqp.synth_eos_fixture(12)
    path = tmp_path / "eos.csv"
    eos.to_csv(path)
    back = dlqp.load_eos_csv(path)
    assert np.array_equal(back.T, eos.T) and np.array_equal(back.p_over_t4, eos.p_over_t4)
    assert np.array_equal(back.e_over_t4, eos.e_over_t4)


def test_csv_sorted_and_validated(tmp_path):
    path = tmp_path / "eos.csv"
    path.write_text("T_GeV,P_over_T4\n0.3,3.0\n0.2,2.0\n")
    assert list(dlqp.load_eos_csv(path).T) == [0.2, 0.3]
    bad = {
        "T_GeV,P\n0.2,1\n": "header",
        "T_GeV,P_over_T4\n0.2,abc\n": "non-numeric",
        "T_GeV,P_over_T4\n0.2,1.0\n0.2,1.5\n": "increasing",
        "T_GeV,P_over_T4\n0.2,-1.0\n": "positive",
        "T_GeV,P_over_T4\n0.2\n": "fields",
    }
    for text, word in bad.items():
        path.write_text(text)
        with pytest.raises(DataError, match=word):
            dlqp.load_eos_csv(path)


def test_training_reduces_loss():
    eos = dlqp.synth_eos_fixture()
    m = dlqp.QuasiPartonModel.create(seed=1, order=32)
    result = dlqp.train(m, eos, epochs=60, history_every=10)
    assert result.final_mse < result.loss_history[0]
    assert result.predicted_e_over_t4.shape == (50,)
    with pytest.raises(ValueError):
        dlqp.EosTable([], [])


class LinearModel:
    """P/T^4 = a + b T, standing in for a perfectly fitted model."""

    def __init__(self, a, b):
        self.a, self.b = a, b

    def p_over_t4(self, T, bound=None):
        return ad.add(ad.mul(T, self.b), self.a)


def test_attack_examples(model):
    eos = dlqp.synth_eos_fixture()
    at = dlqp.attack_temperature(model, eos, 0.25, 0.0)
    assert at.fgsm_error == at.random_error == at.baseline_error
    line = dlqp.EosTable(np.linspace(0.1, 0.5, 9), 1.0 + 2.0 * np.linspace(0.1, 0.5, 9))
    exact = LinearModel(1.0, 2.0)
    for eps in (0.005, 0.01):
        at = dlqp.attack_temperature(exact, line, 0.3, eps)
        assert at.fgsm_error < 1e-12 and at.random_error < 1e-12
    with pytest.raises(ValueError):
        dlqp.attack_temperature(model, eos, 0.132, 0.01)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.15, 0.38), st.floats(0.001, 0.01))
def test_fgsm_direction_increases_loss_to_first_order(T, eps):
    eos = dlqp.synth_eos_fixture()
    biased = LinearModel(0.5, 12.0)
    at = dlqp.attack_temperature(biased, eos, T, eps)
    loss = dlqp.pointwise_loss(biased, eos)
    grad = ad.grad_wrt_input(lambda t: ad.reduce_sum(loss(ad.reshape(t, (1,)))), np.asarray(T))
    assert at.direction == np.sign(grad)


def test_landscape_examples(model):
    eos = dlqp.synth_eos_fixture()
    off, loss = dlqp.landscape_scan(model, eos, 0.24, 0.02, 1)
    assert off.tolist() == [0.0] and loss.shape == (1,)
    off, loss = dlqp.landscape_scan(model, eos, 0.24, 0.02, 21)
    assert len(off) == 21 and np.all(np.diff(off) > 0)
    # a model offset from the truth by a quadratic bump has its loss minimum at the bump's center
    interp = eos.interpolant()

    class Bowl:
        def p_over_t4(self, T, bound=None):
            T = np.asarray(ad.value_of(T), dtype=float)
            return interp(T) + 3.0 * (T - 0.24) ** 2 + 0.01

    off, loss = dlqp.landscape_scan(Bowl(), eos, 0.24, 0.03, 31)
    vertex = -np.polyfit(off, loss, 2)[1] / (2 * np.polyfit(off, loss, 2)[0])
    assert abs(vertex) <= off[1] - off[0]
