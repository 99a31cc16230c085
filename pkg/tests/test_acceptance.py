"""Acceptance criteria 1-9.

Trained models are cached under ``runs/acceptance/<experiment>/checkpoints``
(override the root with ROBUSTSCI_ACCEPTANCE_DIR).  A cold run trains five
PINNs, so expect about an hour; later runs reuse the checkpoints, whose
metadata keeps the original training times for the runtime limits.
"""

import json
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from robustsci import autodiff as ad, dlqp, harness
from robustsci.harness import ExperimentConfig

import gradcheck
from acceptance_log import record

ROOT = Path(__file__).resolve().parents[1]
ACCEPT = Path(os.environ.get("ROBUSTSCI_ACCEPTANCE_DIR", ROOT / "runs" / "acceptance"))
ORDERING_EPS = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


def config(experiment: str) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(ROOT / "configs" / f"{experiment}.toml")
    return cfg.with_overrides(out=str(ACCEPT / experiment), workers=1)


def checkpoint_seconds(cfg: ExperimentConfig, model: str, seed: int, part: str = "") -> float:
    suffix = f"_{part}" if part else ""
    path = Path(cfg.out) / "checkpoints" / f"{cfg.experiment}_{model}{suffix}_seed{seed}.json"
    return float(json.loads(path.read_text())["metadata"].get("train_seconds", math.nan))


def values(report, **match) -> dict:
    return {r.seed: r.value for r in report.select(**match)}


@pytest.fixture(scope="module")
def poisson_run():
    cfg = config("poisson")
    return cfg, harness.run(cfg, "attack")


@pytest.fixture(scope="module")
def dlqp_run():
    cfg = config("dlqp")
    return cfg, harness.run(cfg, "attack")


@pytest.fixture(scope="module")
def beamsim_run():
    cfg = config("beamsim")
    return cfg, harness.run(cfg, "attack")


def test_criterion_1_autodiff_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for case in gradcheck.architectures(0):
        p = max(gradcheck.parameter_check(case, case.sample(rng), rng) for _ in range(10))
        i = max(gradcheck.input_check(case, case.sample(rng)) for _ in range(10))
        worst[case.name] = (p, i)
    elapsed = time.perf_counter() - t0
    ok = all(max(v) < 1e-4 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} param {p:.1e} input {i:.1e}" for k, (p, i) in worst.items())
    record(1, ok, f"max rel error vs central differences: {detail}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_thermodynamic_limits():
    t0 = time.perf_counter()
    T = np.linspace(0.13, 0.40, 28)
    zero = np.zeros_like(T)
    gluon = np.asarray(ad.value_of(dlqp.ln_z_density_boson(T, zero, 16))) / T**3
    total = gluon + np.asarray(ad.value_of(dlqp.ln_z_density_fermion(T, zero, 36))) / T**3
    err_g = np.max(np.abs(gluon / (16 * math.pi**2 / 90) - 1))
    err_t = np.max(np.abs(total / ((16 + 7 / 8 * 36) * math.pi**2 / 90) - 1))
    worst_consistency = 0.0
    for seed in range(3):
        model = dlqp.QuasiPartonModel.create(seed)
        state = model.thermo(T)
        worst_consistency = max(worst_consistency, float(np.max(np.abs(state.entropy / model.dP_dT(T) - 1))))
    elapsed = time.perf_counter() - t0
    ok = err_g < 1e-8 and err_t < 1e-8 and worst_consistency < 1e-6 and elapsed < 60
    record(2, ok, f"SB gluon {err_g:.1e}, SB 2+1 flavor {err_t:.1e}, s vs dP/dT {worst_consistency:.1e}; "
                  f"{elapsed:.1f}s")
    assert ok


def test_criterion_3_dlqp_fit(dlqp_run):
    cfg, report = dlqp_run
    seed = cfg.seeds[0]
    rel = values(report, model="dlqp", metric="max_rel_pressure_error")[seed]
    seconds = checkpoint_seconds(cfg, "dlqp", seed, "gluon")
    ok = rel <= 0.02 and seconds < 600 and cfg.params["epochs"] == 50_000
    record(3, ok, f"max pressure rel error {rel:.4f} over {len(dlqp.synth_eos_fixture())} points "
                  f"after {cfg.params['epochs']} epochs; training {seconds:.0f}s")
    assert ok


def test_criterion_4_dlqp_attack_ordering(dlqp_run):
    cfg, report = dlqp_run
    series = harness.emit_error_vs_T(report, [0.005, 0.01])
    sweep = sum(t.get("sweep_seconds", 0.0) for t in report.metadata["timings"].values())
    ok = sweep < 120
    parts = []
    for eps, rows in series.items():
        temps = [r[0] for r in rows]
        assert min(temps) == pytest.approx(0.20) and max(temps) == pytest.approx(0.34)
        fg = np.array([r[1] for r in rows])
        rn = np.array([r[2] for r in rows])
        frac = float(np.mean(fg >= rn))
        reversals = [f"{T:.2f}" for T, f, r in zip(temps, fg, rn) if f < r]
        ok = ok and frac >= 0.7 and fg.mean() > rn.mean()
        parts.append(f"eps {eps:g}: FGSM>=random at {frac:.0%} of {len(temps)} T, mean {fg.mean():.2e} vs "
                     f"{rn.mean():.2e}, reversals at {reversals or 'none'}")
    record(4, ok, "; ".join(parts) + f"; sweep {sweep:.1f}s")
    assert ok


def test_criterion_5_poisson_solver_quality(poisson_run):
    cfg, report = poisson_run
    rnn = values(report, model="rnn", mode="none", metric="rel_l2")
    dnn = values(report, model="dnn", mode="none", metric="rel_l2")
    steps = values(report, model="dnn", metric="train_steps")
    rnn_t = max(checkpoint_seconds(cfg, "rnn", s) for s in cfg.seeds)
    dnn_t = max(checkpoint_seconds(cfg, "dnn", s) for s in cfg.seeds)
    ok = (max(rnn.values()) < 0.05 and rnn_t < 10 and max(dnn.values()) < 0.10
          and max(steps.values()) <= 50_000 and dnn_t < 1200)
    record(5, ok, f"RNN rel L2 max {max(rnn.values()):.4f} (solve <= {rnn_t:.2f}s); PINN rel L2 "
                  f"{', '.join(f'{dnn[s]:.4f}' for s in sorted(dnn))} (<= {max(steps.values()):.0f} steps, "
                  f"<= {dnn_t:.0f}s) over seeds {list(cfg.seeds)}")
    assert ok


def test_criterion_6_table1_ordering(poisson_run):
    cfg, report = poisson_run
    assert len(cfg.seeds) >= 5
    wins = {}
    for eps in ORDERING_EPS:
        d = values(report, model="dnn", epsilon=eps, mode="fgsm", metric="rel_mse")
        r = values(report, model="rnn", epsilon=eps, mode="fgsm", metric="rel_mse")
        wins[eps] = sum(d[s] > r[s] for s in cfg.seeds)
    table = harness.emit_table1(report, [0.01, *ORDERING_EPS])
    med_rnn, med_dnn = table[1][-1], table[2][-1]
    majority = all(w > len(cfg.seeds) / 2 for w in wins.values())
    ok = majority and med_dnn > 1.0 and med_rnn < 1.0
    record(6, ok, f"seeds with DNN > RNN per eps {[wins[e] for e in ORDERING_EPS]} of {len(cfg.seeds)}; "
                  f"median Rel MSE at 0.3: DNN {med_dnn:.3f}, RNN {med_rnn:.3f}; "
                  f"DNN row {[round(v, 3) for v in table[2][1:]]}, RNN row {[round(v, 3) for v in table[1][1:]]}")
    assert ok


def test_criterion_7_fgsm_dominates_random_on_dnn(poisson_run):
    cfg, report = poisson_run
    parts = []
    ok = len(cfg.seeds) >= 5
    for eps in ORDERING_EPS:
        f = statistics.mean(values(report, model="dnn", epsilon=eps, mode="fgsm", metric="rel_mse").values())
        r = statistics.mean(values(report, model="dnn", epsilon=eps, mode="random-sign", metric="rel_mse").values())
        ok = ok and f >= r
        parts.append(f"{eps:g}: {f:.3f} vs {r:.3f}")
    record(7, ok, "mean DNN Rel MSE FGSM vs random: " + ", ".join(parts))
    assert ok


def paired_t(a, b) -> float:
    d = np.asarray(a) - np.asarray(b)
    sd = d.std(ddof=1)
    return float(d.mean() / (sd / math.sqrt(len(d)))) if sd > 0 else math.copysign(math.inf, d.mean() or 1.0)


def test_criterion_8_beamsim_orderings(beamsim_run):
    cfg, report = beamsim_run
    seeds = sorted(cfg.seeds)
    assert len(seeds) >= 10
    agent0 = values(report, model="agent", mode="none", metric="rate")
    sweep0 = values(report, model="sweep", mode="none", metric="rate")
    a0 = [agent0[s] for s in seeds]
    s0 = [sweep0[s] for s in seeds]
    ok = np.mean(a0) >= np.mean(s0)
    parts = [f"noise-free agent {np.mean(a0):.3f} vs sweep {np.mean(s0):.3f} (t={paired_t(a0, s0):+.1f})"]
    for eps in cfg.epsilons:
        f = values(report, model="agent", epsilon=eps, mode="fgsm", metric="rate")
        r = values(report, model="agent", epsilon=eps, mode="random-sign", metric="rate")
        fa, ra = [f[s] for s in seeds], [r[s] for s in seeds]
        ok = ok and np.mean(fa) <= np.mean(ra)
        parts.append(f"eps {eps:g}: FGSM {np.mean(fa):.3f} vs random {np.mean(ra):.3f} (t={paired_t(fa, ra):+.1f})")
    train = sum(checkpoint_seconds(cfg, "agent", s) for s in seeds)
    sweep = sum(t.get("sweep_seconds", 0.0) for t in report.metadata["timings"].values())
    ok = ok and train + sweep < 900
    record(8, ok, "; ".join(parts) + f"; training {train:.0f}s + evaluation {sweep:.0f}s")
    assert ok


def test_criterion_9_determinism(tmp_path):
    base = ExperimentConfig.from_file(ROOT / "configs" / "smoke.toml")
    outputs = []
    for name in ("first", "second"):
        cfg = base.with_overrides(out=str(tmp_path / name))
        harness.run(cfg, "attack")
        outputs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).glob("*.csv"))})
    same = outputs[0] == outputs[1] and "report.csv" in outputs[0]
    record(9, same, f"two fresh runs of the smoke config: {len(outputs[0])} CSV files, "
                    f"{'byte-identical' if same else 'DIFFERENT'}")
    assert same
