"""Config-driven runs: train or load models, sweep attacks, write reports and plot data.

A run writes into ``out``:

* ``report.csv`` with columns experiment, model, epsilon, mode, seed, metric, value
* ``report.json`` with the same rows plus run metadata
* ``table1_*.csv`` / ``figN_*.csv`` plot-data files for the experiment
* ``checkpoints/`` holding trained parameters, reused by later runs

CSV output depends only on the config and seeds; wall-clock data lives in the
JSON metadata.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import beamsim, dlqp, nn, poisson
from .attacks import MODES, ReportRow
from .errors import ConfigError, DataError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

log = logging.getLogger(__name__)

CODE_VERSION = "0.1.0"
EXPERIMENTS = ("poisson", "dlqp", "beamsim")
MODELS = {"poisson": ("rnn", "dnn"), "dlqp": ("dlqp",), "beamsim": ("agent",)}
TABLE1_LABELS = {"rnn": "RNN", "dnn": "DNN"}
REPORT_COLUMNS = ("experiment", "model", "epsilon", "mode", "seed", "metric", "value")

# per-experiment hyperparameters and their defaults
DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "poisson": {
        "grid": 101,
        "rnn_hidden": 400,
        "rnn_interior_per_side": 30,
        "rnn_boundary_per_edge": 500,
        "penalty": 100.0,
        "rnn_rcond": 1e-17,
        "pinn_hidden": [100, 100, 100, 100, 100],
        "pinn_lr": 8e-4,
        "pinn_interior": 10_000,
        "pinn_boundary": 400,
        "pinn_batch": 256,
        "pinn_max_steps": 50_000,
        "pinn_threshold": 1e-4,
        "pinn_dtype": "float32",
    },
    "dlqp": {
        "epochs": 50_000,
        "lr": 1e-3,
        "fixture_points": 50,
        "eos_csv": "",
        "t_min": 0.20,
        "t_max": 0.34,
        "t_step": 0.01,
        "label": "interpolated",
        "landscape_centers": [0.20, 0.24, 0.28, 0.32],
        "landscape_half_width": 0.01,
        "landscape_steps": 41,
    },
    "beamsim": {
        "train_episodes": 480,
        "eval_episodes": 32,
        "gamma": 0.9,
        "sync_period": 200,
        "history": 8,
        "n_beams": 16,
        "obs_noise_db": 1.0,
        "norm_gain": 20.0,
        "norm_bias": 80.0,
        "trace": True,
    },
}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    models: tuple[str, ...]
    seeds: tuple[int, ...]
    epsilons: tuple[float, ...]
    modes: tuple[str, ...]
    params: dict = field(default_factory=dict)
    out: str = "runs"
    workers: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Build and validate; every problem found is reported at once."""
        problems: list[str] = []
        known = {"experiment", "models", "seeds", "epsilons", "modes", "out", "workers", *EXPERIMENTS}
        for key in data:
            if key not in known:
                problems.append(f"unknown key {key!r}")
        experiment = data.get("experiment")
        if experiment not in EXPERIMENTS:
            problems.append(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
        allowed = MODELS.get(experiment, ())
        models = data.get("models", list(allowed))
        if not isinstance(models, list) or not models:
            problems.append("models must be a non-empty list")
            models = []
        for m in models:
            if allowed and m not in allowed:
                problems.append(f"model {m!r} is not available for {experiment}; choose from {allowed}")
        seeds = data.get("seeds")
        if not isinstance(seeds, list) or not seeds:
            problems.append("seeds must be a non-empty list")
            seeds = []
        for s in seeds:
            if not isinstance(s, int) or isinstance(s, bool) or s < 0:
                problems.append(f"seed {s!r} must be a non-negative integer")
        if len(set(map(str, seeds))) != len(seeds):
            problems.append("seeds must be distinct")
        epsilons = data.get("epsilons")
        if not isinstance(epsilons, list) or not epsilons:
            problems.append("epsilons must be a non-empty list")
            epsilons = []
        for e in epsilons:
            if not isinstance(e, (int, float)) or isinstance(e, bool) or not math.isfinite(e) or e < 0:
                problems.append(f"epsilon {e!r} must be a finite number >= 0")
        modes = data.get("modes", ["fgsm", "random-sign", "none"])
        if not isinstance(modes, list) or not modes:
            problems.append("modes must be a non-empty list")
            modes = []
        for m in modes:
            if m not in MODES:
                problems.append(f"mode {m!r} must be one of {MODES}")
        workers = data.get("workers", 1)
        if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
            problems.append(f"workers must be a positive integer, got {workers!r}")
        params: dict = {}
        if experiment in EXPERIMENTS:
            defaults = DEFAULT_PARAMS[experiment]
            given = data.get(experiment, {})
            if not isinstance(given, dict):
                problems.append(f"[{experiment}] must be a table")
                given = {}
            for key, value in given.items():
                if key not in defaults:
                    problems.append(f"unknown {experiment} parameter {key!r}")
                elif not _same_kind(defaults[key], value):
                    problems.append(f"{experiment}.{key} should be like {defaults[key]!r}, got {value!r}")
            # ill-typed values are already reported; range checks run on the defaults instead
            params = {**defaults, **{k: v for k, v in given.items()
                                     if k in defaults and _same_kind(defaults[k], v)}}
            problems += _check_params(experiment, params, epsilons)
        for other in EXPERIMENTS:
            if other != experiment and other in data:
                problems.append(f"table [{other}] does not apply to experiment {experiment!r}")
        if problems:
            raise ConfigError(problems)
        return cls(experiment, tuple(models), tuple(int(s) for s in seeds),
                   tuple(float(e) for e in epsilons), tuple(modes), params,
                   str(data.get("out", "runs")), int(workers))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "models": list(self.models), "seeds": list(self.seeds),
                "epsilons": list(self.epsilons), "modes": list(self.modes),
                self.experiment: dict(self.params)}

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form (output directory and worker count excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       workers: int | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            if seed < 0:
                raise ConfigError([f"seed {seed} must be non-negative"])
            cfg = replace(cfg, seeds=(int(seed),))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        if workers is not None:
            if workers < 1:
                raise ConfigError([f"workers must be a positive integer, got {workers}"])
            cfg = replace(cfg, workers=int(workers))
        return cfg


def _same_kind(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _check_params(experiment: str, p: dict, epsilons: Sequence) -> list[str]:
    problems = []
    positive_int = {
        "poisson": ("grid", "rnn_hidden", "rnn_interior_per_side", "rnn_boundary_per_edge", "pinn_interior",
                    "pinn_boundary", "pinn_batch", "pinn_max_steps"),
        "dlqp": ("epochs", "fixture_points", "landscape_steps"),
        "beamsim": ("train_episodes", "eval_episodes", "sync_period", "history", "n_beams"),
    }[experiment]
    for key in positive_int:
        if isinstance(p[key], int) and p[key] < 1:
            problems.append(f"{experiment}.{key} must be >= 1")
    if experiment == "poisson":
        if p["grid"] < 2:
            problems.append("poisson.grid must be >= 2")
        if p["pinn_dtype"] not in ("float32", "float64"):
            problems.append("poisson.pinn_dtype must be 'float32' or 'float64'")
        if not all(isinstance(h, int) and h > 0 for h in p["pinn_hidden"]):
            problems.append("poisson.pinn_hidden must list positive widths")
    elif experiment == "dlqp":
        if p["label"] not in ("interpolated", "fixed"):
            problems.append("dlqp.label must be 'interpolated' or 'fixed'")
        if not p["t_min"] <= p["t_max"]:
            problems.append("dlqp.t_min must not exceed dlqp.t_max")
        if p["t_step"] <= 0:
            problems.append("dlqp.t_step must be > 0")
        lo, hi = dlqp.FIXTURE_RANGE
        widest = max([float(e) for e in epsilons if isinstance(e, (int, float))] + [p["landscape_half_width"]])
        if not p["eos_csv"] and (p["t_min"] - widest < lo or p["t_max"] + widest > hi):
            problems.append(f"dlqp temperatures +- epsilon must stay inside the table range [{lo}, {hi}]")
    elif experiment == "beamsim":
        if not 0 < p["gamma"] < 1:
            problems.append("beamsim.gamma must lie in (0, 1)")
        if p["norm_gain"] == 0:
            problems.append("beamsim.norm_gain must be nonzero")
        if p["obs_noise_db"] < 0:
            problems.append("beamsim.obs_noise_db must be >= 0")
    return problems


# ---------------------------------------------------------------------------
# reports


@dataclass
class ExperimentReport:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen = set()
        for r in self.rows:
            key = row_key(r)
            if key in seen:
                raise DataError(f"duplicate report key {key}")
            seen.add(key)
        self.rows = sorted(self.rows, key=row_key)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.experiment, r.model, _fmt(r.epsilon), r.mode, r.seed, r.metric, _fmt(r.value)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"metadata": self.metadata, "rows": [asdict(r) for r in self.rows]}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        doc = json.loads(text)
        return cls([ReportRow(**r) for r in doc["rows"]], doc.get("metadata", {}))

    def select(self, **match) -> list[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]


def row_key(r: ReportRow) -> tuple:
    return (r.experiment, r.model, r.epsilon, r.mode, r.seed, r.metric)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


def _lookup(report: ExperimentReport, **match) -> list[float]:
    vals = [r.value for r in report.select(**match)]
    if not vals:
        raise DataError(f"report has no cell {match}")
    return vals


def emit_table1(report: ExperimentReport, epsilons: Sequence[float] = poisson.TABLE1_EPSILONS,
                mode: str = "fgsm") -> list[list]:
    """Median Rel MSE over seeds per model (rows RNN, DNN) and epsilon (columns)."""
    table = [["model", *[_fmt(e) for e in epsilons]]]
    for model, label in TABLE1_LABELS.items():
        row: list = [label]
        for eps in epsilons:
            row.append(statistics.median(_lookup(report, experiment="poisson", model=model,
                                                 epsilon=float(eps), mode=mode, metric="rel_mse")))
        table.append(row)
    return table


def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    m = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return m, se


def emit_error_vs_T(report: ExperimentReport, epsilons: Sequence[float]) -> dict[float, list[tuple]]:
    """Per epsilon: rows (T, fgsm_error, random_error, baseline_error), averaged over seeds."""
    temps = sorted({_temperature(r.metric) for r in report.select(experiment="dlqp", mode="none")
                    if r.metric.startswith("error@T=")})
    if not temps:
        raise DataError("report has no dlqp baseline errors")
    out = {}
    for eps in epsilons:
        series = []
        for T in temps:
            metric = _t_metric(T)
            f = np.mean(_lookup(report, experiment="dlqp", epsilon=float(eps), mode="fgsm", metric=metric))
            r = np.mean(_lookup(report, experiment="dlqp", epsilon=float(eps), mode="random-sign", metric=metric))
            b = np.mean(_lookup(report, experiment="dlqp", epsilon=0.0, mode="none", metric=metric))
            series.append((T, float(f), float(r), float(b)))
        out[float(eps)] = series
    return out


def emit_rate_vs_noise(report: ExperimentReport, epsilons: Sequence[float]) -> dict[str, list[tuple]]:
    """Three series over [0, *epsilons]: (eps, mean rate, standard error, seed count)."""
    series = {"agent-fgsm": ("agent", "fgsm"), "agent-random": ("agent", "random-sign"),
              "sweep-random": ("sweep", "random-sign")}
    out: dict[str, list[tuple]] = {}
    for name, (model, mode) in series.items():
        points = []
        for eps in [0.0, *[float(e) for e in epsilons if e > 0]]:
            vals = _lookup(report, experiment="beamsim", model=model, epsilon=eps,
                           mode="none" if eps == 0 else mode, metric="rate")
            m, se = _mean_se(vals)
            points.append((eps, m, se, len(vals)))
        out[name] = points
    return out


def _t_metric(T: float) -> str:
    return f"error@T={T:.4f}"


def _temperature(metric: str) -> float:
    return float(metric.split("=", 1)[1])


# ---------------------------------------------------------------------------
# model construction and checkpoints


def _ckpt(out: Path, experiment: str, model: str, seed: int, part: str = "") -> Path:
    suffix = f"_{part}" if part else ""
    return out / "checkpoints" / f"{experiment}_{model}{suffix}_seed{seed}.json"


def _rnn_config(p: dict) -> poisson.RnnConfig:
    return poisson.RnnConfig(p["rnn_hidden"], p["rnn_interior_per_side"], p["rnn_boundary_per_edge"],
                             float(p["penalty"]), float(p["rnn_rcond"]))


def _pinn_config(p: dict) -> poisson.PinnConfig:
    return poisson.PinnConfig(hidden=tuple(p["pinn_hidden"]), lr=float(p["pinn_lr"]),
                              n_interior=p["pinn_interior"], n_boundary=p["pinn_boundary"],
                              boundary_weight=float(p["penalty"]), batch_size=p["pinn_batch"],
                              loss_threshold=float(p["pinn_threshold"]), max_steps=p["pinn_max_steps"],
                              dtype=p["pinn_dtype"])


def _beam_config(p: dict) -> beamsim.BeamConfig:
    return beamsim.BeamConfig(n_beams=p["n_beams"], history=p["history"], obs_noise_db=float(p["obs_noise_db"]),
                              normalization=beamsim.NormalizationPolicy(float(p["norm_gain"]),
                                                                        float(p["norm_bias"])))


def _eos(p: dict) -> dlqp.EosTable:
    return dlqp.load_eos_csv(p["eos_csv"]) if p["eos_csv"] else dlqp.synth_eos_fixture(p["fixture_points"])


def _train_meta(cfg: ExperimentConfig, model: str, seed: int) -> dict:
    return {"experiment": cfg.experiment, "model": model, "seed": seed, "config_hash": cfg.config_hash()}


def _load_if_current(path: Path, cfg: ExperimentConfig, model: str, seed: int):
    """Checkpoint at ``path`` if it was produced by the same config; otherwise None."""
    if not path.exists():
        return None
    net, meta = nn.load_checkpoint(path)
    if meta.get("config_hash") != cfg.config_hash():
        log.info("ignoring checkpoint %s from a different config", path)
        return None
    return net, meta


def obtain_model(cfg: ExperimentConfig, model: str, seed: int, out: Path) -> tuple[Any, list[ReportRow], dict]:
    """Load a checkpointed model or train and checkpoint it.

    Returns the model, training-summary rows (deterministic) and timing info.
    Checkpoints are keyed by (experiment, model, seed) and only reused when
    their recorded config hash matches.
    """
    p = cfg.params
    exp = cfg.experiment
    rows: list[ReportRow] = []
    timing: dict = {}
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    meta = _train_meta(cfg, model, seed)
    if exp == "poisson":
        path = _ckpt(out, exp, model, seed)
        cached = _load_if_current(path, cfg, model, seed)
        if model == "rnn":
            if cached:
                rcfg = _rnn_config(p)
                surrogate = poisson.RandomFeatureSolver(cached[0], rcfg, rank=cached[1]["rank"])
                timing["loaded"] = True
            else:
                t0 = time.perf_counter()
                surrogate = poisson.rnn_solve(poisson.PoissonProblem(), seed, _rnn_config(p))
                timing["train_seconds"] = time.perf_counter() - t0
                nn.save_checkpoint(surrogate.network, path, {**meta, "rank": surrogate.rank,
                                                             "train_seconds": timing["train_seconds"]})
            rows.append(ReportRow(exp, model, 0.0, "none", seed, "rank", float(surrogate.rank)))
        else:
            if cached:
                surrogate = poisson.PinnSolver(cached[0], _pinn_config(p), steps=cached[1]["steps"],
                                               final_loss=cached[1]["final_loss"])
                timing["loaded"] = True
            else:
                surrogate = poisson.pinn_train(poisson.PoissonProblem(), _pinn_config(p), seed)
                timing["train_seconds"] = surrogate.train_seconds
                nn.save_checkpoint(surrogate.network, path,
                                   {**meta, "steps": surrogate.steps, "final_loss": surrogate.final_loss,
                                    "train_seconds": surrogate.train_seconds})
            rows.append(ReportRow(exp, model, 0.0, "none", seed, "train_steps", float(surrogate.steps)))
            rows.append(ReportRow(exp, model, 0.0, "none", seed, "final_loss", float(surrogate.final_loss)))
        return surrogate, rows, timing
    if exp == "dlqp":
        eos = _eos(p)
        paths = {s: _ckpt(out, exp, model, seed, s) for s in dlqp.SPECIES}
        cached = {s: _load_if_current(paths[s], cfg, model, seed) for s in dlqp.SPECIES}
        if all(cached.values()):
            qp = dlqp.QuasiPartonModel({s: cached[s][0] for s in dlqp.SPECIES})
            timing["loaded"] = True
        else:
            t0 = time.perf_counter()
            result = dlqp.train(dlqp.QuasiPartonModel.create(seed), eos, epochs=p["epochs"], lr=float(p["lr"]))
            timing["train_seconds"] = time.perf_counter() - t0
            qp = result.model
            for s in dlqp.SPECIES:
                nn.save_checkpoint(qp.networks[s], paths[s], {**meta, "train_seconds": timing["train_seconds"]})
        pred = np.asarray(qp.p_over_t4(eos.T), dtype=float)
        rel = np.abs(pred - eos.p_over_t4) / np.abs(eos.p_over_t4)
        rows.append(ReportRow(exp, model, 0.0, "none", seed, "train_mse", float(np.mean((pred - eos.p_over_t4) ** 2))))
        rows.append(ReportRow(exp, model, 0.0, "none", seed, "max_rel_pressure_error", float(rel.max())))
        return (qp, eos), rows, timing
    bcfg = _beam_config(p)
    path = _ckpt(out, exp, model, seed)
    cached = _load_if_current(path, cfg, model, seed)
    if cached:
        agent = beamsim.QAgent(bcfg, cached[0], cached[0].copy(), float(p["gamma"]), p["sync_period"])
        timing["loaded"] = True
    else:
        t0 = time.perf_counter()
        agent = beamsim.QAgent.create(bcfg, seed, float(p["gamma"]), p["sync_period"])
        agent, curve = beamsim.train_offline(agent, p["train_episodes"], seed)
        timing["train_seconds"] = time.perf_counter() - t0
        nn.save_checkpoint(agent.main, path, {**meta, "learning_curve": curve,
                                              "train_seconds": timing["train_seconds"]})
    return agent, rows, timing


# ---------------------------------------------------------------------------
# work units


def _temperatures(p: dict) -> list[float]:
    n = int(math.floor((p["t_max"] - p["t_min"]) / p["t_step"] + 1e-9)) + 1
    return [round(p["t_min"] + i * p["t_step"], 10) for i in range(n)]


def _unit(args: tuple) -> tuple[list[ReportRow], list[dict], dict]:
    """One (model, seed) unit of a command; runs in a worker process when workers > 1."""
    command, cfg, model, seed, out = args
    out = Path(out)
    surrogate, rows, timing = obtain_model(cfg, model, seed, out)
    failures: list[dict] = []
    p = cfg.params
    exp = cfg.experiment
    t0 = time.perf_counter()
    if command == "train":
        if exp == "poisson":
            err = poisson.evaluate_grid(surrogate, poisson.PoissonProblem(), p["grid"])
            rows.append(ReportRow(exp, model, 0.0, "none", seed, "mse", err.mse))
            rows.append(ReportRow(exp, model, 0.0, "none", seed, "rel_l2", err.rel_l2))
    elif command == "attack":
        if exp == "poisson":
            attack_modes = [m for m in cfg.modes if m != "none"]
            sweep = poisson.poisson_attack_experiment({model: surrogate}, cfg.epsilons, attack_modes, (seed,),
                                                      poisson.PoissonProblem(), p["grid"], failures)
            rows += sweep
        elif exp == "dlqp":
            rows += _dlqp_attack_rows(cfg, surrogate, seed, failures)
        else:
            attack_modes = [m for m in cfg.modes if m != "none"]
            rows += beamsim.beam_sweep(surrogate, surrogate.config, cfg.epsilons, attack_modes, seed,
                                       p["eval_episodes"])
            if p["trace"]:
                trace = beamsim.EpisodeTrace()
                beamsim.evaluate_rate(surrogate, surrogate.config, beamsim.NoiseSpec(), 1, seed, trace=trace)
                trace.write_csv(out / f"trace_{model}_seed{seed}.csv")
    elif command == "landscape":
        rows += _landscape_rows(cfg, surrogate, model, seed)
    timing["sweep_seconds"] = time.perf_counter() - t0
    return rows, failures, {f"{model}/seed{seed}": timing}


def _dlqp_attack_rows(cfg: ExperimentConfig, fitted, seed: int, failures: list) -> list[ReportRow]:
    qp, eos = fitted
    p = cfg.params
    rows = []
    temps = _temperatures(p)
    err = dlqp.absolute_error(qp, eos)
    for T in temps:
        rows.append(ReportRow("dlqp", "dlqp", 0.0, "none", seed, _t_metric(T), err(T)))
    for eps in cfg.epsilons:
        if eps == 0:
            continue
        for T in temps:
            try:
                a = dlqp.attack_temperature(qp, eos, T, eps, p["label"])
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                failures.append({"experiment": "dlqp", "model": "dlqp", "epsilon": eps, "mode": "fgsm",
                                 "seed": seed, "error": f"T={T}: {exc}"})
                continue
            if "fgsm" in cfg.modes:
                rows.append(ReportRow("dlqp", "dlqp", eps, "fgsm", seed, _t_metric(T), a.fgsm_error))
            if "random-sign" in cfg.modes:
                rows.append(ReportRow("dlqp", "dlqp", eps, "random-sign", seed, _t_metric(T), a.random_error))
    return rows


def _landscape_rows(cfg: ExperimentConfig, fitted, model: str, seed: int) -> list[ReportRow]:
    if cfg.experiment != "dlqp":
        raise ConfigError([f"landscape scans are defined for dlqp, not {cfg.experiment}"])
    qp, eos = fitted
    p = cfg.params
    rows = []
    for center in p["landscape_centers"]:
        offsets, losses = dlqp.landscape_scan(qp, eos, float(center), float(p["landscape_half_width"]),
                                              p["landscape_steps"], p["label"])
        for off, loss in zip(offsets, losses):
            rows.append(ReportRow("dlqp", model, 0.0, "none", seed,
                                  f"loss@T0={float(center):.4f},dT={float(off):+.6f}", float(loss)))
    return rows


# ---------------------------------------------------------------------------
# running


def run(cfg: ExperimentConfig, command: str = "attack") -> ExperimentReport:
    """Execute ``command`` (train | attack | landscape) and write all outputs into ``cfg.out``."""
    if command not in ("train", "attack", "landscape"):
        raise ValueError(f"unknown command {command!r}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    units = [(command, cfg, model, seed, str(out)) for model in cfg.models for seed in cfg.seeds]
    started = time.time()
    if cfg.workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_unit, units))
    else:
        results = [_unit(u) for u in units]
    rows, failures, timings = [], [], {}
    for r, f, t in results:
        rows += r
        failures += f
        timings.update(t)
    metadata = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "code_version": CODE_VERSION,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "wall_seconds": time.time() - started,
        "timings": timings,
        "failures": failures,
    }
    report = ExperimentReport(rows, metadata)
    write_report(report, out)
    write_figures(report, cfg, out)
    return report


def write_report(report: ExperimentReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json())


def write_figures(report: ExperimentReport, cfg: ExperimentConfig, out: Path) -> list[Path]:
    """Write the plot-data files that the report's content supports."""
    written = []
    command = report.metadata.get("command")
    if command != "attack":
        if command == "landscape":
            path = out / "fig5_loss_landscape.csv"
            rows = []
            for r in report.rows:
                if not r.metric.startswith("loss@"):
                    continue
                center, off = r.metric.split("@", 1)[1].split(",")
                rows.append((r.model, r.seed, float(center.split("=")[1]), float(off.split("=")[1]), r.value))
            _write_csv(path, ("model", "seed", "T0", "dT", "loss"), rows)
            written.append(path)
        return written
    eps = [e for e in cfg.epsilons if e > 0]
    if cfg.experiment == "poisson":
        if set(TABLE1_LABELS) <= set(cfg.models) and "fgsm" in cfg.modes:
            table = emit_table1(report, eps)
            path = out / "table1_rel_mse.csv"
            _write_csv(path, table[0], table[1:])
            written.append(path)
        path = out / "fig2_poisson_rel_mse_vs_eps.csv"
        rows = []
        for model in cfg.models:
            for mode in [m for m in cfg.modes if m != "none"]:
                for e in eps:
                    vals = _lookup(report, experiment="poisson", model=model, epsilon=float(e), mode=mode,
                                   metric="rel_mse")
                    m, se = _mean_se(vals)
                    rows.append((model, mode, float(e), m, se, len(vals)))
        _write_csv(path, ("model", "mode", "epsilon", "mean_rel_mse", "stderr", "n_seeds"), rows)
        written.append(path)
    elif cfg.experiment == "dlqp" and {"fgsm", "random-sign"} <= set(cfg.modes):
        for e, series in emit_error_vs_T(report, eps).items():
            path = out / f"fig5_error_vs_T_eps{e:g}.csv"
            _write_csv(path, ("T", "fgsm_error", "random_error", "baseline_error"), series)
            written.append(path)
    elif cfg.experiment == "beamsim" and {"fgsm", "random-sign"} <= set(cfg.modes):
        path = out / "fig6d_rate_vs_noise.csv"
        rows = []
        for name, points in emit_rate_vs_noise(report, eps).items():
            rows += [(name, *pt) for pt in points]
        _write_csv(path, ("series", "epsilon", "mean_rate", "stderr", "n_seeds"), rows)
        written.append(path)
    return written


def regenerate(out: Path) -> ExperimentReport:
    """Rebuild CSV and plot data from an existing ``report.json``."""
    path = Path(out) / "report.json"
    if not path.exists():
        raise DataError(f"{path} does not exist; run train/attack/landscape first")
    report = ExperimentReport.from_json(path.read_text())
    cfg = ExperimentConfig.from_dict(report.metadata["config"])
    write_report(report, Path(out))
    write_figures(report, cfg, Path(out))
    return report
