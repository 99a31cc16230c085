"""Synthetic 16-beam receiver, an offline Q-learning beam selector, and attacks on its input.

The user moves along an angular random walk with drift.  Each step the
receiver measures one of three fixed fine beams (round robin) plus a broad
beam; the agent sees the last M such rows and picks one of B beams to serve
with.  A sweep baseline instead cycles through every beam and serves with the
strongest one from its last complete sweep.

Environments are vectorized: one :class:`BeamEnv` runs ``n_envs`` independent
users in lockstep.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .attacks import MODES, PerturbationSpec, ReportRow, perturb
from .errors import TrainingError
from .numerics import RngStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NormalizationPolicy:
    """E = (rsrp + bias) / gain, all in dB."""

    # 20 dB per unit puts measured RSRP in roughly [-1, 1] and the default at -2
    gain: float = 20.0
    bias: float = 80.0

    def __post_init__(self) -> None:
        if self.gain == 0:
            raise ValueError("normalization gain must be nonzero")


def normalize(rsrp, policy: NormalizationPolicy):
    return (np.asarray(rsrp, dtype=float) + policy.bias) / policy.gain


def denormalize(e, policy: NormalizationPolicy):
    return np.asarray(e, dtype=float) * policy.gain - policy.bias


@dataclass(frozen=True)
class BeamConfig:
    n_beams: int = 16
    history: int = 8
    fine_beams: tuple[int, ...] = (2, 7, 12)
    sector_deg: float = 120.0
    lobe_power: float = 20.0
    broad_power: float = 2.0
    sidelobe_db: float = -40.0
    tx_dbm: float = -60.0
    noise_floor_dbm: float = -95.0
    default_dbm: float = -120.0
    obs_noise_db: float = 1.0
    drift_deg: tuple[float, float] = (0.5, 1.0)
    walk_deg: float = 0.7
    episode_length: int = 64
    sweep_period: int = 16
    normalization: NormalizationPolicy = NormalizationPolicy()

    def __post_init__(self) -> None:
        problems = []
        if self.n_beams < 2:
            problems.append("n_beams must be >= 2")
        if self.history < 1:
            problems.append("history must be >= 1")
        if not self.fine_beams or any(not 0 <= b < self.n_beams for b in self.fine_beams):
            problems.append("fine_beams must be beam indices in [0, n_beams)")
        if self.obs_noise_db < 0:
            problems.append("obs_noise_db must be >= 0")
        if self.episode_length < 1:
            problems.append("episode_length must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def n_fine(self) -> int:
        return len(self.fine_beams)

    @property
    def obs_dim(self) -> int:
        return self.history * (self.n_fine + 1)

    @property
    def beam_angles(self) -> np.ndarray:
        half = math.radians(self.sector_deg) / 2
        step = 2 * half / self.n_beams
        return -half + step * (np.arange(self.n_beams) + 0.5)


def _lobe_db(delta, power: float, floor_db: float):
    c = np.maximum(np.cos(delta), 1e-12)
    return np.maximum(10.0 * power * np.log10(c), floor_db)


class BeamEnv:
    """``n_envs`` independent users, each with its own trajectory and measurement history."""

    def __init__(self, config: BeamConfig, n_envs: int, stream: RngStream):
        self.config = config
        self.n_envs = n_envs
        self.rng = stream.generator
        self.t = 0
        self.angle = np.zeros(n_envs)
        self.drift = np.zeros(n_envs)
        self.rows = np.full((n_envs, config.history, config.n_fine + 1), config.default_dbm)
        self.measured = np.zeros(self.rows.shape, dtype=bool)
        self.prev_rsrp: np.ndarray | None = None

    # -- channel -------------------------------------------------------------

    def true_rsrp(self, angle=None) -> np.ndarray:
        """(n_envs, n_beams) noiseless RSRP in dBm."""
        c = self.config
        a = self.angle if angle is None else angle
        delta = a[:, None] - c.beam_angles[None, :]
        return c.tx_dbm + _lobe_db(delta, c.lobe_power, c.sidelobe_db)

    def broad_rsrp(self) -> np.ndarray:
        c = self.config
        return c.tx_dbm - 6.0 + _lobe_db(self.angle, c.broad_power, c.sidelobe_db)

    def best_beam(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest index on ties
        return np.argmax(self.true_rsrp(), axis=1)

    def snr_db(self, beams) -> np.ndarray:
        rsrp = self.true_rsrp()[np.arange(self.n_envs), beams]
        return rsrp - self.config.noise_floor_dbm

    def rate(self, beams) -> np.ndarray:
        """Spectral efficiency log2(1 + SNR) of the served beams, from the true RSRP."""
        return np.log2(1.0 + 10.0 ** (self.snr_db(beams) / 10.0))

    # -- dynamics -------------------------------------------------------------

    def _advance(self) -> None:
        c = self.config
        half = math.radians(c.sector_deg) / 2
        self.angle = self.angle + self.drift + math.radians(c.walk_deg) * self.rng.standard_normal(self.n_envs)
        over = self.angle > half
        under = self.angle < -half
        self.angle = np.where(over, 2 * half - self.angle, np.where(under, -2 * half - self.angle, self.angle))
        self.drift = np.where(over | under, -self.drift, self.drift)
        self.t += 1

    def _measure_row(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.config
        row = np.full((self.n_envs, c.n_fine + 1), c.default_dbm)
        mask = np.zeros(row.shape, dtype=bool)
        j = self.t % c.n_fine
        noise = c.obs_noise_db * self.rng.standard_normal((self.n_envs, 2))
        row[:, j] = self.true_rsrp()[:, c.fine_beams[j]] + noise[:, 0]
        row[:, c.n_fine] = self.broad_rsrp() + noise[:, 1]
        mask[:, j] = True
        mask[:, c.n_fine] = True
        return row, mask

    def _push(self, row, mask) -> None:
        self.rows = np.concatenate([self.rows[:, 1:], row[:, None]], axis=1)
        self.measured = np.concatenate([self.measured[:, 1:], mask[:, None]], axis=1)

    def reset(self) -> np.ndarray:
        """Start new trajectories and fill the history with M measurement rows."""
        c = self.config
        half = math.radians(c.sector_deg) / 2
        self.t = 0
        self.angle = self.rng.uniform(-0.85 * half, 0.85 * half, self.n_envs)
        lo, hi = (math.radians(v) for v in c.drift_deg)
        self.drift = self.rng.uniform(lo, hi, self.n_envs) * self.rng.choice([-1.0, 1.0], self.n_envs)
        self.rows[:] = c.default_dbm
        self.measured[:] = False
        for _ in range(c.history):
            self._push(*self._measure_row())
            self._advance()
        self.t = 0
        self.prev_rsrp = None
        return self.observation()

    def observation(self) -> np.ndarray:
        """Normalized, flattened history (oldest row first), shape (n_envs, M*(N+1))."""
        return normalize(self.rows, self.config.normalization).reshape(self.n_envs, -1)

    def observation_mask(self) -> np.ndarray:
        return self.measured.reshape(self.n_envs, -1).copy()

    def step(self, actions) -> tuple[np.ndarray, np.ndarray]:
        """Serve with ``actions``, then move and measure; returns (new rows, reward in dB)."""
        actions = np.asarray(actions)
        if actions.shape != (self.n_envs,) or np.any((actions < 0) | (actions >= self.config.n_beams)):
            raise ValueError(f"actions must be {self.n_envs} beam indices in [0, {self.config.n_beams})")
        rsrp = self.true_rsrp()[np.arange(self.n_envs), actions]
        reward = np.zeros(self.n_envs) if self.prev_rsrp is None else rsrp - self.prev_rsrp
        self.prev_rsrp = rsrp
        self._advance()
        row, mask = self._measure_row()
        self._push(row, mask)
        return normalize(row, self.config.normalization), reward


def env_step(env: BeamEnv, action) -> tuple[np.ndarray, np.ndarray]:
    """Functional form of :meth:`BeamEnv.step`."""
    return env.step(action)


def bellman_target(r, gamma: float, max_q_next):
    """y = r + gamma * max_a' Q_target(s', a')."""
    return np.asarray(r, dtype=float) + gamma * np.asarray(max_q_next, dtype=float)


# ---------------------------------------------------------------------------
# agent


def q_network_spec(config: BeamConfig, hidden: int = 64) -> nn.NetworkSpec:
    return nn.mlp_spec(config.obs_dim, (hidden, hidden), config.n_beams, activation="tanh")


@dataclass
class QAgent:
    config: BeamConfig
    main: nn.Network
    target: nn.Network
    gamma: float = 0.9
    sync_period: int = 200
    # Q is learned on rewards scaled to units of 10 dB; argmax is unaffected
    reward_scale: float = 0.1
    updates: int = 0

    @classmethod
    def create(cls, config: BeamConfig, seed: int, gamma: float = 0.9, sync_period: int = 200) -> "QAgent":
        if not 0 < gamma < 1:
            raise ValueError(f"discount must lie in (0, 1), got {gamma}")
        if sync_period < 1:
            raise ValueError("sync period must be >= 1")
        main = nn.network_new(q_network_spec(config), seed, stream=21)
        return cls(config, main, main.copy(), gamma, sync_period)

    def q_values(self, obs, network: nn.Network | None = None) -> np.ndarray:
        net = self.main if network is None else network
        return np.asarray(net.forward(np.atleast_2d(np.asarray(obs, dtype=float))))

    def sync(self) -> None:
        self.target = self.main.copy()


def select_action(agent: QAgent, observation) -> np.ndarray | int:
    """Greedy beam per observation row; ties go to the lowest index."""
    obs = np.asarray(observation, dtype=float)
    actions = np.argmax(agent.q_values(obs), axis=1)
    return int(actions[0]) if obs.ndim == 1 else actions


@dataclass
class ReplayBuffer:
    capacity: int
    obs_dim: int
    size: int = 0
    cursor: int = 0
    s: np.ndarray = field(init=False)
    a: np.ndarray = field(init=False)
    r: np.ndarray = field(init=False)
    s2: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.s = np.zeros((self.capacity, self.obs_dim))
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity)
        self.s2 = np.zeros((self.capacity, self.obs_dim))

    def add(self, s, a, r, s2) -> None:
        for i in range(len(a)):
            k = self.cursor
            self.s[k], self.a[k], self.r[k], self.s2[k] = s[i], a[i], r[i], s2[i]
            self.cursor = (k + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int):
        idx = rng.integers(0, self.size, batch)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx]


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 480
    parallel_envs: int = 16
    batch_size: int = 128
    updates_per_step: int = 2
    lr: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    replay_capacity: int = 50_000
    warmup: int = 1000
    divergence: float = 1e6


def q_regression_loss(agent: QAgent, bound, s, a, y):
    q = agent.main.forward(s, bound)
    onehot = np.zeros(ad.value_of(q).shape)
    onehot[np.arange(len(a)), a] = 1.0
    chosen = ad.reduce_sum(ad.mul(q, onehot), axis=1)
    r = ad.sub(chosen, y)
    return ad.mean(ad.mul(r, r))


def train_offline(agent: QAgent, episodes: int | None = None, seed: int = 0,
                  train: TrainConfig = TrainConfig()) -> tuple[QAgent, list[float]]:
    """Epsilon-greedy collection into replay plus minibatch regression to Bellman targets.

    Returns the agent and a learning curve: mean per-step reward (dB) of each
    round of ``parallel_envs`` episodes.
    """
    cfg = agent.config
    episodes = train.episodes if episodes is None else episodes
    rounds = max(1, math.ceil(episodes / train.parallel_envs))
    env = BeamEnv(cfg, train.parallel_envs, RngStream(seed, 22))
    rng = RngStream(seed, 23).generator
    replay = ReplayBuffer(train.replay_capacity, cfg.obs_dim)
    state = nn.AdamState(lr=train.lr)
    params = agent.main.parameters()
    curve = []
    total_steps = rounds * cfg.episode_length
    step = 0
    for _ in range(rounds):
        obs = env.reset()
        rewards = []
        for _ in range(cfg.episode_length):
            frac = min(1.0, step / max(1, 0.6 * total_steps))
            eps = train.epsilon_start + frac * (train.epsilon_end - train.epsilon_start)
            greedy = select_action(agent, obs)
            explore = rng.random(env.n_envs) < eps
            actions = np.where(explore, rng.integers(0, cfg.n_beams, env.n_envs), greedy)
            _, reward = env.step(actions)
            nxt = env.observation()
            replay.add(obs, actions, reward, nxt)
            rewards.append(reward.mean())
            obs = nxt
            step += 1
            if replay.size < train.warmup:
                continue
            for _ in range(train.updates_per_step):
                s, a, r, s2 = replay.sample(rng, train.batch_size)
                q_next = agent.q_values(s2, agent.target)
                if not np.all(np.isfinite(q_next)) or np.max(np.abs(q_next)) > train.divergence:
                    raise TrainingError("Q-values diverged", {"update": agent.updates})
                y = bellman_target(agent.reward_scale * r, agent.gamma, q_next.max(axis=1))
                _, grads = nn.loss_and_grads(agent.main, lambda bound: q_regression_loss(agent, bound, s, a, y))
                params = nn.adam_step(state, params, grads)
                agent.main.set_parameters(params)
                agent.updates += 1
                if agent.updates % agent.sync_period == 0:
                    agent.sync()
        curve.append(float(np.mean(rewards)))
    return agent, curve


# ---------------------------------------------------------------------------
# attacks and evaluation


def attack_observation(agent: QAgent, observation, epsilon: float, mode: str, seed: int = 0,
                       mask=None, stream: int = 0) -> np.ndarray:
    """Perturb measured entries of normalized observations by ``epsilon``.

    FGSM ascends ``-Q(s, a*)`` for the currently selected ``a*``; random mode
    adds independent +-epsilon.  ``mask`` marks measured entries; entries
    holding the default value are never touched.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    obs = np.atleast_2d(np.asarray(observation, dtype=float))
    if mask is None:
        default = normalize(agent.config.default_dbm, agent.config.normalization)
        mask = obs != default
    actions = np.argmax(agent.q_values(obs), axis=1)
    onehot = np.zeros((len(obs), agent.config.n_beams))
    onehot[np.arange(len(obs)), actions] = 1.0

    def loss(x):
        return ad.neg(ad.reduce_sum(ad.mul(agent.main.forward(x), onehot)))

    spec = PerturbationSpec(mode, epsilon, mask=mask, seed=seed, stream=stream)
    out = perturb(loss, obs, spec)
    return out.reshape(np.shape(observation))


@dataclass(frozen=True)
class NoiseSpec:
    mode: str = "none"
    epsilon: float = 0.0


@dataclass
class EpisodeTrace:
    step: list = field(default_factory=list)
    true_best_beam: list = field(default_factory=list)
    selected_beam: list = field(default_factory=list)
    rsrp_selected_dbm: list = field(default_factory=list)
    rate: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "true_best_beam", "selected_beam", "rsrp_selected_dBm", "rate"])
            for row in zip(self.step, self.true_best_beam, self.selected_beam,
                           self.rsrp_selected_dbm, self.rate):
                w.writerow([row[0], row[1], row[2], repr(float(row[3])), repr(float(row[4]))])


def evaluate_rate(policy, config: BeamConfig, noise: NoiseSpec = NoiseSpec(), episodes: int = 32,
                  seed: int = 0, stream: int = 0, trace: EpisodeTrace | None = None) -> float:
    """Mean log2(1 + SNR) per step of ``policy`` (a QAgent or ``"sweep"``).

    All episodes run in lockstep on one vectorized environment drawn from
    ``(seed, 100)``: every policy and noise setting evaluated with the same
    seed faces the same trajectories and measurement noise.  ``stream`` only
    selects the perturbation draws.  ``trace`` (if given) records the first
    episode.
    """
    env = BeamEnv(config, episodes, RngStream(seed, 100))
    obs = env.reset()
    noise_stream = RngStream(seed, 200 + stream)
    is_sweep = isinstance(policy, str)
    if is_sweep and policy != "sweep":
        raise ValueError(f"unknown policy {policy!r}")
    if is_sweep and noise.mode == "fgsm":
        raise ValueError("the sweep baseline has no gradient to attack")
    if is_sweep:
        # a full sweep before the episode starts, then one beam per step
        sweep = env.true_rsrp() + config.obs_noise_db * env.rng.standard_normal((episodes, config.n_beams))
        latest = sweep.copy()
        current = np.argmax(sweep, axis=1)
    rates = []
    for t in range(config.episode_length):
        if is_sweep:
            b = t % config.n_beams
            meas = env.true_rsrp()[:, b] + config.obs_noise_db * env.rng.standard_normal(episodes)
            if noise.mode == "random-sign" and noise.epsilon > 0:
                signs = 2.0 * noise_stream.generator.integers(0, 2, episodes) - 1.0
                meas = meas + noise.epsilon * config.normalization.gain * signs
            latest[:, b] = meas
            actions = current
            if (t + 1) % config.sweep_period == 0:
                current = np.argmax(latest, axis=1)
        else:
            x = obs
            if noise.mode != "none" and noise.epsilon > 0:
                x = attack_observation(policy, obs, noise.epsilon, noise.mode, seed=seed,
                                       mask=env.observation_mask(), stream=(stream << 16) + t)
            actions = select_action(policy, x)
        r = env.rate(actions)
        rates.append(r)
        if trace is not None:
            trace.step.append(t)
            trace.true_best_beam.append(int(env.best_beam()[0]))
            trace.selected_beam.append(int(actions[0]))
            trace.rsrp_selected_dbm.append(float(env.true_rsrp()[0, actions[0]]))
            trace.rate.append(float(r[0]))
        env.step(actions)
        obs = env.observation()
    return float(np.mean(rates))


def beam_sweep(agent: QAgent, config: BeamConfig, epsilons: Sequence[float], modes: Sequence[str],
               seed: int, episodes: int = 32) -> list[ReportRow]:
    """Rates of one trained agent and the sweep baseline over a noise grid.

    The agent is evaluated under every mode; the sweep baseline has no
    gradient, so it only sees random-sign noise.
    """
    rows = [ReportRow("beamsim", "sweep", 0.0, "none", seed, "rate",
                      evaluate_rate("sweep", config, NoiseSpec(), episodes, seed)),
            ReportRow("beamsim", "agent", 0.0, "none", seed, "rate",
                      evaluate_rate(agent, config, NoiseSpec(), episodes, seed))]
    for i, eps in enumerate(epsilons):
        for j, mode in enumerate(modes):
            if mode == "none":
                continue
            stream = 1 + i * len(MODES) + MODES.index(mode)
            value = evaluate_rate(agent, config, NoiseSpec(mode, float(eps)), episodes, seed, stream=stream)
            rows.append(ReportRow("beamsim", "agent", float(eps), mode, seed, "rate", value))
            if mode == "random-sign":
                value = evaluate_rate("sweep", config, NoiseSpec(mode, float(eps)), episodes, seed, stream=stream)
                rows.append(ReportRow("beamsim", "sweep", float(eps), mode, seed, "rate", value))
    return rows
