"""Replay storage, retrieval pretraining, the log-scale flow-matching loss and
the training loop.

Random streams
--------------
Every random draw comes from ``stream(seed, name, *index)``, a
``numpy.random.Generator`` seeded with ``SeedSequence([seed, STREAMS[name],
*index])``. Episode ``i`` is always collected with ``stream(seed, "collect",
i)``, so the collected data does not depend on how many workers run it.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import PointRobotEnv, Trajectory, Transition, make_env
from .flow_model import (
    FlowNetwork,
    RetrievalNetwork,
    build_action_buffer,
    greedy_action,
    sample_action,
    selection_probabilities,
)
from .nn import NonFiniteError, adam_init, adam_update, backward_from_cache, forward_with_cache, save_params

log = logging.getLogger(__name__)

STREAMS = {
    "flow_init": 1,
    "retrieval_init": 2,
    "collect": 3,
    "minibatch": 4,
    "loss_actions": 5,
    "retrieval_fit": 6,
    "eval": 7,
}


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], *map(int, index)]))


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingAborted(RuntimeError):
    pass


# -- replay -----------------------------------------------------------------


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.rewards)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "TransitionBatch":
        return cls(
            np.stack([t.state for t in transitions]),
            np.stack([np.atleast_1d(t.action) for t in transitions]),
            np.array([t.reward for t in transitions], dtype=float),
            np.stack([t.next_state for t in transitions]),
            np.array([t.done for t in transitions], dtype=bool),
        )

    @classmethod
    def concat(cls, batches: Sequence["TransitionBatch"]) -> "TransitionBatch":
        return cls(*(np.concatenate([getattr(b, f.name) for b in batches]) for f in fields(cls)))

    def take(self, idx) -> "TransitionBatch":
        return TransitionBatch(*(getattr(self, f.name)[idx] for f in fields(self)))


class ReplayBuffer:
    """Episode ring holding at most ``capacity`` transitions; evicts whole episodes."""

    def __init__(self, capacity: int = 8000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.episodes: deque[TransitionBatch] = deque()
        self.size = 0
        self._flat: TransitionBatch | None = None

    def __len__(self):
        return self.size

    def add(self, episode: Trajectory | TransitionBatch) -> None:
        if isinstance(episode, Trajectory):
            episode = TransitionBatch.from_transitions(episode.transitions)
        if len(episode) > self.capacity:
            raise ValueError(f"episode of {len(episode)} transitions exceeds capacity {self.capacity}")
        self.episodes.append(episode)
        self.size += len(episode)
        while self.size > self.capacity:
            self.size -= len(self.episodes.popleft())
        self._flat = None

    def all(self) -> TransitionBatch:
        if not self.episodes:
            raise ValueError("replay buffer is empty")
        if self._flat is None:
            self._flat = TransitionBatch.concat(list(self.episodes))
        return self._flat

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        flat = self.all()
        return flat.take(rng.integers(0, len(flat), size=batch_size))


# -- retrieval --------------------------------------------------------------


def retrieval_mse(retrieval: RetrievalNetwork, batch: TransitionBatch) -> float:
    pred = retrieval(batch.next_states, batch.actions)
    return float(np.mean(np.sum((pred - batch.states) ** 2, axis=1)))


def pretrain_retrieval(
    data: ReplayBuffer | TransitionBatch,
    retrieval: RetrievalNetwork,
    epochs: int,
    lr: float,
    rng: np.random.Generator | None = None,
    batch_size: int = 128,
) -> tuple[RetrievalNetwork, float]:
    """Fit ``G(s', a) -> s`` by minibatch Adam on squared error.

    Returns the updated network and its mean squared error (summed over
    state coordinates) on the whole dataset.
    """
    batch = data.all() if isinstance(data, ReplayBuffer) else data
    if len(batch) == 0:
        raise ValueError("no transitions to fit the retrieval network on")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.concatenate([batch.next_states, batch.actions], axis=1)
    y = batch.states
    params = retrieval.params
    opt = adam_init(params)
    n = len(x)
    for _ in range(int(epochs)):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            out, cache = forward_with_cache(params, x[idx])
            upstream = 2.0 * (out - y[idx]) / len(idx)
            params, opt = adam_update(params, backward_from_cache(params, cache, upstream), opt, lr)
    fitted = replace(retrieval, params=params)
    return fitted, retrieval_mse(fitted, batch)


# -- loss -------------------------------------------------------------------


@dataclass
class LossTerms:
    inflow_log: np.ndarray
    target_log: np.ndarray
    residual: np.ndarray

    @property
    def loss(self) -> float:
        return float(np.mean(self.residual))


def _log_eps_sum_exp(log_flows: np.ndarray, log_offset: np.ndarray):
    """``log(exp(log_offset) + sum_k exp(log_flows[:, k]))`` and softmax weights of the flows."""
    m = np.maximum(log_offset, log_flows.max(axis=1))
    w = np.exp(log_flows - m[:, None])
    total = np.exp(log_offset - m) + w.sum(axis=1)
    return m + np.log(total), w / total[:, None]


def flow_matching_loss_log(
    flow: FlowNetwork,
    retrieval,
    batch: TransitionBatch,
    K: int,
    lam: float,
    epsilon: float,
    mu_A: float,
    rng: np.random.Generator | None,
    spec=None,
    terminal_outflow: str = "drop",
    reward_scale: float = 1.0,
    actions: np.ndarray | None = None,
    with_grad: bool = True,
):
    """Log-scale flow-matching loss over the batch's ``next_state`` entries.

    For each state ``s`` with reward ``R`` and ``K`` uniform actions ``a_k``::

        inflow = log(eps + sum_k exp Flog(G(s, a_k), a_k))
        target = log(eps + lam * R + [keep outflow] * sum_k exp Flog(s, a_k))

    The outflow sum is dropped at terminal states when ``terminal_outflow``
    is ``"drop"``. One action draw is shared by inflow and outflow.
    ``actions`` (shape ``(B, K, action_dim)``) overrides the draw. The
    retrieval network is held fixed; gradients are w.r.t. the flow network
    only. Returns ``(loss, grads, terms)``; ``grads`` is ``None`` when
    ``with_grad`` is false.
    """
    if terminal_outflow not in ("drop", "keep"):
        raise ValueError(f"terminal_outflow must be 'drop' or 'keep', got {terminal_outflow!r}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    ds, da = flow.state_dim, flow.action_dim
    if actions is None:
        actions = spec.sample_actions(rng, B * K).reshape(B, K, da)
    actions = np.asarray(actions, dtype=float).reshape(B, K, da)
    K = actions.shape[1]

    s = np.repeat(batch.next_states, K, axis=0)
    a = actions.reshape(B * K, da)
    parents = np.asarray(retrieval(s, a), dtype=float)
    x = np.concatenate([np.concatenate([parents, a], axis=1), np.concatenate([s, a], axis=1)])
    out, cache = forward_with_cache(flow.params, x)
    f_in = out[: B * K, 0].reshape(B, K)
    f_out = out[B * K :, 0].reshape(B, K)

    keep = np.ones(B, dtype=bool) if terminal_outflow == "keep" else ~batch.dones
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        inflow_log, w_in = _log_eps_sum_exp(f_in, np.full(B, math.log(epsilon)))
        base = epsilon + lam * reward_scale * batch.rewards
        f_out_masked = np.where(keep[:, None], f_out, -np.inf)
        target_log, w_out = _log_eps_sum_exp(f_out_masked, np.log(base))
    diff = inflow_log - target_log
    residual = diff * diff
    if not np.all(np.isfinite(residual)):
        bad = int(np.flatnonzero(~np.isfinite(residual))[0])
        raise NonFiniteError(
            f"non-finite flow-matching residual for batch transition {bad}: "
            f"next_state={batch.next_states[bad]}, reward={batch.rewards[bad]}, done={bool(batch.dones[bad])}"
        )
    terms = LossTerms(inflow_log, target_log, residual)
    if not with_grad:
        return terms.loss, None, terms
    coef = (2.0 / B) * diff
    g_in = coef[:, None] * w_in
    g_out = -coef[:, None] * np.where(keep[:, None], w_out, 0.0)
    upstream = np.concatenate([g_in.reshape(-1), g_out.reshape(-1)])[:, None]
    grads = backward_from_cache(flow.params, cache, upstream)
    return terms.loss, grads, terms


# -- rollouts ---------------------------------------------------------------


def collect_episode(
    env: PointRobotEnv,
    flow,
    M: int,
    rng: np.random.Generator,
    mode: str = "sample",
    sampler: str = "proportional",
) -> Trajectory:
    if mode not in ("sample", "greedy"):
        raise ValueError(f"mode must be 'sample' or 'greedy', got {mode!r}")
    state = env.reset()
    transitions = []
    total = 0.0
    for t in range(env.spec.max_episode_len):
        buf = build_action_buffer(flow, state, M, rng, env.spec)
        action = greedy_action(buf) if mode == "greedy" else sample_action(buf, rng, sampler)
        next_state, reward, done = env.step(action)
        transitions.append(Transition(state, np.array(action, dtype=float), reward, next_state, done, t))
        total += reward
        state = next_state
        if done:
            break
    return Trajectory(transitions, total)


@dataclass
class EpisodeBatch:
    """Many episodes stored as arrays; ``states[:, t]`` is the state after step ``t``."""

    start: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.returns)

    def trajectories(self, env: PointRobotEnv) -> list[Trajectory]:
        out = []
        T = self.states.shape[1]
        for i in range(len(self)):
            prev = self.start
            trs = []
            for t in range(T):
                done = t == T - 1
                r = float(self.returns[i]) if done else 0.0
                trs.append(Transition(prev, self.actions[i, t], r, self.states[i, t], done, t))
                prev = self.states[i, t]
            out.append(Trajectory(trs, float(self.returns[i])))
        return out


def rollout_batch(
    env: PointRobotEnv,
    flow,
    n_episodes: int,
    M: int,
    rng: np.random.Generator,
    mode: str = "sample",
    sampler: str = "proportional",
    max_rows: int = 200_000,
) -> EpisodeBatch:
    """Lock-step rollouts of ``n_episodes`` with the same per-step selection rule as
    :func:`collect_episode`, vectorised across episodes."""
    spec = env.spec
    T = spec.max_episode_len
    start = np.asarray(env.config.start, dtype=float)
    states = np.tile(start, (n_episodes, 1))
    all_states = np.empty((n_episodes, T, spec.state_dim))
    all_actions = np.empty((n_episodes, T, spec.action_dim))
    returns = np.zeros(n_episodes)
    chunk = max(1, max_rows // M)
    for t in range(T):
        chosen = np.empty((n_episodes, spec.action_dim))
        for lo in range(0, n_episodes, chunk):
            hi = min(n_episodes, lo + chunk)
            n = hi - lo
            cand = spec.sample_actions(rng, n * M).reshape(n, M, spec.action_dim)
            s_rep = np.repeat(states[lo:hi], M, axis=0)
            flows = np.asarray(flow(s_rep, cand.reshape(n * M, -1))).reshape(n, M)
            if mode == "greedy":
                idx = np.argmax(flows, axis=1)
            else:
                if sampler == "proportional":
                    p = flows / flows.sum(axis=1, keepdims=True)
                else:
                    p = np.stack([selection_probabilities(f, sampler) for f in flows])
                c = np.cumsum(p, axis=1)
                u = rng.random(n)[:, None] * c[:, -1:]
                idx = np.minimum((c <= u).sum(axis=1), M - 1)
            chosen[lo:hi] = cand[np.arange(n), idx]
        states, rewards, _ = env.step_batch(states, chosen[:, 0], t)
        all_states[:, t] = states
        all_actions[:, t] = chosen
        returns += rewards
    return EpisodeBatch(start, all_states, all_actions, returns)


# -- config and loop --------------------------------------------------------


@dataclass
class TrainConfig:
    env_id: str | None = None
    total_timesteps: int = 100_000
    start_training_timestep: int = 4_000
    M: int = 1_000
    K: int = 100
    batch_size: int = 128
    learning_rate: float = 3e-4
    lam: float | None = None
    epsilon: float = 1.0
    flow_hidden: tuple[int, ...] = (256, 256)
    retrieval_hidden: tuple[int, ...] = (256, 256, 256)
    seed: int = 0
    sampler: str = "proportional"
    terminal_outflow: str = "drop"
    replay_capacity: int = 8_000
    reward_scale: float = 1.0
    updates_per_step: int = 1
    retrieval_lr: float = 1e-3
    retrieval_batch_size: int = 128
    retrieval_pretrain_epochs: int = 100
    retrieval_finetune_interval: int = 1_000
    retrieval_finetune_epochs: int = 10
    log_interval: int = 1_000
    checkpoint_interval: int = 10_000
    activation: str = "silu"
    precision: str = "float64"
    workers: int = 1
    log_wallclock: bool = False

    def validate(self) -> "TrainConfig":
        if not self.env_id:
            raise ConfigError("env_id", "an environment id is required")
        positive = ["total_timesteps", "start_training_timestep", "M", "K", "batch_size", "replay_capacity",
                    "updates_per_step", "retrieval_batch_size", "log_interval", "workers"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("learning_rate", "retrieval_lr", "epsilon", "reward_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, f"must be > 0, got {getattr(self, name)}")
        if self.lam is not None and not self.lam > 0:
            raise ConfigError("lam", f"must be > 0 or 'auto', got {self.lam}")
        for name in ("retrieval_pretrain_epochs", "retrieval_finetune_interval", "retrieval_finetune_epochs",
                     "checkpoint_interval"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        if self.sampler not in ("proportional", "softmax"):
            raise ConfigError("sampler", f"must be proportional or softmax, got {self.sampler!r}")
        if self.terminal_outflow not in ("drop", "keep"):
            raise ConfigError("terminal_outflow", f"must be drop or keep, got {self.terminal_outflow!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision", f"must be float64 or float32, got {self.precision!r}")
        if self.activation not in ("silu", "tanh"):
            raise ConfigError("activation", f"must be silu or tanh, got {self.activation!r}")
        if not self.flow_hidden or any(h < 1 for h in self.flow_hidden):
            raise ConfigError("flow_hidden", "needs at least one positive layer width")
        if not self.retrieval_hidden or any(h < 1 for h in self.retrieval_hidden):
            raise ConfigError("retrieval_hidden", "needs at least one positive layer width")
        return self

    def resolved_lambda(self, mu_A: float) -> float:
        return self.K / mu_A if self.lam is None else float(self.lam)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flow_hidden"] = list(self.flow_hidden)
        d["retrieval_hidden"] = list(self.retrieval_hidden)
        return d


DESK_CONFIG = TrainConfig(
    env_id="point-robot-sparse",
    total_timesteps=20_000,
    start_training_timestep=2_000,
    M=100,
    K=20,
    batch_size=32,
    learning_rate=3e-4,
    epsilon=1.0,
    flow_hidden=(64, 64),
    retrieval_hidden=(64, 64, 64),
)


@dataclass
class LogRecord:
    timestep: int
    loss: float
    mean_return: float
    retrieval_mse: float
    seconds: float | None


@dataclass
class TrainingLog:
    records: list[LogRecord] = field(default_factory=list)
    update_losses: list[float] = field(default_factory=list)
    episode_returns: list[float] = field(default_factory=list)
    clamped_actions: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestep", "loss", "mean_return", "retrieval_mse", "seconds"])
            for r in self.records:
                w.writerow([r.timestep, repr(r.loss), repr(r.mean_return), repr(r.retrieval_mse),
                            "" if r.seconds is None else f"{r.seconds:.3f}"])

    def window_mean(self, first: bool, n: int = 1000) -> float:
        losses = self.update_losses[:n] if first else self.update_losses[-n:]
        return float(np.mean(losses)) if losses else float("nan")


def _dtype(precision: str):
    return np.float32 if precision == "float32" else np.float64


def train(
    config: TrainConfig,
    env: PointRobotEnv | None = None,
    out_dir: str | Path | None = None,
) -> tuple[FlowNetwork, RetrievalNetwork, TrainingLog]:
    """Collect, store, fit retrieval once warm-up ends, then one flow update per new step.

    The loop collects ``workers`` episodes per round against the current flow
    snapshot. With ``out_dir`` set, checkpoints go to ``out_dir/checkpoints``.
    """
    config.validate()
    env = env or make_env(config.env_id)
    spec = env.spec
    dtype = _dtype(config.precision)
    seed = config.seed
    lam = config.resolved_lambda(spec.mu_A)

    flow = FlowNetwork.create(spec.state_dim, spec.action_dim, config.flow_hidden,
                              stream(seed, "flow_init"), config.activation, dtype)
    retrieval = RetrievalNetwork.create(spec.state_dim, spec.action_dim, config.retrieval_hidden,
                                        stream(seed, "retrieval_init"), config.activation, dtype)
    opt = adam_init(flow.params)
    buffer = ReplayBuffer(config.replay_capacity)
    batch_rng = stream(seed, "minibatch")
    action_rng = stream(seed, "loss_actions")
    fit_rng = stream(seed, "retrieval_fit")

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    tlog = TrainingLog()
    t0 = time.perf_counter()
    timestep = 0
    episode_index = 0
    pretrained = False
    mse = float("nan")
    next_finetune = config.start_training_timestep + config.retrieval_finetune_interval
    next_log = config.log_interval
    next_ckpt = config.checkpoint_interval or None
    interval_losses: list[float] = []
    interval_returns: list[float] = []
    envs = [PointRobotEnv(env.config, env.env_id) for _ in range(config.workers)]
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    def run_episode(i, worker_env, snapshot):
        return collect_episode(worker_env, snapshot, config.M, stream(seed, "collect", i), "sample", config.sampler)

    try:
        while timestep < config.total_timesteps:
            snapshot = flow
            ids = range(episode_index, episode_index + config.workers)
            if pool is None:
                episodes = [run_episode(ids[0], envs[0], snapshot)]
            else:
                episodes = list(pool.map(run_episode, ids, envs, [snapshot] * config.workers))
            episode_index += config.workers
            prev = timestep
            for ep in episodes:
                buffer.add(ep)
                timestep += len(ep)
                interval_returns.append(ep.ret)
                tlog.episode_returns.append(ep.ret)

            if not pretrained and timestep >= config.start_training_timestep and timestep < config.total_timesteps:
                retrieval, mse = pretrain_retrieval(buffer, retrieval, config.retrieval_pretrain_epochs,
                                                    config.retrieval_lr, fit_rng, config.retrieval_batch_size)
                pretrained = True
                log.info("retrieval pretrained at step %d, mse %.3g", timestep, mse)
            elif pretrained and config.retrieval_finetune_interval and timestep >= next_finetune:
                retrieval, mse = pretrain_retrieval(buffer, retrieval, config.retrieval_finetune_epochs,
                                                    config.retrieval_lr, fit_rng, config.retrieval_batch_size)
                while next_finetune <= timestep:
                    next_finetune += config.retrieval_finetune_interval

            if pretrained:
                new_steps = timestep - max(prev, config.start_training_timestep)
                for _ in range(max(0, new_steps) * config.updates_per_step):
                    batch = buffer.sample(config.batch_size, batch_rng)
                    try:
                        loss, grads, _ = flow_matching_loss_log(
                            flow, retrieval, batch, config.K, lam, config.epsilon, spec.mu_A, action_rng,
                            spec, config.terminal_outflow, config.reward_scale)
                        params, opt = adam_update(flow.params, grads, opt, config.learning_rate)
                    except NonFiniteError as exc:
                        if ckpt_dir is not None:
                            save_params(flow.params, ckpt_dir / "flow_last_good.ckpt")
                            save_params(retrieval.params, ckpt_dir / "retrieval_last_good.ckpt")
                        raise TrainingAborted(f"aborted at timestep {timestep}: {exc}") from exc
                    flow = replace(flow, params=params)
                    interval_losses.append(loss)
                    tlog.update_losses.append(loss)

            while timestep >= next_log:
                tlog.records.append(LogRecord(
                    next_log,
                    float(np.mean(interval_losses)) if interval_losses else float("nan"),
                    float(np.mean(interval_returns)) if interval_returns else float("nan"),
                    mse,
                    time.perf_counter() - t0 if config.log_wallclock else None,
                ))
                interval_losses, interval_returns = [], []
                next_log += config.log_interval

            if ckpt_dir is not None and next_ckpt is not None and timestep >= next_ckpt:
                save_params(flow.params, ckpt_dir / f"flow_step{next_ckpt}.ckpt")
                save_params(retrieval.params, ckpt_dir / f"retrieval_step{next_ckpt}.ckpt")
                next_ckpt += config.checkpoint_interval
    finally:
        if pool is not None:
            pool.shutdown()

    tlog.clamped_actions = sum(e.clamped_actions for e in envs)
    if ckpt_dir is not None:
        save_params(flow.params, ckpt_dir / "flow.ckpt")
        save_params(retrieval.params, ckpt_dir / "retrieval.ckpt")
    return flow, retrieval, tlog
