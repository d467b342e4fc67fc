"""Sparse-reward point-robot environments and a small discrete DAG type.

The robot starts at a fixed point and takes ``episode_len`` unit steps, each
along an angle in ``[0, pi/2]``. Only the final step is rewarded, with a
Gaussian bump around the nearest goal. Step length and reward shape are
choices of this package; the task description only fixes the start point,
the goals and the episode length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HALF_PI = math.pi / 2.0


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_lower: np.ndarray
    action_upper: np.ndarray
    mu_A: float
    diam_A: float
    diam_S: float
    max_episode_len: int

    @classmethod
    def box(cls, state_dim, lower, upper, diam_S, max_episode_len) -> "EnvSpec":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if np.any(upper <= lower):
            raise ValueError("action box must have upper > lower in every dimension")
        if max_episode_len < 1:
            raise ValueError("max_episode_len must be >= 1")
        width = upper - lower
        return cls(
            state_dim=state_dim,
            action_dim=len(lower),
            action_lower=lower,
            action_upper=upper,
            mu_A=float(np.prod(width)),
            diam_A=float(np.linalg.norm(width)),
            diam_S=float(diam_S),
            max_episode_len=int(max_episode_len),
        )

    def sample_actions(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` i.i.d. uniform actions in the box, shape ``(n, action_dim)``."""
        return rng.uniform(self.action_lower, self.action_upper, size=(n, self.action_dim))


@dataclass(frozen=True)
class PointRobotConfig:
    start: tuple[float, float] = (0.0, 0.0)
    goals: tuple[tuple[float, float], ...] = ((5.0, 10.0), (10.0, 5.0))
    reward_sigma: float = 2.0
    episode_len: int = 12

    def __post_init__(self):
        if not self.goals:
            raise ValueError("PointRobotConfig needs at least one goal")
        if self.reward_sigma <= 0:
            raise ValueError("reward_sigma must be positive")
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    step_index: int


@dataclass
class Trajectory:
    transitions: list[Transition]
    ret: float = 0.0

    def __len__(self):
        return len(self.transitions)

    def states(self) -> np.ndarray:
        """Visited states after each step, shape ``(len, state_dim)``."""
        return np.stack([t.next_state for t in self.transitions])

    def as_arrays(self):
        tr = self.transitions
        return (
            np.stack([t.state for t in tr]),
            np.stack([t.action for t in tr]),
            np.array([t.reward for t in tr], dtype=float),
            np.stack([t.next_state for t in tr]),
            np.array([t.done for t in tr], dtype=bool),
        )


def terminal_reward(state, config: PointRobotConfig) -> np.ndarray | float:
    """``max_g exp(-|s-g|^2 / (2 sigma^2))``; accepts a single state or a stack."""
    s = np.asarray(state, dtype=float)
    goals = np.asarray(config.goals, dtype=float)
    d2 = np.sum((s[..., None, :] - goals) ** 2, axis=-1)
    r = np.exp(-d2.min(axis=-1) / (2.0 * config.reward_sigma**2))
    return float(r) if r.ndim == 0 else r


def translation(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def closed_form_parent(next_state, action) -> np.ndarray:
    """Exact parent ``s' - (cos a, sin a)`` of a point-robot transition."""
    a = np.asarray(action, dtype=float)
    if a.ndim and a.shape[-1] == 1:
        a = a[..., 0]
    return np.asarray(next_state, dtype=float) - translation(a)


class PointRobotEnv:
    def __init__(self, config: PointRobotConfig | None = None, env_id: str = "point-robot-sparse"):
        self.config = config or PointRobotConfig()
        self.env_id = env_id
        n = self.config.episode_len
        # quarter disc of radius n: two arc endpoints are n*sqrt(2) apart
        self.spec = EnvSpec.box(2, [0.0], [HALF_PI], n * math.sqrt(2.0), n)
        self.state = np.asarray(self.config.start, dtype=float)
        self.step_index = 0
        self.clamped_actions = 0

    def reset(self) -> np.ndarray:
        self.state = np.asarray(self.config.start, dtype=float).copy()
        self.step_index = 0
        return self.state.copy()

    def clamp(self, action) -> tuple[float, bool]:
        theta = float(np.asarray(action, dtype=float).reshape(-1)[0])
        clipped = min(max(theta, 0.0), HALF_PI)
        return clipped, clipped != theta

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        theta, was_clamped = self.clamp(action)
        if was_clamped:
            self.clamped_actions += 1
        next_state = self.state + np.array([math.cos(theta), math.sin(theta)])
        self.step_index += 1
        done = self.step_index >= self.config.episode_len
        reward = terminal_reward(next_state, self.config) if done else 0.0
        self.state = next_state
        return next_state.copy(), reward, done

    def terminal_reward(self, state):
        return terminal_reward(state, self.config)

    def step_batch(self, states: np.ndarray, thetas: np.ndarray, step_index: int):
        """Vectorised step for many independent episodes at the same step index."""
        thetas = np.clip(np.asarray(thetas, dtype=float).reshape(-1), 0.0, HALF_PI)
        next_states = states + translation(thetas)
        done = step_index + 1 >= self.config.episode_len
        if done:
            rewards = terminal_reward(next_states, self.config)
        else:
            rewards = np.zeros(len(states))
        return next_states, np.atleast_1d(rewards), done


ENV_CONFIGS = {
    "point-robot-sparse": PointRobotConfig(),
    "point-robot-onegoal-sparse": PointRobotConfig(goals=((5.0, 10.0),)),
}


def make_env(env_id: str, **overrides) -> PointRobotEnv:
    try:
        base = ENV_CONFIGS[env_id]
    except KeyError:
        raise KeyError(f"unknown env id {env_id!r}; known: {sorted(ENV_CONFIGS)}") from None
    if overrides:
        fields = dict(base.__dict__)
        fields.update(overrides)
        base = PointRobotConfig(**fields)
    return PointRobotEnv(base, env_id)


# -- discrete DAG -----------------------------------------------------------


class CycleError(ValueError):
    pass


@dataclass
class DiscreteDag:
    n_nodes: int
    edges: list[tuple[int, int, float]]
    source: int = 0
    sink: int | None = None
    _children: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.sink is None:
            self.sink = self.n_nodes - 1
        self._children = {u: [] for u in range(self.n_nodes)}
        seen = set()
        for u, v, f in self.edges:
            if (u, v) in seen:
                raise ValueError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))
            if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
                raise ValueError(f"edge ({u}, {v}) references a missing node")
            if f < 0:
                raise ValueError(f"edge ({u}, {v}) has negative flow {f}")
            self._children[u].append(v)
        if any(v == self.source for _, v, _ in self.edges):
            raise ValueError("source must have no incoming edges")
        if self._children[self.sink]:
            raise ValueError("sink must have no outgoing edges")

    def children(self, u: int) -> list[int]:
        return self._children[u]

    def edge_flow(self) -> dict[tuple[int, int], float]:
        return {(u, v): f for u, v, f in self.edges}

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_nodes, self.n_nodes), dtype=np.int64)
        for u, v, _ in self.edges:
            adj[u, v] = 1
        return adj


def dag_enumerate_trajectories(dag: DiscreteDag) -> list[list[int]]:
    """All source-to-sink node paths, depth first, children in edge order."""
    WHITE, GREY, BLACK = 0, 1, 2
    colour = [WHITE] * dag.n_nodes

    def check(u):
        colour[u] = GREY
        for v in dag.children(u):
            if colour[v] == GREY:
                raise CycleError(f"cycle through edge {u}->{v}")
            if colour[v] == WHITE:
                check(v)
        colour[u] = BLACK

    for u in range(dag.n_nodes):
        if colour[u] == WHITE:
            check(u)

    paths: list[list[int]] = []
    stack = [(dag.source, [dag.source])]
    while stack:
        u, path = stack.pop()
        if u == dag.sink:
            paths.append(path)
            continue
        for v in reversed(dag.children(u)):
            stack.append((v, path + [v]))
    return paths
