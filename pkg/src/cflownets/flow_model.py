"""Edge-flow and retrieval networks, buffer-based action selection, and the
Monte Carlo inflow/outflow estimators.

The flow network outputs log-flows; every public function that talks about a
"flow" means ``exp`` of that output, so flows are positive by construction.

Estimators accept either a network wrapper or a plain callable, which lets the
same code be checked against analytic integrands:

* flow callable: ``f(states (N, ds), actions (N, da)) -> flows (N,)``
* parent callable: ``g(next_states (N, ds), actions (N, da)) -> states (N, ds)``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .nn import MlpParams, NonFiniteError, ShapeError, mlp_forward_batch, mlp_init, mlp_zeros


@dataclass(frozen=True)
class FlowNetwork:
    params: MlpParams
    state_dim: int
    action_dim: int

    def __post_init__(self):
        dims = self.params.layer_dims
        if dims[0] != self.state_dim + self.action_dim or dims[-1] != 1:
            raise ShapeError(
                f"flow network needs input {self.state_dim + self.action_dim} and output 1, got {dims}"
            )

    @classmethod
    def create(cls, state_dim, action_dim, hidden, seed, activation="silu", dtype=np.float64, zero=False):
        dims = [state_dim + action_dim, *hidden, 1]
        params = mlp_zeros(dims, activation, dtype) if zero else mlp_init(dims, seed, activation, dtype)
        return cls(params, state_dim, action_dim)

    def log_flow(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        return mlp_forward_batch(self.params, x)[:, 0]

    def __call__(self, states, actions) -> np.ndarray:
        out = self.log_flow(states, actions)
        with np.errstate(over="ignore"):
            flows = np.exp(out)
        if not np.all(np.isfinite(flows)):
            bad = int(np.flatnonzero(~np.isfinite(flows))[0])
            raise NonFiniteError(f"non-finite edge flow at row {bad} (log-flow {out[bad]!r})")
        return flows


@dataclass(frozen=True)
class RetrievalNetwork:
    params: MlpParams
    state_dim: int
    action_dim: int

    def __post_init__(self):
        dims = self.params.layer_dims
        if dims[0] != self.state_dim + self.action_dim or dims[-1] != self.state_dim:
            raise ShapeError(
                f"retrieval network needs input {self.state_dim + self.action_dim} "
                f"and output {self.state_dim}, got {dims}"
            )

    @classmethod
    def create(cls, state_dim, action_dim, hidden, seed, activation="silu", dtype=np.float64, zero=False):
        dims = [state_dim + action_dim, *hidden, state_dim]
        params = mlp_zeros(dims, activation, dtype) if zero else mlp_init(dims, seed, activation, dtype)
        return cls(params, state_dim, action_dim)

    def __call__(self, next_states, actions) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(next_states), np.atleast_2d(actions)], axis=1)
        out = mlp_forward_batch(self.params, x)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("retrieval network produced a non-finite parent state")
        return out


FlowLike = Union[FlowNetwork, Callable[[np.ndarray, np.ndarray], np.ndarray]]
ParentLike = Union[RetrievalNetwork, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def edge_flow(flow: FlowLike, s, a) -> float:
    s = np.atleast_1d(np.asarray(s, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    value = float(np.asarray(flow(s[None, :], a[None, :])).reshape(-1)[0])
    if not np.isfinite(value) or value <= 0:
        raise NonFiniteError(f"edge flow {value!r} at s={s}, a={a} is not a finite positive number")
    return value


@dataclass(frozen=True)
class ActionProbabilityBuffer:
    actions: np.ndarray
    flows: np.ndarray

    @property
    def normalization(self) -> float:
        return float(self.flows.sum())

    def __len__(self):
        return len(self.flows)


def build_action_buffer(flow: FlowLike, s, M: int, rng: np.random.Generator, spec) -> ActionProbabilityBuffer:
    """Draw ``M`` uniform actions from the action box and score them in one pass."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    actions = spec.sample_actions(rng, M)
    states = np.broadcast_to(np.asarray(s, dtype=float), (M, spec.state_dim))
    flows = np.asarray(flow(states, actions), dtype=float)
    return ActionProbabilityBuffer(actions, flows)


def selection_probabilities(flows: np.ndarray, sampler: str = "proportional") -> np.ndarray:
    flows = np.asarray(flows, dtype=float)
    if sampler == "proportional":
        total = flows.sum()
        if not total > 0 or not np.isfinite(total):
            raise ZeroDivisionError(f"buffer normalization is {total!r}")
        return flows / total
    if sampler == "softmax":
        z = flows - flows.max()
        w = np.exp(z)
        return w / w.sum()
    raise ValueError(f"unknown sampler {sampler!r}")


def sample_index(flows: np.ndarray, rng: np.random.Generator, sampler: str = "proportional") -> int:
    p = selection_probabilities(flows, sampler)
    # inverse-CDF draw; searchsorted keeps this exact for tiny buffers
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


def sample_action(buffer: ActionProbabilityBuffer, rng: np.random.Generator, sampler: str = "proportional") -> np.ndarray:
    if len(buffer) == 0:
        raise ValueError("empty action buffer")
    return buffer.actions[sample_index(buffer.flows, rng, sampler)]


def greedy_action(buffer: ActionProbabilityBuffer) -> np.ndarray:
    if len(buffer) == 0:
        raise ValueError("empty action buffer")
    return buffer.actions[int(np.argmax(buffer.flows))]


def retrieve_parent(retrieval: ParentLike, s_next, a) -> np.ndarray:
    s_next = np.atleast_1d(np.asarray(s_next, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    out = np.asarray(retrieval(s_next[None, :], a[None, :]), dtype=float)[0]
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite parent prediction for s'={s_next}, a={a}")
    return out


def estimate_outflow(flow: FlowLike, s, sampled_actions, mu_A: float) -> float:
    """``mu_A / K * sum_k F(s, a_k)`` for uniformly drawn ``a_k``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    actions = np.asarray(sampled_actions, dtype=float)
    if actions.ndim == 1:
        actions = actions[:, None]
    K = len(actions)
    if K < 1:
        raise ValueError("need at least one sampled action")
    states = np.broadcast_to(s, (K, len(s)))
    return float(mu_A / K * np.sum(flow(states, actions)))


def estimate_inflow(flow: FlowLike, retrieval: ParentLike, s, sampled_actions, mu_A: float) -> float:
    """``mu_A / K * sum_k F(G(s, a_k), a_k)`` with parents from the retrieval model."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    actions = np.asarray(sampled_actions, dtype=float)
    if actions.ndim == 1:
        actions = actions[:, None]
    K = len(actions)
    if K < 1:
        raise ValueError("need at least one sampled action")
    states = np.broadcast_to(s, (K, len(s)))
    parents = np.asarray(retrieval(states, actions), dtype=float)
    return float(mu_A / K * np.sum(flow(parents, actions)))
