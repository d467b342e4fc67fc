"""Exploration metrics and empirical checks of the flow-matching theory.

Everything here is a pure function of its inputs plus an explicit RNG.
Reports are small dataclasses with ``to_dict`` for JSON export; curves and
sweeps also have CSV writers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .envs import DiscreteDag, PointRobotConfig, Trajectory, dag_enumerate_trajectories, terminal_reward
from .flow_model import estimate_outflow

HALF_PI = math.pi / 2.0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(obj, path: str | Path) -> None:
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# -- valid-distinctive trajectories ----------------------------------------


@dataclass(frozen=True)
class DistinctiveCountConfig:
    delta_r: float = 0.5
    delta_mse: float = 0.02
    sample_count: int = 10_000

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def count_valid_distinctive_arrays(states: np.ndarray, returns: np.ndarray, config: DistinctiveCountConfig) -> int:
    """Greedy scan in the given order over ``states`` of shape ``(n, T, state_dim)``.

    A trajectory is accepted when its return is at least ``delta_r`` and its
    flattened state sequence has MSE above ``delta_mse`` to every trajectory
    accepted before it.
    """
    states = np.asarray(states, dtype=float)
    returns = np.asarray(returns, dtype=float)
    if states.ndim != 3 or len(states) != len(returns):
        raise ValueError("states must be (n, T, state_dim) and match returns")
    flat = states.reshape(len(states), -1)
    accepted = np.empty((0, flat.shape[1]))
    for i in np.flatnonzero(returns >= config.delta_r):
        x = flat[i]
        if len(accepted) == 0 or np.min(np.mean((accepted - x) ** 2, axis=1)) > config.delta_mse:
            accepted = np.vstack([accepted, x])
    return len(accepted)


def count_valid_distinctive(trajectories: Sequence[Trajectory], config: DistinctiveCountConfig) -> int:
    if not trajectories:
        return 0
    lengths = {len(t) for t in trajectories}
    if len(lengths) != 1:
        raise ValueError(f"trajectories have mixed lengths {sorted(lengths)}")
    states = np.stack([t.states() for t in trajectories])
    returns = np.array([t.ret for t in trajectories])
    return count_valid_distinctive_arrays(states, returns, config)


# -- reward distribution curve ---------------------------------------------


def max_min_normalize(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    if hi > lo:
        return (v - lo) / (hi - lo)
    return np.zeros_like(v)


def local_maxima(values) -> np.ndarray:
    """Indices of local maxima, endpoints included.

    A point counts when it is strictly above its left neighbour and not below
    its right one (so a plateau reports its left edge). Endpoints compare with
    their single neighbour.
    """
    v = np.asarray(values, dtype=float)
    n = len(v)
    if n < 2:
        return np.arange(0)
    peaks = []
    for i in range(n):
        if i == 0:
            is_peak = v[0] > v[1]
        elif i == n - 1:
            is_peak = v[-1] > v[-2]
        else:
            is_peak = v[i] > v[i - 1] and v[i] >= v[i + 1]
        if is_peak:
            peaks.append(i)
    return np.array(peaks, dtype=int)


@dataclass
class RewardCurve:
    grid: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray
    truth_raw: np.ndarray
    truth_normalized: np.ndarray
    state: np.ndarray
    remaining_steps: int

    def peaks(self) -> np.ndarray:
        return self.grid[local_maxima(self.raw)]

    def truth_peaks(self) -> np.ndarray:
        return self.grid[local_maxima(self.truth_raw)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["peaks"] = self.peaks()
        d["truth_peaks"] = self.truth_peaks()
        return d

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "flow", "flow_normalized", "truth", "truth_normalized"])
            for row in zip(self.grid, self.raw, self.normalized, self.truth_raw, self.truth_normalized):
                w.writerow([repr(float(x)) for x in row])


def ground_truth_curve(state, grid: np.ndarray, env_config: PointRobotConfig, remaining_steps: int) -> np.ndarray:
    """Terminal reward after walking ``remaining_steps`` unit steps along each angle."""
    s = np.asarray(state, dtype=float)
    ends = s + remaining_steps * np.stack([np.cos(grid), np.sin(grid)], axis=1)
    return np.asarray(terminal_reward(ends, env_config), dtype=float)


def reward_distribution_curve(
    flow,
    state,
    grid_size: int = 91,
    env_config: PointRobotConfig | None = None,
    remaining_steps: int = 5,
) -> RewardCurve:
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    env_config = env_config or PointRobotConfig()
    grid = np.linspace(0.0, HALF_PI, grid_size)
    s = np.asarray(state, dtype=float)
    raw = np.asarray(flow(np.tile(s, (grid_size, 1)), grid[:, None]), dtype=float)
    truth = ground_truth_curve(s, grid, env_config, remaining_steps)
    return RewardCurve(grid, raw, max_min_normalize(raw), truth, max_min_normalize(truth), s, remaining_steps)


def peaks_match(curve: RewardCurve, tol: float = 0.15) -> tuple[bool, list[tuple[float, float | None]]]:
    """Each ground-truth peak paired with a distinct learned peak within ``tol`` rad."""
    learned = list(curve.peaks())
    pairs = []
    ok = len(learned) >= 2 and len(curve.truth_peaks()) >= 2
    for tp in curve.truth_peaks():
        if not learned:
            pairs.append((float(tp), None))
            ok = False
            continue
        j = int(np.argmin([abs(lp - tp) for lp in learned]))
        lp = learned.pop(j)
        pairs.append((float(tp), float(lp)))
        ok = ok and abs(lp - tp) <= tol
    return ok, pairs


# -- estimator convergence -------------------------------------------------


def midpoint_quadrature(fn: Callable[[np.ndarray], np.ndarray], lower, upper, n_points: int = 1_000_000) -> float:
    """Tensor midpoint rule with about ``n_points`` nodes over a box."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    d = len(lower)
    per_dim = max(1, int(round(n_points ** (1.0 / d))))
    axes = [lo + (np.arange(per_dim) + 0.5) * (hi - lo) / per_dim for lo, hi in zip(lower, upper)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    vol = float(np.prod(upper - lower))
    total = 0.0
    for lo in range(0, len(mesh), 250_000):
        total += float(np.sum(fn(mesh[lo : lo + 250_000])))
    return vol * total / len(mesh)


def hoeffding_radius(K, lipschitz: float, mu_A: float, diameter: float, confidence: float = 0.95) -> np.ndarray:
    """``t`` at which the two-sided tail bound ``2 exp(-K t^2 / (2 (L mu D)^2))`` equals ``1 - confidence``."""
    K = np.asarray(K, dtype=float)
    scale = lipschitz * mu_A * diameter
    return scale * np.sqrt(2.0 * np.log(2.0 / (1.0 - confidence)) / K)


@dataclass
class EstimatorErrorReport:
    K_values: list[int]
    truth: float
    errors: list[np.ndarray]
    p95: np.ndarray
    slope: float | None
    bound_p95: np.ndarray | None = None

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.K_values, self.K_values[1:])):
            raise ValueError("K values must be strictly increasing")

    def monotone(self, tolerance: float = 0.05) -> bool:
        return all(b <= a * (1.0 + tolerance) for a, b in zip(self.p95, self.p95[1:]))

    def slope_within(self, lo: float = -0.65, hi: float = -0.35) -> bool:
        return self.slope is not None and lo <= self.slope <= hi

    def to_dict(self) -> dict:
        return {
            "K_values": self.K_values,
            "truth": self.truth,
            "p95": self.p95,
            "mean_abs_error": [float(np.mean(e)) for e in self.errors],
            "slope": self.slope,
            "bound_p95": self.bound_p95,
            "monotone": self.monotone(),
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "p95_error", "mean_abs_error", "bound_p95"])
            for i, K in enumerate(self.K_values):
                bound = "" if self.bound_p95 is None else repr(float(self.bound_p95[i]))
                w.writerow([K, repr(float(self.p95[i])), repr(float(np.mean(self.errors[i]))), bound])


def estimator_error_sweep(
    analytic_flow: Callable[[np.ndarray], np.ndarray],
    mu_A: float,
    K_list: Sequence[int],
    trials: int,
    rng: np.random.Generator,
    lower=0.0,
    upper=HALF_PI,
    lipschitz: float | None = None,
    quadrature_points: int = 1_000_000,
) -> EstimatorErrorReport:
    """Repeat the outflow estimate ``trials`` times per ``K`` against a quadrature oracle.

    ``analytic_flow`` maps actions of shape ``(N, action_dim)`` to flows.
    The fitted slope is of ``log(p95 error)`` on ``log K``; it is ``None``
    when any p95 error is zero (for example a constant integrand).
    """
    if trials < 30:
        raise ValueError("trials must be >= 30")
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    K_list = [int(k) for k in K_list]
    truth = midpoint_quadrature(analytic_flow, lower, upper, quadrature_points)
    state = np.zeros(1)

    def flow(_states, actions):
        return analytic_flow(actions)

    errors = []
    for K in K_list:
        errs = np.empty(trials)
        for t in range(trials):
            actions = rng.uniform(lower, upper, size=(K, len(lower)))
            errs[t] = abs(estimate_outflow(flow, state, actions, mu_A) - truth)
        errors.append(errs)
    p95 = np.array([np.quantile(e, 0.95) for e in errors])
    slope = None
    if len(K_list) >= 2 and np.all(p95 > 0):
        slope = float(np.polyfit(np.log(K_list), np.log(p95), 1)[0])
    bound = None
    if lipschitz is not None:
        bound = hoeffding_radius(K_list, lipschitz, mu_A, float(np.linalg.norm(upper - lower)))
    return EstimatorErrorReport(K_list, truth, errors, p95, slope, bound)


# -- discrete flow oracle --------------------------------------------------


@dataclass
class DagFlowReport:
    passed: bool
    conservation_ok: bool
    violation_node: int | None = None
    violation: tuple[float, float] | None = None
    node_flows: dict[int, float] = field(default_factory=dict)
    paths: list[list[int]] = field(default_factory=list)
    path_flows: list[float] = field(default_factory=list)
    max_node_error: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def _close(a: float, b: float, tol: float) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def dag_flow_oracle_check(dag: DiscreteDag, tol: float = 1e-12) -> DagFlowReport:
    """Check node conservation, then rebuild every node flow from path flows.

    Path flow is the product of its edge flows divided by the product of the
    flows of its interior nodes. The check passes when summing path flows over
    the paths through each node gives back that node's flow.
    """
    flows = dag.edge_flow()
    inflow = np.zeros(dag.n_nodes)
    outflow = np.zeros(dag.n_nodes)
    for (u, v), f in flows.items():
        outflow[u] += f
        inflow[v] += f
    for node in range(dag.n_nodes):
        if node in (dag.source, dag.sink):
            continue
        if not _close(inflow[node], outflow[node], tol):
            return DagFlowReport(False, False, node, (float(inflow[node]), float(outflow[node])))

    node_flow = {node: float(inflow[node]) for node in range(dag.n_nodes)}
    node_flow[dag.source] = float(outflow[dag.source])

    paths = dag_enumerate_trajectories(dag)
    path_flows = []
    through = np.zeros(dag.n_nodes)
    for path in paths:
        num = math.prod(flows[(u, v)] for u, v in zip(path[:-1], path[1:]))
        den = math.prod(node_flow[s] for s in path[1:-1])
        pf = num / den if den > 0 else 0.0
        path_flows.append(pf)
        for s in path:
            through[s] += pf
    errors = [abs(through[n] - node_flow[n]) / max(1.0, node_flow[n]) for n in range(dag.n_nodes)
              if through[n] > 0 or node_flow[n] > 0]
    max_err = max(errors) if errors else 0.0
    return DagFlowReport(max_err <= tol, True, None, None, node_flow, paths, path_flows, max_err)


def diamond_dag() -> DiscreteDag:
    return DiscreteDag(4, [(0, 1, 2.0), (0, 2, 3.0), (1, 3, 2.0), (2, 3, 3.0)], source=0, sink=3)


def random_path_sum_dag(n_nodes: int, rng: np.random.Generator, edge_prob: float = 0.4) -> DiscreteDag:
    """Random layered DAG whose edge flows are sums of random positive path flows.

    Node ``0`` is the source and ``n_nodes - 1`` the sink; edges only go from
    lower to higher index, and every node lies on a source-to-sink path.
    """
    if n_nodes < 2:
        raise ValueError("need at least a source and a sink")
    sink = n_nodes - 1
    edges = set()
    for v in range(1, sink):
        edges.add((int(rng.integers(0, v)), v))
        edges.add((v, int(rng.integers(v + 1, n_nodes))))
    for u in range(n_nodes - 1):
        for v in range(u + 1, n_nodes):
            if u != sink and v != 0 and rng.random() < edge_prob:
                edges.add((u, v))
    if n_nodes == 2:
        edges.add((0, 1))
    skeleton = DiscreteDag(n_nodes, [(u, v, 0.0) for u, v in sorted(edges)], 0, sink)
    totals = {e: 0.0 for e in edges}
    for path in dag_enumerate_trajectories(skeleton):
        f = float(rng.uniform(0.1, 2.0))
        for e in zip(path[:-1], path[1:]):
            totals[e] += f
    return DiscreteDag(n_nodes, [(u, v, totals[(u, v)]) for u, v in sorted(edges)], 0, sink)


# -- Lipschitz tracking ----------------------------------------------------


@dataclass
class LipschitzReport:
    action_ratio_max: np.ndarray
    state_ratio_max: np.ndarray

    @property
    def action_lipschitz(self) -> float:
        return float(self.action_ratio_max[-1])

    @property
    def state_lipschitz(self) -> float:
        return float(self.state_ratio_max[-1])

    def to_dict(self) -> dict:
        return {
            "action_lipschitz": self.action_lipschitz,
            "state_lipschitz": self.state_lipschitz,
            "samples": len(self.action_ratio_max),
            "action_ratio_max": self.action_ratio_max,
            "state_ratio_max": self.state_ratio_max,
        }


def lipschitz_estimate(
    flow,
    sample_pairs: int,
    rng: np.random.Generator,
    spec,
    state_lower=None,
    state_upper=None,
) -> LipschitzReport:
    """Running maxima of ``|dF|/|da|`` and ``|dF|/|ds|`` over random pairs in bounds.

    The state box defaults to ``[0, max_episode_len]`` in every coordinate.
    """
    if sample_pairs < 1:
        raise ValueError("sample_pairs must be >= 1")
    ds = spec.state_dim
    s_lo = np.zeros(ds) if state_lower is None else np.asarray(state_lower, dtype=float)
    s_hi = np.full(ds, float(spec.max_episode_len)) if state_upper is None else np.asarray(state_upper, dtype=float)
    n = sample_pairs
    s = rng.uniform(s_lo, s_hi, size=(n, ds))
    s2 = rng.uniform(s_lo, s_hi, size=(n, ds))
    a = spec.sample_actions(rng, n)
    a2 = spec.sample_actions(rng, n)
    f = np.asarray(flow(s, a), dtype=float)
    fa = np.asarray(flow(s, a2), dtype=float)
    fs = np.asarray(flow(s2, a), dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ra = np.abs(f - fa) / np.linalg.norm(a - a2, axis=1)
        rs = np.abs(f - fs) / np.linalg.norm(s - s2, axis=1)
    ra = np.where(np.isfinite(ra), ra, 0.0)
    rs = np.where(np.isfinite(rs), rs, 0.0)
    return LipschitzReport(np.maximum.accumulate(ra), np.maximum.accumulate(rs))
