"""Command-line entry point: ``cflownets {train,eval,verify,sweep-k}``.

Exit codes: 0 success, 1 a verification criterion failed, 2 bad usage or
configuration.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from ._alloc import tune_allocator
from .analysis import (
    DistinctiveCountConfig,
    count_valid_distinctive_arrays,
    dag_flow_oracle_check,
    diamond_dag,
    estimator_error_sweep,
    lipschitz_estimate,
    random_path_sum_dag,
    write_json,
)
from .config import parse_overrides, parse_value, resolve_config
from .envs import ENV_CONFIGS, make_env
from .flow_model import FlowNetwork
from .nn import (
    ShapeError,
    max_relative_error,
    mlp_backward,
    mlp_init,
    mlp_zeros,
    load_params,
    numerical_gradient,
)
from .training import (
    STREAMS,
    ConfigError,
    EpisodeBatch,
    TrainConfig,
    TrainingAborted,
    rollout_batch,
    stream,
    train,
)

log = logging.getLogger("cflownets")

SEED_RULE = (
    "stream(seed, name, *index) = numpy default_rng(SeedSequence([seed, id, *index])) with ids "
    + ", ".join(f"{k}={v}" for k, v in STREAMS.items())
)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class UsageError(Exception):
    pass


# -- train ------------------------------------------------------------------


def _train_config_from_args(args) -> TrainConfig:
    cli_values = {}
    for f in fields(TrainConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            cli_values[f.name] = parse_value(f.name, raw)
    if args.seed is not None:
        cli_values["seed"] = args.seed
    if args.workers is not None:
        cli_values["workers"] = args.workers
    cli_values.update(parse_overrides(args.override))
    return resolve_config(args.config, cli_values)


def cmd_train(args) -> int:
    config = _train_config_from_args(args)
    out_dir = Path(args.out_dir or "runs/train")
    out_dir.mkdir(parents=True, exist_ok=True)
    env = make_env(config.env_id)
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "version": __version__,
        "started": _now(),
        "finished": None,
        "resolved_lambda": config.resolved_lambda(env.spec.mu_A),
        "hidden_activation": config.activation,
        "seed_rule": SEED_RULE,
        "outputs": {
            "manifest": "manifest.json",
            "train_log": "train_log.csv",
            "flow_checkpoint": "checkpoints/flow.ckpt",
            "retrieval_checkpoint": "checkpoints/retrieval.ckpt",
            "metrics": "metrics.json",
        },
    }
    write_json(manifest, out_dir / "manifest.json")
    t0 = time.perf_counter()
    try:
        flow, retrieval, tlog = train(config, env, out_dir)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    tlog.write_csv(out_dir / "train_log.csv")
    returns = tlog.episode_returns
    metrics = {
        "updates": len(tlog.update_losses),
        "first_window_loss": tlog.window_mean(first=True),
        "final_window_loss": tlog.window_mean(first=False),
        "final_retrieval_mse": tlog.records[-1].retrieval_mse if tlog.records else None,
        "mean_return_last_100_episodes": float(np.mean(returns[-100:])) if returns else None,
        "episodes": len(returns),
        "clamped_actions": tlog.clamped_actions,
        "seconds": time.perf_counter() - t0,
    }
    write_json(metrics, out_dir / "metrics.json")
    manifest["finished"] = _now()
    write_json(manifest, out_dir / "manifest.json")
    print(json.dumps({k: metrics[k] for k in ("updates", "first_window_loss", "final_window_loss")}))
    return 0


# -- eval -------------------------------------------------------------------


def _resolve_checkpoint(path: Path) -> tuple[Path, dict | None]:
    if path.is_dir():
        manifest = path / "manifest.json"
        info = json.loads(manifest.read_text()) if manifest.exists() else None
        return path / "checkpoints" / "flow.ckpt", info
    return path, None


def write_trajectories_csv(batch: EpisodeBatch, path: Path) -> None:
    T = batch.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", "s_x", "s_y", "theta", "reward", "done"])
        for i in range(len(batch)):
            for t in range(T):
                done = t == T - 1
                reward = batch.returns[i] if done else 0.0
                w.writerow([i, t, repr(float(batch.states[i, t, 0])), repr(float(batch.states[i, t, 1])),
                            repr(float(batch.actions[i, t, 0])), repr(float(reward)), int(done)])


def evaluate(flow: FlowNetwork, env, episodes: int, M: int, seed: int, mode: str, sampler: str,
             workers: int = 1, chunk: int = 1000) -> EpisodeBatch:
    """Roll out ``episodes`` in fixed-size chunks; chunk ``i`` uses ``stream(seed, "eval", i)``."""
    starts = list(range(0, episodes, chunk))

    def run(i):
        n = min(chunk, episodes - starts[i])
        return rollout_batch(env, flow, n, M, stream(seed, "eval", i), mode, sampler)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(i) for i in range(len(starts))]
    return EpisodeBatch(
        parts[0].start,
        np.concatenate([p.states for p in parts]),
        np.concatenate([p.actions for p in parts]),
        np.concatenate([p.returns for p in parts]),
    )


def cmd_eval(args) -> int:
    ckpt, manifest = _resolve_checkpoint(Path(args.checkpoint))
    if not ckpt.exists():
        raise UsageError(f"checkpoint: file not found: {ckpt}")
    run_cfg = (manifest or {}).get("config", {})
    env_id = args.env or run_cfg.get("env_id")
    if not env_id:
        raise UsageError("env: an environment id is required")
    env = make_env(env_id)
    params = load_params(ckpt)
    try:
        flow = FlowNetwork(params, env.spec.state_dim, env.spec.action_dim)
    except ShapeError as exc:
        raise UsageError(f"checkpoint: does not fit env {env_id}: {exc}") from None
    M = args.M or run_cfg.get("M", TrainConfig.M)
    sampler = args.sampler or run_cfg.get("sampler", "proportional")
    seed = args.seed if args.seed is not None else 0
    batch = evaluate(flow, env, args.episodes, M, seed, args.mode, sampler, args.workers or 1)
    dcfg = DistinctiveCountConfig(args.delta_r, args.delta_mse, args.episodes)
    out_dir = Path(args.out_dir or ckpt.parent.parent / "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    final = batch.states[:, -1]
    metrics = {
        "env_id": env_id,
        "mode": args.mode,
        "episodes": args.episodes,
        "M": M,
        "seed": seed,
        "mean_return": float(batch.returns.mean()),
        "max_return": float(batch.returns.max()),
        "std_return": float(batch.returns.std()),
        "valid_distinctive": count_valid_distinctive_arrays(batch.states, batch.returns, dcfg),
        "delta_r": dcfg.delta_r,
        "delta_mse": dcfg.delta_mse,
        "goal_distance_mean": float(np.mean(np.min(
            np.linalg.norm(final[:, None, :] - np.asarray(env.config.goals)[None], axis=2), axis=1))),
        "checkpoint": str(ckpt),
    }
    write_json(metrics, out_dir / "metrics.json")
    write_trajectories_csv(batch, out_dir / "trajectories.csv")
    print(json.dumps(metrics))
    return 0


# -- verify -----------------------------------------------------------------


def verify_path_flows(seed: int = 0, n_random: int = 20, max_nodes: int = 8) -> dict:
    rng = np.random.default_rng(seed)
    diamond = dag_flow_oracle_check(diamond_dag())
    reports = [dag_flow_oracle_check(random_path_sum_dag(int(rng.integers(3, max_nodes + 1)), rng))
               for _ in range(n_random)]
    return {
        "diamond": diamond.to_dict(),
        "random_passed": sum(r.passed for r in reports),
        "random_total": n_random,
        "max_node_error": max(r.max_node_error for r in reports),
        "passed": diamond.passed and all(r.passed for r in reports),
    }


def verify_estimator_rate(seed: int = 0, trials: int = 200, K_list=(10, 100, 1000, 10000)) -> dict:
    report = estimator_error_sweep(lambda a: 1.0 + np.sin(a[:, 0]), np.pi / 2, K_list, trials,
                                   np.random.default_rng(seed), lipschitz=1.0)
    d = report.to_dict()
    d["passed"] = report.slope_within(-0.65, -0.35) and report.monotone(0.05)
    return d


def verify_gradcheck(seed: int = 0, n_nets: int = 50) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_nets):
        n_layers = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(1, 17, size=n_layers + 1)]
        params = mlp_init(dims, rng)
        x = rng.standard_normal((3, dims[0]))
        up = rng.standard_normal((3, dims[-1]))
        err = max_relative_error(mlp_backward(params, x, up), numerical_gradient(params, x, up, 1e-4))
        worst = max(worst, err)
    return {"nets": n_nets, "max_relative_error": worst, "passed": worst < 1e-4}


def verify_lipschitz(seed: int = 0, checkpoint: str | None = None, env_id: str = "point-robot-sparse",
                     pairs: int = 20_000) -> dict:
    env = make_env(env_id)
    spec = env.spec
    if checkpoint:
        ckpt, _ = _resolve_checkpoint(Path(checkpoint))
        flow = FlowNetwork(load_params(ckpt), spec.state_dim, spec.action_dim)
    else:
        flow = FlowNetwork.create(spec.state_dim, spec.action_dim, (64, 64), seed)
    report = lipschitz_estimate(flow, pairs, np.random.default_rng(seed), spec)
    ok_flow = bool(np.all(np.diff(report.action_ratio_max) >= 0) and np.all(np.diff(report.state_ratio_max) >= 0)
                   and np.isfinite(report.action_lipschitz) and np.isfinite(report.state_lipschitz))

    # linear log-flow w*a: |dF/da| <= |w| exp(|w| a_max) on the box
    w = 1.5
    lin = mlp_zeros([spec.state_dim + spec.action_dim, 1])
    lin = lin.with_arrays([np.array([[0.0] * spec.state_dim + [w]]), np.zeros(1)])
    lin_flow = FlowNetwork(lin, spec.state_dim, spec.action_dim)
    lin_report = lipschitz_estimate(lin_flow, pairs, np.random.default_rng(seed + 1), spec)
    bound = abs(w) * np.exp(abs(w) * float(spec.action_upper.max()))
    ok_linear = lin_report.action_lipschitz <= bound
    d = report.to_dict()
    del d["action_ratio_max"], d["state_ratio_max"]
    d.update({"linear_case_action_lipschitz": lin_report.action_lipschitz, "linear_case_bound": bound,
              "passed": ok_flow and ok_linear})
    return d


SUITES = {
    "theorem1": lambda args: verify_path_flows(args.seed or 0),
    "theorem2": lambda args: verify_estimator_rate(args.seed or 0, args.trials),
    "gradcheck": lambda args: verify_gradcheck(args.seed or 0),
    "lipschitz": lambda args: verify_lipschitz(args.seed or 0, args.checkpoint),
}
# descriptive aliases for the two numbered suites
SUITES["path-flow"] = SUITES["theorem1"]
SUITES["estimator-rate"] = SUITES["theorem2"]


def cmd_verify(args) -> int:
    if args.suite not in SUITES:
        raise UsageError(f"suite: unknown suite {args.suite!r}; choose from {sorted(SUITES)}")
    report = SUITES[args.suite](args)
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        write_json(report, Path(args.out_dir) / f"verify_{args.suite}.json")
    status = "PASS" if report["passed"] else "FAIL"
    print(f"{args.suite}: {status}")
    print(json.dumps({k: v for k, v in report.items() if k not in ("diamond",)}, default=str))
    return 0 if report["passed"] else 1


# -- sweep-k ----------------------------------------------------------------


def cmd_sweep_k(args) -> int:
    K_list = [int(k) for k in args.k_list.split(",") if k.strip()]
    report = estimator_error_sweep(lambda a: 1.0 + np.sin(a[:, 0]), np.pi / 2, K_list, args.trials,
                                   np.random.default_rng(args.seed or 0), lipschitz=1.0)
    out_dir = Path(args.out_dir or "runs/sweep")
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "sweep_k.csv")
    write_json(report, out_dir / "sweep_k.json")
    print(json.dumps({"K": K_list, "p95": report.p95.tolist(), "slope": report.slope}))
    return 0


# -- parser -----------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="INI config file or a run manifest.json")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--override", action="append", metavar="KEY=VALUE", help="repeatable")
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cflownets", description="Continuous flow networks on point-robot tasks")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a flow network")
    _common(p)
    hints = typing.get_type_hints(TrainConfig)
    for f in fields(TrainConfig):
        if f.name in ("seed", "workers"):
            continue
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f"cfg_{f.name}", metavar=str(getattr(hints[f.name], "__name__", "VALUE")).upper())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll out a trained flow network")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="flow checkpoint file or run directory")
    p.add_argument("--env", choices=sorted(ENV_CONFIGS))
    p.add_argument("--episodes", type=int, default=10_000)
    p.add_argument("--mode", choices=["sample", "greedy"], default="sample")
    p.add_argument("--M", type=int)
    p.add_argument("--sampler", choices=["proportional", "softmax"])
    p.add_argument("--delta-r", type=float, default=0.5)
    p.add_argument("--delta-mse", type=float, default=0.02)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a verification suite")
    _common(p)
    p.add_argument("suite", help="one of: " + ", ".join(SUITES))
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep-k", help="estimator error against the number of sampled actions")
    _common(p)
    p.add_argument("--k-list", default="10,100,1000,10000")
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(func=cmd_sweep_k)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    tune_allocator()
    try:
        return args.func(args)
    except (ConfigError, UsageError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
