"""Continuous flow networks: flow-proportional action sampling, Monte Carlo
flow matching with a learned parent-retrieval network, and tooling to train
and evaluate them on sparse-reward point-robot tasks."""

__version__ = "0.1.0"
