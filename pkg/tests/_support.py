"""Shared helpers for the test suite: random network generation and configs."""

from __future__ import annotations

import numpy as np

from mllsgd.topology import NetworkSpec, WorkerSpec


def random_connected_edges(rng: np.random.Generator, D: int) -> set[tuple[int, int]]:
    """Random spanning tree plus a few extra edges; always connected."""
    edges: set[tuple[int, int]] = set()
    order = rng.permutation(D)
    for i in range(1, D):
        parent = order[rng.integers(0, i)]
        edges.add(tuple(sorted((int(order[i]), int(parent)))))
    extra = int(rng.integers(0, D))
    for _ in range(extra):
        i, j = rng.integers(0, D, size=2)
        if i != j:
            edges.add(tuple(sorted((int(i), int(j)))))
    return edges


def random_network(rng: np.random.Generator, max_subnets: int = 12,
                   max_workers: int = 64) -> NetworkSpec:
    """Random weights, random subnet sizes, random connected hub graph."""
    D = int(rng.integers(1, max_subnets + 1))
    N = int(rng.integers(D, max_workers + 1))
    # Every subnet gets one worker, the rest are assigned at random.
    assign = list(range(D)) + [int(rng.integers(0, D)) for _ in range(N - D)]
    rng.shuffle(assign)
    workers = [
        WorkerSpec(id=i, sub_network=assign[i],
                   weight=float(rng.uniform(0.2, 5.0)),
                   step_prob=float(rng.uniform(0.1, 1.0)))
        for i in range(N)
    ]
    return NetworkSpec(
        workers=workers,
        num_subnets=D,
        hub_edges=random_connected_edges(rng, D),
    )


def quadratic_config(tmp_path, **run_overrides) -> str:
    """Write a minimal single-worker quadratic config; return its path."""
    import json

    run = {"eta": 0.05, "tau": 1, "q": 1, "K": 8, "seed": 7, "eval_every": 2}
    run.update(run_overrides)
    raw = {
        "network": {"num_subnets": 1, "workers_per_subnet": 1},
        "objective": {"kind": "quadratic", "batch_size": 2,
                      "synthetic": {"n_samples": 32, "dim": 3}},
        "run": run,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return str(path)
