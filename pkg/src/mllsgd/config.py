"""Strict JSON config parsing: network, objective, and run sections.

Unknown keys anywhere are errors; a silently ignored typo in an experiment
config is the main reproducibility hazard this guards against. All
randomness (data generation, partitioning, simulation) flows from the
single run seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .engine import SimConfig
from .harness import make_two_level_network
from .objectives import (
    Dataset,
    LogisticObjective,
    Objective,
    QuadraticObjective,
    load_idx,
    make_logistic,
    make_quadratic,
    partition_iid,
)
from .topology import (
    NetworkSpec,
    WorkerSpec,
    complete_edges,
    path_edges,
    ring_edges,
)


class ConfigError(ValueError):
    pass


@dataclass
class Scenario:
    """Everything one run needs, built from a parsed config."""

    net: NetworkSpec
    objective: Objective
    sim: SimConfig
    preset: str
    explicit_H: np.ndarray | None
    sweep: dict | None
    raw: dict


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing key {key!r} in {where}")
    return section[key]


def load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_keys(raw, {"network", "objective", "run", "sweep"}, "config")
    for key in ("network", "objective", "run"):
        _require(raw, key, "config")
    return raw


def build_scenario(raw: dict, seed_override: int | None = None) -> Scenario:
    run = _parse_run(raw["run"])
    if seed_override is not None:
        run["seed"] = seed_override
    sim = SimConfig(
        eta=run["eta"], tau=run["tau"], q=run["q"], K=run["K"],
        batch_size=raw["objective"].get("batch_size", 1),
        seed=run["seed"], eval_every=run["eval_every"],
        init=run["init"], init_scale=run["init_scale"],
    )
    sim.validate()
    net, explicit_H = _parse_network(raw["network"])
    objective, shard_sizes = _parse_objective(raw["objective"], net, sim.seed)
    if shard_sizes is not None:
        _assign_weights(raw["network"].get("weights", "uniform"), net, shard_sizes)
    net.validate()
    sweep = _parse_sweep(raw.get("sweep"))
    return Scenario(
        net=net, objective=objective, sim=sim, preset=run["preset"],
        explicit_H=explicit_H, sweep=sweep, raw=raw,
    )


def _parse_run(section: dict) -> dict:
    _check_keys(
        section,
        {"eta", "tau", "q", "K", "seed", "eval_every", "preset", "init", "init_scale"},
        "run",
    )
    preset = section.get("preset", "mll-sgd")
    return {
        "eta": float(_require(section, "eta", "run")),
        "tau": int(_require(section, "tau", "run")),
        "q": int(_require(section, "q", "run")),
        "K": int(_require(section, "K", "run")),
        "seed": int(_require(section, "seed", "run")),
        "eval_every": int(section.get("eval_every", 1)),
        "preset": preset,
        "init": section.get("init", "zeros"),
        "init_scale": float(section.get("init_scale", 1.0)),
    }


def parse_topology(spec, num_subnets: int) -> set[tuple[int, int]]:
    if spec == "complete":
        return complete_edges(num_subnets)
    if spec == "path":
        return path_edges(num_subnets)
    if spec == "ring":
        return ring_edges(num_subnets)
    if isinstance(spec, dict):
        _check_keys(spec, {"edges"}, "network.topology")
        edges = _require(spec, "edges", "network.topology")
        return {tuple(int(x) for x in e) for e in edges}
    raise ConfigError(f"unknown topology {spec!r}")


def parse_p_spec(spec, subnet_sizes: list[int]) -> np.ndarray:
    """Expand a p description into per-worker step probabilities."""
    N = sum(subnet_sizes)
    if isinstance(spec, list):
        if len(spec) != N:
            raise ConfigError(f"p list has length {len(spec)}, expected {N}")
        return np.asarray(spec, dtype=float)
    if not isinstance(spec, dict):
        raise ConfigError(f"invalid p spec {spec!r}")
    kind = _require(spec, "kind", "network.p")
    if kind == "fixed":
        _check_keys(spec, {"kind", "value"}, "network.p")
        return np.full(N, float(_require(spec, "value", "network.p")))
    if kind == "uniform-grid":
        _check_keys(spec, {"kind", "low", "high"}, "network.p")
        low = float(spec.get("low", 0.1))
        high = float(spec.get("high", 1.0))
        out = []
        for size in subnet_sizes:
            out.append(np.linspace(low, high, size))
        return np.round(np.concatenate(out), 12)
    if kind == "skewed":
        _check_keys(spec, {"kind", "groups"}, "network.p")
        groups = _require(spec, "groups", "network.p")
        p = np.empty(N)
        start = 0
        for g in groups:
            _check_keys(g, {"p", "fraction"}, "network.p.groups")
            count = int(round(float(g["fraction"]) * N))
            p[start:start + count] = float(g["p"])
            start += count
        if start != N:
            raise ConfigError(f"skewed p fractions cover {start} of {N} workers")
        return p
    raise ConfigError(f"unknown p kind {kind!r}")


def _parse_network(section: dict) -> tuple[NetworkSpec, np.ndarray | None]:
    _check_keys(
        section,
        {"topology", "num_subnets", "workers_per_subnet", "subnets", "weights", "p", "H"},
        "network",
    )
    if "subnets" in section:
        if "num_subnets" in section or "workers_per_subnet" in section:
            raise ConfigError("give either explicit subnets or the generator form, not both")
        workers = []
        wid = 0
        for d, subnet in enumerate(section["subnets"]):
            for w in subnet:
                _check_keys(w, {"weight", "p"}, f"network.subnets[{d}]")
                workers.append(
                    WorkerSpec(id=wid, sub_network=d,
                               weight=float(w.get("weight", 1.0)),
                               step_prob=float(w.get("p", 1.0)))
                )
                wid += 1
        num_subnets = len(section["subnets"])
        net = NetworkSpec(
            workers=workers, num_subnets=num_subnets,
            hub_edges=parse_topology(section.get("topology", "complete"), num_subnets),
        )
    else:
        D = int(_require(section, "num_subnets", "network"))
        m = int(_require(section, "workers_per_subnet", "network"))
        net = make_two_level_network(
            D, m, hub_edges=parse_topology(section.get("topology", "complete"), D)
        )
        sizes = [m] * D
        if "p" in section:
            p = parse_p_spec(section["p"], sizes)
            for w, pi in zip(net.workers, p):
                w.step_prob = float(pi)
        weights = section.get("weights", "uniform")
        if isinstance(weights, list):
            if len(weights) != net.num_workers:
                raise ConfigError(
                    f"weights list has length {len(weights)}, expected {net.num_workers}"
                )
            for w, wt in zip(net.workers, weights):
                w.weight = float(wt)
        elif weights not in ("uniform", "shard-size"):
            raise ConfigError(f"unknown weights spec {weights!r}")
    explicit_H = None
    if "H" in section:
        explicit_H = np.asarray(section["H"], dtype=float)
    return net, explicit_H


def _assign_weights(weights_spec, net: NetworkSpec, shard_sizes: np.ndarray) -> None:
    if weights_spec == "shard-size":
        for w, size in zip(net.workers, shard_sizes):
            w.weight = float(size)


def _parse_objective(section: dict, net: NetworkSpec,
                     seed: int) -> tuple[Objective, np.ndarray | None]:
    _check_keys(
        section,
        {"kind", "synthetic", "dataset", "batch_size", "fractions", "regularization"},
        "objective",
    )
    kind = _require(section, "kind", "objective")
    if kind not in ("quadratic", "logistic"):
        raise ConfigError(f"unknown objective kind {kind!r}")
    reg = float(section.get("regularization", 0.0))

    if "dataset" in section:
        ds_spec = section["dataset"]
        _check_keys(ds_spec, {"images", "labels"}, "objective.dataset")
        for key in ("images", "labels"):
            path = _require(ds_spec, key, "objective.dataset")
            if not os.path.exists(path):
                raise ConfigError(f"dataset file not found: {path}")
        if kind != "logistic":
            raise ConfigError("IDX datasets are for the logistic objective")
        dataset = load_idx(ds_spec["images"], ds_spec["labels"])
        obj: Objective = LogisticObjective(dataset, regularization=reg)
    else:
        syn = section.get("synthetic", {})
        _check_keys(
            syn,
            {"n_samples", "dim", "spread", "mean_shift", "hessian_eigs", "test_fraction"},
            "objective.synthetic",
        )
        n = int(syn.get("n_samples", 1000))
        dim = int(syn.get("dim", 10))
        if kind == "quadratic":
            eigs = syn.get("hessian_eigs")
            obj = make_quadratic(
                n, dim, seed,
                spread=float(syn.get("spread", 1.0)),
                mean_shift=float(syn.get("mean_shift", 0.0)),
                hessian_eigs=None if eigs is None else np.asarray(eigs, dtype=float),
            )
        else:
            obj = make_logistic(
                n, dim, seed, regularization=reg,
                test_fraction=float(syn.get("test_fraction", 0.0)),
            )

    fractions = section.get("fractions", "equal")
    N = net.num_workers
    if fractions == "equal":
        fractions = [1.0 / N] * N
    elif not isinstance(fractions, list) or len(fractions) != N:
        raise ConfigError(f"fractions must be 'equal' or a list of length {N}")
    shards = partition_iid(obj.dataset, fractions, seed)
    sizes = np.array([len(s) for s in shards])
    if (sizes == 0).any():
        raise ConfigError("every worker needs a nonempty shard; increase n_samples")
    for w, shard in zip(net.workers, shards):
        w.shard = shard.indices
    return obj, sizes


def _parse_sweep(section: dict | None) -> dict | None:
    if section is None:
        return None
    _check_keys(section, {"seeds", "qtau_pairs", "p_distributions", "topologies"}, "sweep")
    seeds = _require(section, "seeds", "sweep")
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("sweep.seeds must be a nonempty list")
    out = {"seeds": [int(s) for s in seeds]}
    if "qtau_pairs" in section:
        out["qtau_pairs"] = [(int(q), int(t)) for q, t in section["qtau_pairs"]]
    if "p_distributions" in section:
        out["p_distributions"] = section["p_distributions"]
    if "topologies" in section:
        out["topologies"] = section["topologies"]
    return out


def serialize_scenario(scenario: Scenario) -> dict:
    """Re-serialize a parsed scenario to a config dict.

    Networks are emitted in the explicit per-subnet form so the round trip
    is independent of which input shorthand was used; parsing the result
    yields the same network, objective, and run parameters.
    """
    subnets = []
    for d in range(scenario.net.num_subnets):
        subnets.append(
            [
                {"weight": w.weight, "p": w.step_prob}
                for w in scenario.net.workers
                if w.sub_network == d
            ]
        )
    network = {
        "subnets": subnets,
        "topology": {"edges": [list(e) for e in sorted(scenario.net.hub_edges)]},
    }
    if scenario.explicit_H is not None:
        network["H"] = scenario.explicit_H.tolist()
    objective = dict(scenario.raw["objective"])
    # shard-size weights are already baked into the subnets above
    run = {
        "eta": scenario.sim.eta,
        "tau": scenario.sim.tau,
        "q": scenario.sim.q,
        "K": scenario.sim.K,
        "seed": scenario.sim.seed,
        "eval_every": scenario.sim.eval_every,
        "preset": scenario.preset,
        "init": scenario.sim.init,
        "init_scale": scenario.sim.init_scale,
    }
    out = {"network": network, "objective": objective, "run": run}
    if scenario.sweep is not None:
        out["sweep"] = dict(scenario.raw["sweep"])
    return out
