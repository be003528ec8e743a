"""Experiment presets, the straggler time-slot comparison, and q/tau sweeps.

The baselines are all expressible as parameterizations of the same engine:
distributed SGD collapses the hierarchy to one sub-network with q = tau = 1,
local SGD keeps the sub-networks but averages globally every tau steps
(complete hub graph, q = 1), and HL-SGD is local SGD with q > 1. The
wait-for-steps policy used by the Local/HL-SGD baselines in the time-slot
study gets its own loop here since its averaging times are data dependent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import engine
from .engine import SimConfig, TraceRecord
from .objectives import Objective, sample_batch_indices
from .topology import (
    NetworkSpec,
    WorkerSpec,
    build_mixing_set,
    complete_edges,
)

PRESET_NAMES = ("distributed-sgd", "local-sgd", "hl-sgd", "mll-sgd")


def derive_seed(master_seed: int, run_index: int) -> int:
    """Stable per-run seed fan-out (recorded in outputs for replay)."""
    digest = hashlib.blake2b(
        f"{master_seed}:{run_index}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big") >> 1


def _uniform_workers(net: NetworkSpec, collapse: bool, force_p_one: bool) -> NetworkSpec:
    """Copy of net with unit weights (and optionally one sub-network, p = 1)."""
    workers = [
        WorkerSpec(
            id=w.id,
            sub_network=0 if collapse else w.sub_network,
            weight=1.0,
            step_prob=1.0 if force_p_one else w.step_prob,
            shard=w.shard,
        )
        for w in net.workers
    ]
    if collapse:
        return NetworkSpec(workers=workers, num_subnets=1, hub_edges=set())
    return NetworkSpec(
        workers=workers,
        num_subnets=net.num_subnets,
        hub_edges=complete_edges(net.num_subnets),
    )


def preset_network_and_config(preset: str, net: NetworkSpec,
                              config: SimConfig) -> tuple[NetworkSpec, SimConfig]:
    """Apply a baseline preset's structural constraints.

    Weights/p/topology overrides are derived; schedule parameters that the
    preset pins (q, tau) must already match the config and are rejected
    otherwise.
    """
    if preset not in PRESET_NAMES:
        raise ValueError(f"unknown preset {preset!r}")
    if preset == "distributed-sgd":
        if config.q != 1 or config.tau != 1:
            raise ValueError("distributed-sgd requires q = tau = 1")
        return _uniform_workers(net, collapse=True, force_p_one=True), config
    if preset == "local-sgd":
        if config.q != 1:
            raise ValueError("local-sgd requires q = 1")
        return _uniform_workers(net, collapse=False, force_p_one=True), config
    if preset == "hl-sgd":
        return _uniform_workers(net, collapse=False, force_p_one=True), config
    return net, config


def run_preset(preset: str, net: NetworkSpec, objective: Objective,
               config: SimConfig) -> list[TraceRecord]:
    """Run one preset end to end and return its trace."""
    pnet, pconfig = preset_network_and_config(preset, net, config)
    return engine.run(pnet, pconfig, objective)


@dataclass
class SlotSimSpec:
    """Parameters of the time-slot straggler study."""

    wait_policy: str          # "fixed-period" or "wait-for-steps"
    tau: int
    q: int

    def validate(self) -> None:
        if self.wait_policy not in ("fixed-period", "wait-for-steps"):
            raise ValueError(f"unknown wait policy {self.wait_policy!r}")
        if self.tau < 1 or self.q < 1:
            raise ValueError("tau and q must be >= 1")


def run_wait_for_steps(net: NetworkSpec, config: SimConfig, objective: Objective,
                       tau: int, q: int) -> list[TraceRecord]:
    """Slot simulation of the wait-for-all-workers baseline.

    Every slot each worker draws its Bernoulli gate; a worker that has
    already banked tau steps for the current round freezes (the gate draw
    is still consumed). Averaging fires at the first slot where every
    worker has banked tau steps: V for ordinary rounds, Z every q-th.
    config.K is the slot budget; records are per eval_every slots.
    """
    net.validate()
    config.validate()
    mixing = build_mixing_set(net)
    state = engine.init_state(net, config, objective.dim)
    N = net.num_workers
    banked = np.zeros(N, dtype=np.int64)
    rounds_done = 0
    records = [_slot_record(state, mixing, objective, 0)]
    for slot in range(1, config.K + 1):
        active: list[int] = []
        batches = []
        for i, w in enumerate(net.workers):
            fired = state.gate_rngs[i].random() < w.step_prob
            if not fired or banked[i] >= tau:
                continue
            if w.shard is None or len(w.shard) == 0:
                raise ValueError(f"worker {i} has no data shard")
            batches.append(
                sample_batch_indices(state.batch_rngs[i], w.shard, config.batch_size)
            )
            active.append(i)
        if active:
            idx = np.stack(batches)
            grads = objective.grad_batch_many(state.X[:, active].T, idx)
            state.X[:, active] -= config.eta * grads.T
            state.grad_steps[active] += 1
            banked[active] += 1
        if banked.min() >= tau:
            rounds_done += 1
            op = mixing.Z if rounds_done % q == 0 else mixing.V
            state.X = state.X @ op
            banked[:] = 0
        if np.abs(state.X).max() > engine.DIVERGENCE_LIMIT:
            raise engine.DivergenceError(f"model entries diverged at slot {slot}")
        state.k = slot
        if slot % config.eval_every == 0 or slot == config.K:
            records.append(_slot_record(state, mixing, objective, slot))
    return records


def _slot_record(state, mixing, objective, slot: int) -> TraceRecord:
    rec = engine._record(state, mixing, objective, time_slot=slot)
    return rec


def run_slot_comparison(spec: SlotSimSpec, net: NetworkSpec, objective: Objective,
                        config: SimConfig) -> dict[str, list[TraceRecord]]:
    """Paired traces for the fixed-period policy and the wait-for-steps policy.

    Both policies see the same slot budget (config.K slots) and the same
    per-worker RNG streams; under the fixed-period policy a slot is exactly
    one engine step.
    """
    spec.validate()
    fixed_config = replace(config, tau=spec.tau, q=spec.q)
    fixed = engine.run(net, fixed_config, objective)
    wait = run_wait_for_steps(net, config, objective, spec.tau, spec.q)
    return {"fixed-period": fixed, "wait-for-steps": wait}


@dataclass
class QTauRow:
    q: int
    tau: int
    final_losses: np.ndarray
    mean_final_loss: float
    std_final_loss: float


def sweep_q_tau(product: int, pairs: list[tuple[int, int]], net: NetworkSpec,
                objective: Objective, config: SimConfig,
                seeds: list[int]) -> list[QTauRow]:
    """Run every (q, tau) pair with q*tau == product over shared seeds."""
    if not seeds:
        raise ValueError("need at least one seed")
    for q, tau in pairs:
        if q * tau != product:
            raise ValueError(f"pair (q={q}, tau={tau}) does not multiply to {product}")
    rows = []
    for q, tau in pairs:
        finals = []
        for s in seeds:
            cfg = replace(config, q=q, tau=tau, seed=s)
            records = engine.run(net, cfg, objective)
            finals.append(records[-1].loss_full)
        finals = np.array(finals)
        rows.append(
            QTauRow(
                q=q,
                tau=tau,
                final_losses=finals,
                mean_final_loss=float(finals.mean()),
                std_final_loss=float(finals.std(ddof=1)) if len(finals) > 1 else 0.0,
            )
        )
    return rows


def make_two_level_network(num_subnets: int, workers_per_subnet: int,
                           hub_edges: set[tuple[int, int]] | None = None,
                           weights: np.ndarray | None = None,
                           step_probs: np.ndarray | None = None) -> NetworkSpec:
    """Convenience builder for the D x m grid networks the studies use."""
    N = num_subnets * workers_per_subnet
    weights = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
    step_probs = np.ones(N) if step_probs is None else np.asarray(step_probs, dtype=float)
    workers = [
        WorkerSpec(id=i, sub_network=i // workers_per_subnet,
                   weight=float(weights[i]), step_prob=float(step_probs[i]))
        for i in range(N)
    ]
    edges = complete_edges(num_subnets) if hub_edges is None else hub_edges
    return NetworkSpec(workers=workers, num_subnets=num_subnets, hub_edges=edges)


def attach_shards(net: NetworkSpec, shards) -> None:
    """Attach partitioned data to the workers in id order."""
    if len(shards) != net.num_workers:
        raise ValueError(f"{len(shards)} shards for {net.num_workers} workers")
    for w, shard in zip(net.workers, shards):
        w.shard = shard.indices
