"""Simulation engine: the model-matrix recurrence X <- (X - eta * G) T_k.

Each global step draws one Bernoulli gate per worker (a slow worker skips
its gradient that step), applies the surviving mini-batch gradients, and
right-multiplies by the operator the step calls for: identity, sub-network
averaging V, or combined hub averaging Z.

Randomness is split into independent counter-based Philox streams, one
gating stream and one batch stream per worker, keyed on (seed, worker id,
purpose). The gate draw is consumed every step; the batch stream advances
only when the gate fires. Traces therefore do not depend on evaluation
order or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .objectives import Objective, Shard, full_objective, sample_batch_indices
from .topology import MixOp, MixingSet, NetworkSpec, build_mixing_set, select_T

DIVERGENCE_LIMIT = 1e12

_GATE_TAG = 1
_BATCH_TAG = 2
_INIT_TAG = 3


class DivergenceError(RuntimeError):
    pass


@dataclass
class SimConfig:
    """Run parameters. K must be a whole number of hub rounds (q * tau)."""

    eta: float
    tau: int
    q: int
    K: int
    batch_size: int = 1
    seed: int = 0
    eval_every: int = 1
    init: str = "zeros"       # "zeros" or "gaussian"
    init_scale: float = 1.0

    def validate(self) -> None:
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.tau < 1 or self.q < 1:
            raise ValueError(f"need tau >= 1 and q >= 1, got tau={self.tau}, q={self.q}")
        if self.K < 1 or self.K % (self.q * self.tau) != 0:
            raise ValueError(f"K={self.K} must be a positive multiple of q*tau={self.q * self.tau}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.init not in ("zeros", "gaussian"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class SimState:
    """Evolving worker models (columns of X) and the per-worker RNG streams."""

    X: np.ndarray
    k: int
    gate_rngs: list[np.random.Generator]
    batch_rngs: list[np.random.Generator]
    grad_steps: np.ndarray


@dataclass
class TraceRecord:
    k: int
    time_slot: int
    loss_full: float
    grad_norm_sq: float
    consensus_err: float
    test_acc: float | None
    cumulative_grad_steps: np.ndarray


@dataclass
class SimResult:
    records: list[TraceRecord]
    final_X: np.ndarray
    max_u_residual: float | None = None


def worker_stream(seed: int, worker_id: int, tag: int) -> np.random.Generator:
    """Counter-based stream keyed on (seed, worker, purpose)."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence((seed, worker_id, tag)))
    )


def init_state(net: NetworkSpec, config: SimConfig, dim: int) -> SimState:
    """All workers start from one shared vector (zeros or seeded Gaussian)."""
    N = net.num_workers
    if config.init == "gaussian":
        rng = worker_stream(config.seed, 0, _INIT_TAG)
        x0 = config.init_scale * rng.standard_normal(dim)
    else:
        x0 = np.zeros(dim)
    X = np.repeat(x0[:, None], N, axis=1)
    return SimState(
        X=X,
        k=0,
        gate_rngs=[worker_stream(config.seed, i, _GATE_TAG) for i in range(N)],
        batch_rngs=[worker_stream(config.seed, i, _BATCH_TAG) for i in range(N)],
        grad_steps=np.zeros(N, dtype=np.int64),
    )


def weighted_average(X: np.ndarray, a: np.ndarray) -> np.ndarray:
    """u = X a, the a-weighted average of the worker columns."""
    if X.shape[1] != len(a):
        raise ValueError(f"X has {X.shape[1]} columns but a has length {len(a)}")
    return X @ a


def consensus_error(X: np.ndarray, a: np.ndarray) -> float:
    """Weighted squared deviation from the weighted average: ||X (I - A)||^2_{F_a}."""
    from .spectral import weighted_frobenius_sq

    u = weighted_average(X, a)
    return weighted_frobenius_sq(X - u[:, None], a)


def gated_gradient(worker_shard: Shard, step_prob: float, x_col: np.ndarray,
                   objective: Objective, batch_size: int,
                   gate_rng: np.random.Generator,
                   batch_rng: np.random.Generator) -> np.ndarray:
    """Mini-batch gradient with probability step_prob, else the zero vector.

    The gate draw is consumed unconditionally; the batch stream advances
    only when the gate fires.
    """
    from .objectives import minibatch_gradient

    if gate_rng.random() < step_prob:
        return minibatch_gradient(objective, worker_shard, x_col, batch_size, batch_rng)
    return np.zeros_like(np.asarray(x_col, dtype=float))


def _draw_gradients(state: SimState, net: NetworkSpec, config: SimConfig,
                    objective: Objective) -> np.ndarray | None:
    """Gate all workers, batch-sample the active ones, return G (n x N) or None."""
    N = net.num_workers
    active: list[int] = []
    batches: list[np.ndarray] = []
    for i, w in enumerate(net.workers):
        fired = state.gate_rngs[i].random() < w.step_prob
        if not fired:
            continue
        if w.shard is None or len(w.shard) == 0:
            raise ValueError(f"worker {i} has no data shard")
        batches.append(
            sample_batch_indices(state.batch_rngs[i], w.shard, config.batch_size)
        )
        active.append(i)
    if not active:
        return None
    idx = np.stack(batches)
    models = state.X[:, active].T
    grads = objective.grad_batch_many(models, idx)
    G = np.zeros_like(state.X)
    G[:, active] = grads.T
    state.grad_steps[active] += 1
    return G


def step(state: SimState, config: SimConfig, mixing: MixingSet,
         objective: Objective, net: NetworkSpec,
         u_residual: list[float] | None = None) -> SimState:
    """Advance one global step: X <- (X - eta * G) T_k, k <- k + 1."""
    if state.k >= config.K:
        raise ValueError(f"run already complete at k={state.k}")
    k = state.k + 1
    G = _draw_gradients(state, net, config, objective)
    Y = state.X if G is None else state.X - config.eta * G
    op = select_T(k, config.tau, config.q)
    if op is MixOp.V:
        X_next = Y @ mixing.V
    elif op is MixOp.Z:
        X_next = Y @ mixing.Z
    else:
        X_next = Y

    if u_residual is not None:
        expected = weighted_average(state.X, mixing.a)
        if G is not None:
            expected = expected - config.eta * (G @ mixing.a)
        u_next = weighted_average(X_next, mixing.a)
        u_residual.append(float(np.linalg.norm(u_next - expected)))

    if np.abs(X_next).max() > DIVERGENCE_LIMIT:
        raise DivergenceError(f"model entries exceeded {DIVERGENCE_LIMIT:g} at step {k}")
    state.X = X_next
    state.k = k
    return state


def _record(state: SimState, mixing: MixingSet, objective: Objective,
            time_slot: int | None = None) -> TraceRecord:
    u = weighted_average(state.X, mixing.a)
    loss, grad = full_objective(objective, u)
    acc = None
    if hasattr(objective, "test_accuracy"):
        acc = objective.test_accuracy(u)
    return TraceRecord(
        k=state.k,
        time_slot=state.k if time_slot is None else time_slot,
        loss_full=loss,
        grad_norm_sq=float(grad @ grad),
        consensus_err=consensus_error(state.X, mixing.a),
        test_acc=acc,
        cumulative_grad_steps=state.grad_steps.copy(),
    )


def simulate(net: NetworkSpec, config: SimConfig, objective: Objective,
             mixing: MixingSet | None = None,
             track_u_residual: bool = False) -> SimResult:
    """Run K steps, recording metrics every eval_every steps (plus k=0 and k=K)."""
    net.validate()
    config.validate()
    if mixing is None:
        mixing = build_mixing_set(net)
    state = init_state(net, config, objective.dim)
    residuals: list[float] | None = [] if track_u_residual else None
    records = [_record(state, mixing, objective)]
    for _ in range(config.K):
        step(state, config, mixing, objective, net, u_residual=residuals)
        if state.k % config.eval_every == 0 or state.k == config.K:
            records.append(_record(state, mixing, objective))
    return SimResult(
        records=records,
        final_X=state.X,
        max_u_residual=max(residuals) if residuals else None,
    )


def run(net: NetworkSpec, config: SimConfig, objective: Objective,
        mixing: MixingSet | None = None) -> list[TraceRecord]:
    """Convenience wrapper returning just the trace records."""
    return simulate(net, config, objective, mixing=mixing).records


def with_seed(config: SimConfig, seed: int) -> SimConfig:
    return replace(config, seed=seed)
