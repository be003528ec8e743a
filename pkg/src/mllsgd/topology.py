"""Two-level network model and mixing-matrix construction.

The network consists of D hub-and-spoke sub-networks whose hubs communicate
over an undirected connected graph. From a declarative spec this module
builds the weight vectors (a, b, v), the hub averaging matrix H, the
within-sub-network averaging matrix V, and the combined matrix Z, together
with the spectral quantity zeta that drives the convergence bound.

All matrices are column stochastic: column j holds the coefficients that
worker (or hub) j's new model receives from the others, and model matrices
are multiplied on the right (X <- X @ T).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import spectral

COLUMN_SUM_TOL = 1e-12
USER_H_TOL = 1e-9


class MixOp(Enum):
    """Which operator a given time step applies to the model matrix."""

    IDENTITY = "I"
    V = "V"
    Z = "Z"


@dataclass
class WorkerSpec:
    """One worker: its sub-network, averaging weight, and operating rate.

    ``shard`` holds the worker's sample indices into the dataset; it is
    filled in by the data-partitioning step and may be None for runs that
    never touch data (matrix checks, bound evaluation).
    """

    id: int
    sub_network: int
    weight: float = 1.0
    step_prob: float = 1.0
    shard: np.ndarray | None = None

    def validate(self) -> None:
        if not self.weight > 0:
            raise ValueError(f"worker {self.id}: weight must be positive, got {self.weight}")
        if not 0 < self.step_prob <= 1:
            raise ValueError(
                f"worker {self.id}: step_prob must be in (0, 1], got {self.step_prob}"
            )


@dataclass
class NetworkSpec:
    """Workers, their sub-network assignment, and the hub graph."""

    workers: list[WorkerSpec]
    num_subnets: int
    hub_edges: set[tuple[int, int]]

    def __post_init__(self) -> None:
        # Normalize edges to sorted tuples so (i, j) and (j, i) collapse.
        self.hub_edges = {tuple(sorted(e)) for e in self.hub_edges}

    @property
    def num_workers(self) -> int:
        return len(self.workers)

    def subnet_members(self, d: int) -> list[int]:
        return [w.id for w in self.workers if w.sub_network == d]

    def step_probs(self) -> np.ndarray:
        return np.array([w.step_prob for w in self.workers])

    def validate(self) -> None:
        if self.num_subnets < 1:
            raise ValueError("need at least one sub-network")
        if not self.workers:
            raise ValueError("need at least one worker")
        for idx, w in enumerate(self.workers):
            if w.id != idx:
                raise ValueError(f"worker ids must be 0..N-1 in order, got {w.id} at {idx}")
            if not 0 <= w.sub_network < self.num_subnets:
                raise ValueError(f"worker {w.id}: sub-network {w.sub_network} out of range")
            w.validate()
        counts = np.zeros(self.num_subnets, dtype=int)
        for w in self.workers:
            counts[w.sub_network] += 1
        if (counts == 0).any():
            empty = int(np.argmin(counts))
            raise ValueError(f"sub-network {empty} has no workers")
        for i, j in self.hub_edges:
            if i == j:
                raise ValueError(f"self-loop ({i},{i}) in hub graph")
            if not (0 <= i < self.num_subnets and 0 <= j < self.num_subnets):
                raise ValueError(f"hub edge ({i},{j}) out of range")
        if not hub_graph_connected(self.num_subnets, self.hub_edges):
            raise ValueError("hub graph is not connected")


@dataclass
class MixingSet:
    """The matrices and vectors the algorithm mixes with.

    a: worker weights normalized over the whole network (N-vector).
    b: sub-network weight shares (D-vector).
    v: worker weights normalized within their sub-network (N-vector).
    zeta: max magnitude of H's non-principal eigenvalues (0 when D == 1).
    """

    H: np.ndarray
    V: np.ndarray
    Z: np.ndarray
    a: np.ndarray
    b: np.ndarray
    v: np.ndarray
    zeta: float
    A: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.A = np.outer(self.a, np.ones(len(self.a)))


def hub_graph_connected(num_hubs: int, edges: set[tuple[int, int]]) -> bool:
    if num_hubs == 1:
        return True
    adj: list[list[int]] = [[] for _ in range(num_hubs)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        for nbr in adj[stack.pop()]:
            if nbr not in seen:
                seen.add(nbr)
                stack.append(nbr)
    return len(seen) == num_hubs


def complete_edges(num_hubs: int) -> set[tuple[int, int]]:
    return {(i, j) for i in range(num_hubs) for j in range(i + 1, num_hubs)}


def path_edges(num_hubs: int) -> set[tuple[int, int]]:
    return {(i, i + 1) for i in range(num_hubs - 1)}


def ring_edges(num_hubs: int) -> set[tuple[int, int]]:
    if num_hubs < 3:
        return path_edges(num_hubs)
    return path_edges(num_hubs) | {(0, num_hubs - 1)}


def build_weight_vectors(net: NetworkSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (a, b, v): global, per-sub-network, and within-sub-network weight shares."""
    weights = np.array([w.weight for w in net.workers], dtype=float)
    if (weights <= 0).any():
        bad = int(np.argmin(weights))
        raise ValueError(f"worker {bad}: weight must be positive, got {weights[bad]}")
    total = weights.sum()
    a = weights / total
    b = np.zeros(net.num_subnets)
    for w in net.workers:
        b[w.sub_network] += w.weight
    b /= total
    subnet_totals = np.array([b[w.sub_network] * total for w in net.workers])
    v = weights / subnet_totals
    return a, b, v


def build_hub_matrix(net: NetworkSpec, b: np.ndarray) -> np.ndarray:
    """Construct a hub averaging matrix from the graph via generalized Metropolis weights.

    A symmetric matrix M is formed with M[i, j] = min(b_i, b_j) / (1 + max(deg_i, deg_j))
    on edges and the diagonal chosen so every column of M sums to b_j; then
    H = M diag(b)^-1. The result is column stochastic, keeps b as a right
    eigenvector (H b = b, so averaging preserves the weighted mean), and
    satisfies the weighted symmetry H[i, j] b_j = H[j, i] b_i with a strictly
    positive diagonal.
    """
    D = net.num_subnets
    if len(b) != D:
        raise ValueError(f"b has length {len(b)}, expected {D}")
    if (b <= 0).any():
        raise ValueError("every sub-network needs positive total weight")
    if not hub_graph_connected(D, net.hub_edges):
        raise ValueError("hub graph is not connected")
    if D == 1:
        return np.array([[1.0]])

    deg = np.zeros(D, dtype=int)
    for i, j in net.hub_edges:
        deg[i] += 1
        deg[j] += 1
    M = np.zeros((D, D))
    for i, j in net.hub_edges:
        M[i, j] = M[j, i] = min(b[i], b[j]) / (1 + max(deg[i], deg[j]))
    for j in range(D):
        # Off-column mass is at most deg_j * b_j / (1 + deg_j) < b_j, so the
        # diagonal stays positive.
        M[j, j] = b[j] - (M[:, j].sum() - M[j, j])
    return M / b[None, :]


def validate_hub_matrix(net: NetworkSpec, H: np.ndarray, b: np.ndarray,
                        tol: float = USER_H_TOL) -> None:
    """Check a user-supplied H against the column-stochastic detailed-balance contract.

    Detailed balance here means H[i, j] b_j = H[j, i] b_i (the column-weighted
    form, which makes b a right eigenvector of H).
    """
    D = net.num_subnets
    if H.shape != (D, D):
        raise ValueError(f"H has shape {H.shape}, expected ({D}, {D})")
    if (H < -tol).any():
        raise ValueError("H has negative entries")
    col_err = np.abs(H.sum(axis=0) - 1.0).max()
    if col_err > tol:
        raise ValueError(f"H is not column stochastic (max column-sum error {col_err:.3e})")
    balance = H * b[None, :] - (H * b[None, :]).T
    bal_err = np.abs(balance).max()
    if bal_err > tol:
        raise ValueError(f"H violates detailed balance (max residual {bal_err:.3e})")
    for i in range(D):
        for j in range(D):
            if i == j:
                continue
            on_edge = (min(i, j), max(i, j)) in net.hub_edges
            if on_edge and not H[i, j] > 0:
                raise ValueError(f"H[{i},{j}] must be positive on hub edge ({i},{j})")
            if not on_edge and abs(H[i, j]) > tol:
                raise ValueError(f"H[{i},{j}] nonzero but ({i},{j}) is not a hub edge")


def build_V(net: NetworkSpec, v: np.ndarray) -> np.ndarray:
    """Block-diagonal averaging matrix: within sub-network d every column is v restricted to d."""
    N = net.num_workers
    if len(v) != N:
        raise ValueError(f"v has length {len(v)}, expected {N}")
    V = np.zeros((N, N))
    for d in range(net.num_subnets):
        members = net.subnet_members(d)
        for j in members:
            V[members, j] = v[members]
    return V


def build_Z(net: NetworkSpec, H: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Combined sub-network + hub averaging: Z[i, j] = H[d(i), d(j)] * v[i]."""
    N = net.num_workers
    if H.shape != (net.num_subnets, net.num_subnets):
        raise ValueError(f"H has shape {H.shape}, expected ({net.num_subnets},) * 2")
    if len(v) != N:
        raise ValueError(f"v has length {len(v)}, expected {N}")
    d_of = np.array([w.sub_network for w in net.workers])
    return H[np.ix_(d_of, d_of)] * v[:, None]


def select_T(k: int, tau: int, q: int) -> MixOp:
    """Which operator step k applies: Z every q*tau steps, V every tau, identity otherwise."""
    if tau < 1 or q < 1 or k < 1:
        raise ValueError(f"need tau >= 1, q >= 1, k >= 1; got tau={tau}, q={q}, k={k}")
    if k % (q * tau) == 0:
        return MixOp.Z
    if k % tau == 0:
        return MixOp.V
    return MixOp.IDENTITY


def build_mixing_set(net: NetworkSpec, H: np.ndarray | None = None) -> MixingSet:
    """Build all mixing matrices for a network; H is constructed unless supplied."""
    net.validate()
    a, b, v = build_weight_vectors(net)
    if H is None:
        H = build_hub_matrix(net, b)
    else:
        H = np.asarray(H, dtype=float)
        validate_hub_matrix(net, H, b)
    V = build_V(net, v)
    Z = build_Z(net, H, v)
    if net.num_subnets == 1:
        zeta = 0.0
    else:
        spectrum = spectral.eigen_detailed_balance(H, b)
        zeta = spectral.zeta(spectrum)
    return MixingSet(H=H, V=V, Z=Z, a=a, b=b, v=v, zeta=zeta)
