"""End-to-end acceptance suite.

Each test here is one pass/fail gate on the finished package: mixing-matrix
structure at scale, exact reduction to the synchronous baseline, the
convergence bound dominating measured traces, replication of the expected
qualitative trends, and byte-level determinism of the command-line surface.
The heavier tests time themselves and fail if they blow their budget.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from _support import random_network
from mllsgd import bounds, cli, engine
from mllsgd.engine import (
    SimConfig,
    _BATCH_TAG,
    _GATE_TAG,
    worker_stream,
)
from mllsgd.harness import (
    SlotSimSpec,
    attach_shards,
    derive_seed,
    make_two_level_network,
    run_preset,
    run_slot_comparison,
)
from mllsgd.objectives import (
    full_objective,
    make_logistic,
    make_quadratic,
    partition_iid,
    sample_batch_indices,
)
from mllsgd.spectral import eigen_detailed_balance, operator_norm
from mllsgd.topology import build_mixing_set, path_edges


def _weighted_op_norm(Q: np.ndarray, a: np.ndarray) -> float:
    s = np.sqrt(a)
    return operator_norm(Q * s[None, :] / s[:, None])


def _pooled_std(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sqrt((x.std(ddof=1) ** 2 + y.std(ddof=1) ** 2) / 2.0))


def test_1_matrix_property_suite():
    """Structural and spectral invariants on 200 random networks."""
    t0 = time.time()
    rng = np.random.default_rng(90210)
    for trial in range(200):
        net = random_network(rng, max_subnets=12, max_workers=64)
        mix = build_mixing_set(net)
        H, V, Z, a, b, v, A = mix.H, mix.V, mix.Z, mix.a, mix.b, mix.v, mix.A
        N = net.num_workers
        D = net.num_subnets
        ones = np.ones(N)

        # Nonnegativity, column stochasticity, weighted symmetry of H.
        assert H.min() >= -1e-10 and V.min() >= -1e-10 and Z.min() >= -1e-10
        assert np.abs(H.sum(axis=0) - 1.0).max() <= 1e-10
        assert np.abs(V.sum(axis=0) - 1.0).max() <= 1e-10
        assert np.abs(Z.sum(axis=0) - 1.0).max() <= 1e-10
        assert np.abs(H * b[None, :] - (H * b[None, :]).T).max() <= 1e-10

        # Weighted averages are fixed points; columns of A are a.
        assert np.abs(Z @ a - a).max() <= 1e-10
        assert np.abs(V @ a - a).max() <= 1e-10
        assert np.abs(H @ b - b).max() <= 1e-10
        assert np.abs(ones @ Z - ones).max() <= 1e-10
        assert np.abs(ones @ V - ones).max() <= 1e-10

        # Algebraic structure: V is a projection absorbed by Z, and every
        # operator fixes the consensus matrix from both sides.
        assert np.abs(V @ V - V).max() <= 1e-10
        assert np.abs(Z @ V - Z).max() <= 1e-10
        assert np.abs(V @ Z - Z).max() <= 1e-10
        for T in (V, Z, np.eye(N)):
            assert np.abs(T @ A - A).max() <= 1e-10
            assert np.abs(A @ T - A).max() <= 1e-10

        # Z inherits the hub spectrum: with P[i, d] = v_i [d(i) = d] and
        # R = P's 0/1 transpose, R P = I and Z P = P H, so Z acts as H on
        # the D-dimensional block-average subspace and as 0 on its kernel.
        d_of = np.array([w.sub_network for w in net.workers])
        P = np.zeros((N, D))
        P[np.arange(N), d_of] = v
        R = np.zeros((D, N))
        R[d_of, np.arange(N)] = 1.0
        assert np.abs(R @ P - np.eye(D)).max() <= 1e-10
        assert np.abs(Z @ P - P @ H).max() <= 1e-10
        assert np.abs(Z - P @ H @ R).max() <= 1e-10

        # Deviation-from-consensus decay at the advertised rate.
        Zj = np.eye(N)
        for j in range(1, 9):
            Zj = Zj @ Z
            assert abs(_weighted_op_norm(Zj - A, a) - mix.zeta**j) <= 1e-7

        if D > 1:
            spec = eigen_detailed_balance(H, b)
            assert abs(spec.eigenvalues[0] - 1.0) <= 1e-10
            assert mix.zeta < 1.0
    assert time.time() - t0 <= 60.0


def test_2_weighted_average_recurrence():
    """u evolves as plain SGD on the weighted-average gradient on any run."""
    obj = make_logistic(400, 6, seed=50, regularization=1e-3)
    rng = np.random.default_rng(51)
    net = random_network(rng, max_subnets=4, max_workers=12)
    while net.num_subnets < 2:
        net = random_network(rng, max_subnets=4, max_workers=12)
    N = net.num_workers
    attach_shards(net, partition_iid(obj.dataset, [1.0 / N] * N, seed=52))
    config = SimConfig(eta=0.05, tau=4, q=2, K=64, batch_size=2, seed=53)
    result = engine.simulate(net, config, obj, track_u_residual=True)
    assert result.max_u_residual is not None
    assert result.max_u_residual <= 1e-10


def test_3_reduction_to_synchronous_sgd():
    """Collapsed hierarchy with full participation is bitwise synchronous SGD."""
    N, dim, B, K, eta = 8, 5, 2, 500, 0.05
    obj = make_quadratic(128, dim, seed=31, mean_shift=1.0)
    net = make_two_level_network(1, N)
    shards = partition_iid(obj.dataset, [1.0 / N] * N, seed=3)
    attach_shards(net, shards)
    for seed in (11, 12, 13):
        config = SimConfig(eta=eta, tau=1, q=1, K=K, batch_size=B,
                           seed=seed, eval_every=1)
        result = engine.simulate(net, config, obj)

        # Independently coded synchronous loop sharing the RNG streams.
        V_ref = np.full((N, N), 1.0 / N)
        a_ref = np.full(N, 1.0 / N)
        gate = [worker_stream(seed, i, _GATE_TAG) for i in range(N)]
        batch = [worker_stream(seed, i, _BATCH_TAG) for i in range(N)]
        X = np.zeros((dim, N))
        losses = [full_objective(obj, X @ a_ref)[0]]
        for _ in range(K):
            G = np.zeros((dim, N))
            for i in range(N):
                assert gate[i].random() < 1.0
                idx = sample_batch_indices(batch[i], shards[i].indices, B)
                G[:, i] = obj.grad_batch(X[:, i], idx)
            X = (X - eta * G) @ V_ref
            losses.append(full_objective(obj, X @ a_ref)[0])
        assert np.array_equal(result.final_X, X)
        assert len(result.records) == K + 1
        for record, loss in zip(result.records, losses):
            assert record.loss_full == loss


def test_4_bound_dominates_empirical_traces():
    """Averaged gradient norm stays below the evaluated bound, 20 seeds."""
    from mllsgd.objectives import estimate_constants

    N, D, dim, K, q, tau, eta, B = 16, 4, 8, 128, 2, 2, 0.02, 4
    obj = make_quadratic(256, dim, seed=101, spread=1.0, mean_shift=2.0,
                         hessian_eigs=np.linspace(0.5, 2.0, dim))
    net = make_two_level_network(D, N // D)
    shards = partition_iid(obj.dataset, [1.0 / N] * N, seed=7)
    attach_shards(net, shards)
    L, sigma_sq, beta = estimate_constants(obj, probe_count=8, seed=3,
                                           batch_size=B, shards=shards)
    F0, _ = full_objective(obj, np.zeros(dim))
    inputs = bounds.BoundInputs(
        L=L, sigma_sq=sigma_sq, beta=beta, eta=eta, q=q, tau=tau, K=K,
        zeta=0.0, a=np.full(N, 1.0 / N), p=np.ones(N),
        F_init_minus_Finf=F0 - obj.f_inf(),
    )
    assert bounds.stepsize_feasible(inputs).all()
    report = bounds.theorem1_bound(inputs)

    empirical = []
    for s in range(20):
        config = SimConfig(eta=eta, tau=tau, q=q, K=K, batch_size=B,
                           seed=derive_seed(42, s), eval_every=1)
        records = engine.run(net, config, obj)
        empirical.append(np.mean([r.grad_norm_sq for r in records[:-1]]))
    assert float(np.mean(empirical)) <= report.total


def test_5_participation_feasibility_threshold():
    """p = 0.58 sits below the solvable-rate threshold; p = 1 does not."""
    N = 4
    base = dict(L=1.0, sigma_sq=0.5, beta=0.1, q=4, tau=8, K=320,
                zeta=0.3, a=np.full(N, 1.0 / N),
                F_init_minus_Finf=2.0)
    for eta in np.logspace(-6, 0, 13):
        inputs = bounds.BoundInputs(eta=float(eta), p=np.full(N, 0.58), **base)
        assert not bounds.stepsize_feasible(inputs).any()
    inputs = bounds.BoundInputs(eta=1e-6, p=np.ones(N), **base)
    assert bounds.stepsize_feasible(inputs).all()


def test_6_trend_replication():
    """Averaging schedule, hub topology, and participation-rate trends."""
    t0 = time.time()
    K, n_seeds = 3200, 10
    obj = make_logistic(1000, 10, seed=202, regularization=1e-3)
    seeds = [derive_seed(6, i) for i in range(n_seeds)]

    def final_loss(preset, D, m, q, tau, seed, eta, edges=None, p=None,
                   shard_seed=11):
        net = make_two_level_network(D, m, hub_edges=edges, step_probs=p)
        N = D * m
        attach_shards(net, partition_iid(obj.dataset, [1.0 / N] * N,
                                         seed=shard_seed))
        config = SimConfig(eta=eta, tau=tau, q=q, K=K, batch_size=1,
                           seed=seed, eval_every=K)
        return run_preset(preset, net, obj, config)[-1].loss_full

    # (a) More frequent averaging never hurts: the four schedules with a
    # shared 32-step budget order by hub/sub-network averaging frequency,
    # each adjacent pair separated or tied within one pooled stddev.
    schedule = [("distributed-sgd", 1, 1), ("hl-sgd", 8, 4),
                ("hl-sgd", 4, 8), ("local-sgd", 1, 32)]
    finals = []
    for preset, q, tau in schedule:
        finals.append(np.array([
            final_loss(preset, 10, 5, q, tau, s, eta=0.2) for s in seeds
        ]))
    for lo, hi in zip(finals, finals[1:]):
        assert lo.mean() <= hi.mean() + _pooled_std(lo, hi)

    # (b) Sparser hub graph converges no better under matched worker totals.
    path_finals = np.array([
        final_loss("mll-sgd", 20, 3, 4, 8, s, eta=0.2, edges=path_edges(20))
        for s in seeds
    ])
    complete_finals = np.array([
        final_loss("mll-sgd", 10, 6, 4, 8, s, eta=0.2) for s in seeds
    ])
    assert path_finals.mean() >= complete_finals.mean()

    # (c) Matching average participation gives matching losses (within two
    # pooled stddevs, data partition redrawn per seed), while full
    # participation is strictly ahead mid-convergence.
    N = 50
    distributions = {
        "fixed": np.full(N, 0.55),
        "uniform": np.tile(np.linspace(0.1, 1.0, 10), 5),
        "skewed-low": np.array([0.5] * 45 + [1.0] * 5),
        "skewed-high": np.array([0.6] * 45 + [0.1] * 5),
        "full": np.ones(N),
    }
    results = {}
    for name, p in distributions.items():
        assert p.mean() == pytest.approx(0.55 if name != "full" else 1.0)
        results[name] = np.array([
            final_loss("mll-sgd", 10, 5, 4, 8, s, eta=0.02, p=p, shard_seed=s)
            for s in seeds
        ])
    matched = ["fixed", "uniform", "skewed-low", "skewed-high"]
    for i in range(len(matched)):
        for j in range(i + 1, len(matched)):
            x, y = results[matched[i]], results[matched[j]]
            assert abs(x.mean() - y.mean()) <= 2.0 * _pooled_std(x, y)
    for name in matched:
        assert results["full"].mean() < results[name].mean()

    assert time.time() - t0 <= 600.0


def test_7_slot_budget_comparison():
    """Fixed-period averaging beats wait-for-all at equal slot budgets."""
    obj = make_logistic(1000, 10, seed=202, regularization=1e-3)
    N = 20
    net = make_two_level_network(
        4, 5, step_probs=np.array([0.9] * 18 + [0.6] * 2)
    )
    attach_shards(net, partition_iid(obj.dataset, [1.0 / N] * N, seed=11))
    seeds = [derive_seed(6, i) for i in range(10)]
    for tau, q in ((32, 1), (8, 4)):
        fixed_finals, wait_finals = [], []
        for s in seeds:
            config = SimConfig(eta=0.2, tau=tau, q=q, K=640, batch_size=1,
                               seed=s, eval_every=640)
            traces = run_slot_comparison(
                SlotSimSpec("wait-for-steps", tau, q), net, obj, config
            )
            fixed_finals.append(traces["fixed-period"][-1].loss_full)
            wait_finals.append(traces["wait-for-steps"][-1].loss_full)
        fixed_finals = np.array(fixed_finals)
        wait_finals = np.array(wait_finals)
        assert fixed_finals.mean() <= wait_finals.mean()
        test = stats.ttest_rel(wait_finals, fixed_finals, alternative="greater")
        assert test.pvalue < 0.05


def test_8_gradients_match_finite_differences():
    """Analytic gradients agree with central differences at random points."""
    objectives = [
        make_quadratic(64, 6, seed=61, mean_shift=1.5,
                       hessian_eigs=np.linspace(0.4, 3.0, 6)),
        make_logistic(200, 6, seed=62, regularization=0.01),
    ]
    rng = np.random.default_rng(63)
    h = 1e-6
    for obj in objectives:
        for _ in range(50):
            x = rng.standard_normal(obj.dim)
            grad = obj.gradient(x)
            fd = np.empty(obj.dim)
            for d in range(obj.dim):
                e = np.zeros(obj.dim)
                e[d] = h
                fd[d] = (obj.value(x + e) - obj.value(x - e)) / (2.0 * h)
            denom = max(np.linalg.norm(grad), 1.0)
            assert np.linalg.norm(fd - grad) / denom <= 1e-5


def test_9_byte_identical_outputs(tmp_path):
    """Reruns with the same config and seed reproduce every output byte."""
    raw = {
        "network": {"num_subnets": 3, "workers_per_subnet": 4,
                    "topology": "ring",
                    "p": {"kind": "fixed", "value": 0.8}},
        "objective": {"kind": "logistic", "batch_size": 2,
                      "synthetic": {"n_samples": 120, "dim": 4}},
        "run": {"eta": 0.05, "tau": 2, "q": 2, "K": 16, "seed": 9,
                "eval_every": 4},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(raw))
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (first, second):
        code = cli.main(["simulate", "--config", str(config_path),
                         "--out", str(out)])
        assert code == cli.EXIT_OK
    assert first.read_bytes() == second.read_bytes()

    raw["sweep"] = {"seeds": [1, 2, 3], "qtau_pairs": [[1, 4], [2, 2], [4, 1]]}
    sweep_path = tmp_path / "sweep.json"
    sweep_path.write_text(json.dumps(raw))
    serial, parallel = tmp_path / "s1.csv", tmp_path / "s2.csv"
    assert cli.main(["sweep", "--config", str(sweep_path), "--out",
                     str(serial), "--jobs", "1"]) == cli.EXIT_OK
    assert cli.main(["sweep", "--config", str(sweep_path), "--out",
                     str(parallel), "--jobs", "2"]) == cli.EXIT_OK
    assert serial.read_bytes() == parallel.read_bytes()
