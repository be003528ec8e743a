"""Command-line surface: simulate | check-matrices | bound | sweep.

All commands read a JSON config (see config module). CSV output uses the
fixed header ``k,time_slot,loss_full,grad_norm_sq,consensus_err,test_acc,
preset,seed``, shortest round-trip float formatting, LF newlines, and
atomic writes (temp file + rename), so reruns with the same config and
seed are byte-identical regardless of parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import replace
from multiprocessing import get_context

import numpy as np

from . import bounds, config as cfg, engine, harness, spectral, topology
from .engine import DivergenceError, TraceRecord
from .objectives import estimate_constants

CSV_HEADER = "k,time_slot,loss_full,grad_norm_sq,consensus_err,test_acc,preset,seed"

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    return repr(float(x))


def trace_rows(records: list[TraceRecord], preset: str, seed: int) -> list[str]:
    rows = []
    for r in records:
        rows.append(
            f"{r.k},{r.time_slot},{_fmt(r.loss_full)},{_fmt(r.grad_norm_sq)},"
            f"{_fmt(r.consensus_err)},{_fmt(r.test_acc)},{preset},{seed}"
        )
    return rows


def write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_simulate(config_path: str, out_path: str,
                 seed_override: int | None = None) -> int:
    try:
        raw = cfg.load_config(config_path)
        scenario = cfg.build_scenario(raw, seed_override=seed_override)
    except (cfg.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        records = harness.run_preset(
            scenario.preset, scenario.net, scenario.objective, scenario.sim
        )
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    lines = [CSV_HEADER] + trace_rows(records, scenario.preset, scenario.sim.seed)
    write_atomic(out_path, "\n".join(lines) + "\n")
    return EXIT_OK


def _matrix_checks(mix: topology.MixingSet) -> list[tuple[str, float, float]]:
    """(name, residual, tolerance) triples for every mixing-matrix invariant."""
    H, V, Z, a, b, v, A = mix.H, mix.V, mix.Z, mix.a, mix.b, mix.v, mix.A
    N = len(a)
    ones = np.ones(N)
    d_ones = np.ones(len(b))
    checks = [
        ("H nonnegative", float(max(0.0, -min(H.min(), 0.0))), 1e-12),
        ("V nonnegative", float(max(0.0, -min(V.min(), 0.0))), 1e-12),
        ("Z nonnegative", float(max(0.0, -min(Z.min(), 0.0))), 1e-12),
        ("H columns sum to 1", float(np.abs(H.sum(axis=0) - 1).max()), 1e-12),
        ("V columns sum to 1", float(np.abs(V.sum(axis=0) - 1).max()), 1e-12),
        ("Z columns sum to 1", float(np.abs(Z.sum(axis=0) - 1).max()), 1e-12),
        ("detailed balance H_ij b_j = H_ji b_i",
         float(np.abs(H * b[None, :] - (H * b[None, :]).T).max()), 1e-12),
        ("Z a = a", float(np.abs(Z @ a - a).max()), 1e-12),
        ("V a = a", float(np.abs(V @ a - a).max()), 1e-12),
        ("1^T Z = 1^T", float(np.abs(ones @ Z - ones).max()), 1e-12),
        ("1^T V = 1^T", float(np.abs(ones @ V - ones).max()), 1e-12),
        ("Z V = Z", float(np.abs(Z @ V - Z).max()), 1e-12),
        ("V Z = Z", float(np.abs(V @ Z - Z).max()), 1e-12),
        ("V idempotent", float(np.abs(V @ V - V).max()), 1e-12),
        ("a sums to 1", float(abs(a.sum() - 1)), 1e-12),
        ("b sums to 1", float(abs(b.sum() - 1)), 1e-12),
        ("H b = b", float(np.abs(H @ b - b).max()), 1e-12),
        ("1^T H = 1^T", float(np.abs(d_ones @ H - d_ones).max()), 1e-12),
    ]
    for name, T in (("V", V), ("Z", Z), ("I", np.eye(N))):
        checks.append(
            (f"{name} A = A {name} = A",
             float(max(np.abs(T @ A - A).max(), np.abs(A @ T - A).max())), 1e-10)
        )
    # Spectrum equality between Z and H (nonzero eigenvalues), then Lemma-style
    # operator norm decay of the consensus deviation.
    z_eigs = np.sort(np.linalg.eigvals(Z).real)
    h_eigs = spectral.eigen_detailed_balance(H, b).eigenvalues
    padded = np.sort(np.concatenate([h_eigs, np.zeros(N - len(b))]))
    checks.append(("Z nonzero spectrum = H spectrum",
                   float(np.abs(z_eigs - padded).max()), 1e-8))
    # The decay and deviation identities hold in the operator norm induced
    # by the worker weights; the diag(sqrt(a)) similarity maps that norm to
    # the plain spectral norm.
    s = np.sqrt(a)

    def wnorm(Q: np.ndarray) -> float:
        return spectral.operator_norm(Q * s[None, :] / s[:, None])

    zeta = mix.zeta
    Zj = np.eye(N)
    worst = 0.0
    for j in range(1, 9):
        Zj = Zj @ Z
        worst = max(worst, abs(wnorm(Zj - A) - zeta**j))
    checks.append(("||Z^j - A||_op = zeta^j (j <= 8)", float(worst), 1e-7))
    if len(b) > 1:
        checks.append(("||V - A||_op = 1", float(abs(wnorm(V - A) - 1.0)), 1e-8))
    checks.append(("||I - A||_op = 1" if N > 1 else "||I - A||_op = 0",
                   float(abs(wnorm(np.eye(N) - A) - (1.0 if N > 1 else 0.0))),
                   1e-8))
    return checks


def cmd_check_matrices(config_path: str) -> int:
    try:
        raw = cfg.load_config(config_path)
        scenario = cfg.build_scenario(raw)
        mix = topology.build_mixing_set(scenario.net, H=scenario.explicit_H)
    except (cfg.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    failures = 0
    for name, residual, tol in _matrix_checks(mix):
        ok = residual <= tol
        failures += 0 if ok else 1
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: residual {residual:.3e} (tol {tol:g})")
    print(f"zeta = {mix.zeta!r}")
    return EXIT_OK if failures == 0 else EXIT_FAIL


def cmd_bound(config_path: str, as_json: bool = False,
              seed_override: int | None = None) -> int:
    try:
        raw = cfg.load_config(config_path)
        scenario = cfg.build_scenario(raw, seed_override=seed_override)
        mix = topology.build_mixing_set(scenario.net, H=scenario.explicit_H)
    except (cfg.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    obj, sim, net = scenario.objective, scenario.sim, scenario.net
    shards = None
    if any(w.shard is not None for w in net.workers):
        from .objectives import Shard

        shards = [Shard(worker=w.id, indices=w.shard) for w in net.workers]
    L, sigma_sq, beta = estimate_constants(
        obj, probe_count=8, seed=sim.seed, batch_size=sim.batch_size, shards=shards
    )
    x_init = np.zeros(obj.dim)
    f_init = obj.value(x_init)
    f_gap = max(f_init - obj.f_inf(), 0.0)
    inputs = bounds.BoundInputs(
        L=L, sigma_sq=sigma_sq, beta=beta, eta=sim.eta, q=sim.q, tau=sim.tau,
        K=sim.K, zeta=mix.zeta, a=mix.a, p=net.step_probs(),
        F_init_minus_Finf=f_gap,
    )
    report = bounds.theorem1_bound(inputs)
    payload = {
        "L": L,
        "sigma_sq": sigma_sq,
        "beta": beta,
        "zeta": mix.zeta,
        "p_bar": report.p_bar,
        "F_init_minus_Finf": f_gap,
        "gamma_appendix": report.gamma_appendix,
        "gamma_theorem": report.gamma_theorem,
        "term1": report.term1,
        "term2": report.term2,
        "term3": report.term3,
        "term4": report.term4,
        "total": report.total,
        "asymptotic_total": report.asymptotic_total,
        "feasible_per_worker": [bool(f) for f in report.feasible_per_worker],
        "all_feasible": report.all_feasible,
    }
    if as_json:
        print(json.dumps(payload, indent=2))
    else:
        for key, value in payload.items():
            if key == "feasible_per_worker":
                value = "".join("1" if f else "0" for f in value)
            print(f"{key}: {value}")
        if not report.all_feasible:
            infeasible = [i for i, f in enumerate(report.feasible_per_worker) if not f]
            print(
                f"warning: step size infeasible for workers {infeasible}; any "
                f"p_i <= 2 - sqrt(2) ~ {bounds.SQRT2_THRESHOLD:.4f} cannot satisfy "
                "the condition for any eta"
            )
    return EXIT_OK


def _sweep_axes(scenario: cfg.Scenario) -> list[dict]:
    sweep = scenario.sweep
    qtau = sweep.get("qtau_pairs", [(scenario.sim.q, scenario.sim.tau)])
    p_dists = sweep.get("p_distributions", [None])
    topos = sweep.get("topologies", [None])
    combos = []
    for topo in topos:
        for p_dist in p_dists:
            for q, tau in qtau:
                for seed in sweep["seeds"]:
                    combos.append(
                        {"q": q, "tau": tau, "p": p_dist, "topology": topo, "seed": seed}
                    )
    return combos


def _sweep_one(args: tuple[dict, dict]) -> tuple[str, float]:
    raw, combo = args
    raw = json.loads(json.dumps(raw))
    raw["network"] = dict(raw["network"])
    if combo["p"] is not None:
        raw["network"]["p"] = combo["p"]
    if combo["topology"] is not None:
        raw["network"]["topology"] = combo["topology"]
    scenario = cfg.build_scenario(raw, seed_override=combo["seed"])
    sim = replace(scenario.sim, q=combo["q"], tau=combo["tau"])
    sim.validate()
    records = harness.run_preset(scenario.preset, scenario.net, scenario.objective, sim)
    label = (
        f"q={combo['q']};tau={combo['tau']};"
        f"p={_axis_label(combo['p'])};topology={_axis_label(combo['topology'])}"
    )
    return label, records[-1].loss_full


def _axis_label(value) -> str:
    if value is None:
        return "base"
    if isinstance(value, str):
        return value
    return json.dumps(value, sort_keys=True)


def cmd_sweep(config_path: str, out_path: str, jobs: int = 1,
              seed_override: int | None = None) -> int:
    try:
        raw = cfg.load_config(config_path)
        scenario = cfg.build_scenario(raw)
        if scenario.sweep is None:
            raise cfg.ConfigError("config has no sweep section")
        combos = _sweep_axes(scenario)
        for combo in combos:
            if combo["q"] < 1 or combo["tau"] < 1:
                raise cfg.ConfigError(f"invalid sweep pair {combo['q']},{combo['tau']}")
            if scenario.sim.K % (combo["q"] * combo["tau"]) != 0:
                raise cfg.ConfigError(
                    f"K={scenario.sim.K} is not a multiple of "
                    f"q*tau={combo['q'] * combo['tau']}"
                )
    except (cfg.ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    work = [(raw, combo) for combo in combos]
    try:
        if jobs > 1:
            with get_context("spawn").Pool(jobs) as pool:
                results = pool.map(_sweep_one, work)
        else:
            results = [_sweep_one(item) for item in work]
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    lines = ["configuration,seed,final_loss"]
    for combo, (label, loss) in zip(combos, results):
        lines.append(f"{label},{combo['seed']},{_fmt(loss)}")
    write_atomic(out_path, "\n".join(lines) + "\n")

    by_label: dict[str, list[float]] = {}
    for label, loss in results:
        by_label.setdefault(label, []).append(loss)
    print("configuration,mean_final_loss,std_final_loss,runs")
    for label, losses in by_label.items():
        arr = np.array(losses)
        std = arr.std(ddof=1) if len(arr) > 1 else 0.0
        print(f"{label},{arr.mean()!r},{std!r},{len(arr)}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mllsgd",
        description="Simulate multi-level local SGD, check its mixing matrices, "
        "and evaluate the convergence bound.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run one simulation, write a CSV trace")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=None)

    p_chk = sub.add_parser("check-matrices", help="verify all mixing-matrix invariants")
    p_chk.add_argument("--config", required=True)

    p_bnd = sub.add_parser("bound", help="evaluate the convergence bound term by term")
    p_bnd.add_argument("--config", required=True)
    p_bnd.add_argument("--seed", type=int, default=None)
    p_bnd.add_argument("--json", action="store_true")

    p_swp = sub.add_parser("sweep", help="run the config's sweep section")
    p_swp.add_argument("--config", required=True)
    p_swp.add_argument("--out", required=True)
    p_swp.add_argument("--jobs", type=int, default=1)
    p_swp.add_argument("--seed", type=int, default=None)

    args = parser.parse_args(argv)
    if args.command == "simulate":
        return cmd_simulate(args.config, args.out, seed_override=args.seed)
    if args.command == "check-matrices":
        return cmd_check_matrices(args.config)
    if args.command == "bound":
        return cmd_bound(args.config, as_json=args.json, seed_override=args.seed)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.out, jobs=args.jobs, seed_override=args.seed)
    parser.error(f"unknown command {args.command}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
