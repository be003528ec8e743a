"""Multi-level local SGD: simulator, mixing-matrix checks, and bound evaluation."""

from .bounds import BoundInputs, BoundReport, corollary1_rate, gamma, stepsize_feasible, theorem1_bound
from .engine import SimConfig, SimResult, SimState, TraceRecord, run, simulate
from .objectives import Dataset, LogisticObjective, Objective, QuadraticObjective, Shard
from .topology import MixingSet, MixOp, NetworkSpec, WorkerSpec, build_mixing_set, select_T

__all__ = [
    "BoundInputs",
    "BoundReport",
    "Dataset",
    "LogisticObjective",
    "MixOp",
    "MixingSet",
    "NetworkSpec",
    "Objective",
    "QuadraticObjective",
    "Shard",
    "SimConfig",
    "SimResult",
    "SimState",
    "TraceRecord",
    "WorkerSpec",
    "build_mixing_set",
    "corollary1_rate",
    "gamma",
    "run",
    "select_T",
    "simulate",
    "stepsize_feasible",
    "theorem1_bound",
]

__version__ = "0.1.0"
