"""Term-by-term evaluation of the convergence bound and step-size feasibility.

The published theorem statement and its appendix derivation disagree on the
first summand of the constant Gamma (zeta/(1 - zeta^2) in the statement,
1/(1 - zeta^2) in the derivation). Both variants are exposed; feasibility
checks use the larger appendix value so feasibility is never claimed on the
smaller constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SQRT2_THRESHOLD = 2.0 - np.sqrt(2.0)


@dataclass
class BoundInputs:
    """Everything the bound needs: smoothness/variance constants, schedule, weights."""

    L: float
    sigma_sq: float
    beta: float
    eta: float
    q: int
    tau: int
    K: int
    zeta: float
    a: np.ndarray
    p: np.ndarray
    F_init_minus_Finf: float

    def validate(self) -> None:
        if min(self.L, self.sigma_sq, self.beta, self.eta) < 0 or self.eta == 0:
            raise ValueError("L, sigma_sq, beta must be >= 0 and eta > 0")
        if not 0 <= self.zeta < 1:
            raise ValueError(f"zeta must be in [0, 1), got {self.zeta}")
        if self.K % (self.q * self.tau) != 0:
            raise ValueError(f"K={self.K} must be a multiple of q*tau={self.q * self.tau}")
        if self.F_init_minus_Finf < 0:
            raise ValueError("F_init_minus_Finf must be nonnegative")
        if len(self.a) != len(self.p):
            raise ValueError("a and p must have equal length")

    @property
    def p_bar(self) -> float:
        return float(self.a @ self.p)


@dataclass
class BoundReport:
    """The four summands of the bound, their total, and per-worker feasibility."""

    term1: float
    term2: float
    term3: float
    term4: float
    total: float
    asymptotic_total: float
    feasible_per_worker: np.ndarray
    p_bar: float
    gamma_appendix: float
    gamma_theorem: float
    all_feasible: bool = field(init=False)

    def __post_init__(self) -> None:
        self.all_feasible = bool(np.all(self.feasible_per_worker))


def gamma(zeta: float) -> tuple[float, float]:
    """Both variants of the Gamma constant: (appendix, theorem-statement).

    appendix: 1/(1 - z^2) + 2/(1 - z) + z/(1 - z)^2   (the larger value)
    theorem:  z/(1 - z^2) + 2/(1 - z) + z/(1 - z)^2
    """
    if not 0 <= zeta < 1:
        raise ValueError(f"zeta must be in [0, 1), got {zeta}")
    common = 2.0 / (1.0 - zeta) + zeta / (1.0 - zeta) ** 2
    return 1.0 / (1.0 - zeta**2) + common, zeta / (1.0 - zeta**2) + common


def stepsize_feasible(inputs: BoundInputs) -> np.ndarray:
    """Per-worker booleans for the step-size condition.

    Worker i is feasible when
      4 p_i - p_i^2 - 2 >= eta L (a_i p_i (beta + 1) - a_i p_i^2 + p_i^2)
                           + 8 L^2 eta^2 q^2 tau^2 Gamma
    with the appendix Gamma. Any p_i <= 2 - sqrt(2) makes the left side
    nonpositive and the worker infeasible for every positive step size.
    """
    inputs.validate()
    gamma_app, _ = gamma(inputs.zeta)
    a, p = np.asarray(inputs.a, dtype=float), np.asarray(inputs.p, dtype=float)
    lhs = 4.0 * p - p**2 - 2.0
    rhs = (
        inputs.eta * inputs.L * (a * p * (inputs.beta + 1.0) - a * p**2 + p**2)
        + 8.0 * inputs.L**2 * inputs.eta**2 * inputs.q**2 * inputs.tau**2 * gamma_app
    )
    return lhs >= rhs


def theorem1_bound(inputs: BoundInputs) -> BoundReport:
    """Evaluate the four-term bound on the K-averaged squared gradient norm.

    term3 uses the finite-K factor q^3 tau^3 (1/(q tau) - 1/K); the
    asymptotic total replaces it with the displayed q^2 tau^2 limit.
    """
    inputs.validate()
    L, eta, q, tau, K = inputs.L, inputs.eta, inputs.q, inputs.tau, inputs.K
    z = inputs.zeta
    sigma_sq = inputs.sigma_sq
    a, p = np.asarray(inputs.a, dtype=float), np.asarray(inputs.p, dtype=float)
    p_bar = inputs.p_bar

    term1 = 2.0 * inputs.F_init_minus_Finf / (eta * K)
    term2 = sigma_sq * eta * L * float(np.sum(a**2 * p))

    zeta_poly = z**2 / (1.0 - z**2) + 2.0 * z / (1.0 - z) + 1.0 / (1.0 - z) ** 2
    term3 = (
        4.0 * L**2 * eta**2 * sigma_sq
        * q**3 * tau**3 * (1.0 / (q * tau) - 1.0 / K)
        * zeta_poly * p_bar
    )
    term3_limit = 4.0 * L**2 * eta**2 * sigma_sq * q**2 * tau**2 * zeta_poly * p_bar

    term4 = (
        4.0 * L**2 * eta**2 * sigma_sq
        * ((2.0 - z) / (1.0 - z))
        * (tau**2 * (q - 1) * (2 * q + 1) / 6.0 + (tau - 1) * (2 * tau + 1) / 6.0)
        * p_bar
    )

    gamma_app, gamma_thm = gamma(z)
    return BoundReport(
        term1=term1,
        term2=term2,
        term3=term3,
        term4=term4,
        total=term1 + term2 + term3 + term4,
        asymptotic_total=term2 + term3_limit + term4,
        feasible_per_worker=stepsize_feasible(inputs),
        p_bar=p_bar,
        gamma_appendix=gamma_app,
        gamma_theorem=gamma_thm,
    )


def corollary1_rate(L: float, K: int, q: int, tau: int, F_gap: float,
                    sigma_sq: float) -> tuple[float, tuple[float, float]]:
    """Step size 1/(L sqrt(K)) and the two O(1/sqrt(K)) rate terms (unit constants).

    Requires q^2 tau^2 <= sqrt(K) and q tau < K.
    """
    if L <= 0 or K < 1:
        raise ValueError("need L > 0 and K >= 1")
    if q**2 * tau**2 > np.sqrt(K):
        raise ValueError(
            f"precondition violated: q^2 tau^2 = {q**2 * tau**2} > sqrt(K) = {np.sqrt(K):g}"
        )
    if q * tau >= K:
        raise ValueError(f"precondition violated: q*tau = {q * tau} >= K = {K}")
    eta = 1.0 / (L * np.sqrt(K))
    return float(eta), (float(L * F_gap / np.sqrt(K)), float(sigma_sq / np.sqrt(K)))
