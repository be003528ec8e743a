"""Weighted norms, operator norms, and a dense symmetric eigensolver.

The eigensolver is a cyclic Jacobi iteration, used on the symmetrized form
of the hub matrix to obtain its (real) spectrum and the quantity zeta.
Operator norms go through an eigendecomposition of Q^T Q rather than power
iteration so repeated runs are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JACOBI_OFFDIAG_TOL = 1e-13
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-9


@dataclass
class Spectrum:
    """Real eigenvalues sorted in descending order."""

    eigenvalues: np.ndarray
    method: str = "symmetric-similar"


def weighted_frobenius_sq(X: np.ndarray, a: np.ndarray) -> float:
    """a-weighted squared Frobenius norm of an n x N matrix, weights per column.

    Equals sum_i a_i * ||X[:, i]||^2; used on model matrices whose columns
    are per-worker vectors.
    """
    X = np.asarray(X, dtype=float)
    a = np.asarray(a, dtype=float)
    if X.shape[1] != len(a):
        raise ValueError(f"X has {X.shape[1]} columns but a has length {len(a)}")
    if (a < 0).any():
        raise ValueError("weights must be nonnegative")
    return float(np.sum(a * np.sum(X * X, axis=0)))


def row_weighted_frobenius_sq(X: np.ndarray, a: np.ndarray) -> float:
    """Variant weighting rows instead of columns: sum_i a_i * ||X[i, :]||^2."""
    return weighted_frobenius_sq(np.asarray(X, dtype=float).T, a)


def operator_norm(Q: np.ndarray) -> float:
    """Largest singular value, via the spectrum of Q^T Q."""
    Q = np.asarray(Q, dtype=float)
    if not np.isfinite(Q).all():
        raise ValueError("matrix has non-finite entries")
    eigs = np.linalg.eigvalsh(Q.T @ Q)
    return float(np.sqrt(max(eigs[-1], 0.0)))


def jacobi_eigh(S: np.ndarray,
                offdiag_tol: float = JACOBI_OFFDIAG_TOL,
                max_sweeps: int = JACOBI_MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues descending, eigenvectors as columns in the same
    order). Sweeps stop once the off-diagonal Frobenius mass drops below
    offdiag_tol relative to ||S||_F.
    """
    S = np.asarray(S, dtype=float)
    n = S.shape[0]
    if S.shape != (n, n):
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    A = S.copy()
    Q = np.eye(n)
    scale = max(np.linalg.norm(S), 1e-300)
    mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(A[mask] ** 2))
        if off <= offdiag_tol * scale:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apq = A[p, r]
                if apq == 0.0:
                    continue
                app, aqq = A[p, p], A[r, r]
                theta = (aqq - app) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * A[:, p] - s * A[:, r]
                rot_q = s * A[:, p] + c * A[:, r]
                A[:, p], A[:, r] = rot_p, rot_q
                rot_p = c * A[p, :] - s * A[r, :]
                rot_q = s * A[p, :] + c * A[r, :]
                A[p, :], A[r, :] = rot_p, rot_q
                A[p, r] = A[r, p] = 0.0
                rot_p = c * Q[:, p] - s * Q[:, r]
                rot_q = s * Q[:, p] + c * Q[:, r]
                Q[:, p], Q[:, r] = rot_p, rot_q
    eigvals = np.diag(A).copy()
    order = np.argsort(eigvals)[::-1]
    return eigvals[order], Q[:, order]


def eigen_detailed_balance(H: np.ndarray, b: np.ndarray) -> Spectrum:
    """Spectrum of a column-stochastic H satisfying H[i,j] b_j = H[j,i] b_i.

    Detailed balance makes S = diag(b)^(-1/2) H diag(b)^(1/2) symmetric and
    similar to H, so the real spectrum of S is the spectrum of H. An
    asymmetric S signals an invalid (H, b) pair and is rejected.
    """
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    if (b <= 0).any():
        raise ValueError("b must be entrywise positive")
    sqrt_b = np.sqrt(b)
    S = (H * sqrt_b[None, :]) / sqrt_b[:, None]
    asym = np.abs(S - S.T).max()
    if asym > SYMMETRY_TOL:
        raise ValueError(
            f"symmetrized matrix is asymmetric (residual {asym:.3e}); "
            "H and b do not satisfy detailed balance"
        )
    S = 0.5 * (S + S.T)
    eigvals, _ = jacobi_eigh(S)
    return Spectrum(eigenvalues=eigvals, method="symmetric-similar")


def zeta(spectrum: Spectrum) -> float:
    """Max magnitude among the non-principal eigenvalues; 0 for a 1x1 spectrum."""
    eigs = spectrum.eigenvalues
    if len(eigs) <= 1:
        return 0.0
    return float(max(abs(eigs[1]), abs(eigs[-1])))


@dataclass
class NormCheckReport:
    """Outcome of randomized checks of the two norm inequalities.

    Margins are (rhs - lhs); the minimum margin over all trials is reported
    for each inequality, and any margin below -1e-12 is recorded as a
    violation with its inputs.
    """

    trials: int
    min_margin_product: float
    min_margin_trace: float
    violations: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_lemma_norm_inequalities(trials: int, seed: int,
                                   max_dim: int = 8) -> NormCheckReport:
    """Randomized check of the submultiplicative and trace norm inequalities.

    For random C (M x N), D (N x N or N x M) and random simplex weights a:
      row-weighted ||C D||_F <= row-weighted ||C||_F * ||D||_op
      |Tr(diag(a)^1/2 C D diag(a)^1/2)| <= row-weighted ||C||_F * col-weighted ||D||_F
    The weights ride on the axis of C untouched by the multiplication, which
    is exactly how the simulation uses them (weights per worker column of
    the model matrix, operators applied on the worker axis).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    min_prod = np.inf
    min_trace = np.inf
    violations: list[dict] = []
    for t in range(trials):
        m = int(rng.integers(1, max_dim + 1))
        n = int(rng.integers(1, max_dim + 1))
        a = rng.random(m) + 1e-3
        a /= a.sum()
        C = rng.standard_normal((m, n))
        D = rng.standard_normal((n, n))
        lhs = np.sqrt(row_weighted_frobenius_sq(C @ D, a))
        rhs = np.sqrt(row_weighted_frobenius_sq(C, a)) * operator_norm(D)
        margin = rhs - lhs
        min_prod = min(min_prod, margin)
        if margin < -1e-12 * max(rhs, 1.0):
            violations.append({"lemma": "product", "trial": t, "lhs": lhs, "rhs": rhs})

        # Trace inequality: C D must be square on the weighted axis.
        C2 = rng.standard_normal((m, n))
        D2 = rng.standard_normal((n, m))
        sqrt_a = np.sqrt(a)
        lhs2 = abs(np.trace(sqrt_a[:, None] * (C2 @ D2) * sqrt_a[None, :]))
        rhs2 = np.sqrt(row_weighted_frobenius_sq(C2, a)) * np.sqrt(weighted_frobenius_sq(D2, a))
        margin2 = rhs2 - lhs2
        min_trace = min(min_trace, margin2)
        if margin2 < -1e-12 * max(rhs2, 1.0):
            violations.append({"lemma": "trace", "trial": t, "lhs": lhs2, "rhs": rhs2})
    return NormCheckReport(
        trials=trials,
        min_margin_product=float(min_prod),
        min_margin_trace=float(min_trace),
        violations=violations,
    )
