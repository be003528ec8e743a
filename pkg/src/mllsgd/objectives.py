"""Datasets, loss functions, gradient oracles, and smoothness/variance constants.

Two objective families are provided: a strongly convex quadratic (analytic
constants, closed-form minimizer) and binary logistic regression with
optional L2 regularization. Both expose full gradients, mini-batch
gradients, and a batched gradient kernel the simulation engine uses to
evaluate many workers at once.

The batched kernel is shaped so that the single-worker case runs through
exactly the same per-slice arithmetic as the many-worker case; traces do
not depend on how many workers are evaluated together.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Feature matrix plus labels; labels are {0,1} for classification."""

    features: np.ndarray
    labels: np.ndarray
    provenance: str = "synthetic-quadratic"

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ValueError("features must be a nonempty n x dim matrix")
        if len(self.labels) != len(self.features):
            raise ValueError(
                f"{len(self.features)} samples but {len(self.labels)} labels"
            )
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite entries")

    @property
    def n_samples(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Shard:
    """One worker's slice of the dataset, as sample indices."""

    worker: int
    indices: np.ndarray

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.indices)


class Objective:
    """Common interface: full objective, batched gradients, constants."""

    kind: str
    dataset: Dataset
    regularization: float
    analytic_L: float | None = None
    analytic_sigma_sq: float | None = None
    analytic_beta: float | None = None

    @property
    def dim(self) -> int:
        return self.dataset.dim

    def value(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_batch_many(self, models: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Per-worker mini-batch gradients.

        models: (m, dim) stacked model vectors; idx: (m, B) dataset indices.
        Returns (m, dim). Every numpy reduction is batched per slice so the
        m = 1 path is bit-identical to one slice of the m > 1 path.
        """
        raise NotImplementedError

    def grad_batch(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self.grad_batch_many(x[None, :], np.asarray(idx)[None, :])[0]

    def f_inf(self) -> float:
        """Lower bound on the objective (exact minimum when available)."""
        raise NotImplementedError


class QuadraticObjective(Objective):
    """F(x) = mean over samples s of (1/2) (x - s)^T Q (x - s).

    Q is symmetric positive definite; the minimizer is the sample mean and
    L = lambda_max(Q) exactly.
    """

    kind = "quadratic"

    def __init__(self, dataset: Dataset, Q: np.ndarray | None = None):
        self.dataset = dataset
        self.regularization = 0.0
        dim = dataset.dim
        self.Q = np.eye(dim) if Q is None else np.asarray(Q, dtype=float)
        if self.Q.shape != (dim, dim):
            raise ValueError(f"Q has shape {self.Q.shape}, expected ({dim}, {dim})")
        if np.abs(self.Q - self.Q.T).max() > 1e-12:
            raise ValueError("Q must be symmetric")
        eigs = np.linalg.eigvalsh(self.Q)
        if eigs[0] <= 0:
            raise ValueError("Q must be positive definite")
        self.analytic_L = float(eigs[-1])
        self._mean = dataset.features.mean(axis=0)

    def minimizer(self) -> np.ndarray:
        return self._mean.copy()

    def f_inf(self) -> float:
        return self.value(self._mean)

    def value(self, x: np.ndarray) -> float:
        d = x[None, :] - self.dataset.features
        return float(0.5 * np.mean(np.einsum("nd,de,ne->n", d, self.Q, d)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.Q @ (x - self._mean)

    def grad_batch_many(self, models: np.ndarray, idx: np.ndarray) -> np.ndarray:
        batch_means = self.dataset.features[idx].mean(axis=1)  # (m, dim)
        d = models - batch_means
        return np.matmul(d[:, None, :], self.Q)[:, 0, :]


class LogisticObjective(Objective):
    """Binary cross-entropy with optional L2 term (lam/2) ||x||^2."""

    kind = "logistic"

    def __init__(self, dataset: Dataset, regularization: float = 0.0,
                 test_set: Dataset | None = None):
        bad = ~np.isin(dataset.labels, (0.0, 1.0))
        if bad.any():
            raise ValueError("logistic labels must be 0 or 1")
        if regularization < 0:
            raise ValueError("regularization must be nonnegative")
        self.dataset = dataset
        self.regularization = float(regularization)
        self.test_set = test_set
        # Standard smoothness bound for logistic loss plus the L2 term.
        gram = dataset.features.T @ dataset.features / dataset.n_samples
        self.analytic_L = float(np.linalg.eigvalsh(gram)[-1] / 4.0 + regularization)

    def f_inf(self) -> float:
        return 0.0

    def value(self, x: np.ndarray) -> float:
        z = self.dataset.features @ x
        y = self.dataset.labels
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        return loss + 0.5 * self.regularization * float(x @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        z = self.dataset.features @ x
        resid = _sigmoid(z) - self.dataset.labels
        g = self.dataset.features.T @ resid / self.dataset.n_samples
        return g + self.regularization * x

    def grad_batch_many(self, models: np.ndarray, idx: np.ndarray) -> np.ndarray:
        feats = self.dataset.features[idx]          # (m, B, dim)
        labels = self.dataset.labels[idx]           # (m, B)
        z = np.matmul(feats, models[:, :, None])[:, :, 0]
        resid = (_sigmoid(z) - labels) / idx.shape[1]
        g = np.matmul(feats.transpose(0, 2, 1), resid[:, :, None])[:, :, 0]
        return g + self.regularization * models

    def test_accuracy(self, x: np.ndarray) -> float | None:
        """0.5-threshold accuracy on the held-out split, if one is attached."""
        if self.test_set is None:
            return None
        pred = (self.test_set.features @ x) > 0.0
        return float(np.mean(pred == (self.test_set.labels > 0.5)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def full_objective(obj: Objective, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Exact objective value and gradient over the whole dataset."""
    x = np.asarray(x, dtype=float)
    if len(x) != obj.dim:
        raise ValueError(f"model has dim {len(x)}, dataset has dim {obj.dim}")
    return obj.value(x), obj.gradient(x)


def sample_batch_indices(rng: np.random.Generator, shard_indices: np.ndarray,
                         batch_size: int) -> np.ndarray:
    """Uniform sample without replacement from a shard's index list.

    Uses a partial Fisher-Yates shuffle driven by a single vectorized
    integer draw. When batch_size equals the shard size the shard is
    returned in order and the stream is not advanced.
    """
    n = len(shard_indices)
    if batch_size < 1 or batch_size > n:
        raise ValueError(f"batch_size {batch_size} out of range for shard of {n}")
    if batch_size == n:
        return np.asarray(shard_indices, dtype=np.int64).copy()
    pool = np.arange(n)
    offsets = rng.integers(0, np.arange(n, n - batch_size, -1))
    for r, j in enumerate(offsets):
        t = r + int(j)
        pool[r], pool[t] = pool[t], pool[r]
    return np.asarray(shard_indices, dtype=np.int64)[pool[:batch_size]]


def minibatch_gradient(obj: Objective, shard: Shard, x: np.ndarray,
                       batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Gradient on a uniformly sampled mini-batch from the worker's shard."""
    if len(shard) == 0:
        raise ValueError(f"worker {shard.worker} has an empty shard")
    idx = sample_batch_indices(rng, shard.indices, batch_size)
    return obj.grad_batch(np.asarray(x, dtype=float), idx)


def partition_iid(dataset: Dataset, fractions: list[float], seed: int) -> list[Shard]:
    """Random disjoint shards with sizes round(fraction * n), largest-remainder corrected."""
    fractions = np.asarray(fractions, dtype=float)
    if (fractions < 0).any():
        raise ValueError("fractions must be nonnegative")
    if fractions.sum() > 1 + 1e-12:
        raise ValueError(f"fractions sum to {fractions.sum():.6f} > 1")
    n = dataset.n_samples
    total = int(round(fractions.sum() * n))
    base = np.floor(fractions * n).astype(int)
    remainder = fractions * n - base
    short = total - base.sum()
    # Largest remainders get the leftover samples; ties break on worker index.
    for i in np.lexsort((np.arange(len(fractions)), -remainder))[:short]:
        base[i] += 1
    perm = np.random.default_rng(np.random.SeedSequence((seed, 0x5A))).permutation(n)
    shards = []
    start = 0
    for worker, size in enumerate(base):
        shards.append(Shard(worker=worker, indices=perm[start:start + size]))
        start += size
    return shards


def estimate_constants(obj: Objective, probe_count: int, seed: int,
                       batch_size: int = 8, shards: list[Shard] | None = None,
                       draws: int = 64, probe_scale: float = 1.0
                       ) -> tuple[float, float, float]:
    """Estimate (L, sigma^2, beta) for the variance model E||g - grad F||^2 <= beta ||grad F||^2 + sigma^2.

    L comes from the max gradient-difference ratio over probe pairs (exact
    for the quadratic objective, which has an analytic L). The variance
    constants come from a least-squares fit of the per-probe worst-case
    sampled gradient variance against ||grad F||^2, clipped to >= 0.
    When shards are given the fit uses the worst worker per probe, so the
    constants cover every worker's sampling noise (including shard bias).
    """
    if probe_count < 2:
        raise ValueError("probe_count must be >= 2")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE5)))
    probes = [probe_scale * rng.standard_normal(obj.dim) for _ in range(probe_count)]
    grads = [obj.gradient(x) for x in probes]

    if obj.analytic_L is not None:
        L_est = obj.analytic_L
    else:
        L_est = 0.0
        for i in range(probe_count):
            for j in range(i + 1, probe_count):
                dx = np.linalg.norm(probes[i] - probes[j])
                if dx > 0:
                    L_est = max(L_est, np.linalg.norm(grads[i] - grads[j]) / dx)

    if shards is None:
        all_idx = np.arange(obj.dataset.n_samples)
        shards_eff = [Shard(worker=0, indices=all_idx)]
    else:
        shards_eff = shards
    bsz = min(batch_size, min(len(s) for s in shards_eff))

    g2 = np.array([float(g @ g) for g in grads])
    var = np.zeros(probe_count)
    for pi, (x, g_full) in enumerate(zip(probes, grads)):
        worst = 0.0
        for shard in shards_eff:
            devs = np.empty(draws)
            for d in range(draws):
                g = minibatch_gradient(obj, shard, x, bsz, rng)
                devs[d] = float(np.sum((g - g_full) ** 2))
            worst = max(worst, devs.mean())
        var[pi] = worst

    # Least squares var ~ beta * g2 + sigma^2, both clipped to >= 0.
    design = np.column_stack([g2, np.ones(probe_count)])
    coef, *_ = np.linalg.lstsq(design, var, rcond=None)
    beta_est = max(float(coef[0]), 0.0)
    sigma_sq_est = max(float(coef[1]), 0.0)
    if var.max() == 0.0:
        beta_est = sigma_sq_est = 0.0
    return float(L_est), sigma_sq_est, beta_est


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(4)
        if len(header) < 4:
            raise ValueError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">i", header)
        if magic != expected_magic:
            raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")
        ndim = magic & 0xFF
        dims = []
        for _ in range(ndim):
            raw = f.read(4)
            if len(raw) < 4:
                raise ValueError(f"{path}: truncated IDX header")
            dims.append(struct.unpack(">i", raw)[0])
        payload = f.read()
        expected = int(np.prod(dims))
        if len(payload) < expected:
            raise ValueError(
                f"{path}: truncated IDX payload ({len(payload)} bytes, expected {expected})"
            )
        return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(dims)


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label pair as a binary-classification dataset.

    Pixels are flattened and scaled to [0, 1]; labels 0-4 map to class 0
    and 5-9 to class 1.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ValueError(
            f"{len(images)} images but {len(labels)} labels"
        )
    features = images.reshape(len(images), -1).astype(float) / 255.0
    binary = (labels >= 5).astype(float)
    return Dataset(features=features, labels=binary, provenance="idx-file")


def make_quadratic(n_samples: int, dim: int, seed: int, spread: float = 1.0,
                   mean_shift: float = 0.0, hessian_eigs: np.ndarray | None = None
                   ) -> QuadraticObjective:
    """Synthetic quadratic objective with a controllable Hessian spectrum."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xDA7A)))
    samples = mean_shift + spread * rng.standard_normal((n_samples, dim))
    Q = None
    if hessian_eigs is not None:
        hessian_eigs = np.asarray(hessian_eigs, dtype=float)
        basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        Q = basis @ np.diag(hessian_eigs) @ basis.T
        Q = 0.5 * (Q + Q.T)
    ds = Dataset(features=samples, labels=np.zeros(n_samples),
                 provenance="synthetic-quadratic")
    return QuadraticObjective(ds, Q=Q)


def make_logistic(n_samples: int, dim: int, seed: int, regularization: float = 0.0,
                  test_fraction: float = 0.0) -> LogisticObjective:
    """Synthetic logistic-regression problem with labels from a planted model."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x106)))
    n_total = n_samples + int(round(test_fraction * n_samples))
    feats = rng.standard_normal((n_total, dim))
    truth = rng.standard_normal(dim)
    labels = (rng.random(n_total) < _sigmoid(feats @ truth)).astype(float)
    train = Dataset(feats[:n_samples], labels[:n_samples], provenance="synthetic-logreg")
    test = None
    if n_total > n_samples:
        test = Dataset(feats[n_samples:], labels[n_samples:], provenance="synthetic-logreg")
    return LogisticObjective(train, regularization=regularization, test_set=test)
