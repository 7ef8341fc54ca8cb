"""Kernel evaluation, weight rescaling of the Gram matrix, and low-rank
factorization used by the inner solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import WeakDataset


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family: ``linear``, ``gaussian`` (width sigma) or ``precomputed``."""

    kind: str
    sigma: float | None = None
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "gaussian", "precomputed"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian":
            if self.sigma is not None and self.sigma <= 0:
                raise ValueError("gaussian width must be positive")


@dataclass(frozen=True)
class ReweightedGram:
    """Gram matrix with entries K[n, m] = pi_n pi_m k(x_n, x_m)."""

    matrix: np.ndarray
    weights: np.ndarray
    low_rank: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def median_pairwise_distance(x: np.ndarray) -> float:
    """Median of pairwise distances; fallback width for the gaussian kernel."""
    d2 = _sq_dists(x)
    vals = np.sqrt(np.maximum(d2[np.triu_indices_from(d2, k=1)], 0.0))
    med = float(np.median(vals)) if vals.size else 1.0
    return med if med > 0 else 1.0


def _sq_dists(x):
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.maximum(d2, 0.0)


def compute_gram(ds: WeakDataset, spec: KernelSpec) -> np.ndarray:
    """Unweighted N x N Gram matrix for the requested kernel."""
    if spec.kind == "precomputed":
        if ds.precomputed_kernel is None:
            raise ValueError("dataset carries no precomputed kernel")
        g = ds.precomputed_kernel
        if g.shape != (ds.n_instances, ds.n_instances):
            raise ValueError("precomputed kernel size mismatch")
        return 0.5 * (g + g.T)
    if ds.features is None:
        raise ValueError("dataset has no features")
    x = np.asarray(ds.features, dtype=float)
    if spec.kind == "linear":
        g = x @ x.T
        return 0.5 * (g + g.T)
    sigma = spec.sigma if spec.sigma is not None else median_pairwise_distance(x)
    g = np.exp(-_sq_dists(x) / (2.0 * sigma ** 2))
    return 0.5 * (g + g.T)


def reweight(gram: np.ndarray, weights: np.ndarray) -> ReweightedGram:
    """Congruence rescaling K = Diag(pi) G Diag(pi)."""
    gram = np.asarray(gram, dtype=float)
    pi = np.asarray(weights, dtype=float)
    k = gram * np.outer(pi, pi)
    return ReweightedGram(matrix=0.5 * (k + k.T), weights=pi)


def low_rank_factor(k: np.ndarray, tol: float,
                    max_rank: int | None = None) -> np.ndarray:
    """Pivoted incomplete Cholesky factor Phi with ||K - Phi Phi^T||_F <= tol ||K||_F.

    A jitter of 1e-10 * trace(K)/N is added to the working diagonal when the
    input is numerically indefinite.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    k = np.asarray(k, dtype=float)
    n = k.shape[0]
    diag = np.diag(k).copy()
    if diag.min() < 0:
        diag += 1e-10 * max(np.trace(k), 0.0) / n
        diag = np.maximum(diag, 0.0)
    norm_k = np.linalg.norm(k)
    # trace of the residual bounds its Frobenius norm for PSD matrices
    target = tol * norm_k if norm_k > 0 else tol
    r_max = n if max_rank is None else min(max_rank, n)
    phi = np.zeros((n, r_max))
    for r in range(r_max):
        if np.sum(np.maximum(diag, 0.0)) <= target:
            return phi[:, :r]
        j = int(np.argmax(diag))
        pivot = diag[j]
        if pivot <= 0:
            return phi[:, :r]
        col = k[:, j] - phi[:, :r] @ phi[j, :r]
        phi[:, r] = col / np.sqrt(pivot)
        phi[j, r] = np.sqrt(pivot)
        diag = diag - phi[:, r] ** 2
        diag[j] = 0.0
    if np.sum(np.maximum(diag, 0.0)) > target:
        raise np.linalg.LinAlgError(
            f"incomplete Cholesky did not reach tolerance at rank {r_max}")
    return phi


def factor_reweighted(k: ReweightedGram, tol: float = 1e-10) -> ReweightedGram:
    """Attach a low-rank factor to a reweighted Gram matrix when the factor
    pays for itself; matrices without fast spectral decay are left bare."""
    try:
        phi = low_rank_factor(k.matrix, tol, max_rank=max(k.n // 3, 1))
    except np.linalg.LinAlgError:
        return k
    return ReweightedGram(matrix=k.matrix, weights=k.weights, low_rank=phi)


def empirical_feature_map(ds: WeakDataset, spec: KernelSpec):
    """Explicit features reproducing the kernel on the dataset.

    Returns ``(x_feat, transform)`` where ``x_feat`` is N x r with
    ``x_feat x_feat^T`` equal to the Gram matrix (up to jitter), and
    ``transform(x_new)`` embeds out-of-sample points (None when the kernel
    is precomputed).  For the linear kernel this is the identity map.
    """
    if spec.kind == "linear":
        x = np.asarray(ds.features, dtype=float)
        return x, lambda x_new: np.asarray(x_new, dtype=float)
    g = compute_gram(ds, spec)
    n = g.shape[0]
    jitter = 1e-10 * max(np.trace(g), 1.0) / n
    ell = None
    for _ in range(8):
        try:
            ell = np.linalg.cholesky(g + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter *= 100.0
    if ell is None:
        raise np.linalg.LinAlgError("Gram matrix is too indefinite to factor")
    if spec.kind == "precomputed":
        return ell, None
    x_train = np.asarray(ds.features, dtype=float)
    sigma = spec.sigma if spec.sigma is not None else median_pairwise_distance(x_train)

    def transform(x_new):
        x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
        d2 = (np.sum(x_new ** 2, axis=1)[:, None]
              + np.sum(x_train ** 2, axis=1)[None, :]
              - 2.0 * x_new @ x_train.T)
        k_cross = np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma ** 2))
        from scipy.linalg import solve_triangular
        return solve_triangular(ell, k_cross.T, lower=True).T

    return ell, transform
