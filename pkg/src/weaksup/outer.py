"""Outer minimization over the elliptope.

Minimizes the relaxed objective (a maximum of linear functions of the
reduced equivalence matrix Z) by proximal steps under the von Neumann
entropy Bregman divergence: each update is the diagonally rescaled matrix
exponential of -grad + t log(Z0), with backtracking on t, Danskin
gradients supplied by the inner solver, and the -N_R * lambda_min gap
certificate.  Fixed-entry constraints enter through a quadratic penalty
with rho-continuation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inner import InnerConfig, InnerResult, OmegaState, solve_inner
from .kernel import ReweightedGram
from .problem import ReductionMap, ZConstraintSet, contract_full, expand_reduced

EIG_FLOOR = 1e-12
DESCENT_TOL = 1e-12
MAX_BACKTRACKS = 60
RHO_MAX = 1e6
VIOLATION_TOL = 1e-3


@dataclass
class ElliptopeState:
    """Symmetric PSD matrix with unit diagonal, with optional eigen cache."""

    z: np.ndarray
    eigen_cache: tuple | None = None  # (eigenvalues, eigenvectors)

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def eigen(self):
        if self.eigen_cache is None:
            vals, vecs = np.linalg.eigh(self.z)
            self.eigen_cache = (vals, vecs)
        return self.eigen_cache


def identity_state(n: int, blend: float = 0.0) -> ElliptopeState:
    z = (1.0 - blend) * np.eye(n) + blend * np.ones((n, n))
    np.fill_diagonal(z, 1.0)
    return ElliptopeState(z=z)


@dataclass(frozen=True)
class OuterConfig:
    lam: float
    gap_tol: float = 1e-4
    max_iter: int = 100
    t_init: float = 1.0
    p: int = 2
    rho_init: float = 1.0
    inner_cfg: InnerConfig = field(default_factory=InnerConfig)

    def __post_init__(self):
        if self.lam <= 0 or self.gap_tol <= 0 or self.t_init <= 0:
            raise ValueError("invalid outer configuration")


@dataclass
class OuterResult:
    z: ElliptopeState
    omega: OmegaState
    value: float
    gap: float
    objective_trace: list
    gap_trace: list
    trace_rows: list  # (iter, g, gap, t, inner_iters, violation)
    iterations: int
    converged: bool


def eval_g_and_grad(z_state: ElliptopeState, rmap: ReductionMap,
                    k: ReweightedGram, lam: float, p: int,
                    inner_cfg: InnerConfig,
                    warm: OmegaState | None = None):
    """Inner solve at Z plus the Danskin gradient of the rescaled objective.

    Returns ``(value, rescaled_grad, raw_grad, inner_result)``.  The raw
    gradient is G = -(P/(2 lambda)) R^T (I-Omega*)^T K (I-Omega*) R and the
    rescaled gradient (chain rule of the diagonal rescaling at unit
    diagonal) is G - Diag(diag(G Z)).
    """
    b_mat = expand_reduced(rmap, z_state.z)
    b_factor = _expanded_factor(z_state, rmap)
    inner = solve_inner(b_mat, k, lam, p, inner_cfg, warm=warm,
                        b_factor=b_factor)
    n = rmap.n_instances
    a = np.eye(n) - inner.omega.omega
    m = a.T @ (k.matrix @ a)
    g_raw = -0.5 * p / lam * contract_full(rmap, m)
    g_raw = 0.5 * (g_raw + g_raw.T)
    grad = rescale_gradient(g_raw, z_state.z)
    return inner.value, grad, g_raw, inner


def rescale_gradient(g_raw: np.ndarray, z: np.ndarray) -> np.ndarray:
    return g_raw - np.diag(np.einsum("ij,ji->i", g_raw, z))


def _expanded_factor(z_state: ElliptopeState, rmap: ReductionMap):
    """Low-rank factor of R Z R^T when the eigen cache shows low rank."""
    if z_state.eigen_cache is None:
        return None
    vals, vecs = z_state.eigen_cache
    keep = vals > max(vals.max(), 0.0) * 1e-12
    if keep.sum() * 2 >= rmap.reduced_size:
        return None
    u = vecs[:, keep] * np.sqrt(vals[keep])
    return u[rmap.column_of]


def vn_prox_step(z_state: ElliptopeState, grad: np.ndarray,
                 t: float) -> ElliptopeState:
    """Von Neumann entropy proximal update with exact diagonal rescaling.

    Eigendecomposes A = -grad + t log(Z0) (eigenvalues of Z0 floored), forms
    the matrix exponential of A / t, and rescales to unit diagonal.  The
    rescaling is invariant to scalar multiples, so the largest eigenvalue is
    subtracted before exponentiation for overflow safety.
    """
    if t <= 0:
        raise ValueError("step size must be positive")
    vals0, vecs0 = z_state.eigen()
    log_z = (vecs0 * np.log(np.maximum(vals0, EIG_FLOOR))) @ vecs0.T
    a = -grad + t * log_z
    a = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(a)
    e = (vals - vals.max()) / t
    m = (vecs * np.exp(e)) @ vecs.T
    d = np.maximum(np.diag(m), EIG_FLOOR)
    scale = 1.0 / np.sqrt(d)
    z_new = m * np.outer(scale, scale)
    z_new = 0.5 * (z_new + z_new.T)
    np.fill_diagonal(z_new, 1.0)
    return ElliptopeState(z=z_new)


def outer_gap(grad: np.ndarray) -> float:
    """Suboptimality bound max(0, -N_R lambda_min(grad))."""
    n = grad.shape[0]
    lam_min = float(np.linalg.eigvalsh(grad)[0])
    return max(0.0, -n * lam_min)


def _penalty(z: np.ndarray, constraints: ZConstraintSet, rho: float):
    if len(constraints) == 0 or rho == 0.0:
        return 0.0, np.zeros_like(z), 0.0
    val = 0.0
    grad = np.zeros_like(z)
    worst = 0.0
    for i, j, v in constraints.fixed_entries:
        r = z[i, j] - v
        val += rho * r * r
        grad[i, j] += 2.0 * rho * r
        worst = max(worst, abs(r))
    return val, grad, worst


def solve_outer(rmap: ReductionMap, constraints: ZConstraintSet,
                k: ReweightedGram, cfg: OuterConfig,
                z_init: ElliptopeState | None = None,
                omega_init: OmegaState | None = None) -> OuterResult:
    """Proximal descent on the elliptope with backtracking line search.

    Larger t means a smaller step; rejection doubles t, acceptance halves
    it.  Stops when the gap certificate falls below ``gap_tol`` or after
    ``max_iter`` accepted iterations.
    """
    n_r = rmap.reduced_size
    z_state = z_init if z_init is not None else identity_state(n_r)
    rho = cfg.rho_init if len(constraints) else 0.0
    t = cfg.t_init
    warm = omega_init
    lam, p = cfg.lam, cfg.p

    objective_trace = []
    gap_trace = []
    trace_rows = []
    converged = False
    iterations = 0

    val, grad, g_raw, inner = eval_g_and_grad(z_state, rmap, k, lam, p,
                                              cfg.inner_cfg, warm=warm)
    warm = inner.omega

    for it in range(1, cfg.max_iter + 1):
        iterations = it
        pen_val, pen_grad, violation = _penalty(z_state.z, constraints, rho)
        total_raw = g_raw + pen_grad
        total_grad = rescale_gradient(total_raw, z_state.z)
        obj = val + pen_val
        gap = outer_gap(total_grad)
        objective_trace.append(obj)
        gap_trace.append(gap)
        trace_rows.append((it, val, gap, t, inner.iterations, violation))
        if gap <= cfg.gap_tol and violation <= VIOLATION_TOL:
            converged = True
            break

        accepted = False
        for _ in range(MAX_BACKTRACKS):
            z_cand = vn_prox_step(z_state, total_grad, t)
            val_c, _, g_raw_c, inner_c = eval_g_and_grad(
                z_cand, rmap, k, lam, p, cfg.inner_cfg, warm=warm)
            pen_c, _, _ = _penalty(z_cand.z, constraints, rho)
            if val_c + pen_c <= obj - DESCENT_TOL:
                accepted = True
                break
            t *= 2.0
        if not accepted:
            # descent stalled at the inner solver's precision; the reported
            # gap stays an honest suboptimality bound
            converged = gap <= cfg.gap_tol
            break
        z_state = z_cand
        val, g_raw, inner = val_c, g_raw_c, inner_c
        warm = inner.omega
        t = max(t / 2.0, 1e-12)
        if len(constraints) and violation > VIOLATION_TOL:
            rho = min(rho * 10.0, RHO_MAX)

    return OuterResult(z=z_state, omega=warm, value=val, gap=gap_trace[-1],
                       objective_trace=objective_trace, gap_trace=gap_trace,
                       trace_rows=trace_rows, iterations=iterations,
                       converged=converged)


def solve_path(rmap: ReductionMap, constraints: ZConstraintSet,
               k: ReweightedGram, lam_list, cfg: OuterConfig) -> list:
    """Solve for a decreasing sequence of lambda with warm restarts."""
    lam_list = list(lam_list)
    if not lam_list:
        raise ValueError("lambda list is empty")
    results = []
    z_prev = None
    om_prev = None
    for lam in lam_list:
        cfg_l = OuterConfig(lam=lam, gap_tol=cfg.gap_tol,
                            max_iter=cfg.max_iter, t_init=cfg.t_init,
                            p=cfg.p, rho_init=cfg.rho_init,
                            inner_cfg=cfg.inner_cfg)
        res = solve_outer(rmap, constraints, k, cfg_l,
                          z_init=z_prev, omega_init=om_prev)
        results.append(res)
        z_prev = ElliptopeState(z=res.z.z.copy())
        om_prev = res.omega
    return results
