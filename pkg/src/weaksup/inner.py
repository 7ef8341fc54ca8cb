"""Inner maximization over the transportation-like polytope.

Maximizes F(Omega) = T(Omega) + sum_n pi_n h(Omega_n) over
{Omega >= 0, Omega 1 = 1, Omega^T pi = pi} by entropic proximal ascent:
a closed-form row update followed by an I-projection (iterative
proportional fitting) onto the marginal constraints, with log-domain
acceleration, adaptive Lipschitz estimate, and a linearization gap
certificate computed by an exact transportation LP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

ENTRY_FLOOR = 1e-12
MARGINAL_TOL = 1e-9
MAX_IPFP_SWEEPS = 100_000


@dataclass(frozen=True)
class OmegaState:
    """Strictly positive matrix stored together with its logarithm."""

    omega: np.ndarray
    log_omega: np.ndarray

    @property
    def n(self) -> int:
        return self.omega.shape[0]


@dataclass(frozen=True)
class InnerConfig:
    tol: float = 1e-8
    max_iter: int = 1000
    lipschitz_init: float | None = None
    accelerate: bool = True
    restarts: int = 1
    floor: float = ENTRY_FLOOR
    intercept: bool = True
    certify_max_n: int = 0  # exact LP gap at convergence up to this size

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.restarts < 1:
            raise ValueError("invalid inner configuration")


@dataclass
class InnerResult:
    omega: OmegaState
    value: float
    gap: float
    gap_certified: bool
    iterations: int
    monotone: bool


def make_omega(mat: np.ndarray, floor: float = ENTRY_FLOOR) -> OmegaState:
    m = np.maximum(np.asarray(mat, dtype=float), floor)
    return OmegaState(omega=m, log_omega=np.log(m))


def default_omega(pi: np.ndarray, floor: float = ENTRY_FLOOR) -> OmegaState:
    """Rank-one feasible start Omega[n, m] = pi_m."""
    n = len(pi)
    return make_omega(np.tile(np.asarray(pi, dtype=float), (n, 1)), floor)


def weighted_entropy(omega: OmegaState, pi: np.ndarray) -> float:
    """sum_n pi_n h(Omega_n) = -sum_n pi_n sum_m Omega log Omega."""
    return -float(pi @ np.sum(omega.omega * omega.log_omega, axis=1))


def spectral_norm(m: np.ndarray, iters: int = 40) -> float:
    """Largest eigenvalue magnitude of a symmetric matrix by power iteration."""
    n = m.shape[0]
    if n == 0:
        return 0.0
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(iters):
        w = m @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def eval_T_and_grad(omega_mat: np.ndarray, b_mat: np.ndarray | None,
                    k_mat: np.ndarray | None, lam: float, p: int,
                    b_factor: np.ndarray | None = None,
                    k_factor: np.ndarray | None = None):
    """Quadratic coupling term and its gradient.

    T(Omega) = -(P/(2 lambda)) tr((I-Omega) B (I-Omega)^T K) and
    grad T = (P/lambda) K (I-Omega) B.  A low-rank factor B = U U^T or
    K = Phi Phi^T (either or both) turns the chained products into
    O(N^2 r) instead of O(N^3).
    """
    if lam <= 0:
        raise ValueError("regularization parameter must be positive")
    omega_mat = np.asarray(omega_mat, dtype=float)
    n = omega_mat.shape[0]
    a = np.eye(n) - omega_mat
    scale = p / lam
    if b_factor is not None and k_factor is not None:
        au = a @ b_factor                       # N x r_b
        c = k_factor.T @ au                     # r_k x r_b
        t_val = -0.5 * scale * float(np.sum(c * c))
        grad = scale * (k_factor @ (c @ b_factor.T))
        return t_val, grad
    if k_factor is not None:
        y = a.T @ k_factor                      # N x r_k
        yb = b_mat @ y                          # N x r_k
        t_val = -0.5 * scale * float(np.sum(y * yb))
        grad = scale * (k_factor @ yb.T)
        return t_val, grad
    if b_factor is not None:
        au = a @ b_factor                       # N x r_b
        kau = k_mat @ au                        # N x r_b
        t_val = -0.5 * scale * float(np.sum(au * kau))
        grad = scale * (kau @ b_factor.T)
        return t_val, grad
    ab = a @ b_mat
    ka = k_mat @ a
    t_val = -0.5 * scale * float(np.sum(ab * ka))
    grad = scale * (k_mat @ ab)
    return t_val, grad


def prox_step(omega0: OmegaState, grad: np.ndarray, lipschitz: float,
              pi: np.ndarray) -> np.ndarray:
    """Closed-form maximizer of the proximal model under row constraints only.

    Row n of the output is proportional to
    exp((grad[n, :] / pi_n + L log Omega0[n, :]) / (L + 1)).
    """
    if lipschitz <= 0:
        raise ValueError("step not concave: proximal weight must be positive")
    logits = (grad / pi[:, None] + lipschitz * omega0.log_omega) / (lipschitz + 1.0)
    logits -= logits.max(axis=1, keepdims=True)
    # entries below e^-35 of the row max are noise; clipping keeps the
    # subsequent I-projection well conditioned
    m = np.exp(np.maximum(logits, -35.0))
    return m / m.sum(axis=1, keepdims=True)


def ipfp_project(m: np.ndarray, pi: np.ndarray, tol: float = MARGINAL_TOL,
                 floor: float = ENTRY_FLOOR, intercept: bool = True,
                 max_sweeps: int = MAX_IPFP_SWEEPS,
                 residual_history: list | None = None) -> OmegaState:
    """I-projection of a positive matrix onto the feasible marginals.

    Alternately rescales rows to sum to one and columns so that
    Omega^T pi = pi; without the intercept only the row constraint is kept.
    ``residual_history``, when given, collects the column residual after
    every plain sweep.
    """
    om = np.maximum(np.asarray(m, dtype=float), floor)
    pi = np.asarray(pi, dtype=float)
    om = om / om.sum(axis=1, keepdims=True)
    if not intercept:
        return make_omega(om, floor)
    n = om.shape[0]
    res_col = np.inf
    sweeps = 0
    while sweeps < max_sweeps:
        # plain alternating rescaling; linearly convergent
        for _ in range(min(200, max_sweeps - sweeps)):
            sweeps += 1
            col = pi @ om
            om = om * (pi / np.maximum(col, 1e-300))[None, :]
            om = om / om.sum(axis=1, keepdims=True)
            res_col = np.max(np.abs(pi @ om - pi))
            if residual_history is not None:
                residual_history.append(res_col)
            if res_col <= tol:
                return make_omega(om, floor)
        # Newton polish on the column potentials; stays inside the
        # diagonal-scaling family, so the limit is still the I-projection
        for _ in range(30):
            sigma = pi @ om
            res_col = np.max(np.abs(sigma - pi))
            if res_col <= tol:
                return make_omega(om, floor)
            jac = np.diag(sigma) - om.T @ (pi[:, None] * om)
            delta = np.linalg.lstsq(jac + 1e-3 / n, -(sigma - pi),
                                    rcond=None)[0]
            step = 1.0
            improved = False
            for _ in range(40):
                cand = om * np.exp(step * np.clip(delta, -50, 50))[None, :]
                cand = cand / cand.sum(axis=1, keepdims=True)
                if np.max(np.abs(pi @ cand - pi)) < res_col:
                    om = cand
                    improved = True
                    break
                step /= 2.0
            if not improved:
                break  # fall back to plain sweeps
    res_row = np.max(np.abs(om.sum(axis=1) - 1.0))
    raise RuntimeError(
        f"IPFP did not converge in {max_sweeps} sweeps "
        f"(row residual {res_row:.3e}, column residual {res_col:.3e})")


def ipfp_residuals(omega: OmegaState, pi: np.ndarray) -> tuple:
    row = float(np.max(np.abs(omega.omega.sum(axis=1) - 1.0)))
    col = float(np.max(np.abs(pi @ omega.omega - pi)))
    return row, col


def full_gradient(omega: OmegaState, grad_t: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Gradient of F including the entropy term: grad T - pi_n (log Omega + 1)."""
    return grad_t - pi[:, None] * (omega.log_omega + 1.0)


def inner_gap(omega: OmegaState, grad_f: np.ndarray, pi: np.ndarray,
              intercept: bool = True) -> float:
    """Linearization (Frank-Wolfe) gap over the feasible polytope.

    Solves max_{Omega' feasible} tr(grad_f^T (Omega' - Omega)) exactly: a
    transportation LP on the pi-scaled variable for the intercept case, a
    per-row maximum otherwise.
    """
    cur = float(np.sum(grad_f * omega.omega))
    if not intercept:
        best = float(np.sum(np.max(grad_f, axis=1)))
        return max(best - cur, 0.0)
    n = omega.n
    # variables Gamma[n, m] = pi_n Omega'[n, m]; marginals (pi, pi)
    c = (grad_f / pi[:, None]).ravel()
    rows = sparse.kron(sparse.eye(n, format="csr"),
                       np.ones((1, n)), format="csr")
    cols = sparse.kron(np.ones((1, n)),
                       sparse.eye(n, format="csr"), format="csr")
    a_eq = sparse.vstack([rows, cols[:-1]], format="csr")  # last is redundant
    b_eq = np.concatenate([pi, pi[:-1]])
    res = linprog(-c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transportation LP failed: {res.message}")
    best = float(-res.fun)
    return max(best - cur, 0.0)


def solve_inner(b_mat: np.ndarray | None, k, lam: float, p: int,
                cfg: InnerConfig, warm: OmegaState | None = None,
                b_factor: np.ndarray | None = None) -> InnerResult:
    """Maximize F over the feasible polytope by accelerated proximal ascent.

    Parameters
    ----------
    b_mat : expanded relaxed equivalence matrix (N x N), may be None when
        ``b_factor`` is given.
    k : ReweightedGram (or a bare symmetric ndarray plus explicit weights is
        not supported; pass a ReweightedGram).
    warm : optional warm start from a previous outer iteration.
    """
    k_mat = k.matrix
    pi = k.weights
    k_factor = k.low_rank
    n = k_mat.shape[0]
    if b_mat is None:
        b_mat = b_factor @ b_factor.T
    b_factor_eff = (b_factor if b_factor is not None
                    and b_factor.shape[1] * 2 < n else None)
    k_factor_eff = (k_factor if k_factor is not None
                    and k_factor.shape[1] * 2 < n else None)

    if cfg.lipschitz_init is not None:
        lip0 = cfg.lipschitz_init
    else:
        lip0 = 1.0 + (p / lam) * spectral_norm(k_mat) * spectral_norm(b_mat) \
            / max(np.min(pi), 1e-12)
    lip0 = max(lip0, 1.0 + 1e-6)

    starts = [warm if warm is not None else default_omega(pi, cfg.floor)]
    rng = np.random.default_rng(0)
    for _ in range(cfg.restarts - 1):
        noise = np.exp(rng.standard_normal((n, n)))
        starts.append(ipfp_project(noise * pi[None, :], pi, floor=cfg.floor,
                                   intercept=cfg.intercept))

    best = None
    for start in starts:
        result = _ascend(start, b_mat, k_mat, pi, lam, p, cfg, lip0,
                         b_factor_eff, k_factor_eff)
        if best is None or result.value > best.value:
            best = result
    return best


def _objective(omega: OmegaState, b_mat, k_mat, pi, lam, p,
               b_factor, k_factor) -> float:
    t_val, _ = eval_T_and_grad(omega.omega, b_mat, k_mat, lam, p,
                               b_factor, k_factor)
    return t_val + weighted_entropy(omega, pi)


def _ascend(start, b_mat, k_mat, pi, lam, p, cfg, lip0,
            b_factor, k_factor) -> InnerResult:
    lip = lip0
    om = start
    f_cur = _objective(om, b_mat, k_mat, pi, lam, p, b_factor, k_factor)
    om_prev = om
    t_acc = 1.0
    monotone = True
    accepted_streak = 0
    iterations = 0

    def step_from(base: OmegaState):
        _, grad_t = eval_T_and_grad(base.omega, b_mat, k_mat, lam, p,
                                    b_factor, k_factor)
        cand_mat = prox_step(base, grad_t, lip, pi)
        cand = ipfp_project(cand_mat, pi, floor=cfg.floor,
                            intercept=cfg.intercept)
        return cand, _objective(cand, b_mat, k_mat, pi, lam, p,
                                b_factor, k_factor)

    for it in range(1, cfg.max_iter + 1):
        iterations = it
        if cfg.accelerate and it > 1:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc * t_acc))
            theta = (t_acc - 1.0) / t_new
            y_log = (1.0 + theta) * om.log_omega - theta * om_prev.log_omega
            y_log = y_log - y_log.max()
            y = ipfp_project(np.exp(y_log), pi, floor=cfg.floor,
                             intercept=cfg.intercept)
            t_acc = t_new
        else:
            y = om
        cand, f_cand = step_from(y)
        if f_cand < f_cur - 1e-12:
            # monotone restart: drop momentum, then shrink the step
            t_acc = 1.0
            cand, f_cand = step_from(om)
            rejections = 0
            while f_cand < f_cur - 1e-12 and rejections < 60:
                lip *= 2.0
                cand, f_cand = step_from(om)
                rejections += 1
            if f_cand < f_cur - 1e-12:
                break  # no ascent step found: treat as stationary
        move = float(np.sum(np.abs(cand.omega - om.omega)))
        om_prev = om
        om = cand
        f_cur = max(f_cur, f_cand)
        accepted_streak += 1
        if accepted_streak % 10 == 0:
            lip = max(lip / 2.0, min(2.0, lip0))
        if move <= cfg.tol:
            break

    gap = float("nan")
    certified = False
    if 0 < om.n <= cfg.certify_max_n:
        _, grad_t = eval_T_and_grad(om.omega, b_mat, k_mat, lam, p,
                                    b_factor, k_factor)
        gap = inner_gap(om, full_gradient(om, grad_t, pi), pi,
                        intercept=cfg.intercept)
        certified = True
    return InnerResult(omega=om, value=f_cur, gap=gap,
                       gap_certified=certified, iterations=iterations,
                       monotone=monotone)
