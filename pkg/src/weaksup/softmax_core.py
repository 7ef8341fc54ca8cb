"""Soft-max loss with intercept, its balancing entropy, and the algebraic
identities behind the relaxation (log-sum-exp conjugacy, closed-form dual
quadratic)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import ReweightedGram
from .problem import WeakDataset

#: Sentinel returned when the dual response violates the intercept
#: constraint (the unconstrained minimum over the intercept is -inf).
INFEASIBLE = float("-inf")

INTERCEPT_TOL = 1e-8


@dataclass(frozen=True)
class Classifier:
    """Linear multi-class classifier with intercept: scores = w phi(x) + b."""

    w: np.ndarray  # P x d
    b: np.ndarray  # P

    def scores(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.w.T + self.b


def logsumexp(t, axis=None):
    """Max-subtracted log-sum-exp."""
    t = np.asarray(t, dtype=float)
    m = np.max(t, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(t - m), axis=axis, keepdims=True)) + m
    return float(out.ravel()[0]) if axis is None else np.squeeze(out, axis=axis)


def softmax(t, axis=-1):
    t = np.asarray(t, dtype=float)
    m = np.max(t, axis=axis, keepdims=True)
    e = np.exp(t - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def entropy(v):
    """h(v) = -sum v_k log v_k with 0 log 0 = 0."""
    v = np.asarray(v, dtype=float)
    pos = v > 0
    return float(-np.sum(v[pos] * np.log(v[pos])))


def instance_loss(z_n, scores, feasible) -> float:
    """Soft-max loss of one instance, normalized over its feasible labels."""
    z_n = np.asarray(z_n, dtype=float)
    scores = np.asarray(scores, dtype=float)
    feas = sorted(feasible)
    support = np.nonzero(z_n > 0)[0]
    if not set(support.tolist()) <= set(feas):
        raise ValueError("infeasible assignment: support outside feasible set")
    s = scores[feas]
    lse = logsumexp(s)
    loss = -float(np.sum(z_n[feas] * (s - lse)))
    return max(loss, 0.0)


def balance_entropy(z, ds: WeakDataset) -> float:
    """H(z): entropy of the weighted class proportions, summed over bags."""
    z = np.asarray(z, dtype=float)
    pi = ds.weights
    total = 0.0
    for bag in ds.bags:
        members = list(bag.members)
        agg = pi[members] @ z[members]
        total += entropy(agg)
    return total


def objective_f(z, w, b, ds: WeakDataset, features: np.ndarray, lam: float) -> float:
    """Weighted soft-max loss minus balancing entropy plus ridge penalty."""
    if lam <= 0:
        raise ValueError("regularization parameter must be positive")
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    b = np.asarray(b, dtype=float)
    p = z.shape[1]
    scores = features @ w.T + b
    feas = ds.feasible_sets()
    pi = ds.weights
    loss = sum(pi[n] * instance_loss(z[n], scores[n], feas[n])
               for n in range(ds.n_instances))
    return loss - balance_entropy(z, ds) + 0.5 * lam / p * float(np.sum(w * w))


def conjugate_identity(t):
    """Log-partition and its conjugate form max_{v in simplex} v.t + h(v).

    Returns ``(lse_value, max_form_value)``; the maximizer is softmax(t) and
    the two values agree up to rounding.
    """
    t = np.asarray(t, dtype=float)
    lse = float(logsumexp(t))
    v = softmax(t)
    max_form = float(v @ t) + entropy(v)
    return lse, max_form


def g_closed(z, q, k: ReweightedGram, lam: float, p: int):
    """Closed form of the dual quadratic: -(P/(2 lambda)) tr((q-z)(q-z)^T K).

    Returns the :data:`INFEASIBLE` sentinel when (q - z)^T pi deviates from
    zero, encoding the unbounded minimization over the intercept.
    """
    if lam <= 0:
        raise ValueError("regularization parameter must be positive")
    z = np.asarray(z, dtype=float)
    q = np.asarray(q, dtype=float)
    if z.shape != q.shape or z.shape[0] != k.n:
        raise ValueError("shape mismatch between z, q and the Gram matrix")
    diff = q - z
    if np.max(np.abs(diff.T @ k.weights)) > INTERCEPT_TOL:
        return INFEASIBLE
    val = -0.5 * p / lam * float(np.sum(diff * (k.matrix @ diff)))
    return min(val, 0.0)
