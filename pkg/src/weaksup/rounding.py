"""Rounding of the relaxed solution and EM refinement.

Spectral rounding runs k-means on the top eigenvectors of the relaxed
equivalence matrix, maps clusters to latent labels through the anchor
columns, and the resulting hard assignment initializes an EM procedure on
the original objective; MIL adds hard linear constraints on the classifier
so that no negative-bag instance is scored positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from sklearn.cluster import KMeans

from .problem import ReductionMap, WeakDataset
from .softmax_core import Classifier, balance_entropy, entropy, softmax

MSTEP_MAXITER = 500
MIL_FEAS_TOL = 1e-9
MIL_MU_MAX = 1e8


@dataclass(frozen=True)
class SpectralEmbedding:
    u: np.ndarray  # reduced_size x k, rows normalized (zero rows kept zero)


@dataclass(frozen=True)
class RoundedLabels:
    assignment: np.ndarray   # N x P hard simplex vertices
    labels: np.ndarray       # N argmax labels
    reduced_labels: np.ndarray


@dataclass(frozen=True)
class EMConfig:
    lam: float
    max_alt: int = 30
    mstep_tol: float = 1e-7
    estep_tol: float = 1e-10
    mil_constraints: bool = False
    fix_intercept: bool = False

    def __post_init__(self):
        if self.lam <= 0 or self.max_alt < 1:
            raise ValueError("invalid EM configuration")


def spectral_embedding(z: np.ndarray, k: int) -> SpectralEmbedding:
    vals, vecs = np.linalg.eigh(z)
    u = vecs[:, np.argsort(vals)[::-1][:k]]
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.all(norms <= 1e-300):
        raise ValueError("degenerate embedding: all rows zero")
    u = np.where(norms > 1e-300, u / np.maximum(norms, 1e-300), 0.0)
    return SpectralEmbedding(u=u)


def spectral_round(z: np.ndarray, k: int, rmap: ReductionMap,
                   ds: WeakDataset, seed: int = 0,
                   restarts: int = 20) -> RoundedLabels:
    """Round a relaxed equivalence matrix to hard latent labels.

    k-means (seeded restarts, lowest distortion kept) on the row-normalized
    top-k eigenvectors, then cluster-to-label mapping through anchors,
    expansion to instances, and clamping to feasible sets.
    """
    if k < 2:
        raise ValueError("need at least two latent classes")
    emb = spectral_embedding(z, k)
    km = KMeans(n_clusters=k, n_init=restarts, random_state=seed)
    clusters = km.fit_predict(emb.u)
    centers = km.cluster_centers_

    p = ds.labels.latent_count
    cluster_label = _map_clusters(clusters, centers, k, rmap, p)

    reduced_labels = cluster_label[clusters]
    labels = reduced_labels[rmap.column_of]

    feas = ds.feasible_sets()
    for n in range(ds.n_instances):
        if labels[n] not in feas[n]:
            # feasible label whose cluster centroid is closest
            row = emb.u[rmap.column_of[n]]
            best, best_d = None, np.inf
            for lab in sorted(feas[n]):
                owners = np.nonzero(cluster_label == lab)[0]
                for c in owners:
                    d = float(np.sum((row - centers[c]) ** 2))
                    if d < best_d:
                        best, best_d = lab, d
                if not len(owners) and best is None:
                    best = lab
            labels[n] = best
    assignment = np.zeros((ds.n_instances, p))
    assignment[np.arange(ds.n_instances), labels] = 1.0
    return RoundedLabels(assignment=assignment, labels=labels,
                         reduced_labels=reduced_labels)


def _map_clusters(clusters, centers, k, rmap: ReductionMap, p: int):
    """Cluster -> latent label using anchors; unanchored clusters get the
    nearest anchored centroid's label (or their own index for clustering)."""
    cluster_label = np.full(k, -1, dtype=int)
    anchors = rmap.anchor_index
    if not anchors:
        return np.arange(k)
    if "negative" in anchors:  # MIL: negative anchor cluster -> 0, rest -> 1
        neg_cluster = clusters[anchors["negative"]]
        cluster_label[:] = 1
        cluster_label[neg_cluster] = 0
        return cluster_label
    # SSL: anchor of class l sits in some cluster
    claims = {}
    for lab, col in sorted(anchors.items()):
        claims.setdefault(clusters[col], []).append(lab)
    for c, labs in claims.items():
        cluster_label[c] = min(labs)  # ties to lowest label index
    anchored = np.nonzero(cluster_label >= 0)[0]
    for c in range(k):
        if cluster_label[c] < 0:
            d = [float(np.sum((centers[c] - centers[a]) ** 2)) for a in anchored]
            cluster_label[c] = cluster_label[anchored[int(np.argmin(d))]]
    return cluster_label


def _feasible_masks(ds: WeakDataset) -> np.ndarray:
    p = ds.labels.latent_count
    mask = np.zeros((ds.n_instances, p), dtype=bool)
    for n, fs in enumerate(ds.feasible_sets()):
        mask[n, sorted(fs)] = True
    return mask


def _loss_and_grad_scores(z, scores, mask, pi):
    """Weighted soft-max loss (feasible normalization) and d/d scores."""
    s = np.where(mask, scores, -np.inf)
    m = np.max(s, axis=1, keepdims=True)
    e = np.exp(s - m)
    sums = e.sum(axis=1, keepdims=True)
    log_probs = np.where(mask, (s - m) - np.log(sums), 0.0)
    loss = float(-np.sum(pi * np.sum(z * log_probs, axis=1)))
    probs = e / sums
    grad_s = pi[:, None] * (probs - z) * mask
    return loss, grad_s


def _mstep_objective(flat, z, x, mask, pi, lam, p, d, fix_intercept,
                     neg_idx=None, mu=0.0):
    w = flat[:p * d].reshape(p, d)
    b = np.zeros(p) if fix_intercept else flat[p * d:]
    scores = x @ w.T + b
    loss, grad_s = _loss_and_grad_scores(z, scores, mask, pi)
    val = loss + 0.5 * lam / p * float(np.sum(w * w))
    gw = grad_s.T @ x + lam / p * w
    gb = grad_s.sum(axis=0)
    if neg_idx is not None and mu > 0.0:
        viol = np.maximum(scores[neg_idx, 1] - scores[neg_idx, 0], 0.0)
        val += mu * float(np.sum(viol ** 2))
        coef = 2.0 * mu * viol
        gw[1] += coef @ x[neg_idx]
        gw[0] -= coef @ x[neg_idx]
        if not fix_intercept:
            gb[1] += coef.sum()
            gb[0] -= coef.sum()
    if fix_intercept:
        return val, gw.ravel()
    return val, np.concatenate([gw.ravel(), gb])


def mstep(z, ds: WeakDataset, x: np.ndarray, lam: float,
          tol: float = 1e-7, fix_intercept: bool = False,
          w0: Classifier | None = None) -> Classifier:
    """Weighted ridge multinomial logistic fit at fixed assignment z."""
    p = ds.labels.latent_count
    d = x.shape[1]
    mask = _feasible_masks(ds)
    pi = ds.weights
    if w0 is not None:
        flat0 = w0.w.ravel() if fix_intercept else \
            np.concatenate([w0.w.ravel(), w0.b])
    else:
        flat0 = np.zeros(p * d if fix_intercept else p * d + p)
    res = minimize(_mstep_objective, flat0, jac=True, method="L-BFGS-B",
                   args=(z, x, mask, pi, lam, p, d, fix_intercept),
                   options={"maxiter": MSTEP_MAXITER, "gtol": tol,
                            "ftol": 1e-14})
    flat = res.x
    w = flat[:p * d].reshape(p, d)
    b = np.zeros(p) if fix_intercept else flat[p * d:]
    return Classifier(w=w, b=b)


def mil_constrained_mstep(z, ds: WeakDataset, x: np.ndarray, lam: float,
                          tol: float = 1e-7,
                          w0: Classifier | None = None) -> Classifier:
    """M-step with the hard negative-bag constraints.

    Minimizes the M-step objective subject to score_0 >= score_1 on every
    negative-bag instance, by squared-hinge penalty continuation followed
    by an exact intercept shift that zeroes any residual violation.
    """
    p = ds.labels.latent_count
    if p != 2:
        raise ValueError("MIL constraints require two latent classes")
    d = x.shape[1]
    mask = _feasible_masks(ds)
    pi = ds.weights
    feas = ds.feasible_sets()
    neg_idx = np.array([n for n in range(ds.n_instances)
                        if feas[n] == frozenset({0})], dtype=int)
    flat = (np.concatenate([w0.w.ravel(), w0.b]) if w0 is not None
            else np.zeros(p * d + p))
    mu = 1.0
    clf = None
    while True:
        res = minimize(_mstep_objective, flat, jac=True, method="L-BFGS-B",
                       args=(z, x, mask, pi, lam, p, d, False, neg_idx, mu),
                       options={"maxiter": MSTEP_MAXITER, "gtol": tol,
                                "ftol": 1e-14})
        flat = res.x
        w = flat[:p * d].reshape(p, d)
        b = flat[p * d:]
        clf = Classifier(w=w, b=b)
        scores = clf.scores(x)
        worst = float(np.max(scores[neg_idx, 1] - scores[neg_idx, 0])) \
            if len(neg_idx) else 0.0
        if worst <= MIL_FEAS_TOL:
            if worst > -MIL_FEAS_TOL:
                # leave a strictly negative margin so ties cannot flip to
                # the positive class under a different evaluation order
                b = b.copy()
                b[0] += worst + MIL_FEAS_TOL
                clf = Classifier(w=w, b=b)
            return clf
        if mu >= MIL_MU_MAX:
            # exact feasibility restoration along the intercept
            b = b.copy()
            b[0] += worst + MIL_FEAS_TOL
            clf = Classifier(w=w, b=b)
            scores = clf.scores(x)
            worst = float(np.max(scores[neg_idx, 1] - scores[neg_idx, 0]))
            if worst > MIL_FEAS_TOL:
                raise RuntimeError(
                    "MIL constraints unsatisfiable at this lambda "
                    f"(residual violation {worst:.3e})")
            return clf
        mu *= 10.0


def estep(classifier: Classifier, ds: WeakDataset, x: np.ndarray,
          tol: float = 1e-10, max_iter: int = 2000,
          damping: float = 0.5) -> np.ndarray:
    """Minimize the loss-minus-entropy term over z at fixed classifier.

    Bags decouple; each bag's subproblem is convex and solved by a damped
    fixed point z[n, :] proportional to q[n, :] / v (v the weighted bag
    aggregate), with an exponentiated-gradient fallback on stall.
    """
    p = ds.labels.latent_count
    pi = ds.weights
    mask = _feasible_masks(ds)
    scores = classifier.scores(x)
    s = np.where(mask, scores, -np.inf)
    m = np.max(s, axis=1, keepdims=True)
    e = np.exp(s - m)
    q = e / e.sum(axis=1, keepdims=True)  # feasible-normalized posteriors

    z = np.array(q)
    for bag in ds.bags:
        members = np.array(bag.members)
        zb = z[members]
        qb = q[members]
        pib = pi[members]
        logq = logq_safe(qb)

        def bag_obj(zb):
            loss = float(-np.sum(pib[:, None] * zb * logq))
            return loss - entropy(pib @ zb)

        cur = bag_obj(zb)
        for _ in range(max_iter):
            v = pib @ zb
            ratio = qb / np.maximum(v, 1e-300)[None, :]
            ratio = np.where(qb > 0, ratio, 0.0)
            znew = ratio / np.maximum(ratio.sum(axis=1, keepdims=True), 1e-300)
            step = (1.0 - damping) * zb + damping * znew
            new = bag_obj(step)
            if new > cur + 1e-14:
                # exponentiated-gradient fallback with a small step
                g = -logq + np.log(np.maximum(v, 1e-300))[None, :] + 1.0
                logits = np.log(np.maximum(zb, 1e-300)) - 0.1 * g
                logits[qb <= 0] = -np.inf
                lmax = logits.max(axis=1, keepdims=True)
                ez = np.exp(logits - lmax)
                step = ez / ez.sum(axis=1, keepdims=True)
                new = bag_obj(step)
                if new > cur + 1e-14:
                    break
            moved = float(np.max(np.abs(step - zb)))
            zb = step
            cur = min(cur, new)
            if moved <= tol:
                break
        z[members] = zb
    return z


def logq_safe(q):
    return np.where(q > 0, np.log(np.maximum(q, 1e-300)), 0.0)


def em_objective(z, classifier: Classifier, ds: WeakDataset,
                 x: np.ndarray, lam: float) -> float:
    p = ds.labels.latent_count
    mask = _feasible_masks(ds)
    loss, _ = _loss_and_grad_scores(z, classifier.scores(x), mask, ds.weights)
    return loss - balance_entropy(z, ds) + \
        0.5 * lam / p * float(np.sum(classifier.w ** 2))


def em_refine(z0: np.ndarray, ds: WeakDataset, x: np.ndarray,
              cfg: EMConfig):
    """Alternate M-steps and E-steps on the original objective.

    Returns ``(classifier, assignment, objective_trace)`` with a
    nonincreasing trace.
    """
    z = np.array(z0, dtype=float)
    clf = None
    trace = []
    prev = np.inf
    for _ in range(cfg.max_alt):
        if cfg.mil_constraints:
            clf = mil_constrained_mstep(z, ds, x, cfg.lam,
                                        tol=cfg.mstep_tol, w0=clf)
        else:
            clf = mstep(z, ds, x, cfg.lam, tol=cfg.mstep_tol,
                        fix_intercept=cfg.fix_intercept, w0=clf)
        z_new = estep(clf, ds, x, tol=cfg.estep_tol)
        obj = em_objective(z_new, clf, ds, x, cfg.lam)
        if obj <= prev:
            z = z_new
            trace.append(obj)
        else:
            trace.append(prev)
            break
        if prev - obj < 1e-9:
            prev = obj
            break
        prev = obj
    return clf, z, trace


def predict(classifier: Classifier, x, feasible=None):
    """Label and score vector for one feature vector (ties to lowest index)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != classifier.w.shape[1]:
        raise ValueError("feature dimension mismatch")
    scores = classifier.w @ x + classifier.b
    if feasible is None:
        cand = np.arange(len(scores))
    else:
        cand = np.array(sorted(feasible))
    label = int(cand[int(np.argmax(scores[cand]))])
    return label, scores
