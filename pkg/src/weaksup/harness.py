"""Synthetic generators, baselines, metrics, and experiment drivers."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from . import problem
from .inner import InnerConfig
from .kernel import (KernelSpec, compute_gram, empirical_feature_map,
                     factor_reweighted, reweight)
from .outer import OuterConfig, solve_outer, solve_path
from .problem import Bag, WeakDataset, build_reduction, make_weights
from .rounding import EMConfig, em_refine, spectral_round

MODES = ("ours", "ours_no_intercept", "em_random", "kmeans")


@dataclass(frozen=True)
class SyntheticSpec:
    n_points: int
    n_clusters: int
    separation: float = 4.0
    noise_dims: int = 0
    noise_sigma: float = 1.0
    shape: str = "gaussian_blobs"
    seed: int = 0
    signal_sigma: float = 1.0
    center_offset: float = 0.0  # shifts all centers off the origin

    def __post_init__(self):
        if self.n_points < self.n_clusters or self.n_clusters < 2:
            raise ValueError("need n_points >= n_clusters >= 2")
        if self.shape not in ("gaussian_blobs", "rings"):
            raise ValueError(f"unknown shape {self.shape!r}")


@dataclass(frozen=True)
class MILSyntheticSpec:
    n_pos_bags: int
    n_neg_bags: int
    bag_size: int
    witness_rate: float = 0.5
    separation: float = 4.0
    seed: int = 0
    dim: int = 2

    def __post_init__(self):
        if min(self.n_pos_bags, self.n_neg_bags, self.bag_size) < 1:
            raise ValueError("bag counts and sizes must be positive")
        if not 0.0 < self.witness_rate <= 1.0:
            raise ValueError("witness_rate must be in (0, 1]")


@dataclass
class Metrics:
    accuracy_best_perm: float
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray
    objective: float | None = None
    gap: float | None = None
    wall_time_s: float = 0.0
    task: str = ""
    mode: str = ""
    lam: float | None = None
    seed: int = 0


def gen_clusters(spec: SyntheticSpec) -> WeakDataset:
    """Isotropic Gaussian blobs (or rings), one unlabeled bag, ground truth kept."""
    rng = np.random.default_rng(spec.seed)
    k = spec.n_clusters
    n = spec.n_points
    counts = np.full(k, n // k)
    counts[: n % k] += 1
    truth = np.repeat(np.arange(k), counts)
    if spec.shape == "gaussian_blobs":
        radius = spec.separation / (2.0 * np.sin(np.pi / k))
        angles = 2.0 * np.pi * np.arange(k) / k
        centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        centers += spec.center_offset
        x = centers[truth] + spec.signal_sigma * rng.standard_normal((n, 2))
    else:
        radii = spec.separation * (1.0 + np.arange(k))
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        r = radii[truth] + spec.signal_sigma * rng.standard_normal(n)
        x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        x += spec.center_offset
    if spec.noise_dims:
        x = np.hstack([x, spec.noise_sigma *
                       rng.standard_normal((n, spec.noise_dims))])
    bag = Bag("all", problem.UNLABELED_TOKEN, tuple(range(n)))
    space = problem.clustering_label_space(k)
    weights = make_weights((bag,), "uniform")
    return WeakDataset(bags=(bag,), labels=space, weights=weights,
                       features=x, true_labels=truth)


def gen_mil(spec: MILSyntheticSpec, weight_mode: str = "per_bag") -> WeakDataset:
    """Synthetic MIL bags: negative bags draw only negatives; positive bags
    hold ceil(witness_rate * bag_size) positives."""
    rng = np.random.default_rng(spec.seed)
    neg_center = np.zeros(spec.dim)
    pos_center = np.zeros(spec.dim)
    pos_center[0] = spec.separation
    bags = []
    feats = []
    truth = []
    idx = 0
    n_wit = int(np.ceil(spec.witness_rate * spec.bag_size))
    for b in range(spec.n_neg_bags):
        members = tuple(range(idx, idx + spec.bag_size))
        feats.append(neg_center + rng.standard_normal((spec.bag_size, spec.dim)))
        truth.extend([0] * spec.bag_size)
        bags.append(Bag(f"neg{b}", problem.MIL_NEGATIVE_TOKEN, members))
        idx += spec.bag_size
    for b in range(spec.n_pos_bags):
        members = tuple(range(idx, idx + spec.bag_size))
        pos = pos_center + rng.standard_normal((n_wit, spec.dim))
        neg = neg_center + rng.standard_normal((spec.bag_size - n_wit, spec.dim))
        feats.append(np.vstack([pos, neg]))
        truth.extend([1] * n_wit + [0] * (spec.bag_size - n_wit))
        bags.append(Bag(f"pos{b}", problem.MIL_POSITIVE_TOKEN, members))
        idx += spec.bag_size
    x = np.vstack(feats)
    bags = tuple(bags)
    weights = make_weights(bags, weight_mode)
    return WeakDataset(bags=bags, labels=problem.mil_label_space(),
                       weights=weights, features=x,
                       true_labels=np.array(truth))


def confusion_matrix(pred, truth, k: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    conf = np.zeros((k, k), dtype=int)
    np.add.at(conf, (truth, pred), 1)
    return conf


def accuracy_best_perm(pred, truth) -> float:
    """Best agreement over global label permutations (Hungarian matching)."""
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    k = int(max(pred.max(initial=0), truth.max(initial=0))) + 1
    conf = confusion_matrix(pred, truth, k)
    rows, cols = linear_sum_assignment(-conf)
    return float(conf[rows, cols].sum()) / len(pred)


def kmeans_baseline(ds: WeakDataset, k: int, seed: int = 0,
                    restarts: int = 20):
    """Lloyd iterations with seeded spreading initializations."""
    if ds.features is None:
        raise ValueError("k-means baseline requires features")
    if k > ds.n_instances:
        raise ValueError("more clusters than instances")
    km = KMeans(n_clusters=k, n_init=restarts, random_state=seed)
    labels = km.fit_predict(ds.features)
    return labels, float(km.inertia_)


@dataclass(frozen=True)
class SolverOptions:
    gap_tol: float = 1e-4
    max_iter: int = 60
    inner_tol: float = 1e-8
    inner_max_iter: int = 300
    restarts: int = 1
    em_max_alt: int = 30
    certify_max_n: int = 0


def run_pipeline(ds: WeakDataset, task: str, kspec: KernelSpec, lam,
                 seed: int = 0, intercept: bool = True,
                 opts: SolverOptions = SolverOptions(),
                 z_init=None):
    """Full pipeline: kernel, outer solve, spectral rounding, EM refinement.

    ``lam`` may be a scalar or a decreasing list (warm-started path; the
    final value is used downstream).  Returns a dict of artifacts.
    """
    p = ds.labels.latent_count
    gram = compute_gram(ds, kspec)
    k = factor_reweighted(reweight(gram, ds.weights))
    rmap, constraints = build_reduction(ds, task)
    inner_cfg = InnerConfig(tol=opts.inner_tol, max_iter=opts.inner_max_iter,
                            restarts=opts.restarts, intercept=intercept,
                            certify_max_n=opts.certify_max_n)
    lam_list = list(np.atleast_1d(lam))
    cfg = OuterConfig(lam=lam_list[-1], gap_tol=opts.gap_tol,
                      max_iter=opts.max_iter, p=p, inner_cfg=inner_cfg)
    if len(lam_list) > 1:
        results = solve_path(rmap, constraints, k, lam_list, cfg)
        outer_res = results[-1]
    else:
        outer_res = solve_outer(rmap, constraints, k, cfg, z_init=z_init)
    rounded = spectral_round(outer_res.z.z, p, rmap, ds, seed=seed)
    x_feat, transform = empirical_feature_map(ds, kspec)
    em_cfg = EMConfig(lam=lam_list[-1], max_alt=opts.em_max_alt,
                      mil_constraints=(task == "mil"),
                      fix_intercept=not intercept)
    clf, z, em_trace = em_refine(rounded.assignment, ds, x_feat, em_cfg)
    labels = np.argmax(z, axis=1)
    return {
        "labels": labels,
        "assignment": z,
        "classifier": clf,
        "outer": outer_res,
        "rounded": rounded,
        "em_trace": em_trace,
        "x_feat": x_feat,
        "transform": transform,
        "kernel": k,
        "rmap": rmap,
    }


def _random_feasible_assignment(ds: WeakDataset, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    p = ds.labels.latent_count
    z = np.zeros((ds.n_instances, p))
    for n, fs in enumerate(ds.feasible_sets()):
        z[n, rng.choice(sorted(fs))] = 1.0
    return z


def run_experiment(ds: WeakDataset, task: str, kspec: KernelSpec, lam,
                   mode: str = "ours", seed: int = 0,
                   opts: SolverOptions = SolverOptions()) -> tuple:
    """Run one mode end to end and score it against the ground truth.

    Returns ``(metrics, artifacts)``; artifacts is None for the k-means
    baseline.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if ds.true_labels is None:
        raise ValueError("experiment dataset carries no ground truth")
    p = ds.labels.latent_count
    t0 = time.perf_counter()
    artifacts = None
    objective = None
    gap = None
    lam_last = float(np.atleast_1d(lam)[-1])
    if mode == "kmeans":
        labels, _ = kmeans_baseline(ds, p, seed=seed)
    elif mode == "em_random":
        x_feat, _ = empirical_feature_map(ds, kspec)
        z0 = _random_feasible_assignment(ds, seed)
        em_cfg = EMConfig(lam=lam_last, max_alt=opts.em_max_alt,
                          mil_constraints=(task == "mil"))
        clf, z, trace = em_refine(z0, ds, x_feat, em_cfg)
        labels = np.argmax(z, axis=1)
        objective = trace[-1] if trace else None
        artifacts = {"classifier": clf, "assignment": z, "labels": labels,
                     "em_trace": trace}
    else:
        artifacts = run_pipeline(ds, task, kspec, lam, seed=seed,
                                 intercept=(mode == "ours"), opts=opts)
        labels = artifacts["labels"]
        objective = artifacts["outer"].value
        gap = artifacts["outer"].gap
    wall = time.perf_counter() - t0
    truth = ds.true_labels
    conf = confusion_matrix(labels, truth, p)
    with np.errstate(invalid="ignore"):
        per_class = np.where(conf.sum(axis=1) > 0,
                             np.diag(conf) / np.maximum(conf.sum(axis=1), 1), 0.0)
    metrics = Metrics(
        accuracy_best_perm=accuracy_best_perm(labels, truth),
        accuracy=float(np.mean(labels == truth)),
        per_class=per_class,
        confusion=conf,
        objective=objective,
        gap=gap,
        wall_time_s=wall,
        task=task,
        mode=mode,
        lam=lam_last,
        seed=seed,
    )
    return metrics, artifacts


def subset_bags(ds: WeakDataset, bag_indices, weight_mode: str) -> WeakDataset:
    """Reindexed dataset restricted to the given bags."""
    bag_indices = sorted(bag_indices)
    old_members = [list(ds.bags[i].members) for i in bag_indices]
    flat = [m for ms in old_members for m in ms]
    remap = {old: new for new, old in enumerate(flat)}
    bags = []
    for bi, ms in zip(bag_indices, old_members):
        b = ds.bags[bi]
        bags.append(Bag(b.id, b.label, tuple(remap[m] for m in ms)))
    bags = tuple(bags)
    return WeakDataset(
        bags=bags, labels=ds.labels,
        weights=make_weights(bags, weight_mode),
        features=None if ds.features is None else ds.features[flat],
        precomputed_kernel=None if ds.precomputed_kernel is None
        else ds.precomputed_kernel[np.ix_(flat, flat)],
        true_labels=None if ds.true_labels is None else ds.true_labels[flat],
    )


def _predict_bags(clf, transform, ds_test: WeakDataset):
    """Bag-level MIL prediction: positive iff any instance scores positive."""
    x = transform(ds_test.features)
    scores = x @ clf.w.T + clf.b
    inst_pos = scores[:, 1] > scores[:, 0]
    out = []
    for b in ds_test.bags:
        out.append(1 if np.any(inst_pos[list(b.members)]) else 0)
    return np.array(out)


def crossval_mil(ds: WeakDataset, lam_grid, kspec: KernelSpec,
                 weight_mode: str = "per_bag", master_seed: int = 0,
                 n_splits: int = 10,
                 opts: SolverOptions = SolverOptions()) -> dict:
    """10 seeded bag-level 90/10 splits; lambda by 2-fold CV on training bags."""
    n_bags = ds.n_bags
    if n_bags < n_splits:
        raise ValueError(f"need at least {n_splits} bags for the MIL protocol")
    lam_grid = list(np.atleast_1d(lam_grid))
    rng = np.random.default_rng(master_seed)
    accs = []
    chosen = []
    for split in range(n_splits):
        perm = rng.permutation(n_bags)
        n_test = max(1, n_bags // 10)
        test_idx, train_idx = perm[:n_test], perm[n_test:]
        best_lam = lam_grid[0]
        if len(lam_grid) > 1:
            half = len(train_idx) // 2
            folds = (train_idx[:half], train_idx[half:])
            best_score = -np.inf
            for lam in lam_grid:
                scores = []
                for a, b in ((0, 1), (1, 0)):
                    tr = subset_bags(ds, folds[a], weight_mode)
                    te = subset_bags(ds, folds[b], weight_mode)
                    scores.append(_fit_score_mil(tr, te, lam, kspec,
                                                 master_seed, opts))
                score = float(np.mean(scores))
                if score > best_score:
                    best_score, best_lam = score, lam
        tr = subset_bags(ds, train_idx, weight_mode)
        te = subset_bags(ds, test_idx, weight_mode)
        accs.append(_fit_score_mil(tr, te, best_lam, kspec, master_seed, opts))
        chosen.append(best_lam)
    accs = np.array(accs)
    return {
        "accuracy_mean": float(accs.mean()),
        "accuracy_std": float(accs.std()),
        "per_split": accs.tolist(),
        "lambdas": chosen,
    }


def _fit_score_mil(ds_train, ds_test, lam, kspec, seed, opts):
    art = run_pipeline(ds_train, "mil", kspec, lam, seed=seed, opts=opts)
    pred = _predict_bags(art["classifier"], art["transform"], ds_test)
    truth = np.array([1 if b.label == problem.MIL_POSITIVE_TOKEN else 0
                      for b in ds_test.bags])
    return float(np.mean(pred == truth))


def make_ssl_dataset(features: np.ndarray, truth: np.ndarray,
                     n_labeled: int, seed: int = 0) -> WeakDataset:
    """Reveal n_labeled point labels (at least one per class), keep the rest
    in one unlabeled bag; evaluation is transductive on the unlabeled part."""
    rng = np.random.default_rng(seed)
    n = len(truth)
    classes = np.unique(truth)
    labeled = []
    for c in classes:  # ensure every class anchors
        labeled.append(int(rng.choice(np.nonzero(truth == c)[0])))
    rest = [i for i in rng.permutation(n) if i not in set(labeled)]
    labeled.extend(int(i) for i in rest[:max(0, n_labeled - len(labeled))])
    labeled = sorted(labeled)
    unlabeled = [i for i in range(n) if i not in set(labeled)]

    toks = [str(c) for c in classes]
    space = problem.ssl_label_space(toks)
    order = labeled + unlabeled
    remap = np.empty(n, dtype=int)
    remap[order] = np.arange(n)
    bags = [Bag(f"lab{j}", str(truth[i]), (remap[i],))
            for j, i in enumerate(labeled)]
    bags.append(Bag("unlabeled", problem.UNLABELED_TOKEN,
                    tuple(int(remap[i]) for i in unlabeled)))
    bags = tuple(bags)
    weights = make_weights(bags, "uniform")
    return WeakDataset(bags=bags, labels=space, weights=weights,
                       features=features[order],
                       true_labels=truth[order])


def crossval_ssl(features: np.ndarray, truth: np.ndarray, n_labeled: int,
                 lam_grid, kspec: KernelSpec, master_seed: int = 0,
                 n_splits: int = 10,
                 opts: SolverOptions = SolverOptions()) -> dict:
    """Repeated labeled-subset draws; transductive accuracy on the unlabeled."""
    lam_grid = list(np.atleast_1d(lam_grid))
    accs = []
    for split in range(n_splits):
        ds = make_ssl_dataset(features, truth, n_labeled,
                              seed=master_seed + split)
        best_acc = -np.inf
        for lam in lam_grid:
            art = run_pipeline(ds, "ssl", kspec, lam, seed=master_seed,
                               opts=opts)
            labeled_count = sum(1 for b in ds.bags if len(b.members) == 1)
            unl = np.arange(labeled_count, ds.n_instances)
            acc = float(np.mean(art["labels"][unl] == ds.true_labels[unl]))
            best_acc = max(best_acc, acc)
        accs.append(best_acc)
    accs = np.array(accs)
    return {"accuracy_mean": float(accs.mean()),
            "accuracy_std": float(accs.std()),
            "per_split": accs.tolist()}


def prequantize(ds: WeakDataset, m: int, seed: int = 0):
    """k-means quantization of a clustering dataset.

    Returns ``(reduced_ds, back_map)``: the relaxation runs on the m centers
    weighted by cluster mass; ``back_map[j]`` lists the member instances of
    center j so rounded labels can initialize EM on the full data.
    """
    if ds.features is None:
        raise ValueError("prequantize requires features")
    if m >= ds.n_instances:
        raise ValueError("quantization size must be below the instance count")
    km = KMeans(n_clusters=m, n_init=10, random_state=seed)
    assign = km.fit_predict(ds.features)
    masses = np.bincount(assign, minlength=m).astype(float)
    weights = masses / masses.sum()
    bag = Bag("centers", problem.UNLABELED_TOKEN, tuple(range(m)))
    reduced = WeakDataset(bags=(bag,), labels=ds.labels, weights=weights,
                          features=km.cluster_centers_)
    back_map = [np.nonzero(assign == j)[0] for j in range(m)]
    return reduced, back_map


def run_prequantized(ds: WeakDataset, m: int, kspec: KernelSpec, lam,
                     seed: int = 0, opts: SolverOptions = SolverOptions()):
    """Relax on centers, propagate rounded labels, refine EM on full data."""
    reduced, back_map = prequantize(ds, m, seed=seed)
    art = run_pipeline(reduced, "clustering", kspec, lam, seed=seed, opts=opts)
    p = ds.labels.latent_count
    z0 = np.zeros((ds.n_instances, p))
    for j, members in enumerate(back_map):
        z0[members, art["labels"][j]] = 1.0
    x_feat, _ = empirical_feature_map(ds, kspec)
    em_cfg = EMConfig(lam=float(np.atleast_1d(lam)[-1]),
                      max_alt=opts.em_max_alt)
    clf, z, trace = em_refine(z0, ds, x_feat, em_cfg)
    return {"labels": np.argmax(z, axis=1), "classifier": clf,
            "assignment": z, "em_trace": trace, "outer": art["outer"],
            "reduced": reduced}
