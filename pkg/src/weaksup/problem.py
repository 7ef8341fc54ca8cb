"""Data model for weakly supervised tasks.

Instances are grouped into bags; each bag carries an observed label that
restricts the latent label of its members to a feasible subset of the
latent classes.  This module also builds the reduction map that collapses
instances with a fixed latent label into shared columns of the relaxed
equivalence matrix, and records fixed-entry ("must-not-link") constraints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

WEIGHT_SUM_TOL = 1e-12

# reserved bag-label tokens for the CSV format
UNLABELED_TOKEN = "?"
MIL_NEGATIVE_TOKEN = "0"
MIL_POSITIVE_TOKEN = "1"


@dataclass(frozen=True)
class LabelSpace:
    """Latent classes, observed bag labels and their feasible subsets."""

    latent_count: int
    bag_labels: tuple
    feasible: dict

    def __post_init__(self):
        if self.latent_count < 1:
            raise ValueError("latent_count must be positive")
        if len(set(self.bag_labels)) != len(self.bag_labels):
            raise ValueError("bag_labels must be distinct")
        for lab in self.bag_labels:
            fs = self.feasible.get(lab)
            if not fs:
                raise ValueError(f"feasible set for label {lab!r} is empty")
            if not set(fs) <= set(range(self.latent_count)):
                raise ValueError(f"feasible set for label {lab!r} out of range")

    def feasible_set(self, label) -> frozenset:
        return frozenset(self.feasible[label])


def mil_label_space() -> LabelSpace:
    """Two latent classes; negative bags are pinned to class 0."""
    return LabelSpace(
        latent_count=2,
        bag_labels=(MIL_NEGATIVE_TOKEN, MIL_POSITIVE_TOKEN),
        feasible={MIL_NEGATIVE_TOKEN: frozenset({0}),
                  MIL_POSITIVE_TOKEN: frozenset({0, 1})},
    )


def clustering_label_space(p: int) -> LabelSpace:
    """Single unlabeled bag label; all latent classes feasible."""
    return LabelSpace(
        latent_count=p,
        bag_labels=(UNLABELED_TOKEN,),
        feasible={UNLABELED_TOKEN: frozenset(range(p))},
    )


def ssl_label_space(class_tokens) -> LabelSpace:
    """One singleton label per class plus the unlabeled token."""
    toks = tuple(class_tokens)
    p = len(toks)
    feas = {tok: frozenset({i}) for i, tok in enumerate(toks)}
    feas[UNLABELED_TOKEN] = frozenset(range(p))
    return LabelSpace(latent_count=p, bag_labels=toks + (UNLABELED_TOKEN,),
                      feasible=feas)


@dataclass(frozen=True)
class Bag:
    id: object
    label: object
    members: tuple

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValueError("bag members must be nonempty")


@dataclass(frozen=True)
class WeakDataset:
    """Instances, bags, label space and instance weights.

    ``features`` is an N x d array, or None when only a precomputed kernel
    is available (stored in ``precomputed_kernel``).
    """

    bags: tuple
    labels: LabelSpace
    weights: np.ndarray
    features: np.ndarray | None = None
    precomputed_kernel: np.ndarray | None = None
    true_labels: np.ndarray | None = None  # ground truth when synthetic

    @property
    def n_instances(self) -> int:
        return sum(len(b.members) for b in self.bags)

    @property
    def n_bags(self) -> int:
        return len(self.bags)

    def bag_of(self) -> np.ndarray:
        """Bag index of each instance."""
        out = np.empty(self.n_instances, dtype=int)
        for i, b in enumerate(self.bags):
            out[list(b.members)] = i
        return out

    def feasible_of(self, n: int) -> frozenset:
        """Feasible latent-label set of instance n."""
        bag = self.bags[self.bag_of()[n]]
        return self.labels.feasible_set(bag.label)

    def feasible_sets(self) -> list:
        """Feasible latent-label set per instance, index-aligned."""
        out = [None] * self.n_instances
        for b in self.bags:
            fs = self.labels.feasible_set(b.label)
            for n in b.members:
                out[n] = fs
        return out


@dataclass(frozen=True)
class ReductionMap:
    """Collapse map from instances to columns of the reduced matrix.

    ``column_of[n]`` is the index of the single unit entry in row n of the
    0/1 matrix R (N x reduced_size); ``anchor_index`` maps a fixed latent
    class (SSL) or the collapsed negative group (MIL, key "negative") to
    its column.
    """

    column_of: np.ndarray
    reduced_size: int
    anchor_index: dict = field(default_factory=dict)

    @property
    def n_instances(self) -> int:
        return len(self.column_of)

    def matrix(self) -> np.ndarray:
        r = np.zeros((self.n_instances, self.reduced_size))
        r[np.arange(self.n_instances), self.column_of] = 1.0
        return r


@dataclass(frozen=True)
class ZConstraintSet:
    """Fixed entries (row, col, value) of the reduced matrix, value in {0,1}."""

    fixed_entries: tuple = ()

    def __post_init__(self):
        seen = {(i, j): v for i, j, v in self.fixed_entries}
        for (i, j), v in seen.items():
            if i == j:
                raise ValueError("diagonal entries are fixed to 1 by the elliptope")
            if v not in (0, 1):
                raise ValueError("fixed values must be 0 or 1")
            if seen.get((j, i)) != v:
                raise ValueError("fixed entries must be symmetric")

    def __len__(self):
        return len(self.fixed_entries)


def validate_dataset(ds: WeakDataset) -> list:
    """Return a list of invariant violations (empty iff the dataset is valid)."""
    report = []
    n = ds.n_instances
    seen = {}
    for b in ds.bags:
        if len(b.members) == 0:
            report.append(f"bag {b.id}: empty members")
        if b.label not in ds.labels.feasible:
            report.append(f"bag {b.id}: unknown label {b.label!r}")
        for m in b.members:
            if m in seen:
                report.append(f"bags not disjoint: instance {m} in bags "
                              f"{seen[m]} and {b.id}")
            seen[m] = b.id
    if set(seen) != set(range(n)):
        report.append("bags do not cover all instances")
    w = np.asarray(ds.weights, dtype=float)
    if w.shape != (n,):
        report.append(f"weights length {w.shape} != instance count {n}")
    else:
        if np.any(w < 0):
            report.append(f"negative weight at index {int(np.argmin(w))}")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            report.append(f"weights sum != 1 (sum = {w.sum()!r})")
    if ds.features is not None and ds.features.shape[0] != n:
        report.append("feature rows != instance count")
    if ds.features is None and ds.precomputed_kernel is None:
        report.append("neither features nor precomputed kernel present")
    return report


def make_weights(bags, mode: str) -> np.ndarray:
    """Instance weights: ``uniform`` gives 1/N, ``per_bag`` gives 1/(I*N_i)."""
    n = sum(len(b.members) for b in bags)
    if n == 0:
        raise ValueError("no instances")
    w = np.empty(n)
    if mode == "uniform":
        w[:] = 1.0 / n
    elif mode == "per_bag":
        n_bags = len(bags)
        for b in bags:
            w[list(b.members)] = 1.0 / (n_bags * len(b.members))
    else:
        raise ValueError(f"unknown weight mode {mode!r}")
    return w


def build_reduction(ds: WeakDataset, task: str) -> tuple:
    """Build the collapse map and fixed-entry constraints for a task.

    clustering: identity map, no constraints.  ssl: unlabeled instances keep
    their own column, instances with a fixed class l share anchor column
    N_u + l, and distinct anchors are constrained to 0 (must-not-link).
    mil: positive-bag instances keep their own column, all negative-bag
    instances collapse onto one anchor column, which pins their mutual
    entries to 1 exactly.
    """
    n = ds.n_instances
    if task == "clustering":
        return (ReductionMap(np.arange(n), n), ZConstraintSet())

    feas = ds.feasible_sets()
    p = ds.labels.latent_count

    if task == "ssl":
        col = np.full(n, -1, dtype=int)
        free = [i for i in range(n) if len(feas[i]) > 1]
        n_u = len(free)
        for j, i in enumerate(free):
            col[i] = j
        present = set()
        for i in range(n):
            if len(feas[i]) == 1:
                (lab,) = feas[i]
                col[i] = n_u + lab
                present.add(lab)
        missing = set(range(p)) - present
        if missing:
            raise ValueError(f"empty class anchor: classes {sorted(missing)} "
                             "have no labeled instance")
        anchors = {lab: n_u + lab for lab in range(p)}
        fixed = []
        for a in range(p):
            for b in range(p):
                if a != b:
                    fixed.append((n_u + a, n_u + b, 0))
        return (ReductionMap(col, n_u + p, anchors), ZConstraintSet(tuple(fixed)))

    if task == "mil":
        if p != 2:
            raise ValueError("MIL requires the two-class MIL label space")
        col = np.full(n, -1, dtype=int)
        pos = [i for i in range(n) if len(feas[i]) > 1]
        n_u = len(pos)
        for j, i in enumerate(pos):
            col[i] = j
        for i in range(n):
            if len(feas[i]) == 1:
                if feas[i] != frozenset({0}):
                    raise ValueError("MIL negative bags must be pinned to class 0")
                col[i] = n_u
        if np.any(col < 0):
            raise ValueError("instance with no column assignment")
        return (ReductionMap(col, n_u + 1, {"negative": n_u}), ZConstraintSet())

    raise ValueError(f"unknown task {task!r}")


def expand_reduced(rmap: ReductionMap, z_small: np.ndarray) -> np.ndarray:
    """Expand the reduced matrix: B = R Z R^T, i.e. B[n, m] = Z[r(n), r(m)]."""
    z_small = np.asarray(z_small)
    if z_small.shape != (rmap.reduced_size, rmap.reduced_size):
        raise ValueError(f"expected {(rmap.reduced_size,) * 2} matrix, "
                         f"got {z_small.shape}")
    idx = rmap.column_of
    return z_small[np.ix_(idx, idx)]


def contract_full(rmap: ReductionMap, m_full: np.ndarray) -> np.ndarray:
    """Contract an N x N matrix: R^T M R (group sums over shared columns)."""
    m_full = np.asarray(m_full)
    n = rmap.n_instances
    if m_full.shape != (n, n):
        raise ValueError("matrix size mismatch with reduction map")
    n_r = rmap.reduced_size
    idx = rmap.column_of
    # sum rows into groups, then columns
    half = np.zeros((n_r, n))
    np.add.at(half, idx, m_full)
    out = np.zeros((n_r, n_r))
    np.add.at(out, idx, half.T)
    return out.T


def load_dataset_csv(path, task: str, weight_mode: str = "uniform",
                     latent_count: int | None = None) -> WeakDataset:
    """Load the documented CSV format.

    Header ``bag_id,bag_label,feat_0,...``; one instance per row.  For SSL
    the token ``?`` marks the unlabeled bag; for MIL the tokens ``0``/``1``
    mark negative/positive bags.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 3 or header[0] != "bag_id" or header[1] != "bag_label":
            raise ValueError("expected header bag_id,bag_label,feat_0,...")
        for row in reader:
            if row:
                rows.append((row[0], row[1], [float(v) for v in row[2:]]))
    if not rows:
        raise ValueError("no instances")
    feats = np.array([r[2] for r in rows])
    return _assemble(rows, feats, task, weight_mode, latent_count)


def load_precomputed_kernel_csv(kernel_path, manifest_path, task: str,
                                weight_mode: str = "uniform",
                                latent_count: int | None = None) -> WeakDataset:
    """Load a square kernel CSV plus its ``bag_id,bag_label`` manifest."""
    gram = np.loadtxt(kernel_path, delimiter=",", ndmin=2)
    if gram.shape[0] != gram.shape[1]:
        raise ValueError(f"precomputed kernel is not square: {gram.shape}")
    rows = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["bag_id", "bag_label"]:
            raise ValueError("expected manifest header bag_id,bag_label")
        for row in reader:
            if row:
                rows.append((row[0], row[1], None))
    if len(rows) != gram.shape[0]:
        raise ValueError(f"kernel size {gram.shape[0]} != manifest rows {len(rows)}")
    gram = 0.5 * (gram + gram.T)
    return _assemble(rows, None, task, weight_mode, latent_count, kernel=gram)


def _assemble(rows, feats, task, weight_mode, latent_count, kernel=None):
    order = []
    groups = {}
    for n, (bid, blab, _) in enumerate(rows):
        if bid not in groups:
            groups[bid] = (blab, [])
            order.append(bid)
        lab, members = groups[bid]
        if lab != blab:
            raise ValueError(f"bag {bid!r} has inconsistent labels")
        members.append(n)

    tokens = {lab for lab, _ in groups.values()}
    if task == "mil":
        if not tokens <= {MIL_NEGATIVE_TOKEN, MIL_POSITIVE_TOKEN}:
            raise ValueError("MIL bag labels must be '0' or '1'")
        space = mil_label_space()
    elif task == "ssl":
        class_toks = sorted(tokens - {UNLABELED_TOKEN})
        if not class_toks:
            raise ValueError("SSL data has no labeled bags")
        space = ssl_label_space(class_toks)
    elif task == "clustering":
        if latent_count is None:
            raise ValueError("clustering requires a latent class count")
        space = clustering_label_space(latent_count)
        groups = {bid: (UNLABELED_TOKEN, members)
                  for bid, (_, members) in groups.items()}
    else:
        raise ValueError(f"unknown task {task!r}")

    bags = tuple(Bag(bid, groups[bid][0], tuple(groups[bid][1])) for bid in order)
    weights = make_weights(bags, weight_mode)
    return WeakDataset(bags=bags, labels=space, weights=weights,
                       features=feats, precomputed_kernel=kernel)
