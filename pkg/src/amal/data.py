"""Synthetic datasets, label noise, splits, synthetic labeling functions, CSV IO."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError


class ParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    noise_mask: np.ndarray | None = None
    split: str = "all"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.noise_mask is None:
            self.noise_mask = np.zeros(len(self.labels), dtype=bool)
        self.noise_mask = np.asarray(self.noise_mask, dtype=bool)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.labels):
            raise ValueError("features must be an (N, d) matrix aligned with labels")
        if len(self.noise_mask) != len(self.labels):
            raise ValueError("noise_mask length differs from label count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes,
                       self.noise_mask[idx], split or self.split)


@dataclass
class LfDataset:
    """Dataset plus labeling-function firings.

    The first ``labeled_count`` rows are the labeled part. ``base.labels`` keeps
    the generating labels for every row so precision can be measured; training
    code must only read labels of the labeled rows.
    """
    base: Dataset
    lf_matrix: np.ndarray
    lf_classes: np.ndarray
    labeled_count: int

    def __post_init__(self):
        self.lf_matrix = np.asarray(self.lf_matrix, dtype=bool)
        self.lf_classes = np.asarray(self.lf_classes, dtype=np.int64)
        if self.lf_matrix.shape != (len(self.base), len(self.lf_classes)):
            raise ValueError("lf_matrix must be N x m")
        if not 0 <= self.labeled_count <= len(self.base):
            raise ValueError("labeled_count out of range")

    @property
    def n_rules(self) -> int:
        return len(self.lf_classes)

    def coverage(self, rows=None) -> float:
        fired = self.lf_matrix if rows is None else self.lf_matrix[rows]
        return float(fired.any(axis=1).mean())

    def precision(self, rows=None) -> float:
        """Micro precision: fraction of all firings that point at the row's class."""
        fired = self.lf_matrix if rows is None else self.lf_matrix[rows]
        labels = self.base.labels if rows is None else self.base.labels[rows]
        hits = fired & (labels[:, None] == self.lf_classes[None, :])
        total = fired.sum()
        return float(hits.sum() / total) if total else 1.0


def gen_synthetic(seed: int, n_total: int = 10000, d: int = 14, n_classes: int = 20,
                  class_sep: float = 1.5, informative_count: int = 10,
                  clusters_per_class: int = 2) -> Dataset:
    """Gaussian class clusters in an informative subspace plus pure-noise features.

    Each class owns ``clusters_per_class`` centroids drawn from
    ``N(0, class_sep^2 I)``; a point is its centroid plus unit Gaussian noise.
    """
    if n_classes < 2 or d < 1 or n_total < 1 or clusters_per_class < 1:
        raise ConfigError("need n_classes >= 2, d >= 1, n_total >= 1, clusters_per_class >= 1")
    if not 1 <= informative_count <= d:
        raise ConfigError("informative_count must lie in [1, d]")
    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((n_classes, clusters_per_class, informative_count)) * class_sep
    labels = rng.permutation(np.arange(n_total) % n_classes)
    cluster = rng.integers(0, clusters_per_class, size=n_total)
    x = rng.standard_normal((n_total, d))
    x[:, :informative_count] += centroids[labels, cluster]
    return Dataset(x, labels, n_classes)


def inject_label_noise(ds: Dataset, fraction: float, seed: int) -> Dataset:
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("noise fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    count = int(round(fraction * len(ds)))
    flip = np.sort(rng.choice(len(ds), size=count, replace=False))
    labels = ds.labels.copy()
    labels[flip] = (labels[flip] + rng.integers(1, ds.n_classes, size=count)) % ds.n_classes
    mask = ds.noise_mask.copy()
    mask[flip] = True
    return replace(ds, labels=labels, noise_mask=mask)


class Split(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset
    stratified: bool


def _counts(sizes: Sequence[float], n: int) -> list[int]:
    if len(sizes) != 3:
        raise ConfigError("sizes must give (train, val, test)")
    if all(float(s).is_integer() and s >= 1 for s in sizes if s) and any(s >= 1 for s in sizes):
        counts = [int(s) for s in sizes]
    else:
        if any(s < 0 for s in sizes) or sum(sizes) > 1.0 + 1e-12:
            raise ConfigError("fractional sizes must be non-negative and sum to at most 1")
        counts = [int(round(s * n)) for s in sizes]
        if sum(counts) > n:
            counts[int(np.argmax(counts))] -= sum(counts) - n
    if sum(counts) > n:
        raise ConfigError(f"sizes {counts} exceed dataset size {n}")
    return counts


def split(ds: Dataset, sizes: Sequence[float], seed: int) -> Split:
    """Seeded, class-stratified split into disjoint train/val/test parts.

    ``sizes`` are either fractions of N or absolute counts.
    """
    counts = _counts(sizes, len(ds))
    rng = np.random.default_rng(seed)
    _, class_sizes = np.unique(ds.labels, return_counts=True)
    active = sum(1 for c in counts if c > 0)
    stratified = bool(len(class_sizes)) and class_sizes.min() >= active
    if stratified:
        # interleave classes by relative rank, so any contiguous chunk is
        # within one instance per class of proportional
        key = np.empty(len(ds))
        for cls in np.unique(ds.labels):
            members = rng.permutation(np.flatnonzero(ds.labels == cls))
            key[members] = (np.arange(len(members)) + rng.random(len(members))) / len(members)
        order = np.argsort(key, kind="stable")
    else:
        order = rng.permutation(len(ds))
    bounds = np.cumsum([0] + counts)
    parts = [order[bounds[s]:bounds[s + 1]] for s in range(3)]
    names = ("train", "val", "test")
    out = [ds.subset(np.sort(p), names[s]) for s, p in enumerate(parts)]
    return Split(out[0], out[1], out[2], stratified)


def synthetic_splits(seed: int, sizes=(8100, 900, 1000), d: int = 14, n_classes: int = 20,
                     class_sep: float = 1.5, informative_count: int = 10,
                     clusters_per_class: int = 2, noise: float = 0.1) -> Split:
    """Generate, split and corrupt training labels (validation and test stay clean)."""
    ds = gen_synthetic(seed, int(sum(sizes)), d, n_classes, class_sep, informative_count,
                       clusters_per_class)
    parts = split(ds, sizes, seed + 1)
    train = inject_label_noise(parts.train, noise, seed + 2) if noise else parts.train
    return Split(train, parts.val, parts.test, parts.stratified)


def gen_synthetic_lfs(ds: Dataset, m: int, target_precision: float, target_coverage: float,
                      seed: int, labeled_count: int = 100, tolerance: float = 0.05) -> LfDataset:
    """Rules that each vote for one class and fire on a random subset of rows.

    Rule ``j`` votes for class ``j % C``. Each rule fires on the same number of
    rows, chosen so independent rules jointly cover ``target_coverage`` of the
    data; ``target_precision`` of each rule's firings land on its own class.
    """
    if m < 1:
        raise ConfigError("need at least one rule")
    if not (0 < target_precision <= 1 and 0 < target_coverage <= 1):
        raise ConfigError("precision and coverage must lie in (0, 1]")
    n = len(ds)
    rng = np.random.default_rng(seed)
    rate = 1.0 - (1.0 - target_coverage) ** (1.0 / m) if target_coverage < 1 else 1.0
    per_rule = max(1, int(round(rate * n)))
    lf_classes = np.arange(m) % ds.n_classes
    fired = np.zeros((n, m), dtype=bool)
    for j, cls in enumerate(lf_classes):
        own = np.flatnonzero(ds.labels == cls)
        other = np.flatnonzero(ds.labels != cls)
        n_own = int(round(target_precision * per_rule))
        n_other = per_rule - n_own
        if n_own > len(own) or n_other > len(other):
            raise ConfigError(f"rule {j}: precision {target_precision} with coverage "
                              f"{target_coverage} is infeasible for this dataset")
        fired[rng.choice(own, n_own, replace=False), j] = True
        fired[rng.choice(other, n_other, replace=False), j] = True
    out = LfDataset(ds, fired, lf_classes, labeled_count)
    cov, prec = out.coverage(), out.precision()
    if abs(cov - target_coverage) > tolerance or abs(prec - target_precision) > tolerance:
        raise ConfigError(f"cannot meet targets: measured coverage {cov:.3f}, precision {prec:.3f}")
    return out


def rule_dataset(seed: int, labeled: int = 100, unlabeled: int = 1586, val: int = 100,
                 test: int = 250, m: int = 10, precision: float = 0.75, coverage: float = 0.87,
                 n_classes: int = 2, d: int = 14, class_sep: float = 1.0,
                 informative_count: int = 10):
    """Return ``(lf_train, lf_val, lf_test)`` sharing one rule set.

    ``lf_train`` holds labeled rows first, then unlabeled rows.
    """
    total = labeled + unlabeled + val + test
    ds = gen_synthetic(seed, total, d, n_classes, class_sep, informative_count)
    lfs = gen_synthetic_lfs(ds, m, precision, coverage, seed + 1, labeled_count=labeled)
    bounds = np.cumsum([0, labeled + unlabeled, val, test])

    def part(lo, hi, name, lab):
        rows = np.arange(lo, hi)
        return LfDataset(lfs.base.subset(rows, name), lfs.lf_matrix[rows], lfs.lf_classes, lab)

    return (part(bounds[0], bounds[1], "train", labeled),
            part(bounds[1], bounds[2], "val", val),
            part(bounds[2], bounds[3], "test", test))


# CSV -------------------------------------------------------------------------

def save_dataset(ds: Dataset, path: str | Path) -> None:
    if len(ds) == 0:
        raise ValueError("refusing to save an empty dataset")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(ds.dim)] + ["label", "noisy"])
        for x, y, noisy in zip(ds.features, ds.labels, ds.noise_mask):
            w.writerow([repr(float(v)) for v in x] + [int(y), int(noisy)])


def load_dataset(path: str | Path, n_classes: int | None = None, split: str | None = None) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(path, 1, "empty file")
    header = rows[0]
    if len(header) < 3 or header[-2:] != ["label", "noisy"] or \
            header[:-2] != [f"f{j}" for j in range(len(header) - 2)]:
        raise ParseError(path, 1, "expected header f0,...,f{d-1},label,noisy")
    d = len(header) - 2
    feats, labels, noisy = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 2:
            raise ParseError(path, lineno, f"expected {d + 2} fields, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:d]])
            labels.append(int(row[d]))
            flag = int(row[d + 1])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        if flag not in (0, 1):
            raise ParseError(path, lineno, "noisy flag must be 0 or 1")
        noisy.append(bool(flag))
    if not labels:
        raise ParseError(path, 2, "no data rows")
    labels_arr = np.array(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels_arr.max()) + 1
    try:
        return Dataset(np.array(feats).reshape(-1, d), labels_arr, n_classes,
                       np.array(noisy, dtype=bool), split or path.stem)
    except ValueError as exc:
        raise ParseError(path, 0, str(exc)) from None


def save_lf_matrix(lfs: LfDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"rule_class:{int(c)}" for c in lfs.lf_classes])
        w.writerows(lfs.lf_matrix.astype(int).tolist())


def load_lf_matrix(path: str | Path, base: Dataset, labeled_count: int) -> LfDataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not all(h.startswith("rule_class:") for h in rows[0]):
        raise ParseError(path, 1, "expected header rule_class:<c>,...")
    try:
        classes = [int(h.split(":", 1)[1]) for h in rows[0]]
    except ValueError:
        raise ParseError(path, 1, "rule class must be an integer") from None
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(classes) or any(v not in ("0", "1") for v in row):
            raise ParseError(path, lineno, "expected one 0/1 entry per rule")
        body.append([v == "1" for v in row])
    if len(body) != len(base):
        raise ParseError(path, len(rows), f"{len(body)} firing rows for {len(base)} instances")
    return LfDataset(base, np.array(body, dtype=bool).reshape(len(base), len(classes)),
                     np.array(classes), labeled_count)
