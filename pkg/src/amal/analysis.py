"""Post-hoc analysis of learned mixing weights and coreset retraining."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore
from .data import Dataset
from .errors import ConfigError
from .metaopt import MixingWeights, RunResult, train_supervised
from .nncore import SgdState

CORESET_STRATEGIES = ("sq", "absdiff", "ratio")
RATIO_EPS = 1e-8


def _table(weights) -> np.ndarray:
    t = weights.table if isinstance(weights, MixingWeights) else np.asarray(weights, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != 2:
        raise ConfigError("analysis needs a single-auxiliary lambda table (two columns)")
    return t


@dataclass
class GroupHistogram:
    edges: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray


def _histogram(stat: np.ndarray, noise_mask, bins) -> GroupHistogram:
    noise_mask = np.asarray(noise_mask, dtype=bool)
    if noise_mask.shape != stat.shape:
        raise ConfigError("noise mask must have one entry per lambda row")
    if np.ndim(bins) == 0:
        lo, hi = float(stat.min()), float(stat.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=np.float64)
        if np.any(np.diff(edges) <= 0):
            raise ConfigError("bin edges must be strictly increasing")
    clean, _ = np.histogram(stat[~noise_mask], edges)
    noisy, _ = np.histogram(stat[noise_mask], edges)
    return GroupHistogram(edges, clean, noisy)


def lambda_diff_histogram(weights, noise_mask, bins=20) -> GroupHistogram:
    """Histogram of ``lambda_a - lambda_p`` split by the noise mask."""
    t = _table(weights)
    return _histogram(t[:, 1] - t[:, 0], noise_mask, bins)


def lambda_sum_histogram(weights, noise_mask, bins=20) -> GroupHistogram:
    """Histogram of ``lambda_a + lambda_p`` split by the noise mask."""
    t = _table(weights)
    return _histogram(t[:, 1] + t[:, 0], noise_mask, bins)


def group_means(weights, noise_mask) -> dict[str, float]:
    """Clean/noisy means of the difference and sum statistics (NaN for an empty group)."""
    t = _table(weights)
    m = np.asarray(noise_mask, dtype=bool)
    d, s = t[:, 1] - t[:, 0], t[:, 1] + t[:, 0]
    mean = lambda v: float(v.mean()) if len(v) else float("nan")
    return {"diff_clean": mean(d[~m]), "diff_noisy": mean(d[m]),
            "sum_clean": mean(s[~m]), "sum_noisy": mean(s[m])}


@dataclass
class BucketStats:
    edges: np.ndarray
    clean_mean: np.ndarray
    clean_sem: np.ndarray
    clean_count: np.ndarray
    noisy_mean: np.ndarray
    noisy_sem: np.ndarray
    noisy_count: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        """``(B, 2)`` flags for empty (clean, noisy) buckets."""
        return np.stack([self.clean_count == 0, self.noisy_count == 0], axis=1)


def confidence_buckets(weights, teacher_probs, noise_mask, edges: Sequence[float]) -> BucketStats:
    """Mean and standard error of ``lambda_a`` per teacher-confidence bucket.

    Buckets are half-open ``[e_k, e_{k+1})`` except the last, which also
    includes its right edge. Empty buckets report NaN.
    """
    t = _table(weights)
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigError("bucket edges must be a strictly increasing list of at least two values")
    probs = np.asarray(teacher_probs, dtype=np.float64)
    mask = np.asarray(noise_mask, dtype=bool)
    if probs.shape != (len(t),) or mask.shape != (len(t),):
        raise ConfigError("teacher probabilities and noise mask must align with lambda rows")
    which = np.searchsorted(edges, probs, side="right") - 1
    which[probs == edges[-1]] = len(edges) - 2
    out = {k: np.full(len(edges) - 1, np.nan) for k in ("cm", "cs", "nm", "ns")}
    counts = {k: np.zeros(len(edges) - 1, dtype=np.int64) for k in ("c", "n")}
    lam_a = t[:, 1]
    for b in range(len(edges) - 1):
        for key, group in (("c", ~mask), ("n", mask)):
            v = lam_a[(which == b) & group]
            counts[key][b] = len(v)
            if len(v):
                out[key + "m"][b] = v.mean()
                out[key + "s"][b] = v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0
    return BucketStats(edges, out["cm"], out["cs"], counts["c"], out["nm"], out["ns"], counts["n"])


# Coresets ---------------------------------------------------------------------

def coreset_scores(weights, strategy: str) -> np.ndarray:
    t = _table(weights)
    lp, la = t[:, 0], t[:, 1]
    if strategy == "sq":
        return lp ** 2 + la ** 2
    if strategy == "absdiff":
        return np.abs(lp - la)
    if strategy == "ratio":
        return la / (lp + RATIO_EPS)
    raise ConfigError(f"unknown coreset strategy {strategy!r}")


def coreset_probs(weights, strategy: str) -> tuple[np.ndarray, bool]:
    """Sampling distribution proportional to the strategy score.

    Returns ``(probs, fallback)``; ``fallback`` is True when every score was
    zero and the uniform distribution was used instead.
    """
    scores = coreset_scores(weights, strategy)
    if np.any(scores < 0) or not np.isfinite(scores).all():
        raise ConfigError("coreset scores must be finite and non-negative")
    total = scores.sum()
    if total <= 0:
        return np.full(len(scores), 1.0 / len(scores)), True
    return scores / total, False


def sample_coreset(probs, fraction: float, seed: int) -> np.ndarray:
    """Weighted sampling without replacement of ``round(fraction * N)`` indices, sorted.

    Zero-probability rows are only used once the positive mass is exhausted.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    n = len(probs)
    k = int(round(fraction * n))
    rng = np.random.default_rng(seed)
    positive = np.flatnonzero(probs > 0)
    take = min(k, len(positive))
    p = probs[positive] / probs[positive].sum() if take else None
    chosen = rng.choice(positive, size=take, replace=False, p=p) if take else np.array([], dtype=np.int64)
    if take < k:
        zeros = np.flatnonzero(probs <= 0)
        chosen = np.concatenate([chosen, rng.choice(zeros, size=k - take, replace=False)])
    return np.sort(chosen.astype(np.int64))


def retrain_on_coreset(indices, train: Dataset, val: Dataset | None, test: Dataset | None,
                       layer_dims: Sequence[int], sgd: SgdState, epochs: int, seed: int,
                       activation: str = "relu", batch_size: int = 64) -> RunResult:
    """Cross-entropy training from scratch on ``train[indices]``."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ConfigError("coreset is empty")
    params = nncore.init_mlp(layer_dims, seed, activation)
    result = train_supervised(train.subset(indices, "coreset"), val, params, sgd, epochs, seed, test,
                              batch_size)
    result.config.update({"scenario": "coreset", "coreset_size": int(len(indices))})
    return result


# CSV output ---------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: str | Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def histogram_rows(h: GroupHistogram):
    for k in range(len(h.clean)):
        yield h.edges[k], h.edges[k + 1], int(h.clean[k]), int(h.noisy[k])


HISTOGRAM_HEADER = ("bin_lo", "bin_hi", "clean", "noisy")
BUCKET_HEADER = ("bucket_lo", "bucket_hi", "clean_mean", "clean_sem", "clean_count",
                 "noisy_mean", "noisy_sem", "noisy_count")


def bucket_rows(b: BucketStats):
    for k in range(len(b.clean_mean)):
        yield (b.edges[k], b.edges[k + 1], b.clean_mean[k], b.clean_sem[k], int(b.clean_count[k]),
               b.noisy_mean[k], b.noisy_sem[k], int(b.noisy_count[k]))
