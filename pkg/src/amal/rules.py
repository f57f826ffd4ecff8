"""Rule denoising: a naive-Bayes label model over labeling functions.

The label model ``P_phi(l, y)`` has a class prior and, for each rule ``j``
voting for class ``c_j``, two firing probabilities: one when ``y == c_j``
and one otherwise. It is trained jointly with the feature network. Per
training instance the network sees

* labeled rows: ``lambda_p * CE(P_theta, y) + lambda_a * KL(P_theta || P_phi(.|l))``
  plus the label model's negative log-likelihood ``-log P_phi(l, y)`` (unweighted);
* unlabeled rows: ``lambda_p * CE(P_theta, g(l)) + lambda_a * KL(P_theta || P_phi(.|l))``
  with ``g(l)`` the label model's argmax, or nothing if no rule fired.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import nncore
from .data import Dataset, LfDataset
from .errors import ConfigError
from .losses import ce_term, kl_to_target_term, log_softmax, masked_term
from .metaopt import MetaConfig, MixingWeights, Objective, RunResult, train_amal, train_fixed, train_supervised
from .nncore import SgdState

RULE_MODES = ("only_l", "spear_fixed", "amal")


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


@dataclass
class RuleModelParams:
    """Class-prior logits plus per-rule firing logits for own and other classes."""
    prior_logits: np.ndarray
    own_logits: np.ndarray
    other_logits: np.ndarray
    lf_classes: np.ndarray

    def __post_init__(self):
        self.prior_logits = np.asarray(self.prior_logits, dtype=np.float64)
        self.own_logits = np.asarray(self.own_logits, dtype=np.float64)
        self.other_logits = np.asarray(self.other_logits, dtype=np.float64)
        self.lf_classes = np.asarray(self.lf_classes, dtype=np.int64)
        m = len(self.lf_classes)
        if self.own_logits.shape != (m,) or self.other_logits.shape != (m,):
            raise ValueError("need one own and one other logit per rule")
        if np.any(self.lf_classes < 0) or np.any(self.lf_classes >= self.n_classes):
            raise ValueError("rule class outside the prior's range")
        for a in self.arrays():
            if not np.isfinite(a).all():
                raise ValueError("rule model parameters must be finite")

    @classmethod
    def initial(cls, n_classes: int, lf_classes: Sequence[int], own: float = 0.7,
                other: float = 0.3) -> "RuleModelParams":
        m = len(lf_classes)
        logit = lambda p: np.log(p / (1.0 - p))
        return cls(np.zeros(n_classes), np.full(m, logit(own)), np.full(m, logit(other)), lf_classes)

    @classmethod
    def from_probs(cls, prior: Sequence[float], own: Sequence[float], other: Sequence[float],
                   lf_classes: Sequence[int]) -> "RuleModelParams":
        own, other = np.asarray(own, dtype=np.float64), np.asarray(other, dtype=np.float64)
        return cls(np.log(np.asarray(prior, dtype=np.float64)), np.log(own / (1 - own)),
                   np.log(other / (1 - other)), lf_classes)

    @property
    def n_classes(self) -> int:
        return len(self.prior_logits)

    @property
    def prior(self) -> np.ndarray:
        return np.exp(log_softmax(self.prior_logits))

    def arrays(self) -> list[np.ndarray]:
        return [self.prior_logits, self.own_logits, self.other_logits]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "RuleModelParams":
        return RuleModelParams(*[np.array(a, dtype=np.float64) for a in arrays], self.lf_classes)

    def firing_logits(self) -> np.ndarray:
        """``(m, C)`` logit of ``P(l_j = 1 | y)``."""
        own = self.lf_classes[:, None] == np.arange(self.n_classes)[None, :]
        return np.where(own, self.own_logits[:, None], self.other_logits[:, None])


def log_joint(phi: RuleModelParams, lf: np.ndarray) -> np.ndarray:
    """``log P_phi(l, y)`` for every row of ``lf`` and every class, shape ``(N, C)``."""
    lf = np.atleast_2d(np.asarray(lf, dtype=np.float64))
    if lf.shape[1] != len(phi.lf_classes):
        raise ValueError(f"firing vector has {lf.shape[1]} entries, model has {len(phi.lf_classes)} rules")
    a = phi.firing_logits()
    return log_softmax(phi.prior_logits)[None, :] + lf @ _log_sigmoid(a) + (1.0 - lf) @ _log_sigmoid(-a)


def rule_joint(phi: RuleModelParams, lf, y: int) -> float:
    return float(np.exp(log_joint(phi, lf)[0, int(y)]))


def rule_posterior(phi: RuleModelParams, lf) -> np.ndarray:
    """``P_phi(y | l)``; one row per firing vector (a single vector gives a 1-D result)."""
    single = np.asarray(lf).ndim == 1
    post = np.exp(log_softmax(log_joint(phi, lf)))
    return post[0] if single else post


def hypothesized_label(phi: RuleModelParams, lf) -> np.ndarray | int:
    """Argmax of the joint; ``argmax`` already breaks ties toward the lowest class."""
    single = np.asarray(lf).ndim == 1
    g = log_joint(phi, lf).argmax(axis=1)
    return int(g[0]) if single else g


def _logit_grads(phi: RuleModelParams, lf: np.ndarray, dlj: np.ndarray) -> list[np.ndarray]:
    """Pull ``d loss / d log_joint`` (N, C) back to the three parameter arrays."""
    prior = phi.prior
    g_prior = dlj.sum(axis=0) - dlj.sum() * prior
    a = phi.firing_logits()
    # d log_joint[i, y] / d a[j, y] = l_ij - sigmoid(a[j, y])
    g_a = lf.T @ dlj - _sigmoid(a) * dlj.sum(axis=0)[None, :]
    own = phi.lf_classes[:, None] == np.arange(phi.n_classes)[None, :]
    return [g_prior, (g_a * own).sum(axis=1), (g_a * ~own).sum(axis=1)]


def label_model_nll(phi: RuleModelParams, lf: np.ndarray, labels: np.ndarray):
    """Per-row ``-log P_phi(l, y)`` and its parameter gradients summed over rows."""
    lf = np.atleast_2d(np.asarray(lf, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    lj = log_joint(phi, lf)
    rows = np.arange(len(labels))
    dlj = np.zeros_like(lj)
    dlj[rows, labels] = -1.0
    return -lj[rows, labels], _logit_grads(phi, lf, dlj)


def kl_phi_grads(phi: RuleModelParams, lf: np.ndarray, logits: np.ndarray, weights: np.ndarray):
    """Gradients of ``sum_i w_i KL(P_theta(.|x_i) || P_phi(.|l_i))`` with respect to phi."""
    lf = np.atleast_2d(np.asarray(lf, dtype=np.float64))
    lj = log_joint(phi, lf)
    q = np.exp(log_softmax(lj))
    p = np.exp(log_softmax(logits))
    # dKL/d log_joint = q - p (the log-normaliser contributes q)
    return _logit_grads(phi, lf, np.asarray(weights, dtype=np.float64)[:, None] * (q - p))


def rule_denoise_loss(params: nncore.MlpParams, phi: RuleModelParams, x: np.ndarray, lf: np.ndarray,
                      lambda_row: Sequence[float], label: int | None = None):
    """Loss of one instance with gradients for theta and phi.

    ``label`` is None for an unlabeled instance. Returns
    ``(value, theta_grads, phi_grads)``.
    """
    lf = np.asarray(lf, dtype=np.float64).reshape(1, -1)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    lam_p, lam_a = (float(v) for v in lambda_row)
    zero_phi = [np.zeros_like(a) for a in phi.arrays()]
    if label is None and not lf.any():
        return 0.0, params.zeros_like(), zero_phi
    cache = nncore.forward_cache(params, x)
    target = int(label) if label is not None else int(hypothesized_label(phi, lf[0]))
    post_log = log_softmax(log_joint(phi, lf))
    ce_v, ce_g = ce_term(np.array([target]))(cache.logits)
    kl_v, kl_g = kl_to_target_term(post_log)(cache.logits)
    value = lam_p * ce_v[0] + lam_a * kl_v[0]
    theta_grads = nncore.backward(params, cache, lam_p * ce_g + lam_a * kl_g)
    phi_grads = kl_phi_grads(phi, lf, cache.logits, np.array([lam_a]))
    if label is not None:
        nll, g = label_model_nll(phi, lf, np.array([target]))
        value += nll[0]
        phi_grads = [a + b for a, b in zip(phi_grads, g)]
    return float(value), theta_grads, phi_grads


class RulesObjective(Objective):
    """Per-instance CE and rule-KL components over labeled-then-unlabeled rows.

    The label model is held here and updated through the extra-parameter
    hooks; the meta-gradient never sees it.
    """

    n_components = 2

    def __init__(self, lf: LfDataset, phi: RuleModelParams | None = None):
        self.lf = lf.lf_matrix.astype(np.float64)
        n = len(lf.base)
        self.labeled = np.arange(n) < lf.labeled_count
        self.labels = np.where(self.labeled, lf.base.labels, -1)
        self.fired = lf.lf_matrix.any(axis=1)
        self.active = self.labeled | self.fired
        self.phi = phi if phi is not None else RuleModelParams.initial(lf.base.n_classes, lf.lf_classes)

    def targets(self, idx: np.ndarray) -> np.ndarray:
        """Observed labels on labeled rows, rule-model argmax elsewhere (0 where unused)."""
        g = hypothesized_label(self.phi, self.lf[idx])
        out = np.where(self.labeled[idx], self.labels[idx], g)
        return np.where(self.active[idx], out, 0)

    def terms(self, idx):
        mask = self.active[idx]
        post_log = log_softmax(log_joint(self.phi, self.lf[idx]))
        return [masked_term(ce_term(self.targets(idx)), mask),
                masked_term(kl_to_target_term(post_log), mask)]

    def extra_arrays(self):
        return self.phi.arrays()

    def set_extra_arrays(self, arrays):
        self.phi = self.phi.with_arrays(arrays)

    def extra_grads(self, idx, logits, lam_rows):
        n = len(idx)
        w = lam_rows[:, 1] * self.active[idx]
        grads = kl_phi_grads(self.phi, self.lf[idx], logits, w)
        lab = idx[self.labeled[idx]]
        if len(lab):
            _, g = label_model_nll(self.phi, self.lf[lab], self.labels[lab])
            grads = [a + b for a, b in zip(grads, g)]
        return [g / n for g in grads]

    def extra_loss(self, idx):
        out = np.zeros(len(idx))
        lab = self.labeled[idx]
        if lab.any():
            out[lab], _ = label_model_nll(self.phi, self.lf[idx[lab]], self.labels[idx[lab]])
        return out


def carve_validation(lf: LfDataset, count: int, seed: int) -> tuple[LfDataset, Dataset]:
    """Move ``count`` random labeled rows out of ``lf`` into a validation set."""
    if count > lf.labeled_count:
        raise ConfigError(f"validation request of {count} exceeds {lf.labeled_count} labeled rows")
    rng = np.random.default_rng(seed)
    val_rows = np.sort(rng.choice(lf.labeled_count, size=count, replace=False))
    keep = np.setdiff1d(np.arange(len(lf.base)), val_rows)
    rest = LfDataset(lf.base.subset(keep, lf.base.split), lf.lf_matrix[keep], lf.lf_classes,
                     lf.labeled_count - count)
    return rest, lf.base.subset(val_rows, "val")


def run_rules(train: LfDataset, val: Dataset | LfDataset | int, test: Dataset | LfDataset | None,
              mode: str, meta: MetaConfig | None, seed: int, sgd: SgdState, epochs: int,
              hidden: Sequence[int] = (8,), activation: str = "relu",
              batch_size: int = 64, phi_lr_scale: float = 0.1, log=None) -> RunResult:
    """Train the feature network in one of the rule-denoising modes.

    ``val`` is either a labeled validation set or a row count to carve from
    the labeled part of ``train``. The label model steps with the network's
    schedule scaled by ``phi_lr_scale``; at full rate the agreement term drags
    it to an uninformative fixed point within a few epochs.
    """
    if phi_lr_scale <= 0:
        raise ConfigError("phi_lr_scale must be positive")
    if mode not in RULE_MODES:
        raise ConfigError(f"unknown rules mode {mode!r}")
    if isinstance(val, (int, np.integer)):
        train, val = carve_validation(train, int(val), seed + 1)
    val = val.base if isinstance(val, LfDataset) else val
    test = test.base if isinstance(test, LfDataset) else test
    base = train.base
    dims = (base.dim, *hidden, base.n_classes)
    params = nncore.init_mlp(dims, seed, activation)
    if mode == "only_l":
        labeled = base.subset(np.arange(train.labeled_count), "train")
        result = train_supervised(labeled, val, params, sgd, epochs, seed, test, batch_size, log)
        result.config.update({"scenario": "rules", "mode": mode})
        return result
    objective = RulesObjective(train)
    objective.extra_sgd = replace(sgd, lr0=sgd.lr0 * phi_lr_scale)
    if mode == "amal":
        if meta is None:
            raise ConfigError("amal mode needs a MetaConfig")
        result = train_amal(base.features, val, params, sgd, objective, meta, epochs, seed, test,
                            batch_size, log)
    else:
        weights = MixingWeights.constant(len(base), (1.0, 1.0))
        result = train_fixed(base.features, val, params, sgd, objective, weights, epochs, seed,
                             test, batch_size, log)
    result.config.update({"scenario": "rules", "mode": mode, "n_rules": train.n_rules,
                          "labeled_count": train.labeled_count, "phi_lr_scale": phi_lr_scale})
    result.extra["rule_model"] = objective.phi
    return result
