"""Bi-level learning of per-instance loss mixing weights.

Each training instance ``i`` owns a row ``(lambda_p, lambda_a_1..K)``. On
every ``period``-th epoch the table gets one sweep of meta-updates: for each
training minibatch a one-step plain-SGD look-ahead ``theta_hat(lambda)`` is
formed, and the gradient of the validation cross-entropy at ``theta_hat``
with respect to every lambda in the batch is

    d L_val / d lambda_{c,i} = -(eta / n) * <grad L_val(theta_hat), grad L_{c,i}(theta)>.

The inner product is taken with one forward-mode pass over the batch
(:func:`amal.nncore.jvp`) instead of materialising per-instance gradients.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import nncore
from .data import Dataset
from .errors import ConfigError, UsageError
from .losses import ce_term, kd_term, log_softmax
from .nncore import LossTerm, MlpParams, SgdState

METRIC_KEYS = ("epoch", "train_loss", "val_loss", "val_acc", "test_acc", "val_grad_sq", "seconds")


@dataclass
class MixingWeights:
    table: np.ndarray
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2 or self.table.shape[1] < 1:
            raise ValueError("lambda table must be N x (K + 1)")
        if self.clamp_lo >= self.clamp_hi:
            raise ValueError("clamp_lo must be below clamp_hi")

    @classmethod
    def constant(cls, n: int, row: Sequence[float], clamp_lo: float = 0.0,
                 clamp_hi: float = 1.0) -> "MixingWeights":
        table = np.tile(np.asarray(row, dtype=np.float64), (n, 1))
        return cls(np.clip(table, clamp_lo, clamp_hi), clamp_lo, clamp_hi)

    @property
    def n_aux(self) -> int:
        return self.table.shape[1] - 1

    @property
    def primary(self) -> np.ndarray:
        return self.table[:, 0]

    @property
    def aux(self) -> np.ndarray:
        return self.table[:, 1:]

    def copy(self) -> "MixingWeights":
        return MixingWeights(self.table.copy(), self.clamp_lo, self.clamp_hi)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["instance_id", "lambda_p"] + [f"lambda_a_{k + 1}" for k in range(self.n_aux)])
            for i, row in enumerate(self.table):
                w.writerow([i] + [repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path: str | Path, clamp_lo: float = 0.0, clamp_hi: float = 1.0) -> "MixingWeights":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        if header[:2] != ["instance_id", "lambda_p"]:
            raise ValueError(f"{path}: not a lambda table")
        body = [r for r in rows[1:] if r]
        ids = [int(r[0]) for r in body]
        if ids != list(range(len(body))):
            raise ValueError(f"{path}: instance ids must run 0..N-1 in order")
        table = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1)
        return cls(table, clamp_lo, clamp_hi)


@dataclass
class MetaConfig:
    period: int = 10                  # L: lambda sweep every `period` epochs
    lr_lambda: float = 300.0          # meta-gradients carry an eta/n factor, so steps are large
    init_value: float = 0.5
    init_row: tuple[float, ...] | None = None
    last_layer_only: bool = False
    val_batch: int = 64
    lambda_lo: float = 0.0
    lambda_hi: float = 1.0

    def __post_init__(self):
        if self.period < 1:
            raise ConfigError("period must be >= 1")
        if self.lr_lambda < 0:
            raise ConfigError("lr_lambda must be non-negative")
        if self.lambda_lo >= self.lambda_hi:
            raise ConfigError("lambda_lo must be below lambda_hi")
        if self.val_batch < 1:
            raise ConfigError("val_batch must be positive")
        if self.init_row is not None:
            self.init_row = tuple(float(v) for v in self.init_row)

    def initial_weights(self, n: int, n_components: int) -> MixingWeights:
        row = self.init_row if self.init_row is not None else (self.init_value,) * n_components
        if len(row) != n_components:
            raise ConfigError(f"init_row has {len(row)} entries, objective has {n_components} losses")
        return MixingWeights.constant(n, row, self.lambda_lo, self.lambda_hi)


@dataclass
class RunResult:
    final_params: MlpParams
    final_lambdas: MixingWeights | None
    metrics: list[dict[str, Any]]
    config: dict[str, Any]
    seed: int
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def final_test_acc(self) -> float | None:
        return self.metrics[-1]["test_acc"] if self.metrics else None

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True) + "\n")
        (out / "seed").write_text(f"{self.seed}\n")
        with open(out / "metrics.jsonl", "w") as fh:
            for rec in self.metrics:
                fh.write(json.dumps({k: rec.get(k) for k in METRIC_KEYS}) + "\n")
        if self.final_lambdas is not None:
            self.final_lambdas.save_csv(out / "lambdas.csv")
        nncore.save_checkpoint(self.final_params, out / "final.ckpt")
        return out


# Objectives -----------------------------------------------------------------

class Objective:
    """Per-instance loss components for a training set.

    ``terms(idx)`` returns one loss term per component (primary first) for
    the rows ``idx``. Objectives with parameters of their own (a label model,
    say) expose them through ``extra_arrays``/``extra_grads``; those receive
    plain SGD updates alongside the network but no meta-gradient.
    """

    n_components: int = 1
    extra_sgd: SgdState | None = None     # optimizer for the extra arrays; None reuses the network's

    def terms(self, idx: np.ndarray) -> list[LossTerm]:
        raise NotImplementedError

    def extra_arrays(self) -> list[np.ndarray]:
        return []

    def set_extra_arrays(self, arrays: list[np.ndarray]) -> None:
        pass

    def extra_grads(self, idx: np.ndarray, logits: np.ndarray, lam_rows: np.ndarray) -> list[np.ndarray]:
        return []

    def extra_loss(self, idx: np.ndarray) -> np.ndarray:
        return np.zeros(len(idx))


class SupervisedObjective(Objective):
    """Cross-entropy plus one temperature-scaled KD term per cached teacher."""

    def __init__(self, labels: np.ndarray, teacher_logits: Sequence[np.ndarray] = (),
                 temperature: float = 4.0, literal_order: bool = False):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.teacher_logits = [np.asarray(t, dtype=np.float64) for t in teacher_logits]
        for t in self.teacher_logits:
            if t.shape[0] != len(self.labels):
                raise ConfigError("teacher logits must have one row per training instance")
        self.temperature = temperature
        self.literal_order = literal_order
        self.n_components = 1 + len(self.teacher_logits)

    def terms(self, idx):
        out = [ce_term(self.labels[idx])]
        out += [kd_term(t[idx], self.temperature, self.literal_order) for t in self.teacher_logits]
        return out


# Look-ahead and meta-gradient -------------------------------------------------

@dataclass
class Lookahead:
    theta: MlpParams
    theta_hat: MlpParams
    eta: float
    n: int
    train_cache: nncore.ForwardCache
    component_dlogits: np.ndarray     # (K+1, n, C), unweighted
    last_layer_only: bool
    freeze_hidden: bool


def _component_grads(logits: np.ndarray, terms: Sequence[LossTerm]) -> np.ndarray:
    out = []
    for term in terms:
        _, g = term(logits)
        if not np.isfinite(g).all():
            bad = int(np.flatnonzero(~np.isfinite(g).all(axis=1))[0])
            raise nncore.NumericError("non-finite component gradient", bad)
        out.append(g)
    return np.stack(out)


def lookahead_params(params: MlpParams, features: np.ndarray, terms: Sequence[LossTerm],
                     lam_rows: np.ndarray, eta: float, last_layer_only: bool = False,
                     freeze_hidden: bool = False) -> Lookahead:
    """One plain-SGD step ``theta - (eta/n) sum_i grad L_i(theta, Lambda_i)``.

    With ``last_layer_only`` (or ``freeze_hidden``) only the final weight
    matrix and bias move.
    """
    lam_rows = np.asarray(lam_rows, dtype=np.float64)
    cache = nncore.forward_cache(params, features)
    comps = _component_grads(cache.logits, terms)
    if lam_rows.shape != (comps.shape[1], comps.shape[0]):
        raise ValueError(f"lambda rows of shape {lam_rows.shape} do not match {comps.shape[:2][::-1]}")
    n = comps.shape[1]
    dl = np.einsum("nc,cnk->nk", lam_rows, comps)
    if last_layer_only:
        step = params.zeros_like()
        step.weights[-1] = cache.last_hidden.T @ dl
        step.biases[-1] = dl.sum(axis=0)
    else:
        step = nncore.backward(params, cache, dl)
        if freeze_hidden:
            step = step.hidden_zeroed()
    theta_hat = params.axpy(-eta / n, step)
    return Lookahead(params, theta_hat, eta, n, cache, comps, last_layer_only, freeze_hidden)


def val_loss_and_grad(params: MlpParams, val_x: np.ndarray, val_y: np.ndarray,
                      last_layer_only: bool = False):
    """Mean validation cross-entropy and its gradient."""
    cache = nncore.forward_cache(params, val_x)
    v, g = ce_term(val_y)(cache.logits)
    m = len(val_y)
    if last_layer_only:
        grad = params.zeros_like()
        grad.weights[-1] = cache.last_hidden.T @ g / m
        grad.biases[-1] = g.sum(axis=0) / m
    else:
        grad = nncore.backward(params, cache, g / m)
    return float(v.mean()), grad


def meta_gradient(params: MlpParams, look: Lookahead, val_x: np.ndarray, val_y: np.ndarray):
    """Per-instance meta-gradients, shape ``(n, K+1)``, and ``||grad L_val||^2``."""
    if params is not look.theta and not all(
            np.array_equal(a, b) for a, b in zip(params.arrays(), look.theta.arrays())):
        raise UsageError("look-ahead was not computed from these parameters")
    restricted = look.last_layer_only or look.freeze_hidden
    _, g_val = val_loss_and_grad(look.theta_hat, val_x, val_y, restricted)
    if look.last_layer_only:
        directional = look.train_cache.last_hidden @ g_val.weights[-1] + g_val.biases[-1]
    else:
        directional = nncore.jvp(params, look.train_cache, g_val)
    inner = np.einsum("nk,cnk->nc", directional, look.component_dlogits)
    return -(look.eta / look.n) * inner, g_val.sq_norm()


def update_lambdas(weights: MixingWeights, rows: np.ndarray, meta_grads: np.ndarray,
                   lr_lambda: float) -> MixingWeights:
    if not np.isfinite(meta_grads).all():
        raise nncore.NumericError("non-finite meta-gradient")
    out = weights.copy()
    rows = np.asarray(rows, dtype=np.int64)
    out.table[rows] = np.clip(out.table[rows] - lr_lambda * meta_grads, out.clamp_lo, out.clamp_hi)
    return out


def finite_diff_meta_gradient(params: MlpParams, features: np.ndarray, terms: Sequence[LossTerm],
                              lam_rows: np.ndarray, eta: float, val_x: np.ndarray,
                              val_y: np.ndarray, instance: int, component: int,
                              eps: float = 1e-6) -> float:
    """Central difference of the validation loss through a full look-ahead."""
    if eps <= 0:
        raise ValueError("eps must be positive")

    def val_at(delta):
        lam = np.array(lam_rows, dtype=np.float64, copy=True)
        lam[instance, component] += delta
        look = lookahead_params(params, features, terms, lam, eta)
        return val_loss_and_grad(look.theta_hat, val_x, val_y)[0]

    return (val_at(eps) - val_at(-eps)) / (2 * eps)


# Training loop -----------------------------------------------------------------

def _streams(seed: int):
    shuffle_seq, val_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(shuffle_seq), np.random.default_rng(val_seq)


def epoch_batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + batch_size]) for i in range(0, n, batch_size)]


def evaluate(params: MlpParams, ds: Dataset | None) -> tuple[float | None, float | None]:
    """Mean cross-entropy and accuracy on a dataset."""
    if ds is None or len(ds) == 0:
        return None, None
    logits = nncore.forward(params, ds.features)
    ls = log_softmax(logits)
    loss = float(-ls[np.arange(len(ds)), ds.labels].mean())
    acc = float((logits.argmax(axis=1) == ds.labels).mean())
    return loss, acc


def _train(train_x: np.ndarray, val: Dataset, params: MlpParams, sgd: SgdState,
           objective: Objective, weights: MixingWeights, epochs: int, seed: int,
           meta: MetaConfig | None, test: Dataset | None, batch_size: int,
           log=None) -> tuple[MlpParams, MixingWeights, list[dict]]:
    if val is None or len(val) == 0:
        raise ConfigError("validation set is empty")
    if weights.table.shape != (len(train_x), objective.n_components):
        raise ConfigError("lambda table does not match the training set and objective")
    shuffle_rng, val_rng = _streams(seed)
    sgd = sgd.fresh()
    extra_sgd = (objective.extra_sgd or sgd).fresh()
    metrics = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        batches = epoch_batches(shuffle_rng, len(train_x), batch_size)
        grad_sq = None
        if meta is not None and epoch % meta.period == 0:
            eta = nncore.lr_at_epoch(sgd, epoch)
            frozen = params
            sq = []
            for idx in batches:
                vidx = np.sort(val_rng.choice(len(val), size=min(meta.val_batch, len(val)), replace=False))
                look = lookahead_params(frozen, train_x[idx], objective.terms(idx),
                                        weights.table[idx], eta, meta.last_layer_only)
                mg, gsq = meta_gradient(frozen, look, val.features[vidx], val.labels[vidx])
                weights = update_lambdas(weights, idx, mg, meta.lr_lambda)
                sq.append(gsq)
            grad_sq = float(np.mean(sq))
        losses = []
        for idx in batches:
            terms = objective.terms(idx)
            lam = weights.table[idx]
            cache = nncore.forward_cache(params, train_x[idx])
            values, dl = nncore.weighted_dlogits(cache.logits, list(zip(terms, lam.T)))
            grads = nncore.backward(params, cache, dl)
            for a in grads.arrays():
                a /= len(idx)
            extra = objective.extra_arrays()
            if extra:
                eg = objective.extra_grads(idx, cache.logits, lam)
                objective.set_extra_arrays(nncore.sgd_step_arrays(extra, eg, extra_sgd, epoch))
            params = nncore.sgd_step(params, grads, sgd, epoch)
            losses.append(float(np.mean(values + objective.extra_loss(idx))))
        val_loss, val_acc = evaluate(params, val)
        _, test_acc = evaluate(params, test)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
               "val_acc": val_acc, "test_acc": test_acc, "val_grad_sq": grad_sq,
               "seconds": time.perf_counter() - t0}
        metrics.append(rec)
        if log is not None:
            log(rec)
    return params, weights, metrics


def train_amal(train: Dataset | np.ndarray, val: Dataset, params: MlpParams, sgd: SgdState,
               objective: Objective, meta: MetaConfig, epochs: int, seed: int,
               test: Dataset | None = None, batch_size: int = 64, log=None) -> RunResult:
    """Train with meta-learned per-instance mixing weights."""
    train_x = train.features if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    weights = meta.initial_weights(len(train_x), objective.n_components)
    final, weights, metrics = _train(train_x, val, params, sgd, objective, weights, epochs, seed,
                                     meta, test, batch_size, log)
    config = {"trainer": "amal", "meta": asdict(meta), "sgd": _sgd_dict(sgd), "epochs": epochs,
              "batch_size": batch_size, "layer_dims": list(params.layer_dims),
              "activation": params.activation}
    return RunResult(final, weights, metrics, config, seed)


def train_fixed(train: Dataset | np.ndarray, val: Dataset, params: MlpParams, sgd: SgdState,
                objective: Objective, weights: MixingWeights, epochs: int, seed: int,
                test: Dataset | None = None, batch_size: int = 64, log=None) -> RunResult:
    """Train with a constant mixing table (no meta-updates)."""
    train_x = train.features if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    final, weights, metrics = _train(train_x, val, params, sgd, objective, weights.copy(), epochs,
                                     seed, None, test, batch_size, log)
    config = {"trainer": "fixed", "sgd": _sgd_dict(sgd), "epochs": epochs,
              "batch_size": batch_size, "layer_dims": list(params.layer_dims),
              "activation": params.activation}
    return RunResult(final, weights, metrics, config, seed)


def train_supervised(train: Dataset, val: Dataset | None, params: MlpParams, sgd: SgdState,
                     epochs: int, seed: int, test: Dataset | None = None,
                     batch_size: int = 64, log=None, on_epoch_end=None) -> RunResult:
    """Plain cross-entropy SGD, the reference every reduction is checked against.

    ``on_epoch_end(epoch, params)`` is called after each epoch's updates.
    """
    shuffle_rng, _ = _streams(seed)
    sgd = sgd.fresh()
    metrics = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        losses = []
        for idx in epoch_batches(shuffle_rng, len(train), batch_size):
            term = ce_term(train.labels[idx])
            grads = nncore.per_instance_grads(params, train.features[idx], [(term, np.ones(len(idx)))])
            values, _ = term(nncore.forward(params, train.features[idx]))
            params = nncore.sgd_step(params, grads, sgd, epoch)
            losses.append(float(values.mean()))
        if on_epoch_end is not None:
            on_epoch_end(epoch, params)
        val_loss, val_acc = evaluate(params, val)
        _, test_acc = evaluate(params, test)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
               "val_acc": val_acc, "test_acc": test_acc, "val_grad_sq": None,
               "seconds": time.perf_counter() - t0}
        metrics.append(rec)
        if log is not None:
            log(rec)
    config = {"trainer": "supervised", "sgd": _sgd_dict(sgd), "epochs": epochs,
              "batch_size": batch_size, "layer_dims": list(params.layer_dims),
              "activation": params.activation}
    return RunResult(params, None, metrics, config, seed)


def _sgd_dict(sgd: SgdState) -> dict:
    return {"lr0": sgd.lr0, "momentum": sgd.momentum, "weight_decay": sgd.weight_decay,
            "milestones": list(sgd.milestones), "gamma": sgd.gamma,
            "reset_momentum_at_milestones": sgd.reset_momentum_at_milestones}
