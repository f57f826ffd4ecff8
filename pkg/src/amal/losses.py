"""Primary and auxiliary losses.

Scalar helpers (``ce_loss``, ``kd_loss``...) work on a single logit vector.
The ``*_term`` factories build batched loss terms, callables mapping a logit
matrix to per-instance values and their gradients with respect to the
logits, which is what :mod:`amal.nncore` consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def log_softmax(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_t(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """KL(P || Q) along the last axis, from log-probabilities."""
    return np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)


def ce_loss(logits: np.ndarray, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(label) < logits.shape[-1]:
        raise ValueError(f"label {label} outside [0, {logits.shape[-1]})")
    return float(-log_softmax(logits)[int(label)])


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, tau: float,
            literal_order: bool = False) -> float:
    """``tau^2`` times the KL between temperature-softened distributions.

    Default direction is KL(teacher || student). ``literal_order`` swaps it
    to KL(student || teacher).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    ls = log_softmax(student_logits, tau)
    lt = log_softmax(teacher_logits, tau)
    kl = kl_divergence(ls, lt) if literal_order else kl_divergence(lt, ls)
    return float(max(tau * tau * kl, 0.0))


def mixed_loss(lambda_row: Sequence[float], primary_val: float, aux_vals: Sequence[float]) -> float:
    lam = np.asarray(lambda_row, dtype=np.float64)
    aux = np.asarray(aux_vals, dtype=np.float64).reshape(-1)
    if lam.shape[0] != aux.shape[0] + 1:
        raise ValueError("lambda row needs one entry per loss")
    return float(lam[0] * primary_val + np.dot(lam[1:], aux))


# Batched loss terms -------------------------------------------------------

def ce_term(labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.int64)

    def term(logits):
        ls = log_softmax(logits)
        rows = np.arange(len(labels))
        grad = np.exp(ls)
        grad[rows, labels] -= 1.0
        return -ls[rows, labels], grad
    return term


def kd_term(teacher_logits: np.ndarray, tau: float, literal_order: bool = False):
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    lt = log_softmax(teacher_logits, tau)
    pt = np.exp(lt)

    def term(logits):
        ls = log_softmax(logits, tau)
        ps = np.exp(ls)
        if literal_order:
            kl = kl_divergence(ls, lt)
            grad = tau * ps * (ls - lt - kl[:, None])
        else:
            kl = kl_divergence(lt, ls)
            grad = tau * (ps - pt)
        return tau * tau * kl, grad
    return term


def kl_to_target_term(target_log_probs: np.ndarray):
    """KL(P_theta(y|x) || Q) against a fixed target distribution Q per row."""
    lq = np.asarray(target_log_probs, dtype=np.float64)

    def term(logits):
        lp = log_softmax(logits)
        kl = kl_divergence(lp, lq)
        return kl, np.exp(lp) * (lp - lq - kl[:, None])
    return term


def masked_term(term, mask: np.ndarray):
    """Zero out a term's value and gradient where ``mask`` is false."""
    m = np.asarray(mask, dtype=np.float64)

    def wrapped(logits):
        v, g = term(logits)
        return v * m, g * m[:, None]
    return wrapped


def zero_term(logits):
    return np.zeros(logits.shape[0]), np.zeros_like(logits)


@dataclass(frozen=True)
class AuxSpec:
    kind: str = "kd_kl"          # kd_kl | rule_kl
    temperature: float = 4.0
    teacher_id: int | None = None
    literal_order: bool = False

    def __post_init__(self):
        if self.kind not in ("kd_kl", "rule_kl"):
            raise ValueError(f"unknown auxiliary loss {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class LossSpec:
    primary: str = "cross_entropy"
    auxiliaries: tuple[AuxSpec, ...] = field(default_factory=tuple)

    @property
    def n_aux(self) -> int:
        return len(self.auxiliaries)
