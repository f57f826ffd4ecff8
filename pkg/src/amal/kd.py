"""Knowledge-distillation drivers: teachers, fixed-weight KD and AMAL KD."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore
from .data import Dataset
from .errors import ConfigError
from .losses import softmax_t
from .metaopt import (MetaConfig, MixingWeights, RunResult, SupervisedObjective, train_amal,
                      train_fixed, train_supervised)
from .nncore import MlpParams, SgdState

KD_MODES = ("none", "fixed", "amal")

TEACHER_DIMS = (64, 64)
STUDENT_DIMS = (8,)


@dataclass
class Teacher:
    tag: str
    params: MlpParams | None = None
    logits: np.ndarray | None = None

    def logits_for(self, features: np.ndarray) -> np.ndarray:
        if self.params is None:
            raise ValueError(f"teacher {self.tag} only has cached logits")
        return nncore.forward(self.params, features)


@dataclass
class TeacherBundle:
    teachers: list[Teacher]
    temperature: float = 4.0

    def __post_init__(self):
        classes = {t.params.n_classes if t.params is not None else t.logits.shape[1]
                   for t in self.teachers}
        if len(classes) > 1:
            raise ConfigError("teachers disagree on the class count")

    def __len__(self) -> int:
        return len(self.teachers)

    @property
    def n_classes(self) -> int:
        t = self.teachers[0]
        return t.params.n_classes if t.params is not None else t.logits.shape[1]

    def cached_logits(self, n_rows: int) -> list[np.ndarray]:
        out = []
        for t in self.teachers:
            if t.logits is None or t.logits.shape[0] != n_rows:
                raise ConfigError(f"teacher {t.tag} has no logits cached for {n_rows} instances")
            out.append(t.logits)
        return out

    def select(self, tags: Sequence[str]) -> "TeacherBundle":
        keep = [t for t in self.teachers if t.tag in set(tags)]
        return TeacherBundle(keep, self.temperature)


def mlp_dims(d: int, hidden: Sequence[int], n_classes: int) -> tuple[int, ...]:
    return (d, *hidden, n_classes)


def train_teacher(train: Dataset, layer_dims: Sequence[int], sgd: SgdState, epochs: int,
                  checkpoint_epochs: Sequence[int] = (), seed: int = 0,
                  activation: str = "relu", batch_size: int = 64,
                  cache_features: np.ndarray | None = None, temperature: float = 4.0,
                  val: Dataset | None = None) -> TeacherBundle:
    """Plain CE training, keeping frozen copies after the requested epoch counts.

    The final model is always the last bundle member. Logits are cached for
    ``cache_features`` (the training features by default).
    """
    keep = sorted({int(e) for e in checkpoint_epochs if int(e) != epochs})
    if any(e < 0 or e > epochs for e in keep):
        raise ConfigError("checkpoint epochs must lie in [0, epochs]")
    snaps: dict[int, MlpParams] = {}
    params = nncore.init_mlp(layer_dims, seed, activation)
    if 0 in keep:
        snaps[0] = params.copy()

    def hook(epoch, current):
        if epoch + 1 in keep:
            snaps[epoch + 1] = current.copy()

    result = train_supervised(train, val, params, sgd, epochs, seed, batch_size=batch_size,
                              on_epoch_end=hook)
    feats = train.features if cache_features is None else cache_features
    teachers = [Teacher(f"epoch{e}", snaps[e], nncore.forward(snaps[e], feats)) for e in keep]
    teachers.append(Teacher("final", result.final_params, nncore.forward(result.final_params, feats)))
    return TeacherBundle(teachers, temperature)


def fixed_row(n_teachers: int, lambda_a: float) -> tuple[float, ...]:
    """``(1 - lambda_a, lambda_a / K, ...)``; uniform split across teachers."""
    return (1.0 - lambda_a,) + (lambda_a / n_teachers,) * n_teachers


def run_kd(student_dims: Sequence[int], bundle: TeacherBundle, mode: str, meta: MetaConfig | None,
           train: Dataset, val: Dataset, test: Dataset | None, seed: int, sgd: SgdState,
           epochs: int, lambda_a: float = 0.9, activation: str = "relu", batch_size: int = 64,
           literal_order: bool = False, log=None) -> RunResult:
    if mode not in KD_MODES:
        raise ConfigError(f"unknown KD mode {mode!r}")
    if bundle.n_classes != student_dims[-1]:
        raise ConfigError(f"teachers predict {bundle.n_classes} classes, student {student_dims[-1]}")
    objective = SupervisedObjective(train.labels, bundle.cached_logits(len(train)),
                                    bundle.temperature, literal_order)
    params = nncore.init_mlp(student_dims, seed, activation)
    if mode == "amal":
        if meta is None:
            raise ConfigError("amal mode needs a MetaConfig")
        result = train_amal(train, val, params, sgd, objective, meta, epochs, seed, test,
                            batch_size, log)
    else:
        la = 0.0 if mode == "none" else lambda_a
        weights = MixingWeights.constant(len(train), fixed_row(len(bundle), la))
        result = train_fixed(train, val, params, sgd, objective, weights, epochs, seed, test,
                             batch_size, log)
    result.config.update({"scenario": "kd", "mode": mode, "temperature": bundle.temperature,
                          "teachers": [t.tag for t in bundle.teachers]})
    if mode == "fixed":
        result.config["lambda_a"] = lambda_a
    result.extra["teacher_prob_at_label"] = teacher_prob_at_label(bundle, train)
    result.extra["noise_mask"] = train.noise_mask.copy()
    return result


def run_self_distillation(dims: Sequence[int], train: Dataset, val: Dataset, test: Dataset | None,
                          meta: MetaConfig | None, seed: int, sgd: SgdState, epochs: int,
                          mode: str = "amal", teacher_epochs: int | None = None,
                          temperature: float = 4.0, lambda_a: float = 0.9,
                          activation: str = "relu", batch_size: int = 64) -> RunResult:
    """Distil from a teacher that shares the student's architecture."""
    bundle = train_teacher(train, dims, sgd, teacher_epochs or epochs, (), seed + 7919,
                           activation, batch_size, temperature=temperature)
    result = run_kd(dims, bundle, mode, meta, train, val, test, seed, sgd, epochs, lambda_a,
                    activation, batch_size)
    result.config["scenario"] = "self_distillation"
    return result


def teacher_prob_at_label(bundle: TeacherBundle, train: Dataset, teacher: int = -1) -> np.ndarray:
    """Teacher probability (temperature 1) on each instance's observed label."""
    logits = bundle.cached_logits(len(train))[teacher]
    return softmax_t(logits)[np.arange(len(train)), train.labels]


# Logits cache: line 1 "teacher_id:<k>,tag:<tag>", line 2
# "instance_id,logit_0,...", then one row per instance in dataset order.

def save_logits_cache(teacher: Teacher, teacher_id: int, path: str | Path) -> None:
    if teacher.logits is None:
        raise ValueError("teacher has no cached logits")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"teacher_id:{teacher_id}", f"tag:{teacher.tag}"])
        w.writerow(["instance_id"] + [f"logit_{c}" for c in range(teacher.logits.shape[1])])
        for i, row in enumerate(teacher.logits):
            w.writerow([i] + [repr(float(v)) for v in row])


def load_logits_cache(path: str | Path) -> tuple[int, Teacher]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or not rows[0][0].startswith("teacher_id:") or not rows[0][1].startswith("tag:"):
        raise ValueError(f"{path}: missing teacher header")
    teacher_id = int(rows[0][0].split(":", 1)[1])
    tag = rows[0][1].split(":", 1)[1]
    body = [r for r in rows[2:] if r]
    if [int(r[0]) for r in body] != list(range(len(body))):
        raise ValueError(f"{path}: instance ids must run 0..N-1 in order")
    logits = np.array([[float(v) for v in r[1:]] for r in body])
    return teacher_id, Teacher(tag, None, logits)
