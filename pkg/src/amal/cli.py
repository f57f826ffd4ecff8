"""Command-line entry point: ``amal <subcommand> ...``.

Every subcommand reads an optional JSON config (unknown keys are rejected),
writes plain files under ``--out`` and exits non-zero with a one-line JSON
error on stderr when something goes wrong. ``AMAL_OUT_DIR`` re-roots
relative output paths; ``AMAL_THREADS`` caps the number of worker processes
used for seed sweeps.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import analysis, data, kd, nncore, rules, svg
from .data import ParseError
from .errors import ConfigError, UsageError
from .metaopt import MetaConfig, MixingWeights
from .nncore import SgdState


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SgdSection(_Strict):
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list[int] = [150, 180, 210]
    gamma: float = 0.1
    reset_momentum_at_milestones: bool = False

    def build(self) -> SgdState:
        return SgdState(self.lr0, self.momentum, self.weight_decay, tuple(self.milestones), self.gamma,
                        self.reset_momentum_at_milestones)


class MetaSection(_Strict):
    period: int = 10
    lr_lambda: float = 300.0
    init_value: float = 0.5
    init_row: Optional[list[float]] = None
    last_layer_only: bool = False
    val_batch: int = 64
    lambda_lo: float = 0.0
    lambda_hi: float = 1.0

    def build(self) -> MetaConfig:
        return MetaConfig(**self.model_dump())


class SyntheticSection(_Strict):
    n_train: int = 8100
    n_val: int = 900
    n_test: int = 1000
    d: int = 14
    n_classes: int = 20
    class_sep: float = 1.5
    informative_count: int = 10
    clusters_per_class: int = 2
    noise: float = 0.1


class RulesDataSection(_Strict):
    labeled: int = 100
    unlabeled: int = 1586
    val: int = 100
    test: int = 250
    m: int = 10
    precision: float = 0.75
    coverage: float = 0.87
    n_classes: int = 2
    d: int = 14
    class_sep: float = 1.0
    informative_count: int = 10


class GenDataConfig(_Strict):
    kind: Literal["synthetic", "rules"] = "synthetic"
    seed: int = 0
    synthetic: SyntheticSection = Field(default_factory=SyntheticSection)
    rules: RulesDataSection = Field(default_factory=RulesDataSection)


class TeacherConfig(_Strict):
    hidden: list[int] = list(kd.TEACHER_DIMS)
    activation: Literal["relu", "tanh"] = "relu"
    epochs: int = 40
    checkpoint_epochs: list[int] = []
    seed: int = 0
    batch_size: int = 64
    temperature: float = 4.0
    sgd: SgdSection = Field(default_factory=SgdSection)


class DistillConfig(_Strict):
    hidden: list[int] = list(kd.STUDENT_DIMS)
    activation: Literal["relu", "tanh"] = "relu"
    epochs: int = 40
    seed: int = 0
    batch_size: int = 64
    lambda_a: float = 0.9
    temperature: Optional[float] = None
    literal_order: bool = False
    teachers: Optional[list[str]] = None
    sgd: SgdSection = Field(default_factory=SgdSection)
    meta: MetaSection = Field(default_factory=MetaSection)


class RulesConfig(_Strict):
    hidden: list[int] = [8]
    activation: Literal["relu", "tanh"] = "relu"
    epochs: int = 40
    seed: int = 0
    batch_size: int = 64
    phi_lr_scale: float = 0.1
    val_count: Optional[int] = None
    sgd: SgdSection = Field(default_factory=SgdSection)
    meta: MetaSection = Field(default_factory=MetaSection)


class CoresetConfig(_Strict):
    hidden: list[int] = list(kd.STUDENT_DIMS)
    activation: Literal["relu", "tanh"] = "relu"
    epochs: int = 40
    seed: int = 0
    batch_size: int = 64
    sgd: SgdSection = Field(default_factory=SgdSection)


class CliError(Exception):
    def __init__(self, kind: str, message: str, **fields):
        super().__init__(message)
        self.payload = {"error": kind, "message": message, **fields}


def load_config(model: type[_Strict], path: str | None) -> _Strict:
    if path is None:
        return model()
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise CliError("io", f"cannot read config {path}: {exc.strerror}") from None
    try:
        return model.model_validate_json(raw)
    except ValidationError as exc:
        errs = exc.errors()
        unknown = [".".join(str(p) for p in e["loc"]) for e in errs if e["type"] == "extra_forbidden"]
        if unknown:
            raise CliError("config", f"unknown config key(s): {', '.join(unknown)}", keys=unknown) from None
        first = errs[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise CliError("config", f"{loc}: {first['msg']}" if loc else first["msg"],
                       keys=[loc] if loc else []) from None


def out_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get("AMAL_OUT_DIR")
    return p if p.is_absolute() or not root else Path(root) / p


def worker_count(jobs: int) -> int:
    raw = os.environ.get("AMAL_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise CliError("config", f"AMAL_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, jobs))


def fan_out(fn, jobs: list) -> list:
    workers = worker_count(len(jobs))
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# Data directories ------------------------------------------------------------------

def _write_meta(out: Path, meta: dict) -> None:
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_meta(d: Path) -> dict:
    try:
        return json.loads((d / "dataset.json").read_text())
    except FileNotFoundError:
        raise CliError("data", f"{d} has no dataset.json; create it with gen-data") from None


def load_splits(d: Path):
    meta = _read_meta(d)
    c = meta["n_classes"]
    return meta, tuple(data.load_dataset(d / f"{s}.csv", c, s) for s in ("train", "val", "test"))


def cmd_gen_data(args) -> None:
    cfg = load_config(GenDataConfig, args.config)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.kind == "synthetic":
        s = cfg.synthetic
        sp = data.synthetic_splits(cfg.seed, (s.n_train, s.n_val, s.n_test), s.d, s.n_classes, s.class_sep,
                                   s.informative_count, s.clusters_per_class, s.noise)
        for name, ds in zip(("train", "val", "test"), sp[:3]):
            data.save_dataset(ds, out / f"{name}.csv")
        _write_meta(out, {"kind": "synthetic", "n_classes": s.n_classes, "seed": cfg.seed,
                          "config": cfg.model_dump()})
    else:
        r = cfg.rules
        parts = data.rule_dataset(cfg.seed, r.labeled, r.unlabeled, r.val, r.test, r.m, r.precision,
                                  r.coverage, r.n_classes, r.d, r.class_sep, r.informative_count)
        for name, lf in zip(("train", "val", "test"), parts):
            data.save_dataset(lf.base, out / f"{name}.csv")
            data.save_lf_matrix(lf, out / f"lf_{name}.csv")
        _write_meta(out, {"kind": "rules", "n_classes": r.n_classes, "labeled_count": r.labeled,
                          "seed": cfg.seed, "config": cfg.model_dump()})
    print(str(out))


# Teachers ----------------------------------------------------------------------------

def cmd_train_teacher(args) -> None:
    cfg = load_config(TeacherConfig, args.config)
    _, (train, val, _) = load_splits(Path(args.data))
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = kd.mlp_dims(train.dim, cfg.hidden, train.n_classes)
    bundle = kd.train_teacher(train, dims, cfg.sgd.build(), cfg.epochs, cfg.checkpoint_epochs, cfg.seed,
                              cfg.activation, cfg.batch_size, temperature=cfg.temperature, val=val)
    entries = []
    for k, t in enumerate(bundle.teachers):
        nncore.save_checkpoint(t.params, out / f"teacher_{k}.ckpt")
        kd.save_logits_cache(t, k, out / f"logits_{k}.csv")
        entries.append({"id": k, "tag": t.tag, "checkpoint": f"teacher_{k}.ckpt", "logits": f"logits_{k}.csv"})
    (out / "bundle.json").write_text(json.dumps({"temperature": cfg.temperature, "teachers": entries,
                                                 "config": cfg.model_dump()}, indent=2, sort_keys=True) + "\n")
    print(str(out))


def load_bundle(d: Path) -> kd.TeacherBundle:
    try:
        meta = json.loads((d / "bundle.json").read_text())
    except FileNotFoundError:
        raise CliError("data", f"{d} has no bundle.json; create it with train-teacher") from None
    teachers = []
    for e in meta["teachers"]:
        _, t = kd.load_logits_cache(d / e["logits"])
        ckpt = d / e["checkpoint"]
        t.params = nncore.load_checkpoint(ckpt) if ckpt.exists() else None
        teachers.append(t)
    return kd.TeacherBundle(teachers, meta["temperature"])


# Run directories --------------------------------------------------------------------------

def write_instances(path: Path, header: list[str], columns: list[np.ndarray]) -> None:
    analysis.write_csv(path, header, zip(range(len(columns[0])), *[c.tolist() for c in columns]))


def _distill_job(job) -> str:
    cfg, data_dir, teacher_dir, mode, seed, out = job
    cfg = DistillConfig.model_validate(cfg)
    _, (train, val, test) = load_splits(Path(data_dir))
    bundle = load_bundle(Path(teacher_dir))
    if cfg.teachers is not None:
        bundle = bundle.select(cfg.teachers)
        if len(bundle) == 0:
            raise ConfigError(f"no teacher matches tags {cfg.teachers}")
    if cfg.temperature is not None:
        bundle.temperature = cfg.temperature
    dims = kd.mlp_dims(train.dim, cfg.hidden, train.n_classes)
    result = kd.run_kd(dims, bundle, mode, cfg.meta.build(), train, val, test, seed, cfg.sgd.build(),
                       cfg.epochs, cfg.lambda_a, cfg.activation, cfg.batch_size, cfg.literal_order)
    result.config["data"] = str(data_dir)
    run_dir = result.save(Path(out) / f"seed_{seed}")
    write_instances(run_dir / "instances.csv", ["instance_id", "noisy", "teacher_prob"],
                    [train.noise_mask.astype(int), result.extra["teacher_prob_at_label"]])
    return str(run_dir)


def cmd_distill(args) -> None:
    cfg = load_config(DistillConfig, args.config)
    if args.seeds < 1:
        raise CliError("usage", "--seeds must be at least 1")
    out = out_path(args.out)
    jobs = [(cfg.model_dump(), args.data, args.teachers, args.mode, cfg.seed + k, str(out))
            for k in range(args.seeds)]
    for d in fan_out(_distill_job, jobs):
        print(d)


def _rules_job(job) -> str:
    cfg, data_dir, mode, seed, out = job
    cfg = RulesConfig.model_validate(cfg)
    d = Path(data_dir)
    meta, (train, val, test) = load_splits(d)
    if meta.get("kind") != "rules":
        raise ConfigError(f"{d} holds no labeling functions; generate it with kind 'rules'")
    lf_train = data.load_lf_matrix(d / "lf_train.csv", train, meta["labeled_count"])
    val_arg = cfg.val_count if cfg.val_count is not None else val
    result = rules.run_rules(lf_train, val_arg, test, mode, cfg.meta.build(), seed, cfg.sgd.build(), cfg.epochs,
                             cfg.hidden, cfg.activation, cfg.batch_size, cfg.phi_lr_scale)
    result.config["data"] = str(data_dir)
    run_dir = result.save(Path(out) / f"seed_{seed}")
    if mode != "only_l":
        obj_rows = lf_train if cfg.val_count is None else rules.carve_validation(lf_train, cfg.val_count, seed + 1)[0]
        n = len(obj_rows.base)
        write_instances(run_dir / "instances.csv", ["instance_id", "labeled", "fired"],
                        [(np.arange(n) < obj_rows.labeled_count).astype(int),
                         obj_rows.lf_matrix.any(axis=1).astype(int)])
    return str(run_dir)


def cmd_rules(args) -> None:
    cfg = load_config(RulesConfig, args.config)
    mode = {"spear": "spear_fixed"}.get(args.mode, args.mode)
    if args.seeds < 1:
        raise CliError("usage", "--seeds must be at least 1")
    out = out_path(args.out)
    jobs = [(cfg.model_dump(), args.data, mode, cfg.seed + k, str(out)) for k in range(args.seeds)]
    for d in fan_out(_rules_job, jobs):
        print(d)


def cmd_coreset(args) -> None:
    cfg = load_config(CoresetConfig, args.config)
    _, (train, val, test) = load_splits(Path(args.data))
    weights = MixingWeights.load_csv(args.lambdas)
    if len(weights.table) != len(train):
        raise CliError("data", f"lambda table has {len(weights.table)} rows, training set {len(train)}")
    if args.strategy == "random":
        probs, fallback = np.full(len(train), 1.0 / len(train)), False
    else:
        probs, fallback = analysis.coreset_probs(weights, args.strategy)
    idx = analysis.sample_coreset(probs, args.fraction, cfg.seed)
    dims = kd.mlp_dims(train.dim, cfg.hidden, train.n_classes)
    result = analysis.retrain_on_coreset(idx, train, val, test, dims, cfg.sgd.build(), cfg.epochs, cfg.seed,
                                         cfg.activation, cfg.batch_size)
    result.config.update({"strategy": args.strategy, "fraction": args.fraction, "uniform_fallback": fallback,
                          "lambdas": str(args.lambdas)})
    out = result.save(out_path(args.out))
    analysis.write_csv(out / "coreset.csv", ["instance_id"], ([int(i)] for i in idx))
    print(str(out))


# Analysis ---------------------------------------------------------------------------------------

def _read_instances(run_dir: Path) -> dict[str, np.ndarray]:
    import csv
    path = run_dir / "instances.csv"
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise CliError("data", f"{run_dir} has no instances.csv") from None
    header, body = rows[0], [r for r in rows[1:] if r]
    return {h: np.array([float(r[k]) for r in body]) for k, h in enumerate(header)}


def cmd_analyze(args) -> None:
    run_dir = Path(args.run_dir)
    weights = MixingWeights.load_csv(run_dir / "lambdas.csv")
    inst = _read_instances(run_dir)
    if "noisy" not in inst:
        raise CliError("data", f"{run_dir} is not a distillation run (no noise column)")
    noisy = inst["noisy"].astype(bool)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what in ("hist", "sumhist"):
        fn = analysis.lambda_diff_histogram if args.what == "hist" else analysis.lambda_sum_histogram
        h = fn(weights, noisy, args.bins)
        analysis.write_csv(out / f"{args.what}.csv", analysis.HISTOGRAM_HEADER, analysis.histogram_rows(h))
        stat = "lambda_a - lambda_p" if args.what == "hist" else "lambda_a + lambda_p"
        text = svg.bar_chart(h.edges, {"clean": h.clean, "noisy": h.noisy}, f"Distribution of {stat}",
                             stat, "instances")
    else:
        edges = [float(v) for v in args.edges.split(",")]
        b = analysis.confidence_buckets(weights, inst["teacher_prob"], noisy, edges)
        analysis.write_csv(out / "buckets.csv", analysis.BUCKET_HEADER, analysis.bucket_rows(b))
        mids = [(b.edges[k] + b.edges[k + 1]) / 2 for k in range(len(b.clean_mean))]
        text = svg.line_chart({"clean": (mids, b.clean_mean, np.nan_to_num(b.clean_sem)),
                               "noisy": (mids, b.noisy_mean, np.nan_to_num(b.noisy_sem))},
                              "Mean lambda_a by teacher confidence", "teacher probability of label",
                              "mean lambda_a")
    (out / f"{args.what}.svg").write_text(text)
    print(str(out))


def _run_dirs(paths: list[str]) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if (p / "metrics.jsonl").exists():
            found.append(p)
        else:
            subs = sorted(d for d in p.glob("seed_*") if (d / "metrics.jsonl").exists())
            if not subs:
                raise CliError("data", f"{p} holds no run directories")
            found += subs
    return found


def _series_name(run_dir: Path) -> str:
    try:
        cfg = json.loads((run_dir / "config.json").read_text())
    except FileNotFoundError:
        raise CliError("data", f"{run_dir} has no config.json") from None
    return str(cfg.get("mode") or cfg.get("strategy") or cfg.get("trainer") or run_dir.parent.name)


def _sem(v: np.ndarray) -> float:
    return float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0


def cmd_report(args) -> None:
    groups: dict[str, list[list[dict]]] = {}
    for d in _run_dirs(args.run_dirs):
        with open(d / "metrics.jsonl") as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        groups.setdefault(_series_name(d), []).append(recs)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary, curves, chart = [], [], {}
    for name in sorted(groups):
        runs = groups[name]
        finals = np.array([r[-1]["test_acc"] for r in runs if r and r[-1]["test_acc"] is not None])
        summary.append((name, len(runs), float(finals.mean()) if len(finals) else float("nan"),
                        _sem(finals) if len(finals) else float("nan")))
        n_ep = min(len(r) for r in runs)
        xs, ys, es = [], [], []
        for e in range(n_ep):
            v = np.array([r[e]["test_acc"] for r in runs if r[e]["test_acc"] is not None])
            if not len(v):
                continue
            curves.append((name, e + 1, float(v.mean()), _sem(v), len(v)))
            xs.append(e + 1), ys.append(float(v.mean())), es.append(_sem(v))
        chart[name] = (xs, ys, es)
    analysis.write_csv(out / "summary.csv", ["series", "n_runs", "final_test_acc_mean", "final_test_acc_sem"],
                       summary)
    analysis.write_csv(out / "curves.csv", ["series", "epoch", "test_acc_mean", "test_acc_sem", "n_runs"], curves)
    (out / "curves.svg").write_text(svg.line_chart(chart, "Test accuracy by epoch (mean and SEM)", "epoch",
                                                   "test accuracy"))
    print(str(out))


# Parser ------------------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="amal", description="Adaptive loss mixing experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic dataset CSVs")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="train a teacher and cache its logits")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train_teacher)

    d = sub.add_parser("distill", help="knowledge-distillation runs, one directory per seed")
    d.add_argument("--config")
    d.add_argument("--data", required=True)
    d.add_argument("--teachers", required=True)
    d.add_argument("--mode", choices=kd.KD_MODES, required=True)
    d.add_argument("--seeds", type=int, default=1)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_distill)

    r = sub.add_parser("rules", help="rule-denoising runs, one directory per seed")
    r.add_argument("--config")
    r.add_argument("--data", required=True)
    r.add_argument("--mode", choices=("only_l", "spear", "spear_fixed", "amal"), required=True)
    r.add_argument("--seeds", type=int, default=1)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_rules)

    c = sub.add_parser("coreset", help="sample a coreset from a lambda table and retrain")
    c.add_argument("--config")
    c.add_argument("--lambdas", required=True)
    c.add_argument("--strategy", choices=analysis.CORESET_STRATEGIES + ("random",), required=True)
    c.add_argument("--fraction", type=float, default=0.2)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_coreset)

    a = sub.add_parser("analyze", help="lambda histograms and confidence buckets")
    a.add_argument("--run-dir", required=True)
    a.add_argument("--what", choices=("hist", "sumhist", "buckets"), required=True)
    a.add_argument("--bins", type=int, default=20)
    a.add_argument("--edges", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_analyze)

    rp = sub.add_parser("report", help="aggregate seeds into mean and SEM tables and curves")
    rp.add_argument("--run-dirs", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.fn(args)
        return 0
    except CliError as exc:
        err = exc.payload
    except (ConfigError, UsageError) as exc:
        err = {"error": "config", "message": str(exc)}
    except ParseError as exc:
        err = {"error": "parse", "message": str(exc), "line": exc.line}
    except (ValueError, OSError, nncore.NumericError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return 2 if err["error"] in ("usage", "config") else 1


if __name__ == "__main__":
    sys.exit(main())
