"""Command-line entry point: one subcommand per pipeline stage, sharing a run directory.

Exit codes: 0 success, 1 usage / configuration / missing prerequisite,
2 runtime failure.  ``BALMM_OUT_ROOT`` sets the directory under which
default run directories are created.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import pipeline as pl
from .balance import FUSED_HEAD, MultimodalModel, evaluate_multimodal
from .baseline import format_table, logistic_baseline
from .config import ConfigError, RunConfig, canonical_json, config_from_dict, load_config
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_manifest, write_dataset_csv
from .gcn import load_checkpoint, save_checkpoint
from .metrics import LearningState
from .snf import SimilarityNetwork, read_network_csv, write_network_csv

log = logging.getLogger("balmm")

OUT_ROOT_ENV = "BALMM_OUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad invocation, config, or a missing prerequisite artifact."""


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run directory helpers


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj))


def read_json(path: Path, producer: str) -> dict:
    if not path.exists():
        raise UsageError(f"missing {path}; run `balmm {producer}` first with the same config")
    return json.loads(path.read_text())


def write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def to_builtin(obj):
    if isinstance(obj, dict):
        return {str(k): to_builtin(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_builtin(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


class Run:
    """A run directory bound to one resolved config."""

    def __init__(self, cfg: RunConfig, out: Path, force: bool, plots: bool):
        self.cfg = cfg
        self.dir = out
        self.force = force
        self.plots = plots
        self._prepared: pl.Prepared | None = None
        self._check_and_stamp()

    def _check_and_stamp(self) -> None:
        resolved = self.dir / "resolved_config.json"
        if resolved.exists():
            previous = json.loads(resolved.read_text())
            if previous != to_builtin(self.cfg.to_dict()) and not self.force:
                raise UsageError(f"{self.dir} holds a run with a different config; use another --out or --force")
        write_json(resolved, to_builtin(self.cfg.to_dict()))
        write_json(self.dir / "stamp.json", {"seed": self.cfg.seed, "config_sha256": self.cfg.digest(), "version": __version__})

    def guard(self, path: Path) -> Path:
        if path.exists() and not self.force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        return path

    @property
    def settings(self) -> pl.EncoderSettings:
        return pl.EncoderSettings(tuple(self.cfg.encoder.hidden_dims), self.cfg.encoder.avg_edges_per_node)

    def dataset(self):
        src = self.cfg.dataset
        if src.kind == "csv":
            return load_manifest(src.manifest)
        return generate_synthetic(src.synthetic)

    def prepared(self) -> pl.Prepared:
        if self._prepared is None:
            self._prepared = pl.prepare(self.dataset(), self.cfg.seed, self.cfg.reduction, self.cfg.split_fractions)
        return self._prepared

    def fused_edges(self) -> tuple[SimilarityNetwork, str]:
        path = self.dir / "fuse" / "fused.csv"
        if not path.exists():
            raise UsageError(f"missing {path}; run `balmm fuse` first with the same config")
        net, _ = read_network_csv(path)
        include = self.cfg.encoder.fusion_include or self.prepared().dataset.names
        return net, "+".join(include)

    def edges(self, kind: str, modality: str) -> tuple[SimilarityNetwork, str]:
        if kind == pl.FUSED_EDGES:
            return self.fused_edges()
        nets = pl.similarity_networks(self.prepared(), self.cfg.snf)
        return nets[modality], modality

    def meta(self, kind: str, **extra) -> dict:
        return {"kind": kind, "config": to_builtin(self.cfg.to_dict()), "config_sha256": self.cfg.digest(), **extra}


def metrics_block(d: dict) -> dict:
    return {k: float(v) for k, v in d.items()}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    if args.spec:
        raw = _read_structured(Path(args.spec))
        try:
            spec = SyntheticSpec.from_dict(raw)
        except KeyError as exc:
            raise ConfigError(f"{args.spec}: {exc.args[0]}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{args.spec}: {exc}") from None
    else:
        spec = SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out) if args.out else default_root() / "dataset"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    ds = generate_synthetic(spec)
    write_dataset_csv(ds, out)
    write_json(out / "synthetic_spec.json", to_builtin(spec.to_dict()))
    print(f"wrote {ds.n} samples, {len(ds.modalities)} modalities, {ds.num_classes} classes to {out}")
    return EXIT_OK


def cmd_baseline(run: Run) -> int:
    prepared = run.prepared()
    rows = logistic_baseline(prepared.dataset, run.cfg.baseline, run.cfg.seed)
    out = run.dir / "baseline"
    write_rows(run.guard(out / "table.csv"), format_table(rows))
    write_json(out / "report.json", to_builtin({"rows": rows}))
    for r in format_table(rows):
        print(f"{r['Modalities']:<20} {r['Accuracy']}  {r['AUC']}  {r['Macro F1']}")
    return EXIT_OK


def cmd_fuse(run: Run) -> int:
    from .snf import mean_within_class_similarity, normalize_P

    prepared = run.prepared()
    nets = pl.similarity_networks(prepared, run.cfg.snf)
    fused = pl.fuse(nets, run.cfg.snf, run.cfg.encoder.fusion_include)
    out = run.dir / "fuse"
    out.mkdir(parents=True, exist_ok=True)
    ids = prepared.dataset.sample_ids
    write_network_csv(fused, ids, run.guard(out / "fused.csv"))
    for name, net in nets.items():
        write_network_csv(net, ids, out / f"W_{name}.csv")
    labels = prepared.labels
    report = {
        "diagnostics": fused.diagnostics,
        "within_class_similarity": {
            **{name: mean_within_class_similarity(normalize_P(net).matrix, labels) for name, net in nets.items()},
            "fused": mean_within_class_similarity(fused.matrix, labels),
        },
        "warnings": [w for net in nets.values() for w in net.warnings],
    }
    write_json(out / "report.json", to_builtin(report))
    if run.plots:
        from .plots import similarity_heatmaps

        similarity_heatmaps({**{n: normalize_P(w).matrix for n, w in nets.items()}, "fused": fused.matrix}, labels, out / "heatmaps.png")
    print(f"fused {len(nets)} networks; converged={fused.diagnostics.get('converged')} after {fused.diagnostics.get('iterations')} iterations")
    return EXIT_OK


def cmd_train_unimodal(run: Run, modality: str | None, edges: str) -> int:
    prepared = run.prepared()
    names = [modality] if modality else prepared.dataset.names
    for n in names:
        if n not in prepared.dataset.names:
            raise UsageError(f"unknown modality {n!r}; available: {prepared.dataset.names}")
    out = run.dir / "unimodal"
    runs = {}
    for n in names:
        net, source = run.edges(edges, n)
        tag = f"{n}_{edges}"
        ckpt = run.guard(out / f"{tag}.npz")
        result = pl.train_unimodal(prepared, n, net, source, run.settings, run.cfg.distill)
        runs[n] = result
        test = metrics_block(result.test)
        report = {"modality": n, "edges": source, "best_epoch": result.fit.best_epoch,
                  "best_val_macro_f1": result.fit.best_val_macro_f1, "test": test}
        write_json(out / f"{tag}.json", to_builtin(report))
        write_rows(out / f"{tag}_trace.csv", result.fit.history)
        save_checkpoint(ckpt, {n: result.model}, meta=run.meta("unimodal", modality=n, edges=edges, test=test))
        print(f"{n:<10} edges={source:<20} test acc {test['accuracy']:.4f} auc {test['auc']:.4f} macro F1 {test['macro_f1']:.4f}")
    if modality is None:
        states, mi = pl.learning_states(prepared, runs, run.cfg.balance.gamma)
        write_json(out / f"states_{edges}.json", to_builtin({
            "edges": edges,
            "states": [{"modality": s.modality, "macro_f1": s.macro_f1, "category": s.category} for s in states],
            "mutual_information": {k: (v if np.isfinite(v) else None) for k, v in mi.items()},
        }))
        for s in states:
            print(f"{s.modality:<10} val macro F1 {s.macro_f1:.4f} -> {s.category}")
    return EXIT_OK


def cmd_distill(run: Run, edges: str) -> int:
    prepared = run.prepared()
    raw = read_json(run.dir / "unimodal" / f"states_{edges}.json", f"train-unimodal --edges {edges}")
    states = [LearningState(s["modality"], s["macro_f1"], s["category"]) for s in raw["states"]]
    mi = {k: (v if v is not None else float("nan")) for k, v in raw["mutual_information"].items()}
    net, source = run.edges(edges, next(s.modality for s in states))
    out = run.dir / "distill"
    ckpt = run.guard(out / "students.npz")
    outcome = pl.run_distillation(prepared, states, mi, net, source, run.settings, run.cfg.distill, run.cfg.pretrain_low_information)
    students = {}
    for s in states:
        fit = outcome.fits.get(s.modality)
        students[s.modality] = {
            "category": s.category,
            "role": "teacher" if s.category == "strong" else ("student" if outcome.distilled[s.modality] else "untrained"),
            "mutual_information": mi.get(s.modality),
            "best_val_macro_f1": fit.best_val_macro_f1 if fit else None,
            "best_epoch": fit.best_epoch if fit else None,
        }
        if fit:
            write_rows(out / f"{s.modality}_trace.csv", fit.history)
    write_json(out / "report.json", to_builtin({"edges": source, "mi_threshold": run.cfg.distill.mi_threshold, "modalities": students}))
    save_checkpoint(ckpt, outcome.students, meta=run.meta("students", names=[s.modality for s in states], edges=edges))
    for name, info in students.items():
        print(f"{name:<10} {info['category']:<16} {info['role']}")
    return EXIT_OK


def cmd_train_balanced(run: Run, naive: bool) -> int:
    from dataclasses import replace

    prepared = run.prepared()
    path = run.dir / "distill" / "students.npz"
    if not path.exists():
        raise UsageError(f"missing {path}; run `balmm distill` first with the same config")
    encoders, _, meta = load_checkpoint(path)
    names = meta["names"]
    config = replace(run.cfg.balance, balance=not naive)
    model, report = pl.run_balanced(prepared, encoders, config, names)
    out = run.dir / ("balanced_naive" if naive else "balanced")
    ckpt = run.guard(out / "model.npz")
    test = {k: metrics_block(v) for k, v in report.test_metrics.items()}
    summary = {
        "balanced": not naive,
        "best_epoch": report.best_epoch,
        "best_val_macro_f1": report.best_val_macro_f1,
        "mean_k": report.mean_k(),
        "coefficients": [{"epoch": c.epoch, "f_scores": c.f_scores, "r": c.r, "k": c.k} for c in report.coefficients],
        "test": test,
    }
    write_json(out / "report.json", to_builtin(summary))
    report.write_csv(out / "trace.csv")
    save_checkpoint(ckpt, dict(zip(names, model.encoders)), {FUSED_HEAD: model.fusion_head.value},
                    run.meta("balanced", names=names, test=test, balanced=not naive))
    bars = [{"head": k, "macro_f1": v["macro_f1"]} for k, v in test.items()]
    write_rows(out / "macro_f1_bars.csv", bars)
    if run.plots:
        from .plots import macro_f1_bars

        macro_f1_bars(bars, out / "macro_f1_bars.png")
    for k, v in test.items():
        print(f"{k:<10} test acc {v['accuracy']:.4f} auc {v['auc']:.4f} macro F1 {v['macro_f1']:.4f}")
    return EXIT_OK


def cmd_evaluate(checkpoint: Path, out: Path | None) -> int:
    if not checkpoint.exists():
        raise UsageError(f"checkpoint {checkpoint} not found")
    models, extra, meta = load_checkpoint(checkpoint)
    if meta.get("kind") not in ("unimodal", "balanced"):
        raise UsageError(f"{checkpoint} is a {meta.get('kind')!r} checkpoint; evaluate expects unimodal or balanced")
    cfg = config_from_dict(meta["config"])
    prepared = pl.prepare(_dataset_for(cfg), cfg.seed, cfg.reduction, cfg.split_fractions)
    if meta["kind"] == "unimodal":
        name = meta["modality"]
        got = {name: metrics_block(pl.test_metrics(models[name], prepared, name))}
        expected = {name: meta["test"]}
    else:
        names = meta["names"]
        mm = MultimodalModel([models[n] for n in names], names, prepared.num_classes, fusion_head=extra.get(FUSED_HEAD))
        got = {k: metrics_block(v) for k, v in evaluate_multimodal(mm, [prepared.x(n) for n in names], prepared.labels, prepared.masks.test).items()}
        expected = meta["test"]
    diff = max(abs(got[h][k] - expected[h][k]) for h in expected for k in expected[h])
    result = {"checkpoint": checkpoint.name, "test": got, "max_abs_diff_vs_training": diff, "reproduced": diff <= 1e-9}
    target = out or checkpoint.with_name(checkpoint.stem + "_evaluation.json")
    write_json(target, to_builtin(result))
    print(f"max |difference| vs training-time metrics: {diff:.3g}")
    return EXIT_OK if diff <= 1e-9 else EXIT_RUNTIME


def cmd_pipeline(run: Run) -> int:
    for step in (cmd_fuse, lambda r: cmd_train_unimodal(r, None, pl.FUSED_EDGES), lambda r: cmd_distill(r, pl.FUSED_EDGES),
                 lambda r: cmd_train_balanced(r, False)):
        code = step(run)
        if code != EXIT_OK:
            return code
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument handling


def default_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _read_structured(path: Path) -> dict:
    import yaml

    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return raw


def _dataset_for(cfg: RunConfig):
    if cfg.dataset.kind == "csv":
        return load_manifest(cfg.dataset.manifest)
    return generate_synthetic(cfg.dataset.synthetic)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run config (defaults fill missing keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help=f"run directory (default: ${OUT_ROOT_ENV} or ./runs, then run-<config hash>)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--plots", action="store_true", help="also render figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = ArgParser(prog="balmm", description="Balanced multimodal learning on multi-omics data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    gen = sub.add_parser("generate", parents=[common], help="write a synthetic dataset (CSV + manifest)")
    gen.add_argument("--spec", help="synthetic spec file (JSON or YAML)")
    sub.add_parser("baseline", parents=[common], help="logistic-regression baseline over modality combinations")
    sub.add_parser("fuse", parents=[common], help="build and fuse per-modality similarity networks")
    uni = sub.add_parser("train-unimodal", parents=[common], help="train unimodal (r-)GCNs and categorize modalities")
    uni.add_argument("--modality", help="train a single modality (default: all, plus categorization)")
    uni.add_argument("--edges", choices=[pl.SELF_EDGES, pl.FUSED_EDGES], default=pl.FUSED_EDGES)
    dis = sub.add_parser("distill", parents=[common], help="teacher pretraining and student distillation")
    dis.add_argument("--edges", choices=[pl.SELF_EDGES, pl.FUSED_EDGES], default=pl.FUSED_EDGES)
    bal = sub.add_parser("train-balanced", parents=[common], help="joint training with dynamic loss weights")
    bal.add_argument("--naive", action="store_true", help="weight every head 1 (no balancing)")
    ev = sub.add_parser("evaluate", parents=[common], help="recompute test metrics from a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    sub.add_parser("pipeline", parents=[common], help="fuse, train-unimodal, distill and train-balanced in one go")
    return parser


def make_run(args) -> Run:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out) if args.out else default_root() / f"run-{cfg.digest()[:12]}"
    return Run(cfg, out, args.force, args.plots)


def dispatch(args) -> int:
    if args.command == "generate":
        return cmd_generate(args)
    if args.command == "evaluate":
        return cmd_evaluate(Path(args.checkpoint), Path(args.out) if args.out else None)
    run = make_run(args)
    if args.command == "baseline":
        return cmd_baseline(run)
    if args.command == "fuse":
        return cmd_fuse(run)
    if args.command == "train-unimodal":
        return cmd_train_unimodal(run, args.modality, args.edges)
    if args.command == "distill":
        return cmd_distill(run, args.edges)
    if args.command == "train-balanced":
        return cmd_train_balanced(run, args.naive)
    return cmd_pipeline(run)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FloatingPointError, ValueError, KeyError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
