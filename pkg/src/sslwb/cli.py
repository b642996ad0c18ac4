"""Command-line entry points.

    sslwb dataset synth --classes 10 --per-class 50 --seed 7 --out corpus/
    sslwb dataset stats corpus/manifest.tsv
    sslwb pretrain cfg.yaml --method dino --deterministic
    sslwb finetune cfg.yaml
    sslwb evaluate cfg.yaml
    sslwb report --in runs/*/eval-*/result.rec --setup transfer --arch vit
    sslwb sweep grid.yaml

Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import itertools
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augmentation import AugmentationError, AugmentationPolicy
from .dataset import (
    ManifestError,
    SplitRatios,
    SyntheticCorpusSpec,
    class_statistics,
    firearms_classes,
    generate_synthetic_corpus,
    read_manifest,
    split_dataset,
    write_manifest,
)
from .engine.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .engine.config import ConfigError, FinetuneConfig, PretrainConfig, from_dict, to_dict
from .engine.train import (
    ImageData,
    TrainingError,
    classifier_from_checkpoint,
    finetune,
    model_checkpoint,
    pretrain,
)
from .evaluation import (
    EvaluationError,
    ResultsRecord,
    ResultsTable,
    emit_confusion_plot,
    evaluate,
    read_record,
    render_results_table,
    write_record,
)
from .models import ModelError
from .objectives import ObjectiveError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
VALIDATION_ERRORS = (
    ConfigError,
    ManifestError,
    CheckpointError,
    EvaluationError,
    AugmentationError,
    ModelError,
    ObjectiveError,
    yaml.YAMLError,
)
OUT_ENV = "SSLWB_OUT"


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSection:
    manifest: str = "corpus/manifest.tsv"
    # None -> same manifest as finetuning (single-dataset setup)
    pretrain_manifest: str | None = None
    name: str = ""
    pretrain_name: str = ""


@dataclass(frozen=True)
class EvalSection:
    out: str | None = None
    plot: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: data, pretraining, finetuning and evaluation output."""

    pretrain: PretrainConfig
    finetune: FinetuneConfig
    dataset: DatasetSection = field(default_factory=DatasetSection)
    eval: EvalSection = field(default_factory=EvalSection)
    name: str = "experiment"
    seed: int = 0
    base_dir: str = "."

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @property
    def finetune_manifest(self) -> Path:
        return self.path(self.dataset.manifest)

    @property
    def pretrain_manifest(self) -> Path:
        return self.path(self.dataset.pretrain_manifest or self.dataset.manifest)

    @property
    def setup(self) -> str:
        if self.pretrain.method == "none":
            return "single_dataset"
        same = self.pretrain_manifest.resolve() == self.finetune_manifest.resolve()
        return "single_dataset" if same else "transfer"

    def out_root(self, override: str | None = None) -> Path:
        root = override or self.eval.out or os.environ.get(OUT_ENV) or "runs"
        return self.path(root) / self.name

    def run_dir(self, stage: str, out: str | None = None) -> Path:
        return self.out_root(out) / f"{stage}-{self.pretrain.method}"


def build_experiment(raw: dict[str, Any], base_dir=".", method: str | None = None, deterministic: bool | None = None, epochs: int | None = None) -> ExperimentConfig:
    """Validate a raw config dict (as read from YAML) into an ExperimentConfig.

    Precedence: explicit arguments (command-line flags), then the document,
    then dataclass defaults. Manifests are read here so contract violations
    surface before any compute.
    """
    raw = dict(raw or {})
    unknown = set(raw) - {"name", "seed", "dataset", "pretrain", "finetune", "eval"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    seed = int(raw.get("seed", 0))
    ds = from_dict(DatasetSection, raw.get("dataset"))
    ev = from_dict(EvalSection, raw.get("eval"))
    pre_raw = dict(raw.get("pretrain") or {})
    pre_raw.setdefault("seed", seed)
    if method is not None:
        pre_raw["method"] = method
    if deterministic is not None:
        pre_raw["deterministic"] = deterministic
    if epochs is not None:
        pre_raw["epochs"] = epochs
    enc = pre_raw.get("encoder") or {}
    size = enc.get("input_size", 32)
    pre_raw.setdefault("policy", {})
    pre_raw["policy"] = {"global_size": size, **pre_raw["policy"]}
    pre = from_dict(PretrainConfig, pre_raw)

    base = Path(base_dir)
    exp_probe = ExperimentConfig(pre, None, ds, ev, str(raw.get("name", "experiment")), seed, str(base))  # type: ignore[arg-type]
    ft_manifest = _checked_manifest(exp_probe.finetune_manifest, need_splits=True)
    pt_manifest = _checked_manifest(exp_probe.pretrain_manifest, need_splits=False)
    if pre.method in ("mixed", "supervised") and not pt_manifest.is_annotated:
        raise ConfigError(f"{pre.method} pretraining can only be used when the pretraining dataset is annotated")
    if pre.split != "all" and not pt_manifest.subset(pre.split):
        raise ConfigError(f"pretraining manifest has no {pre.split!r} records")

    ft_raw = dict(raw.get("finetune") or {})
    if "encoder" in ft_raw:
        raise ConfigError("finetune.encoder is taken from the pretrain section; remove it")
    ft_raw.setdefault("seed", seed)
    ft_raw.setdefault("num_classes", ft_manifest.num_classes)
    if deterministic is not None:
        ft_raw["deterministic"] = deterministic
    ft_raw["encoder"] = to_dict(pre.encoder)
    ft_raw["policy"] = {**to_dict(AugmentationPolicy.finetune(pre.encoder.input_size)), **(ft_raw.get("policy") or {})}
    ft = from_dict(FinetuneConfig, ft_raw)
    if ft.num_classes != ft_manifest.num_classes:
        raise ConfigError(f"finetune.num_classes={ft.num_classes} but the manifest has {ft_manifest.num_classes} classes")
    return dataclasses.replace(exp_probe, finetune=ft)


def _checked_manifest(path: Path, need_splits: bool):
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    m = read_manifest(path)
    if not m.records:
        raise ConfigError(f"manifest {path} is empty")
    if need_splits:
        if not m.is_annotated:
            raise ConfigError(f"finetuning manifest {path} has unlabeled records")
        missing = [s for s in ("train", "val", "test") if not m.subset(s)]
        if missing:
            raise ConfigError(f"manifest {path} lacks split(s) {missing}; run `dataset synth` or split it first")
    return m


def load_experiment(path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    return build_experiment(raw or {}, path.parent, **overrides)


def template(method: str, manifest: str = "corpus/manifest.tsv") -> dict[str, Any]:
    """Config document with every default spelled out."""
    pre = PretrainConfig(method=method)
    ft = to_dict(FinetuneConfig(num_classes=2))
    for k in ("num_classes", "encoder", "init"):
        ft.pop(k)
    return {
        "name": f"{method}-experiment",
        "seed": 0,
        "dataset": to_dict(DatasetSection(manifest=manifest)),
        "pretrain": to_dict(pre),
        "finetune": ft,
        "eval": to_dict(EvalSection()),
    }


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def _data(exp: ExperimentConfig, which: str, split: str) -> ImageData:
    path = exp.pretrain_manifest if which == "pretrain" else exp.finetune_manifest
    manifest = read_manifest(path)
    return ImageData.from_manifest(manifest, path.parent, split, exp.pretrain.encoder.input_size)


def run_pretrain(exp: ExperimentConfig, out: str | None = None, resume: str | None = None) -> Path:
    run_dir = exp.run_dir("pretrain", out)
    data = _data(exp, "pretrain", exp.pretrain.split)
    ckpt_resume = load_checkpoint(resume) if resume else None
    _, log = pretrain(exp.pretrain, data, out_dir=run_dir, resume=ckpt_resume)
    log.write(run_dir / "log.jsonl")
    return run_dir / "final.ckpt"


def run_finetune(exp: ExperimentConfig, init: str | None = None, out: str | None = None) -> Path:
    """``init``: checkpoint path, ``"random"``, or None for this experiment's pretrain output."""
    run_dir = exp.run_dir("finetune", out)
    if init is None:
        init = "random" if exp.pretrain.method == "none" else str(exp.run_dir("pretrain", out) / "final.ckpt")
    ckpt = None if init == "random" else load_checkpoint(init)
    train, val = _data(exp, "finetune", "train"), _data(exp, "finetune", "val")
    result = finetune(exp.finetune, ckpt, train, val)
    names = train.class_names
    save_checkpoint(model_checkpoint(result.model, exp.finetune, names, result.best_epoch + 1), run_dir / "best.ckpt")
    save_checkpoint(model_checkpoint(result.last_model, exp.finetune, names, exp.finetune.epochs), run_dir / "last.ckpt")
    result.log.write(run_dir / "log.jsonl")
    return run_dir


def run_evaluate(exp: ExperimentConfig, model_dir: str | None = None, out: str | None = None) -> tuple[ResultsRecord, Path]:
    model_dir = Path(model_dir) if model_dir else exp.run_dir("finetune", out)
    eval_dir = exp.run_dir("eval", out)
    test = _data(exp, "finetune", "test")
    policy = exp.finetune.policy
    best = classifier_from_checkpoint(load_checkpoint(model_dir / "best.ckpt"))
    m, report = evaluate(best, test.images, test.labels.numpy(), test.class_names, policy)
    acc_last = None
    if (model_dir / "last.ckpt").exists():
        last = classifier_from_checkpoint(load_checkpoint(model_dir / "last.ckpt"))
        acc_last = evaluate(last, test.images, test.labels.numpy(), test.class_names, policy)[1].accuracy
    eval_dir.mkdir(parents=True, exist_ok=True)
    csv_path = eval_dir / "confusion.csv"
    plot = None
    if exp.eval.plot:
        plot, csv_path = emit_confusion_plot(m, eval_dir / "confusion.png")
    else:
        csv_path.write_text(m.to_csv(), encoding="utf-8")
    (eval_dir / "report.txt").write_text(report.format() + "\n", encoding="utf-8")
    rec = ResultsRecord(
        method=exp.pretrain.method,
        setup=exp.setup,
        architecture=exp.pretrain.encoder.arch,
        accuracy=report.accuracy,
        accuracy_last=acc_last,
        pretrain_dataset=exp.dataset.pretrain_name or exp.pretrain_manifest.parent.name,
        finetune_dataset=exp.dataset.name or exp.finetune_manifest.parent.name,
        seed=exp.seed,
        matrix_csv=str(csv_path),
        plot=str(plot) if plot else None,
    )
    return rec, write_record(rec, eval_dir / "result.rec")


def run_experiment(exp: ExperimentConfig, out: str | None = None) -> ResultsRecord:
    if exp.pretrain.method != "none":
        run_pretrain(exp, out)
    run_finetune(exp, None, out)
    return run_evaluate(exp, None, out)[0]


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"grid key {dotted!r} crosses a non-section value")
    cur[keys[-1]] = value


def expand_grid(grid: dict[str, list]) -> list[dict[str, Any]]:
    """Cartesian product of the grid axes, keys in sorted order."""
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("sweep grid must be a non-empty mapping of key -> list of values")
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid axis {k!r} must be a non-empty list")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def cell_id(assignment: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(assignment, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class SweepResult:
    records: dict[str, ResultsRecord]
    assignments: dict[str, dict[str, Any]]
    skipped: list[str]

    @property
    def best(self) -> tuple[str, ResultsRecord]:
        cid = max(sorted(self.records), key=lambda c: self.records[c].accuracy)
        return cid, self.records[cid]

    def summary(self) -> str:
        cid, rec = self.best
        return f"best cell {cid} accuracy {100 * rec.accuracy:.2f}% {json.dumps(self.assignments[cid], sort_keys=True)}"


def _run_cell(raw: dict, base_dir: str, out: str, deterministic: bool | None) -> ResultsRecord:
    exp = build_experiment(raw, base_dir, deterministic=deterministic)
    return run_experiment(exp, out)


def run_sweep(path, out: str | None = None, parallel: int = 1, deterministic: bool | None = None) -> SweepResult:
    path = Path(path)
    doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict) or "grid" not in doc:
        raise ConfigError("sweep document needs a `grid` section")
    base = doc.get("experiment")
    if base is None and "base" in doc:
        base_path = path.parent / doc["base"]
        base = yaml.safe_load(base_path.read_text(encoding="utf-8")) or {}
    base = dict(base or {})
    cells = expand_grid(doc["grid"])
    sweep_out = Path(out or doc.get("out") or os.environ.get(OUT_ENV) or "runs")
    if not sweep_out.is_absolute():
        sweep_out = path.parent / sweep_out
    sweep_dir = sweep_out / str(doc.get("name", path.stem))
    # validate every cell up front
    raws = {}
    for a in cells:
        raw = json.loads(json.dumps(base))
        for k, v in a.items():
            _set_path(raw, k, v)
        raw["name"] = f"{doc.get('name', path.stem)}/cell-{cell_id(a)}"
        build_experiment(raw, path.parent, deterministic=deterministic)
        raws[cell_id(a)] = raw
    assignments = {cell_id(a): a for a in cells}
    records, skipped, todo = {}, [], []
    for cid in assignments:
        rec_path = sweep_dir / f"{cid}.rec"
        if rec_path.exists():
            records[cid] = read_record(rec_path)
            skipped.append(cid)
        else:
            todo.append(cid)

    def finish(cid, rec):
        rec.extra = {**rec.extra, "cell": assignments[cid]}
        write_record(rec, sweep_dir / f"{cid}.rec")
        records[cid] = rec

    if parallel > 1 and len(todo) > 1:
        with concurrent.futures.ProcessPoolExecutor(parallel) as pool:
            futs = {cid: pool.submit(_run_cell, raws[cid], str(path.parent), str(sweep_out), deterministic) for cid in todo}
            for cid in todo:
                finish(cid, futs[cid].result())
    else:
        for cid in todo:
            finish(cid, _run_cell(raws[cid], str(path.parent), str(sweep_out), deterministic))
    result = SweepResult(records, assignments, skipped)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    (sweep_dir / "summary.txt").write_text(result.summary() + "\n", encoding="utf-8")
    return result


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _ratios(text: str) -> SplitRatios:
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad split ratios {text!r}") from None
    if len(parts) != 3:
        raise ConfigError("split ratios need three comma-separated values")
    try:
        return SplitRatios(*parts)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_dataset(args) -> int:
    if args.action == "stats":
        print(class_statistics(read_manifest(args.manifest)).format())
        return EXIT_OK
    ratios = _ratios(args.split)
    if args.table_scale is not None:
        spec = SyntheticCorpusSpec.table_scaled(args.table_scale, seed=args.seed, image_size=args.image_size)
        names = [c.name for c in firearms_classes()]
    else:
        if args.classes is None or args.per_class is None:
            raise ConfigError("dataset synth needs --classes and --per-class (or --table-scale)")
        spec = SyntheticCorpusSpec.uniform(args.classes, args.per_class, seed=args.seed, image_size=args.image_size)
        names = None
    out = Path(args.out)
    manifest = generate_synthetic_corpus(spec, out, class_names=names)
    if not args.no_split:
        manifest = split_dataset(manifest, ratios, seed=args.seed)
        write_manifest(manifest, out / "manifest.tsv")
    print(f"wrote {len(manifest)} images to {out}")
    print(class_statistics(manifest).format())
    return EXIT_OK


def cmd_pretrain(args) -> int:
    exp = load_experiment(args.config, method=args.method, deterministic=args.deterministic, epochs=args.epochs)
    path = run_pretrain(exp, args.out, args.resume)
    print(f"checkpoint {path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    exp = load_experiment(args.config, method=args.method, deterministic=args.deterministic)
    path = run_finetune(exp, args.init, args.out)
    print(f"finetuned models in {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    exp = load_experiment(args.config, method=args.method)
    rec, path = run_evaluate(exp, args.model, args.out)
    last = "" if rec.accuracy_last is None else f" (last epoch {100 * rec.accuracy_last:.2f}%)"
    print(f"accuracy {100 * rec.accuracy:.2f}%{last} [{rec.setup}]")
    print(f"record {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    records = [read_record(p) for p in args.inputs]
    arch = {"vit": "patch_transformer", "resnet": "conv_residual"}.get(args.arch.lower(), args.arch)
    records = [r for r in records if r.architecture == arch]
    text = render_results_table(ResultsTable.from_records(records, args.setup, arch))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    result = run_sweep(args.grid, args.out, args.parallel, args.deterministic)
    for cid in sorted(result.records):
        tag = " (cached)" if cid in result.skipped else ""
        print(f"{cid} {100 * result.records[cid].accuracy:.2f}% {json.dumps(result.assignments[cid], sort_keys=True)}{tag}")
    print(result.summary())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sslwb", description="self-supervised pretraining workbench")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="synthesize a corpus or print manifest statistics")
    dsub = d.add_subparsers(dest="action", required=True)
    s = dsub.add_parser("synth")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", type=int)
    s.add_argument("--table-scale", type=float, help="23 classes with counts = reference table / scale")
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="0.7,0.15,0.15", help="train,val,test ratios")
    s.add_argument("--no-split", action="store_true")
    s.add_argument("--out", required=True)
    st = dsub.add_parser("stats")
    st.add_argument("manifest")
    d.set_defaults(func=cmd_dataset)

    def common(q, method=True):
        q.add_argument("config")
        if method:
            q.add_argument("--method")
        q.add_argument("--out", help=f"output root (default: config eval.out, ${OUT_ENV}, ./runs)")

    def det(q):
        g = q.add_mutually_exclusive_group()
        g.add_argument("--deterministic", dest="deterministic", action="store_const", const=True, default=None)
        g.add_argument("--nondeterministic", dest="deterministic", action="store_const", const=False)

    q = sub.add_parser("pretrain")
    common(q)
    det(q)
    q.add_argument("--epochs", type=int)
    q.add_argument("--resume", help="checkpoint to continue from")
    q.set_defaults(func=cmd_pretrain)

    q = sub.add_parser("finetune")
    common(q)
    det(q)
    q.add_argument("--init", help="checkpoint path or 'random' (default: this experiment's pretrain output)")
    q.set_defaults(func=cmd_finetune)

    q = sub.add_parser("evaluate")
    common(q)
    q.add_argument("--model", help="directory holding best.ckpt/last.ckpt")
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("report")
    q.add_argument("--in", dest="inputs", nargs="+", required=True)
    q.add_argument("--setup", choices=("transfer", "single_dataset"), required=True)
    q.add_argument("--arch", default="vit")
    q.add_argument("--out")
    q.set_defaults(func=cmd_report)

    q = sub.add_parser("sweep")
    q.add_argument("grid")
    q.add_argument("--out")
    q.add_argument("--parallel", type=int, default=1, help="run up to N cells at once")
    det(q)
    q.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, RuntimeError, OSError, MemoryError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
