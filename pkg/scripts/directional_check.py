"""Directional end-to-end check: does SSL pretraining beat random init?

Builds a 10-class synthetic corpus (2000 train / 200 val / 400 test, 32x32),
then for each seed finetunes a small patch transformer from random weights,
from a SimCLR checkpoint and from a DINO checkpoint. Pretraining sees the
train split without labels. Reports per-seed test accuracy (best-on-val
weights), the median over seeds and a results table.

    python3 scripts/directional_check.py --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from sslwb.dataset import SyntheticCorpusSpec, render_sample
from sslwb.engine import FinetuneConfig, MethodParams, PretrainConfig, finetune, pretrain
from sslwb.engine.train import ImageData, predict
from sslwb.evaluation import TableRow, render_results_table
from sslwb.models import EncoderConfig

NUM_CLASSES, PER_CLASS = 10, 260
N_TRAIN, N_VAL = 2000, 200
ENCODER = EncoderConfig(depth=4, width=64, patch_size=8, heads=4)

# desk-scale settings; the library defaults target long runs on big corpora
PRETRAIN = {
    "simclr": dict(epochs=20, lr=1e-3, params=MethodParams()),
    "dino": dict(
        epochs=20,
        lr=1e-3,
        params=MethodParams(local_crops=2, teacher_momentum=0.9, teacher_temp=0.07, dino_out_dim=64),
    ),
}
FINETUNE = dict(epochs=15, lr=1e-3, batch_size=64)
LABELS = {"none": "No pretraining (random initialization)", "simclr": "SimCLR", "dino": "DINO"}


@dataclass
class CheckResult:
    accuracy: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def median(self, method: str) -> float:
        return statistics.median(self.accuracy[method])

    def margin(self, method: str) -> float:
        """Median gain over random init, in accuracy points."""
        return 100 * (self.median(method) - self.median("none"))


def corpus(seed: int = 0) -> tuple[ImageData, ImageData, ImageData]:
    spec = SyntheticCorpusSpec.uniform(NUM_CLASSES, PER_CLASS, seed=seed)
    images = np.stack([render_sample(spec, c, i) for c in range(NUM_CLASSES) for i in range(PER_CLASS)])
    labels = np.repeat(np.arange(NUM_CLASSES), PER_CLASS)
    perm = np.random.default_rng(seed).permutation(len(labels))
    names = [f"class {c}" for c in range(NUM_CLASSES)]
    parts = perm[:N_TRAIN], perm[N_TRAIN : N_TRAIN + N_VAL], perm[N_TRAIN + N_VAL :]
    return tuple(ImageData.from_arrays(images[ix], labels[ix], names) for ix in parts)


def finetune_accuracy(init, seed: int, train: ImageData, val: ImageData, test: ImageData) -> float:
    cfg = FinetuneConfig(num_classes=NUM_CLASSES, encoder=ENCODER, seed=seed, **FINETUNE)
    res = finetune(cfg, init, train, val)
    return float(np.mean(predict(res.model, test.images, cfg.policy) == test.labels.numpy()))


def run(seeds=(0, 1, 2), methods=("simclr", "dino"), log=print) -> CheckResult:
    start = time.time()
    train, val, test = corpus()
    out = CheckResult({m: [] for m in ("none", *methods)})
    for seed in seeds:
        acc = finetune_accuracy(None, seed, train, val, test)
        out.accuracy["none"].append(acc)
        log(f"seed {seed} none {acc:.4f}")
        for m in methods:
            cfg = PretrainConfig(method=m, encoder=ENCODER, batch_size=64, seed=seed, **PRETRAIN[m])
            ckpt, _ = pretrain(cfg, train.without_labels())
            acc = finetune_accuracy(ckpt, seed, train, val, test)
            out.accuracy[m].append(acc)
            log(f"seed {seed} {m} {acc:.4f}")
    out.seconds = time.time() - start
    return out


def table(result: CheckResult) -> str:
    rows = [TableRow(LABELS[m], 100 * result.median(m)) for m in result.accuracy]
    return render_results_table(rows, "single_dataset", "ViT")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--methods", nargs="+", default=["simclr", "dino"], choices=sorted(PRETRAIN))
    ap.add_argument("--json", help="also write the raw accuracies here")
    args = ap.parse_args(argv)
    result = run(args.seeds, args.methods)
    print(table(result))
    for m in args.methods:
        print(f"{m}: median margin over random init {result.margin(m):+.2f} points")
    print(f"total {result.seconds:.0f} s")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"accuracy": result.accuracy, "seconds": result.seconds}, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
