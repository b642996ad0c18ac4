"""Test-set evaluation, confusion matrices, results records and table/plot output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SETUPS = ("transfer", "single_dataset")

# row labels used in the rendered tables, keyed by pretraining method
METHOD_LABELS = {
    "none": "No pretraining (random initialization)",
    "supervised": "Supervised",
    "simclr": "SimCLR",
    "dino": "DINO",
    "mae": "MAE",
    "deepcluster": "DeepClusterV2",
    "mixed": "Mixed (DINO+Supervised)",
}

ARCH_LABELS = {"patch_transformer": "ViT", "conv_residual": "ResNet"}


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns are predicted classes."""

    counts: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise EvaluationError("confusion matrix must be square")
        if c.shape[0] != len(self.class_names):
            raise EvaluationError("one class name per row required")
        if c.size and (c.min() < 0 or not np.issubdtype(c.dtype, np.integer)):
            raise EvaluationError("counts must be non-negative integers")
        self.counts = c.astype(np.int64)
        self.class_names = list(self.class_names)

    @classmethod
    def from_predictions(cls, y_true, y_pred, class_names: Sequence[str]) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        c = len(class_names)
        if y_true.shape != y_pred.shape:
            raise EvaluationError("labels and predictions differ in length")
        for name, y in (("labels", y_true), ("predictions", y_pred)):
            if y.size and (y.min() < 0 or y.max() >= c):
                raise EvaluationError(f"{name} outside [0, {c})")
        counts = np.bincount(y_true * c + y_pred, minlength=c * c).reshape(c, c)
        return cls(counts, list(class_names))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_names != other.class_names:
            raise EvaluationError("cannot merge matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def recall(self) -> np.ndarray:
        rows = self.counts.sum(1)
        return np.divide(np.diag(self.counts), rows, out=np.zeros(len(rows)), where=rows > 0)

    def precision(self) -> np.ndarray:
        cols = self.counts.sum(0)
        return np.divide(np.diag(self.counts), cols, out=np.zeros(len(cols)), where=cols > 0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.class_names)
        w.writerows(self.counts.tolist())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise EvaluationError("empty confusion CSV")
        names, body = rows[0], [r for r in rows[1:] if r]
        try:
            counts = np.array([[int(v) for v in r] for r in body], dtype=np.int64).reshape(len(body), -1)
        except ValueError as e:
            raise EvaluationError(f"bad confusion CSV: {e}") from None
        return cls(counts, names)


def accuracy_from_confusion(m: ConfusionMatrix) -> float:
    if m.total == 0:
        raise EvaluationError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(m.counts) / m.total)


@dataclass
class EvalReport:
    accuracy: float
    precision: list[float]
    recall: list[float]
    confusion: ConfusionMatrix

    @classmethod
    def from_confusion(cls, m: ConfusionMatrix) -> "EvalReport":
        return cls(accuracy_from_confusion(m), m.precision().tolist(), m.recall().tolist(), m)

    def format(self) -> str:
        width = max([len(n) for n in self.confusion.class_names] + [5])
        lines = [f"accuracy {100 * self.accuracy:.2f}%", f"{'class':<{width}}  precision  recall  support"]
        support = self.confusion.counts.sum(1)
        for name, p, r, s in zip(self.confusion.class_names, self.precision, self.recall, support):
            lines.append(f"{name:<{width}}  {p:9.4f}  {r:6.4f}  {int(s):7d}")
        return "\n".join(lines)


def evaluate(model, images, labels, class_names: Sequence[str], policy=None, batch_size: int = 256) -> tuple[ConfusionMatrix, EvalReport]:
    """Run a classifier over a test set (inference mode) and tabulate its predictions."""
    import torch

    from .augmentation import AugmentationPolicy
    from .engine.train import predict

    out_dim = _head_dim(model)
    if out_dim is not None and out_dim != len(class_names):
        raise EvaluationError(f"classifier has {out_dim} outputs, test set has {len(class_names)} classes")
    if policy is None:
        policy = AugmentationPolicy.finetune(model.backbone.cfg.input_size)
    images = torch.as_tensor(images)
    preds = predict(model, images, policy, batch_size)
    m = ConfusionMatrix.from_predictions(np.asarray(labels), preds, class_names)
    return m, EvalReport.from_confusion(m)


def _head_dim(model) -> int | None:
    heads = getattr(model, "heads", None)
    if heads is None or not len(heads):
        return None
    head = next(iter(heads.values()))
    fc = getattr(head, "fc", None)
    return None if fc is None else fc.out_features


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------


def emit_confusion_plot(m: ConfusionMatrix, path, title: str | None = None) -> tuple[Path, Path]:
    """Heatmap PNG plus a CSV sidecar (same stem) holding the matrix and class names."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise EvaluationError(f"cannot create {path.parent}: {e}") from None
    c = m.num_classes
    size = max(4.0, 0.35 * c + 2)
    fig, ax = plt.subplots(figsize=(size, size), dpi=100)
    ax.imshow(m.counts, cmap="Blues", interpolation="nearest")
    ax.set_xticks(range(c), labels=m.class_names, rotation=90, fontsize=7)
    ax.set_yticks(range(c), labels=m.class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    if c <= 25:
        hi = m.counts.max() if m.counts.size else 0
        for i in range(c):
            for j in range(c):
                if m.counts[i, j]:
                    color = "white" if m.counts[i, j] > hi / 2 else "black"
                    ax.text(j, i, str(m.counts[i, j]), ha="center", va="center", fontsize=6, color=color)
    fig.tight_layout()
    try:
        # no timestamps or software tags, so equal inputs give equal bytes
        fig.savefig(path, format="png", metadata={"Software": None})
    except OSError as e:
        raise EvaluationError(f"cannot write {path}: {e}") from None
    finally:
        plt.close(fig)
    sidecar = path.with_suffix(".csv")
    sidecar.write_text(m.to_csv(), encoding="utf-8")
    return path, sidecar


# ---------------------------------------------------------------------------
# results records and tables
# ---------------------------------------------------------------------------


@dataclass
class ResultsRecord:
    """One finetuned-and-evaluated experiment (a JSON document on disk)."""

    method: str
    setup: str
    architecture: str
    accuracy: float
    pretrain_dataset: str = ""
    finetune_dataset: str = ""
    seed: int = 0
    accuracy_last: float | None = None
    label: str | None = None
    matrix_csv: str | None = None
    plot: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise EvaluationError(f"setup must be one of {SETUPS}")
        for acc in (self.accuracy, self.accuracy_last):
            if acc is not None and not 0.0 <= acc <= 1.0:
                raise EvaluationError("accuracy is a fraction in [0, 1]")

    @property
    def row_label(self) -> str:
        return self.label or METHOD_LABELS.get(self.method, self.method)


def write_record(rec: ResultsRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(asdict(rec), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_record(path) -> ResultsRecord:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return ResultsRecord(**data)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise EvaluationError(f"bad results record {path}: {e}") from None


@dataclass
class TableRow:
    experiment: str
    accuracy: float  # percent
    pretrain_dataset: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise EvaluationError("table accuracy must be a percentage in [0, 100]")


@dataclass
class ResultsTable:
    rows: list[TableRow]
    setup: str
    architecture: str

    @classmethod
    def from_records(cls, records: Sequence[ResultsRecord], setup: str, architecture: str) -> "ResultsTable":
        rows = [
            TableRow(r.row_label, 100.0 * r.accuracy, r.pretrain_dataset)
            for r in records
            if r.setup == setup
        ]
        return cls(rows, setup, architecture)


def render_results_table(rows: Sequence[TableRow] | ResultsTable, setup: str = "transfer", architecture: str = "ViT") -> str:
    """Markdown table; the best accuracy (first on ties) is bold."""
    if isinstance(rows, ResultsTable):
        setup, architecture, rows = rows.setup, rows.architecture, rows.rows
    if setup not in SETUPS:
        raise EvaluationError(f"setup must be one of {SETUPS}")
    arch = ARCH_LABELS.get(architecture, architecture)
    if setup == "transfer":
        caption = f"Results for the {arch} architecture in the transfer learning setup."
        header = ["Experiment", "Pretraining Dataset", "Classification Accuracy (%)"]
    else:
        caption = f"Results for the {arch} architecture in the single-dataset setup."
        header = ["Self-Supervised Pretraining (Method)", "Classification Accuracy (%)"]
    lines = [caption, "", "| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    best = int(np.argmax([round(r.accuracy, 2) for r in rows])) if rows else -1
    for i, r in enumerate(rows):
        cells = [r.experiment] + ([r.pretrain_dataset] if setup == "transfer" else []) + [f"{r.accuracy:.2f}"]
        if i == best:
            cells = [f"**{c}**" if c else c for c in cells]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def table_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
