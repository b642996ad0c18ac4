"""Pretraining loops for every method, mixed multitask pretraining and finetuning."""

from __future__ import annotations

import contextlib
import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .. import augmentation as aug
from ..dataset import DatasetManifest, load_images
from ..models import (
    ClassificationHead,
    DinoHead,
    EncoderConfig,
    MaeDecoder,
    ModelError,
    MultiHeadModel,
    ProjectionHead,
    TeacherState,
    build_backbone,
    derive_seed,
    ema_update,
    encode_visible,
)
from ..objectives import (
    MixedWeights,
    deepcluster_loss,
    dino_loss_from_logits,
    kmeans,
    mae_loss,
    mixed_loss,
    nt_xent,
    patch_mask_to_pixels,
    update_center,
)
from .checkpoint import Checkpoint, CheckpointError, save_checkpoint
from .config import SSL_METHODS, ConfigError, FinetuneConfig, PretrainConfig, from_dict, to_dict

Trace = Callable[[str], None] | None


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class ImageData:
    """In-memory images (N x 3 x H x W, float32 in [0, 1]) with optional labels."""

    images: torch.Tensor
    labels: torch.Tensor | None
    class_names: list[str]

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def without_labels(self) -> "ImageData":
        return ImageData(self.images, None, self.class_names)

    @classmethod
    def from_arrays(cls, images: np.ndarray, labels: np.ndarray | None, class_names) -> "ImageData":
        """N x H x W x 3 arrays; uint8 input is scaled to [0, 1]."""
        images = np.asarray(images)
        scale = 255.0 if images.dtype == np.uint8 else 1.0
        t = torch.from_numpy(np.ascontiguousarray((images.astype(np.float32) / scale).transpose(0, 3, 1, 2)))
        lab = None if labels is None else torch.as_tensor(np.asarray(labels), dtype=torch.long)
        return cls(t, lab, list(class_names))

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, root, split: str | None = "train", size: int | None = None) -> "ImageData":
        split = None if split == "all" else split
        images, labels = load_images(manifest, root, split, size)
        if (labels < 0).any():
            labels = None
        return cls.from_arrays(images, labels, manifest.class_names())


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    wall_time: float
    metrics: dict = field(default_factory=dict)
    step_losses: list[float] = field(default_factory=list)
    step_metrics: dict[str, list[float]] = field(default_factory=dict)


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise TrainingError("epoch ids must increase")
        self.records.append(rec)

    @property
    def step_losses(self) -> list[float]:
        return [v for r in self.records for v in r.step_losses]

    def step_metric(self, name: str) -> list[float]:
        return [v for r in self.records for v in r.step_metrics.get(name, [])]

    @property
    def epoch_losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_lines(self, timestamps: bool = True) -> list[str]:
        out = []
        for r in self.records:
            d = asdict(r)
            if not timestamps:
                d.pop("wall_time")
            out.append(json.dumps(d, sort_keys=True))
        return out

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in self.to_lines()), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "TrainingLog":
        log = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                d = json.loads(line)
                d.setdefault("wall_time", 0.0)
                log.append(EpochRecord(**d))
        return log

    @classmethod
    def from_meta(cls, records: list[dict]) -> "TrainingLog":
        log = cls()
        for d in records:
            log.append(EpochRecord(**{"wall_time": 0.0, **d}))
        return log


# ---------------------------------------------------------------------------
# optimisation helpers
# ---------------------------------------------------------------------------


def lr_at(step: int, total: int, warmup: int, base: float, final: float, kind: str = "cosine") -> float:
    """Linear warmup followed by cosine decay (or constant)."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if kind == "constant":
        return base
    span = max(1, total - warmup)
    t = min(1.0, (step - warmup) / span)
    return final + 0.5 * (base - final) * (1 + math.cos(math.pi * t))


def make_optimizer(model: nn.Module, lr: float, weight_decay: float) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 and "token" not in name and "pos_embed" not in name else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=lr, foreach=False)


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    previous = torch.are_deterministic_algorithms_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int, min_batch: int = 1) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch, 7]).permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= min_batch]


def optimizer_arrays(opt: torch.optim.Optimizer, model: nn.Module) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    names = {id(p): n for n, p in model.named_parameters()}
    arrays, steps = {}, {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            arrays[f"{n}/exp_avg"] = st["exp_avg"].detach().numpy().copy()
            arrays[f"{n}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().copy()
            steps[n] = float(st["step"])
    return arrays, steps


def restore_optimizer(opt: torch.optim.Optimizer, model: nn.Module, arrays: dict[str, np.ndarray], steps: dict[str, float]):
    params = dict(model.named_parameters())
    for n, step in steps.items():
        p = params[n]
        opt.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(arrays[f"{n}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{n}/exp_avg_sq"].copy()),
        }


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32, copy=True) for k, v in module.state_dict().items()}


def load_arrays(module: nn.Module, arrays: dict[str, np.ndarray]):
    expected = module.state_dict()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(expected))[:3]
        raise CheckpointError(f"checkpoint schema mismatch (missing {missing}, unexpected {extra})")
    for k, v in expected.items():
        if tuple(v.shape) != tuple(arrays[k].shape):
            raise CheckpointError(f"checkpoint schema mismatch for {k}: {tuple(arrays[k].shape)} vs {tuple(v.shape)}")
    module.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in arrays.items()})


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------


def _head(seed: int, name: str, factory):
    torch.manual_seed(derive_seed(seed, f"head/{name}"))
    return factory()


def build_student(cfg: PretrainConfig, num_classes: int) -> MultiHeadModel:
    """Backbone plus method heads; each component initialised from its own derived seed."""
    p = cfg.params
    backbone = build_backbone(cfg.encoder, cfg.seed)
    d = backbone.embed_dim
    heads: dict[str, nn.Module] = {}
    m = cfg.method
    if m == "simclr":
        heads["projection"] = _head(cfg.seed, "projection", lambda: ProjectionHead(d, p.projection_hidden, p.projection_dim))
    if m in ("dino", "mixed"):
        heads["dino"] = _head(cfg.seed, "dino", lambda: DinoHead(d, p.dino_out_dim, p.dino_hidden, p.dino_bottleneck))
    if m in ("supervised", "mixed"):
        heads["cls"] = _head(cfg.seed, "cls", lambda: ClassificationHead(d, num_classes))
    if m == "mae":
        heads["decoder"] = _head(cfg.seed, "decoder", lambda: MaeDecoder(cfg.encoder, p.decoder_dim, p.decoder_depth))
    if m == "deepcluster":
        heads["cluster"] = _head(cfg.seed, "cluster", lambda: ClassificationHead(d, num_clusters(cfg, num_classes)))
    return MultiHeadModel(backbone, heads)


def num_clusters(cfg: PretrainConfig, num_classes: int) -> int:
    return cfg.params.clusters if cfg.params.clusters is not None else 2 * num_classes


def ssl_view(student: MultiHeadModel) -> MultiHeadModel:
    """The backbone + self-distillation head, sharing the student's parameters."""
    return MultiHeadModel(student.backbone, {"dino": student.heads["dino"]})


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


class _Pretrainer:
    def __init__(self, cfg: PretrainConfig, data: ImageData, trace: Trace):
        self.cfg = cfg
        self.trace = trace or (lambda event: None)
        if cfg.method in SSL_METHODS:
            # labels never reach the self-supervised loops
            data = data.without_labels()
        elif cfg.method in ("mixed", "supervised") and data.labels is None:
            raise ConfigError(f"{cfg.method} pretraining needs an annotated dataset")
        self.data = data
        if cfg.method == "deepcluster" and len(data) < num_clusters(cfg, data.num_classes):
            raise ConfigError("fewer images than clusters")
        self.student = build_student(cfg, data.num_classes)
        self.teacher: TeacherState | None = None
        if cfg.method in ("dino", "mixed"):
            self.teacher = TeacherState.from_student(ssl_view(self.student), cfg.params.teacher_momentum, cfg.params.dino_out_dim)
        self.opt = make_optimizer(self.student, cfg.lr, cfg.weight_decay) if cfg.method != "none" else None
        self.weights = MixedWeights(cfg.params.w_supervised, cfg.params.w_ssl)
        self.pseudo: torch.Tensor | None = None
        self.prev_assign: np.ndarray | None = None
        self.global_step = 0
        self.start_epoch = 0
        self.log = TrainingLog()
        min_batch = 2 if cfg.method == "simclr" else 1
        self.batches_per_epoch = len(epoch_batches(len(data), cfg.batch_size, cfg.seed, 0, min_batch))
        self.min_batch = min_batch
        if cfg.method == "simclr" and self.batches_per_epoch == 0:
            raise ConfigError("simclr needs at least two images")

    # -- per-method steps ------------------------------------------------

    def step_simclr(self, x, idx, epoch):
        cfg = self.cfg
        views = aug.batch_view_pairs(x, idx, cfg.policy, cfg.seed, epoch)
        self.trace("augment")
        feats = self.student.backbone(views)
        self.trace("encode")
        z = self.student.heads["projection"](feats)
        self.trace("project")
        loss = nt_xent(z, cfg.params.temperature)
        self.trace("loss")
        return loss, {}

    def _dino_forward(self, x, idx, epoch):
        cfg, p = self.cfg, self.cfg.params
        glob, loc = aug.batch_multicrop(x, idx, cfg.policy, p.local_crops, cfg.seed, epoch)
        self.trace("augment")
        bb, head = self.student.backbone, self.student.heads["dino"]
        f0 = bb(glob[0])
        f1 = bb(glob[1])
        s = [head(f0), head(f1)]
        if loc is not None:
            k, b = loc.shape[:2]
            s += list(head(bb(loc.flatten(0, 1))).view(k, b, -1))
        self.trace("encode")
        with torch.no_grad():
            t = torch.stack([self.teacher.module(glob[0])[0], self.teacher.module(glob[1])[0]])
        self.trace("teacher")
        loss = dino_loss_from_logits(t, torch.stack(s), self.teacher.center, p.teacher_temp, p.student_temp)
        self._teacher_logits = t
        return loss, f0

    def step_dino(self, x, idx, epoch):
        loss, _ = self._dino_forward(x, idx, epoch)
        self.trace("loss")
        return loss, {}

    def step_mixed(self, x, idx, epoch):
        l_ssl, f0 = self._dino_forward(x, idx, epoch)
        l_sup = F.cross_entropy(self.student.heads["cls"](f0), self.data.labels[idx])
        # combined in double so the logged total decomposes exactly into its terms
        l_sup, l_ssl = l_sup.double(), l_ssl.double()
        loss = mixed_loss(l_sup, l_ssl, self.weights)
        self.trace("loss")
        return loss, {"loss_supervised": float(l_sup.detach()), "loss_ssl": float(l_ssl.detach())}

    def step_supervised(self, x, idx, epoch):
        cfg = self.cfg
        v = aug.batch_views(x, idx, cfg.policy, cfg.seed, epoch)
        self.trace("augment")
        f = self.student.backbone(v)
        self.trace("encode")
        loss = F.cross_entropy(self.student.heads["cls"](f), self.data.labels[idx])
        self.trace("loss")
        return loss, {}

    def step_mae(self, x, idx, epoch):
        cfg, enc = self.cfg, self.cfg.encoder
        v = aug.batch_views(x, idx, cfg.policy, cfg.seed, epoch)
        masks = aug.batch_masks(idx, enc.grid, enc.grid, cfg.params.mask_ratio, cfg.seed, epoch)
        self.trace("mask")
        latents, keep = encode_visible(self.student.backbone, v, masks)
        self.trace("encode_visible")
        pred = self.student.heads["decoder"](latents, keep)
        self.trace("decode")
        pix = patch_mask_to_pixels(masks, enc.patch_size, enc.grid)
        loss = mae_loss(pred, v, pix)
        self.trace("loss")
        return loss, {}

    def step_deepcluster(self, x, idx, epoch):
        cfg = self.cfg
        v = aug.batch_views(x, idx, cfg.policy, cfg.seed, epoch)
        self.trace("augment")
        logits = self.student.heads["cluster"](self.student.backbone(v))
        self.trace("encode")
        loss = deepcluster_loss(self.pseudo[idx], logits)
        self.trace("loss")
        return loss, {}

    # -- deepcluster epoch-level work -------------------------------------

    @torch.no_grad()
    def extract_features(self) -> np.ndarray:
        self.student.eval()
        feats = []
        for i in range(0, len(self.data), 256):
            x = aug.normalize(self.data.images[i : i + 256], self.cfg.policy)
            feats.append(self.student.backbone(x))
        self.student.train()
        f = torch.cat(feats).double()
        return F.normalize(f, dim=1).numpy()

    def recluster(self, epoch: int) -> dict:
        cfg = self.cfg
        feats = self.extract_features()
        self.trace("extract")
        k = num_clusters(cfg, self.data.num_classes)
        res = kmeans(feats, k, cfg.params.kmeans_iters, derive_seed(cfg.seed, f"kmeans/{epoch}"), epoch_id=epoch)
        self.trace("kmeans")
        assign = res.labels.assignments
        metrics = {"wcss": res.wcss, "empty_clusters": int((np.bincount(assign, minlength=k) == 0).sum())}
        if self.prev_assign is not None:
            metrics["reassigned_fraction"] = reassignment_fraction(self.prev_assign, assign, k)
        self.prev_assign = assign
        self.pseudo = torch.from_numpy(assign)
        # cluster ids are arbitrary between epochs: fresh classifier, fresh moments
        head = self.student.heads["cluster"]
        torch.manual_seed(derive_seed(cfg.seed, f"cluster/{epoch}"))
        fresh = ClassificationHead(head.fc.in_features, k)
        with torch.no_grad():
            head.fc.weight.copy_(fresh.fc.weight)
            head.fc.bias.copy_(fresh.fc.bias)
        for prm in head.parameters():
            self.opt.state.pop(prm, None)
        self.trace("reinit_head")
        return metrics

    # -- main loop ----------------------------------------------------------

    def run(self, out_dir=None, stop_after: int | None = None) -> tuple[Checkpoint, TrainingLog]:
        cfg = self.cfg
        if cfg.method == "none":
            ckpt = self.checkpoint(0)
            if out_dir is not None:
                save_checkpoint(ckpt, Path(out_dir) / "final.ckpt")
            return ckpt, self.log
        step_fn = getattr(self, f"step_{cfg.method}")
        total = cfg.epochs * self.batches_per_epoch
        warmup = int(round(cfg.warmup_epochs * self.batches_per_epoch))
        self.student.train()
        last = self.start_epoch
        for epoch in range(self.start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            metrics = self.recluster(epoch) if cfg.method == "deepcluster" else {}
            losses: list[float] = []
            step_metrics: dict[str, list[float]] = {}
            lr = cfg.lr
            for idx in epoch_batches(len(self.data), cfg.batch_size, cfg.seed, epoch, self.min_batch):
                lr = lr_at(self.global_step, total, warmup, cfg.lr, cfg.min_lr, cfg.schedule)
                for g in self.opt.param_groups:
                    g["lr"] = lr
                idx_t = torch.from_numpy(idx)
                loss, extra = step_fn(self.data.images[idx_t], idx_t, epoch)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                self.opt.zero_grad(set_to_none=True)
                loss.backward()
                self.trace("backward")
                self.opt.step()
                self.trace("update")
                if self.teacher is not None:
                    ema_update(self.teacher, ssl_view(self.student))
                    self.trace("ema")
                    self.teacher.center = update_center(self.teacher.center, self._teacher_logits, cfg.params.center_momentum)
                losses.append(float(loss.detach()))
                for k, v in extra.items():
                    step_metrics.setdefault(k, []).append(v)
                self.global_step += 1
            for k, v in step_metrics.items():
                metrics[f"{k}_mean"] = float(np.mean(v))
            self.log.append(EpochRecord(epoch, float(np.mean(losses)), lr, time.perf_counter() - t0, metrics, losses, step_metrics))
            last = epoch + 1
            if out_dir is not None and cfg.checkpoint_every and last % cfg.checkpoint_every == 0:
                save_checkpoint(self.checkpoint(last), Path(out_dir) / f"epoch{last:04d}.ckpt")
            if stop_after is not None and last >= stop_after:
                break
        ckpt = self.checkpoint(last)
        if out_dir is not None:
            save_checkpoint(ckpt, Path(out_dir) / "final.ckpt")
        return ckpt, self.log

    # -- (de)serialisation -----------------------------------------------------

    def checkpoint(self, epoch: int) -> Checkpoint:
        opt_arrays, opt_steps = optimizer_arrays(self.opt, self.student) if self.opt else ({}, {})
        state = {}
        if self.teacher is not None:
            state["center"] = self.teacher.center.numpy().astype(np.float32)
        if self.prev_assign is not None:
            state["assignments"] = self.prev_assign.astype(np.float32)
        records = [json.loads(line) for line in self.log.to_lines(timestamps=False)]
        return Checkpoint(
            method=self.cfg.method,
            epoch=epoch,
            student=state_arrays(self.student),
            config=to_dict(self.cfg),
            config_digest=self.cfg.digest,
            teacher=state_arrays(self.teacher.module) if self.teacher is not None else None,
            optimizer=opt_arrays,
            state=state,
            meta={
                "class_names": self.data.class_names,
                "global_step": self.global_step,
                "optimizer_steps": opt_steps,
                # augmentation and batch order are stateless functions of these
                "rng": {"seed": self.cfg.seed, "epoch": epoch, "global_step": self.global_step},
                "log": records,
            },
        )

    def restore(self, ckpt: Checkpoint):
        if ckpt.config_digest != self.cfg.digest:
            raise CheckpointError("checkpoint was written with a different configuration")
        load_arrays(self.student, ckpt.student)
        if self.teacher is not None:
            load_arrays(self.teacher.module, ckpt.teacher)
            self.teacher.center = torch.from_numpy(ckpt.state["center"].copy())
        if "assignments" in ckpt.state:
            self.prev_assign = ckpt.state["assignments"].astype(np.int64)
        restore_optimizer(self.opt, self.student, ckpt.optimizer, ckpt.meta["optimizer_steps"])
        self.global_step = ckpt.meta["global_step"]
        self.start_epoch = ckpt.epoch
        self.log = TrainingLog.from_meta(ckpt.meta["log"])


def pretrain(
    config: PretrainConfig,
    data: ImageData | DatasetManifest,
    root=None,
    out_dir=None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    trace: Trace = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Run one pretraining method; returns the final checkpoint and the training log."""
    if isinstance(data, DatasetManifest):
        if root is None:
            raise ConfigError("a manifest needs the image root directory")
        data = ImageData.from_manifest(data, root, config.split, config.encoder.input_size)
    if len(data) == 0:
        raise ConfigError("empty pretraining dataset")
    with deterministic_mode(config.deterministic):
        runner = _Pretrainer(config, data, trace)
        if resume is not None:
            runner.restore(resume)
        return runner.run(out_dir, stop_after)


def pretrain_mixed(config: PretrainConfig, data: ImageData | DatasetManifest, root=None, **kw) -> tuple[Checkpoint, TrainingLog]:
    """Supervised + self-distillation multitask pretraining through two parallel heads."""
    if config.method != "mixed":
        config = from_dict(PretrainConfig, {**to_dict(config), "method": "mixed"})
    return pretrain(config, data, root, **kw)


def reassignment_fraction(prev: np.ndarray, new: np.ndarray, k: int) -> float:
    """Fraction of samples whose cluster changed, after optimally matching cluster ids."""
    overlap = np.zeros((k, k))
    np.add.at(overlap, (prev, new), 1)
    rows, cols = linear_sum_assignment(-overlap)
    return float(1.0 - overlap[rows, cols].sum() / len(prev))


# ---------------------------------------------------------------------------
# finetuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    model: MultiHeadModel
    last_model: MultiHeadModel
    log: TrainingLog
    best_epoch: int
    best_val_accuracy: float | None


def backbone_from_checkpoint(ckpt: Checkpoint) -> nn.Module:
    enc = from_dict(EncoderConfig, ckpt.config["encoder"])
    backbone = build_backbone(enc, 0)
    load_arrays(backbone, ckpt.backbone())
    return backbone


@torch.no_grad()
def predict(model: MultiHeadModel, images: torch.Tensor, policy: aug.AugmentationPolicy, batch_size: int = 256) -> np.ndarray:
    """Argmax class predictions of the first head, deterministic inference."""
    model.eval()
    preds = []
    for i in range(0, images.shape[0], batch_size):
        logits = model(aug.normalize(images[i : i + batch_size], policy))[0]
        preds.append(logits.argmax(1))
    model.train()
    return torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)


def finetune(
    config: FinetuneConfig,
    init: Checkpoint | None,
    train: ImageData,
    val: ImageData | None = None,
    trace: Trace = None,
) -> FinetuneResult:
    """Supervised training of a fresh classification head (and the backbone unless frozen).

    ``init=None`` gives the random-initialisation baseline. The returned
    ``model`` is the epoch with the best validation accuracy (the last epoch
    when no validation data is given).
    """
    trace = trace or (lambda event: None)
    if train.labels is None:
        raise ConfigError("finetuning needs labelled training data")
    if train.num_classes != config.num_classes:
        raise ConfigError(f"dataset has {train.num_classes} classes, config expects {config.num_classes}")
    with deterministic_mode(config.deterministic):
        if init is not None:
            backbone = backbone_from_checkpoint(init)
            if backbone.cfg.input_size != config.policy.global_size:
                raise ConfigError("finetune resolution differs from the pretrained encoder input size")
        else:
            backbone = build_backbone(config.encoder, config.seed)
        head = _head(config.seed, "finetune", lambda: ClassificationHead(backbone.embed_dim, config.num_classes))
        model = MultiHeadModel(backbone, {"cls": head})
        if config.freeze_backbone:
            for p in backbone.parameters():
                p.requires_grad_(False)
        opt = make_optimizer(model, config.lr, config.weight_decay)
        n_batches = len(epoch_batches(len(train), config.batch_size, config.seed, 0))
        total = config.epochs * n_batches
        warmup = int(round(config.warmup_epochs * n_batches))
        log = TrainingLog()
        best_state, best_acc, best_epoch = None, -1.0, -1
        step = 0
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            model.train()
            if config.freeze_backbone:
                backbone.eval()
            losses = []
            lr = config.lr
            for idx in epoch_batches(len(train), config.batch_size, config.seed, epoch):
                lr = lr_at(step, total, warmup, config.lr, config.min_lr, config.schedule)
                for g in opt.param_groups:
                    g["lr"] = lr
                idx_t = torch.from_numpy(idx)
                v = aug.batch_views(train.images[idx_t], idx_t, config.policy, config.seed, epoch)
                loss = F.cross_entropy(model(v)[0], train.labels[idx_t])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                trace("finetune_step")
                losses.append(float(loss.detach()))
                step += 1
            metrics = {}
            if val is not None and len(val):
                acc = float((predict(model, val.images, config.policy) == val.labels.numpy()).mean())
                metrics["val_accuracy"] = acc
                if acc > best_acc:
                    best_acc, best_epoch = acc, epoch
                    best_state = copy.deepcopy(model.state_dict())
            log.append(EpochRecord(epoch, float(np.mean(losses)), lr, time.perf_counter() - t0, metrics, losses))
        last_model = model
        if best_state is not None:
            best = copy.deepcopy(model)
            best.load_state_dict(best_state)
        else:
            best, best_epoch = model, config.epochs - 1
        for m in (best, last_model):
            m.eval()
        return FinetuneResult(best, last_model, log, best_epoch, best_acc if best_state is not None else None)


def model_checkpoint(model: MultiHeadModel, config: FinetuneConfig, class_names: list[str], epoch: int) -> Checkpoint:
    """Checkpoint of a finetuned classifier (method tag ``finetune``)."""
    cfg = to_dict(config)
    cfg["encoder"] = to_dict(model.backbone.cfg)
    from .config import config_digest

    return Checkpoint(
        method="finetune",
        epoch=epoch,
        student=state_arrays(model),
        config=cfg,
        config_digest=config_digest(config),
        meta={"class_names": class_names},
    )


def classifier_from_checkpoint(ckpt: Checkpoint) -> MultiHeadModel:
    if ckpt.method != "finetune":
        raise CheckpointError("not a finetuned classifier checkpoint")
    backbone = backbone_from_checkpoint(ckpt)
    n = len(ckpt.meta["class_names"])
    model = MultiHeadModel(backbone, {"cls": ClassificationHead(backbone.embed_dim, n)})
    load_arrays(model, ckpt.student)
    model.eval()
    return model
