"""Pretext losses (contrastive, self-distillation, masked reconstruction,
pseudolabel classification), the multitask combination and K-Means.

All losses are plain torch functions, so autograd supplies their gradients
and they run at whatever precision the inputs carry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class MixedWeights:
    supervised: float = 0.45
    ssl: float = 0.55

    def __post_init__(self):
        if self.supervised < 0 or self.ssl < 0:
            raise ObjectiveError("mixed weights must be non-negative")
        if self.supervised + self.ssl <= 0:
            raise ObjectiveError("at least one mixed weight must be positive")


@dataclass
class PseudoLabels:
    assignments: np.ndarray
    k: int
    epoch_id: int = 0

    def __post_init__(self):
        a = np.asarray(self.assignments)
        if a.ndim != 1 or (a.size and (a.min() < 0 or a.max() >= self.k)):
            raise ObjectiveError("cluster ids must lie in [0, K)")
        self.assignments = a.astype(np.int64)

    def one_hot(self) -> np.ndarray:
        return np.eye(self.k)[self.assignments]


# ---------------------------------------------------------------------------
# NT-Xent
# ---------------------------------------------------------------------------


def nt_xent(z: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Contrastive loss over 2B projections; rows 2i and 2i+1 are the two views of image i.

    Every row acts as an anchor once; the loss is the mean over the 2B anchors.
    """
    if temperature <= 0:
        raise ObjectiveError("temperature must be positive")
    if z.ndim != 2 or z.shape[0] % 2:
        raise ObjectiveError("expected an even number of projection rows")
    n = z.shape[0]
    if n < 4:
        raise ObjectiveError("need at least two images (one negative) per batch")
    norms = z.norm(dim=1)
    if bool((norms == 0).any()):
        raise ObjectiveError("zero-norm projection: cosine similarity undefined")
    u = z / norms[:, None]
    logits = (u @ u.t()) / temperature
    logits = logits.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
    positives = torch.arange(n) ^ 1
    return F.cross_entropy(logits, positives)


# ---------------------------------------------------------------------------
# DINO
# ---------------------------------------------------------------------------


def _check_dists(p: torch.Tensor, what: str):
    if bool((p < 0).any()) or not torch.allclose(p.sum(-1), torch.ones((), dtype=p.dtype), atol=1e-6):
        raise ObjectiveError(f"{what} must be probability vectors")


def dino_loss(teacher: torch.Tensor, student: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Cross-entropy of every student view against each of the two teacher (global) views.

    ``teacher``: 2 x C or 2 x B x C probabilities for the two global views.
    ``student``: (k+2) x C or (k+2) x B x C probabilities, globals first.
    Sums the 2(k+1) pairs with differing views; averages over the batch.
    The teacher side is treated as constant.
    """
    teacher = teacher.detach()
    if teacher.shape[0] != 2:
        raise ObjectiveError("teacher distributions are needed for exactly two global views")
    if student.shape[0] < 2 or student.shape[1:] != teacher.shape[1:]:
        raise ObjectiveError("student views must cover the two globals plus k locals")
    if check:
        _check_dists(teacher, "teacher outputs")
        _check_dists(student, "student outputs")
    log_s = torch.log(student.clamp_min(torch.finfo(student.dtype).tiny))
    return _pairwise_ce(teacher, log_s)


def _pairwise_ce(teacher: torch.Tensor, log_student: torch.Tensor) -> torch.Tensor:
    total = 0.0
    for i in range(2):
        for j in range(log_student.shape[0]):
            if j == i:
                continue
            total = total + (-(teacher[i] * log_student[j]).sum(-1)).mean()
    return total


def dino_term_count(k: int) -> int:
    return 2 * (k + 1)


def sharpen_and_center(logits: torch.Tensor, center: torch.Tensor, temperature: float) -> torch.Tensor:
    if temperature <= 0:
        raise ObjectiveError("temperature must be positive")
    if not torch.isfinite(logits).all():
        raise ObjectiveError("non-finite teacher logits")
    return F.softmax((logits - center) / temperature, dim=-1)


def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float = 0.9) -> torch.Tensor:
    """EMA of the batch-mean teacher logits (mean over every leading axis)."""
    if not torch.isfinite(teacher_logits).all():
        raise ObjectiveError("non-finite teacher logits")
    batch_mean = teacher_logits.detach().reshape(-1, teacher_logits.shape[-1]).mean(0, keepdim=True)
    return center * momentum + batch_mean * (1 - momentum)


def dino_loss_from_logits(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    center: torch.Tensor,
    teacher_temp: float = 0.04,
    student_temp: float = 0.1,
) -> torch.Tensor:
    """Numerically stable training form: centered/sharpened teacher, tempered student log-softmax."""
    t = sharpen_and_center(teacher_logits.detach(), center, teacher_temp)
    log_s = F.log_softmax(student_logits / student_temp, dim=-1)
    return _pairwise_ce(t, log_s)


# ---------------------------------------------------------------------------
# MAE
# ---------------------------------------------------------------------------


def mae_loss(pred: torch.Tensor, target: torch.Tensor, pixel_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked pixel-channel entries only.

    ``pred``/``target``: ... x 3 x H x W (channels-first) or H x W x 3 when
    ``pixel_mask`` is H x W and the last axis has size 3. ``pixel_mask`` is a
    boolean pixel mask broadcast over channels. Unmasked entries are never
    read, so arbitrary (even non-finite) values there leave the loss unchanged.
    """
    if pred.shape != target.shape:
        raise ObjectiveError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    mask = torch.as_tensor(pixel_mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise ObjectiveError("mask selects no pixels")
    if pred.ndim == 3 and pred.shape[-1] == 3 and mask.shape == pred.shape[:2]:
        full = mask.unsqueeze(-1).expand_as(pred)
    else:
        full = mask.unsqueeze(-3).expand_as(pred) if mask.ndim < pred.ndim else mask
    diff = pred[full] - target[full]
    return (diff * diff).mean()


def patch_mask_to_pixels(patch_mask: torch.Tensor, patch_size: int, grid: int) -> torch.Tensor:
    """B x N patch mask -> B x H x W pixel mask."""
    b = patch_mask.shape[0]
    m = patch_mask.reshape(b, grid, grid)
    return m.repeat_interleave(patch_size, 1).repeat_interleave(patch_size, 2)


# ---------------------------------------------------------------------------
# DeepCluster
# ---------------------------------------------------------------------------


def deepcluster_loss(pseudolabels: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """-log softmax(logits)[assigned cluster], batch mean.

    ``pseudolabels``: B x K one-hot rows or B integer cluster ids.
    """
    if not torch.isfinite(logits).all():
        raise ObjectiveError("non-finite logits")
    if pseudolabels.ndim == 2:
        y = pseudolabels
        if y.shape != logits.shape:
            raise ObjectiveError("one-hot pseudolabels must match the logits shape")
        ones = (y == 1).sum(1)
        if not bool(((y == 0) | (y == 1)).all()) or not bool((ones == 1).all()):
            raise ObjectiveError("pseudolabels must be one-hot")
        target = y.argmax(1)
    else:
        target = pseudolabels.long()
        if bool((target < 0).any()) or bool((target >= logits.shape[1]).any()):
            raise ObjectiveError("cluster id out of range")
    return F.cross_entropy(logits, target)


# ---------------------------------------------------------------------------
# mixed
# ---------------------------------------------------------------------------


def mixed_loss(l_sup, l_ssl, weights: MixedWeights = MixedWeights()):
    if not all(math.isfinite(float(torch.as_tensor(v).detach())) for v in (l_sup, l_ssl)):
        raise ObjectiveError("mixed loss terms must be finite")
    return weights.supervised * l_sup + weights.ssl * l_ssl


# ---------------------------------------------------------------------------
# K-Means
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    labels: PseudoLabels
    centroids: np.ndarray
    wcss: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0


def wcss(x: np.ndarray, labels: np.ndarray, k: int) -> float:
    total = 0.0
    for c in range(k):
        pts = x[labels == c]
        if len(pts):
            total += float(((pts - pts.mean(0)) ** 2).sum())
    return total


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centroids = [x[rng.integers(n)]]
    d2 = ((x - centroids[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centroids.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centroids)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def kmeans(
    features,
    k: int,
    max_iters: int = 100,
    seed: int = 0,
    epoch_id: int = 0,
    refine: bool = True,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded with the point farthest from its centroid.
    With ``refine`` a final pass of single-point moves (Hartigan's rule) runs
    after Lloyd converges, so no move of one point to another cluster can
    lower the within-cluster sum of squares. Such a state is also a Lloyd
    fixed point: every point stays with its nearest centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ObjectiveError("features must be N x D")
    n = len(x)
    if k < 1 or n < k:
        raise ObjectiveError(f"need N >= K >= 1, got N={n}, K={k}")
    if not np.isfinite(x).all():
        raise ObjectiveError("non-finite features")
    rng = np.random.default_rng(seed)
    c = _kmeanspp(x, k, rng)
    labels = np.argmin(_sq_dists(x, c), 1)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        # update step, fixed summation order
        c = np.array([x[labels == j].mean(0) if np.any(labels == j) else c[j] for j in range(k)])
        labels, c = _reseed_empty(x, labels, c, k)
        history.append(_cost(x, labels, c))
        new = np.argmin(_sq_dists(x, c), 1)
        if np.array_equal(new, labels):
            break
        labels = new
    labels, c = _reseed_empty(x, labels, c, k)
    c = np.array([x[labels == j].mean(0) for j in range(k)])
    history.append(_cost(x, labels, c))
    if refine:
        labels = _hartigan(x, labels, k)
        c = np.array([x[labels == j].mean(0) for j in range(k)])
        history.append(_cost(x, labels, c))
    return KMeansResult(PseudoLabels(labels, k, epoch_id), c, history[-1], history, it)


def _cost(x, labels, c) -> float:
    return float(((x - c[labels]) ** 2).sum())


def _reseed_empty(x, labels, c, k):
    labels = labels.copy()
    c = c.copy()
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if not len(empty):
            return labels, c
        d = ((x - c[labels]) ** 2).sum(1)
        # only take points from clusters that keep at least one member
        d[counts[labels] <= 1] = -1.0
        far = int(np.argmax(d))
        j = int(empty[0])
        old = labels[far]
        labels[far] = j
        c[j] = x[far]
        c[old] = x[labels == old].mean(0)


def _hartigan(x: np.ndarray, labels: np.ndarray, k: int, max_sweeps: int = 100) -> np.ndarray:
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.array([x[labels == j].sum(0) for j in range(k)])
    for _ in range(max_sweeps):
        moved = False
        for i in range(len(x)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            means = sums / counts[:, None]
            d = ((x[i] - means) ** 2).sum(1)
            remove_gain = counts[a] / (counts[a] - 1) * d[a]
            add_cost = counts / (counts + 1) * d
            add_cost[a] = np.inf
            b = int(np.argmin(add_cost))
            if add_cost[b] < remove_gain - 1e-12 * max(1.0, remove_gain):
                labels[i] = b
                counts[a] -= 1
                counts[b] += 1
                sums[a] -= x[i]
                sums[b] += x[i]
                moved = True
        if not moved:
            break
    return labels
