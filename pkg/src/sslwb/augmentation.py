"""Seeded view generation: SimCLR pairs, multi-crop sets, patch masks, plain views.

Every random draw comes from a generator keyed on ``(seed, epoch, sample_index)``
so batch composition and worker count never change the produced views.
Images are float arrays in [0, 1]; single-image helpers take and return
H x W x 3 numpy arrays, the batched helpers work on N x 3 x H x W tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


class AugmentationError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationPolicy:
    global_size: int = 32
    local_size: int = 16
    crop_scale_global: tuple[float, float] = (0.4, 1.0)
    crop_scale_local: tuple[float, float] = (0.05, 0.4)
    aspect_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_probability: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    jitter_probability: float = 0.8
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        for name in ("crop_scale_global", "crop_scale_local"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise AugmentationError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        if self.crop_scale_local[1] > self.crop_scale_global[0]:
            raise AugmentationError("local crop upper bound must not exceed the global lower bound")
        if not 0 <= self.flip_probability <= 1:
            raise AugmentationError("flip_probability must be in [0, 1]")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise AugmentationError("jitter strengths must be non-negative")
        if any(s <= 0 for s in self.std):
            raise AugmentationError("normalization std must be positive")
        if self.global_size < 8 or self.local_size < 4:
            raise AugmentationError("output resolution too small")

    @classmethod
    def identity(cls, size: int = 32, **kw) -> "AugmentationPolicy":
        return cls(
            global_size=size,
            local_size=kw.pop("local_size", max(4, size // 2)),
            crop_scale_global=(1.0, 1.0),
            crop_scale_local=kw.pop("crop_scale_local", (0.05, 0.4)),
            aspect_ratio=(1.0, 1.0),
            flip_probability=0.0,
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            **kw,
        )

    @classmethod
    def finetune(cls, size: int = 32, **kw) -> "AugmentationPolicy":
        """Plain supervised policy: random crop, flip, normalization."""
        return cls(
            global_size=size,
            local_size=max(4, size // 2),
            crop_scale_global=kw.pop("crop_scale_global", (0.6, 1.0)),
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            **kw,
        )

    @property
    def min_crop_pixels(self) -> int:
        return 8


@dataclass(frozen=True)
class CropParams:
    """Crop box in fractions of the source image plus photometric draws."""

    cx: float
    cy: float
    w: float
    h: float
    flip: bool
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    source_index: int = 0


@dataclass
class MultiCropSet:
    globals: list[np.ndarray]
    locals: list[np.ndarray]
    crops: list[CropParams] = field(default_factory=list)

    def __post_init__(self):
        if len(self.globals) != 2:
            raise AugmentationError("a multi-crop set has exactly two global views")

    @property
    def k(self) -> int:
        return len(self.locals)

    @property
    def views(self) -> list[np.ndarray]:
        return [*self.globals, *self.locals]

    def __len__(self):
        return 2 + self.k


@dataclass(frozen=True)
class MaskSpec:
    grid_h: int
    grid_w: int
    masked_indices: tuple[int, ...]
    ratio: float

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def visible_indices(self) -> tuple[int, ...]:
        masked = set(self.masked_indices)
        return tuple(i for i in range(self.num_patches) if i not in masked)

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.num_patches, dtype=bool)
        m[list(self.masked_indices)] = True
        return m

    def pixel_mask(self, patch_size: int) -> np.ndarray:
        """Boolean H x W mask, True on pixels of masked patches."""
        grid = self.as_bool().reshape(self.grid_h, self.grid_w)
        return np.kron(grid, np.ones((patch_size, patch_size), dtype=bool)).astype(bool)


def sample_rng(seed: int, epoch: int = 0, index: int = 0, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index, stream])


# ---------------------------------------------------------------------------
# parameter sampling
# ---------------------------------------------------------------------------


def sample_crop(rng: np.random.Generator, policy: AugmentationPolicy, kind: str = "global") -> CropParams:
    """Random resized crop of exact area fraction drawn from the policy's scale range."""
    lo, hi = policy.crop_scale_global if kind == "global" else policy.crop_scale_local
    area = lo if lo == hi else rng.uniform(lo, hi)
    a_lo, a_hi = policy.aspect_ratio
    ratio = a_lo if a_lo == a_hi else math.exp(rng.uniform(math.log(a_lo), math.log(a_hi)))
    w = math.sqrt(area * ratio)
    h = math.sqrt(area / ratio)
    if w > 1.0:
        w, h = 1.0, area
    elif h > 1.0:
        w, h = area, 1.0
    cx = 0.5 if w >= 1.0 else rng.uniform(w / 2, 1 - w / 2)
    cy = 0.5 if h >= 1.0 else rng.uniform(h / 2, 1 - h / 2)
    flip = bool(rng.random() < policy.flip_probability) if policy.flip_probability > 0 else False
    b = c = s = 1.0
    if max(policy.brightness, policy.contrast, policy.saturation) > 0 and rng.random() < policy.jitter_probability:
        b = rng.uniform(1 - policy.brightness, 1 + policy.brightness)
        c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        s = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
    return CropParams(cx, cy, w, h, flip, b, c, s)


def sample_multicrop_params(rng: np.random.Generator, policy: AugmentationPolicy, k: int) -> list[CropParams]:
    """Two global draws first, then ``k`` local draws, from one stream."""
    return [sample_crop(rng, policy, "global") for _ in range(2)] + [
        sample_crop(rng, policy, "local") for _ in range(k)
    ]


# ---------------------------------------------------------------------------
# rendering crops
# ---------------------------------------------------------------------------


def apply_crops(images: torch.Tensor, crops: list[CropParams], out_size: int, policy: AugmentationPolicy) -> torch.Tensor:
    """Crop/resize/flip/jitter/normalize each image of an N x 3 x H x W batch."""
    n = images.shape[0]
    if n != len(crops):
        raise AugmentationError("one crop per image required")
    dtype = images.dtype
    theta = torch.zeros(n, 2, 3, dtype=dtype)
    for i, c in enumerate(crops):
        theta[i, 0, 0] = -c.w if c.flip else c.w
        theta[i, 1, 1] = c.h
        theta[i, 0, 2] = 2 * c.cx - 1
        theta[i, 1, 2] = 2 * c.cy - 1
    if all(c.w == 1.0 and c.h == 1.0 and not c.flip for c in crops) and images.shape[-1] == out_size and images.shape[-2] == out_size:
        out = images.clone()
    else:
        grid = F.affine_grid(theta, [n, 3, out_size, out_size], align_corners=False)
        out = F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)
    out = _jitter(out, crops)
    mean = torch.tensor(policy.mean, dtype=dtype).view(1, 3, 1, 1)
    std = torch.tensor(policy.std, dtype=dtype).view(1, 3, 1, 1)
    return (out - mean) / std


def _jitter(x: torch.Tensor, crops: list[CropParams]) -> torch.Tensor:
    if all(c.brightness == 1.0 and c.contrast == 1.0 and c.saturation == 1.0 for c in crops):
        return x
    dtype = x.dtype
    b = torch.tensor([c.brightness for c in crops], dtype=dtype).view(-1, 1, 1, 1)
    c = torch.tensor([c.contrast for c in crops], dtype=dtype).view(-1, 1, 1, 1)
    s = torch.tensor([c.saturation for c in crops], dtype=dtype).view(-1, 1, 1, 1)
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=dtype).view(1, 3, 1, 1)
    x = (x * b).clamp(0, 1)
    gray_mean = (x * weights).sum(1, keepdim=True).mean(dim=(2, 3), keepdim=True)
    x = ((x - gray_mean) * c + gray_mean).clamp(0, 1)
    gray = (x * weights).sum(1, keepdim=True)
    return ((x - gray) * s + gray).clamp(0, 1)


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise AugmentationError(f"expected H x W x 3 image, got shape {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).unsqueeze(0).to(torch.float64)


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t[0].permute(1, 2, 0).numpy()


def _check_size(image: np.ndarray, policy: AugmentationPolicy):
    h, w = np.asarray(image).shape[:2]
    if min(h, w) < policy.min_crop_pixels:
        raise AugmentationError(f"image {h}x{w} smaller than the {policy.min_crop_pixels}px crop floor")


def make_view_pair(image: np.ndarray, policy: AugmentationPolicy, rng_seed: int, index: int = 0, epoch: int = 0) -> ViewPair:
    """Two independently augmented global views of one image."""
    _check_size(image, policy)
    rng = sample_rng(rng_seed, epoch, index)
    crops = [sample_crop(rng, policy, "global") for _ in range(2)]
    x = _to_tensor(image).expand(2, -1, -1, -1)
    out = apply_crops(x, crops, policy.global_size, policy)
    return ViewPair(_to_numpy(out[0:1]), _to_numpy(out[1:2]), index)


def make_multicrop(image: np.ndarray, k: int, policy: AugmentationPolicy, rng_seed: int, index: int = 0, epoch: int = 0) -> MultiCropSet:
    """Two global views and ``k`` local views (globals first)."""
    if k < 0:
        raise AugmentationError("number of local crops must be >= 0")
    _check_size(image, policy)
    rng = sample_rng(rng_seed, epoch, index)
    crops = sample_multicrop_params(rng, policy, k)
    x = _to_tensor(image)
    glob = apply_crops(x.expand(2, -1, -1, -1), crops[:2], policy.global_size, policy)
    views_g = [_to_numpy(glob[i : i + 1]) for i in range(2)]
    views_l = []
    if k:
        loc = apply_crops(x.expand(k, -1, -1, -1), crops[2:], policy.local_size, policy)
        views_l = [_to_numpy(loc[i : i + 1]) for i in range(k)]
    return MultiCropSet(views_g, views_l, crops)


def make_mask(grid_h: int, grid_w: int, ratio: float, rng_seed: int, index: int = 0, epoch: int = 0) -> MaskSpec:
    """Uniformly random set of floor(ratio * grid_h * grid_w) masked patches."""
    if not 0.0 <= ratio <= 1.0:
        raise AugmentationError(f"mask ratio {ratio} outside [0, 1]")
    if grid_h < 1 or grid_w < 1:
        raise AugmentationError("grid must be at least 1x1")
    n = grid_h * grid_w
    count = math.floor(ratio * n)
    rng = sample_rng(rng_seed, epoch, index, stream=1)
    masked = np.sort(rng.permutation(n)[:count])
    return MaskSpec(grid_h, grid_w, tuple(int(i) for i in masked), ratio)


# ---------------------------------------------------------------------------
# batched views for training loops
# ---------------------------------------------------------------------------


def batch_views(images: torch.Tensor, indices, policy: AugmentationPolicy, seed: int, epoch: int) -> torch.Tensor:
    """One global view per image (the first draw of each sample's stream)."""
    crops = [sample_crop(sample_rng(seed, epoch, int(i)), policy, "global") for i in indices]
    return apply_crops(images, crops, policy.global_size, policy)


def batch_view_pairs(images: torch.Tensor, indices, policy: AugmentationPolicy, seed: int, epoch: int) -> torch.Tensor:
    """2B x 3 x S x S batch with the two views of image i at rows 2i and 2i+1."""
    crops = []
    for i in indices:
        rng = sample_rng(seed, epoch, int(i))
        crops += [sample_crop(rng, policy, "global") for _ in range(2)]
    return apply_crops(images.repeat_interleave(2, dim=0), crops, policy.global_size, policy)


def batch_multicrop(images: torch.Tensor, indices, policy: AugmentationPolicy, k: int, seed: int, epoch: int) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Returns (globals 2 x B x 3 x G x G, locals k x B x 3 x L x L or None)."""
    params = [sample_multicrop_params(sample_rng(seed, epoch, int(i)), policy, k) for i in indices]
    glob = torch.stack([apply_crops(images, [p[v] for p in params], policy.global_size, policy) for v in range(2)])
    if k == 0:
        return glob, None
    loc = torch.stack([apply_crops(images, [p[2 + v] for p in params], policy.local_size, policy) for v in range(k)])
    return glob, loc


def batch_masks(indices, grid_h: int, grid_w: int, ratio: float, seed: int, epoch: int) -> torch.Tensor:
    """B x N boolean patch masks (True = masked), one seeded draw per sample."""
    rows = [make_mask(grid_h, grid_w, ratio, seed, int(i), epoch).as_bool() for i in indices]
    return torch.from_numpy(np.stack(rows))


def normalize(images: torch.Tensor, policy: AugmentationPolicy) -> torch.Tensor:
    """Deterministic evaluation transform: resize to the global size, then normalize."""
    if images.shape[-1] != policy.global_size or images.shape[-2] != policy.global_size:
        images = F.interpolate(images, size=(policy.global_size,) * 2, mode="bilinear", align_corners=False)
    mean = torch.tensor(policy.mean, dtype=images.dtype).view(1, 3, 1, 1)
    std = torch.tensor(policy.std, dtype=images.dtype).view(1, 3, 1, 1)
    return (images - mean) / std


def channel_statistics(images: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std of an N x H x W x 3 array."""
    flat = np.asarray(images, dtype=np.float64).reshape(-1, 3)
    return tuple(float(v) for v in flat.mean(0)), tuple(float(v) for v in flat.std(0))
