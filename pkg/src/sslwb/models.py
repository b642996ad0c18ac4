"""Desk-scale encoders, heads, the MAE decoder and the EMA teacher."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augmentation import MaskSpec

ARCHS = ("conv_residual", "patch_transformer")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    arch: str = "patch_transformer"
    depth: int = 4
    width: int = 128
    patch_size: int = 4
    input_size: int = 32
    heads: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ModelError(f"unknown arch {self.arch!r}")
        if self.depth < 1:
            raise ModelError("depth must be >= 1")
        if self.arch == "patch_transformer":
            if self.input_size % self.patch_size:
                raise ModelError("input_size must be divisible by patch_size")
            if self.width % self.heads:
                raise ModelError("width must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2


@dataclass(frozen=True)
class HeadConfig:
    kind: str
    output_dim: int
    layer_dims: tuple[int, ...] = ()
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in ("projection", "classification", "decoder", "dino"):
            raise ModelError(f"unknown head kind {self.kind!r}")
        if self.output_dim <= 0:
            raise ModelError("output_dim must be positive")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(self.norm1(x)).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        y = (attn.softmax(-1) @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(y)
        return x + self.mlp(self.norm2(x))


def sincos_pos_embed(dim: int, grid: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine position table, grid**2 x dim."""
    ys, xs = torch.meshgrid(torch.arange(grid, dtype=torch.float64), torch.arange(grid, dtype=torch.float64), indexing="ij")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1))
    parts = []
    for coord in (ys.flatten(), xs.flatten()):
        out = coord[:, None] * omega[None]
        parts += [torch.sin(out), torch.cos(out)]
    emb = torch.cat(parts, 1)
    if emb.shape[1] < dim:
        emb = F.pad(emb, (0, dim - emb.shape[1]))
    return emb.float()


class PatchTransformer(nn.Module):
    """ViT-style encoder with a class token; output is the class-token embedding."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.patch_embed = nn.Conv2d(3, d, cfg.patch_size, cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches, d))
        self.blocks = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(d)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(_init_weights)

    @property
    def embed_dim(self) -> int:
        return self.cfg.width

    def pos_for(self, grid: int) -> torch.Tensor:
        if grid == self.cfg.grid:
            return self.pos_embed
        g = self.cfg.grid
        pe = self.pos_embed.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        pe = F.interpolate(pe, size=(grid, grid), mode="bilinear", align_corners=False)
        return pe.permute(0, 2, 3, 1).reshape(1, grid * grid, -1)

    def patchify_embed(self, x: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch_size
        if x.shape[-1] % p or x.shape[-2] % p or x.shape[-1] != x.shape[-2]:
            raise ModelError(f"input {tuple(x.shape[-2:])} not a square multiple of patch size {p}")
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        return tokens + self.pos_for(x.shape[-1] // p)

    def tokens(self, x: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
        """All output tokens (class token first). ``keep``: B x n_visible patch indices."""
        t = self.patchify_embed(x)
        if keep is not None:
            t = torch.gather(t, 1, keep.unsqueeze(-1).expand(-1, -1, t.shape[-1]))
        t = torch.cat([self.cls_token.expand(t.shape[0], -1, -1), t], 1)
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)

    def forward(self, x):
        return self.tokens(x)[:, 0]


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.norm1 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.GroupNorm(min(8, c_out), c_out))

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class ConvResidual(nn.Module):
    """Residual CNN: three stages (full, 1/2, 1/4 resolution) of widths w/2, w, 2w, global average pool.

    GroupNorm instead of BatchNorm keeps every sample's embedding independent
    of the rest of its batch.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        widths = [max(8, w // 2), w, 2 * w]
        self.stem = nn.Sequential(nn.Conv2d(3, widths[0], 3, 1, 1, bias=False), nn.GroupNorm(min(8, widths[0]), widths[0]), nn.ReLU())
        per_stage = [cfg.depth // 3 + (1 if i < cfg.depth % 3 else 0) for i in range(3)]
        blocks = []
        c_in = widths[0]
        for stage, n in enumerate(per_stage):
            for j in range(n):
                stride = 2 if (j == 0 and stage > 0) else 1
                blocks.append(ResidualBlock(c_in, widths[stage], stride))
                c_in = widths[stage]
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = c_in
        self.apply(_init_weights)

    @property
    def embed_dim(self) -> int:
        return self.out_dim

    def forward(self, x):
        if x.shape[-1] != self.cfg.input_size or x.shape[-2] != self.cfg.input_size:
            # local crops are resized to the global input size
            x = F.interpolate(x, size=(self.cfg.input_size,) * 2, mode="bilinear", align_corners=False)
        return self.blocks(self.stem(x)).mean(dim=(2, 3))


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    return PatchTransformer(cfg) if cfg.arch == "patch_transformer" else ConvResidual(cfg)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


class ProjectionHead(nn.Module):
    """Two-layer MLP used as the contrastive projection."""

    def __init__(self, in_dim: int, hidden: int = 128, out_dim: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.net(x)


class DinoHead(nn.Module):
    """MLP, L2-normalized bottleneck, then a row-normalized prototype layer."""

    def __init__(self, in_dim: int, out_dim: int = 256, hidden: int = 256, bottleneck: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, bottleneck))
        self.prototypes = nn.Parameter(torch.empty(out_dim, bottleneck))
        nn.init.trunc_normal_(self.prototypes, std=0.02)

    def forward(self, x):
        z = F.normalize(self.mlp(x), dim=-1)
        return z @ F.normalize(self.prototypes, dim=-1).t()


class ClassificationHead(nn.Module):
    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, num_classes)
        nn.init.trunc_normal_(self.fc.weight, std=0.02)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x):
        return self.fc(x)


def build_head(cfg: HeadConfig, in_dim: int) -> nn.Module:
    if cfg.kind == "projection":
        hidden = cfg.layer_dims[0] if cfg.layer_dims else 128
        return ProjectionHead(in_dim, hidden, cfg.output_dim)
    if cfg.kind == "dino":
        hidden = cfg.layer_dims[0] if cfg.layer_dims else 256
        bottleneck = cfg.layer_dims[1] if len(cfg.layer_dims) > 1 else 64
        return DinoHead(in_dim, cfg.output_dim, hidden, bottleneck)
    if cfg.kind == "classification":
        return ClassificationHead(in_dim, cfg.output_dim)
    raise ModelError("decoder heads are built with MaeDecoder")


class MaeDecoder(nn.Module):
    """Light transformer decoder: visible latents + mask tokens -> full image."""

    def __init__(self, enc: EncoderConfig, dim: int = 64, depth: int = 1, heads: int = 4):
        super().__init__()
        self.enc = enc
        self.embed = nn.Linear(enc.width, dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.register_buffer("pos_embed", sincos_pos_embed(dim, enc.grid).unsqueeze(0), persistent=False)
        self.blocks = nn.ModuleList([Block(dim, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)
        self.pred = nn.Linear(dim, enc.patch_size**2 * 3)
        nn.init.normal_(self.mask_token, std=0.02)
        self.apply(_init_weights)

    def forward(self, latents: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        """``latents``: B x (1 + n_vis) x D (class token first); ``keep``: B x n_vis."""
        b = latents.shape[0]
        n = self.enc.num_patches
        if keep.shape[1] != latents.shape[1] - 1:
            raise ModelError("latent count does not match the visible patch count")
        x = self.embed(latents)
        seq = self.mask_token.expand(b, n, -1).clone()
        seq = seq.scatter(1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x[:, 1:])
        seq = seq + self.pos_embed
        seq = torch.cat([x[:, :1], seq], 1)
        for blk in self.blocks:
            seq = blk(seq)
        patches = self.pred(self.norm(seq))[:, 1:]
        return unpatchify(patches, self.enc.patch_size, self.enc.grid)


def unpatchify(patches: torch.Tensor, p: int, grid: int) -> torch.Tensor:
    """B x N x (p*p*3) -> B x 3 x H x W."""
    b = patches.shape[0]
    x = patches.reshape(b, grid, grid, p, p, 3)
    return torch.einsum("bhwpqc->bchpwq", x).reshape(b, 3, grid * p, grid * p)


# ---------------------------------------------------------------------------
# multi-head models
# ---------------------------------------------------------------------------


class MultiHeadModel(nn.Module):
    """Shared backbone with named parallel heads."""

    def __init__(self, backbone: nn.Module, heads: Mapping[str, nn.Module] | None = None):
        super().__init__()
        self.backbone = backbone
        self.heads = nn.ModuleDict(dict(heads or {}))

    def forward(self, x):
        feats = self.backbone(x)
        return tuple(head(feats) for head in self.heads.values())


def attach_heads(backbone: nn.Module, heads: Mapping[str, HeadConfig], seed: int | None = None) -> MultiHeadModel:
    """Build the named heads on top of ``backbone``; head input size is the backbone's embed_dim."""
    built = {}
    for name, cfg in heads.items():
        if seed is not None:
            torch.manual_seed(derive_seed(seed, f"head/{name}"))
        built[name] = build_head(cfg, backbone.embed_dim)
    return MultiHeadModel(backbone, built)


def replace_heads(model: MultiHeadModel, heads: Mapping[str, HeadConfig | nn.Module], seed: int | None = None) -> MultiHeadModel:
    """Drop every head and attach new ones; backbone parameters are kept as-is."""
    built = {}
    for name, h in heads.items():
        if isinstance(h, nn.Module):
            if hasattr(h, "fc") and h.fc.in_features != model.backbone.embed_dim:
                raise ModelError("head input dim does not match the backbone")
            built[name] = h
        else:
            if seed is not None:
                torch.manual_seed(derive_seed(seed, f"head/{name}"))
            built[name] = build_head(h, model.backbone.embed_dim)
    return MultiHeadModel(model.backbone, built)


def derive_seed(seed: int, tag: str) -> int:
    """Stable sub-seed for a named component so init does not depend on build order."""
    digest = np.random.SeedSequence([seed, *tag.encode()]).generate_state(1)[0]
    return int(digest)


def build_backbone(cfg: EncoderConfig, seed: int) -> nn.Module:
    torch.manual_seed(derive_seed(seed, "backbone"))
    return build_encoder(cfg)


# ---------------------------------------------------------------------------
# functional entry points
# ---------------------------------------------------------------------------


def _check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise ModelError(f"non-finite values in {what}")
    return t


def encode(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Backbone embeddings B x D in inference mode."""
    enc = model.backbone if isinstance(model, MultiHeadModel) else model
    if images.ndim != 4 or images.shape[1] != 3:
        raise ModelError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
    cfg = enc.cfg
    if cfg.arch == "conv_residual" and images.shape[-1] != cfg.input_size:
        raise ModelError(f"conv encoder expects {cfg.input_size}px inputs")
    with torch.no_grad():
        return _check_finite(enc(images), "embeddings")


def mask_indices(mask: MaskSpec | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(keep, masked) index tensors of shape B x n from a MaskSpec or B x N bool mask."""
    if isinstance(mask, MaskSpec):
        m = torch.from_numpy(mask.as_bool()).unsqueeze(0)
    else:
        m = mask
    n_masked = m.sum(1)
    if not bool((n_masked == n_masked[0]).all()):
        raise ModelError("all masks in a batch must hide the same number of patches")
    if int(n_masked[0]) == m.shape[1]:
        raise ModelError("at least one visible patch is required")
    order = torch.argsort(m.to(torch.int8), dim=1, stable=True)
    n_keep = m.shape[1] - int(n_masked[0])
    return order[:, :n_keep], order[:, n_keep:]


def encode_visible(encoder: PatchTransformer, images: torch.Tensor, mask: MaskSpec | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Latent tokens of the visible patches only (class token first) and their indices."""
    if not isinstance(encoder, PatchTransformer):
        raise ModelError("masked encoding requires the patch_transformer architecture")
    keep, _ = mask_indices(mask)
    if keep.shape[0] == 1 and images.shape[0] > 1:
        keep = keep.expand(images.shape[0], -1)
    if keep.shape[1] and int(keep.max()) >= encoder.cfg.num_patches:
        raise ModelError("mask grid does not match the encoder patch grid")
    return encoder.tokens(images, keep), keep


def decode_masked(decoder: MaeDecoder, latents: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    return decoder(latents, keep)


# ---------------------------------------------------------------------------
# EMA teacher
# ---------------------------------------------------------------------------


@dataclass
class TeacherState:
    """Teacher copy of the student, its EMA momentum and the output center."""

    module: nn.Module
    momentum: float = 0.996
    center: torch.Tensor = field(default_factory=lambda: torch.zeros(1))

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ModelError("teacher momentum must be in [0, 1]")
        for p in self.module.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_student(cls, student: nn.Module, momentum: float = 0.996, out_dim: int | None = None) -> "TeacherState":
        teacher = copy.deepcopy(student)
        center = torch.zeros(1, out_dim) if out_dim else torch.zeros(1)
        return cls(teacher, momentum, center)

    @property
    def params(self) -> dict[str, torch.Tensor]:
        return dict(self.module.named_parameters())


def _named(x) -> dict[str, torch.Tensor]:
    if isinstance(x, TeacherState):
        return x.params
    if isinstance(x, nn.Module):
        return dict(x.named_parameters())
    return dict(x)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: nn.Module | Mapping[str, torch.Tensor]) -> TeacherState:
    """In place: t <- m * t + (1 - m) * s for every parameter."""
    t_params = teacher.params
    s_params = _named(student)
    if t_params.keys() != s_params.keys():
        raise ModelError("teacher and student parameter schemas differ")
    m = teacher.momentum
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ModelError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(m).add_(s.detach(), alpha=1.0 - m)
    return teacher


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def patch_tokens_count(cfg: EncoderConfig, size: int | None = None) -> int:
    size = size or cfg.input_size
    return (size // cfg.patch_size) ** 2

