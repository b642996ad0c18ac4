"""Dataset manifests, stratified splitting and the procedural stand-in corpus."""

from __future__ import annotations

import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"
# class_id of a record without ground-truth annotation
UNLABELED = 0
MANIFEST_HEADER = "#sslwb-manifest\tv1"

# (name, image count, description) for the 23 firearms-related classes, ids 1..23.
FIREARMS_CLASSES: tuple[tuple[str, int, str], ...] = (
    ("Bomb", 1245, "Explosive devices that can cause significant destruction."),
    ("Rifle", 2005, "Long-barreled firearms designed for accurate shooting."),
    ("Revolver", 1005, "Handguns with a rotating cylinder holding ammunition."),
    ("Rocket", 1073, "Projectiles driven by engines, often used as weapons."),
    ("Shotgun", 4381, "Designed for close-range shooting with spread ammunition."),
    ("Knives", 1842, "Sharp tools often used for cutting or as weapons."),
    ("PCP airguns", 1067, "Utilize pre-compressed air to propel pellets or BBs."),
    ("Pills (drugs)", 1061, "Solid dosage forms of medication, sometimes used illicitly."),
    ("Pistols", 3349, "Short-barreled firearms designed for one-handed use."),
    ("Weeds", 683, "Plants with potential narcotic properties."),
    ("Seeds (drugs)", 837, "Related to drug-producing plants."),
    ("Bullet box", 2081, "Containers used for storing firearm ammunition."),
    ("Bullets", 1017, "Projectile components fired from firearms."),
    ("Bow and arrow", 69, "Ancient projectile weapons for hunting and combat."),
    ("Injectable drugs", 155, "Liquid drugs introduced into the body via syringes."),
    ("Powder (drugs)", 525, "Ground or pulverized drug substances."),
    ("Military clothing", 237, "Designed for combat scenarios with protection and camouflage."),
    ("Full-face hoods", 761, "Worn to conceal one's identity in tactical situations."),
    ("Accessories", 207, "Pertaining to weapon-related supplementary items."),
    ("Blades", 115, "Thin-edged tools or weapons, often sharper than knives."),
    ("Gun cases", 470, "Protective storage solutions for firearms."),
    ("Gun storage", 460, "Dedicated spaces or containers for safekeeping weapons."),
    ("Weapon magazines", 355, "Components that store and feed ammunition into firearms."),
)


class ManifestError(ValueError):
    """Raised for malformed manifests or invalid dataset arguments."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    expected_count: int = 0
    description: str = ""

    def __post_init__(self):
        if self.class_id < 1:
            raise ManifestError(f"class_id must be >= 1, got {self.class_id}")
        if self.expected_count < 0:
            raise ManifestError(f"expected_count must be >= 0, got {self.expected_count}")


@dataclass(frozen=True)
class ImageRecord:
    path: str
    class_id: int
    split: str = UNASSIGNED
    width: int = 32
    height: int = 32

    def __post_init__(self):
        if self.split not in SPLITS and self.split != UNASSIGNED:
            raise ManifestError(f"unknown split {self.split!r}")
        if self.width < 8 or self.height < 8:
            raise ManifestError(f"image {self.path} smaller than 8x8")


@dataclass(frozen=True)
class DatasetManifest:
    classes: tuple[ClassSpec, ...]
    records: tuple[ImageRecord, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "records", tuple(self.records))
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate class_id in manifest")
        known = set(ids)
        seen: set[str] = set()
        for r in self.records:
            if r.class_id != UNLABELED and r.class_id not in known:
                raise ManifestError(f"record {r.path} refers to unknown class {r.class_id}")
            if r.path in seen:
                raise ManifestError(f"duplicate path {r.path}")
            seen.add(r.path)

    def __len__(self):
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_ids(self) -> list[int]:
        return sorted(c.class_id for c in self.classes)

    def class_index(self) -> dict[int, int]:
        """Map class_id to a dense 0-based label index."""
        return {cid: i for i, cid in enumerate(self.class_ids)}

    def class_names(self) -> list[str]:
        by_id = {c.class_id: c.name for c in self.classes}
        return [by_id[cid] for cid in self.class_ids]

    def subset(self, split: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]

    @property
    def is_annotated(self) -> bool:
        return all(r.class_id != UNLABELED for r in self.records)

    @property
    def has_splits(self) -> bool:
        return any(r.split != UNASSIGNED for r in self.records)


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15

    def __post_init__(self):
        for name in SPLITS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ManifestError(f"split ratio {name}={v} outside [0, 1]")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ManifestError("split ratios must sum to 1")


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_classes: int
    per_class_counts: tuple[int, ...]
    image_size: int = 32
    seed: int = 0
    rotation_range: float = 180.0
    scale_range: tuple[float, float] = (0.45, 0.85)
    color_jitter: float = 0.15
    backgrounds: tuple[str, ...] = ("noise", "stripes", "checker", "gradient")
    hue_spread: float = 0.08

    def __post_init__(self):
        object.__setattr__(self, "per_class_counts", tuple(int(c) for c in self.per_class_counts))
        if self.num_classes < 2:
            raise ManifestError("num_classes must be >= 2")
        if self.image_size < 16:
            raise ManifestError("image_size must be >= 16")
        if len(self.per_class_counts) != self.num_classes:
            raise ManifestError("per_class_counts length must equal num_classes")
        if any(c < 0 for c in self.per_class_counts):
            raise ManifestError("per_class_counts must be non-negative")
        unknown = set(self.backgrounds) - set(_BACKGROUNDS)
        if unknown or not self.backgrounds:
            raise ManifestError(f"unknown background textures {sorted(unknown)}")

    @classmethod
    def uniform(cls, num_classes: int, per_class: int, **kw) -> "SyntheticCorpusSpec":
        return cls(num_classes=num_classes, per_class_counts=(per_class,) * num_classes, **kw)

    @classmethod
    def table_scaled(cls, scale: float, **kw) -> "SyntheticCorpusSpec":
        """Counts proportional to the 23-class firearms table, divided by ``scale``."""
        counts = tuple(max(1, round_half_up(n / scale)) for _, n, _ in FIREARMS_CLASSES)
        return cls(num_classes=len(FIREARMS_CLASSES), per_class_counts=counts, **kw)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def firearms_classes(with_counts: bool = True) -> tuple[ClassSpec, ...]:
    return tuple(
        ClassSpec(i + 1, name, n if with_counts else 0, desc)
        for i, (name, n, desc) in enumerate(FIREARMS_CLASSES)
    )


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _apportion(counts: dict[int, int], ratios: SplitRatios) -> dict[int, dict[str, int]]:
    """Per-class split sizes.

    Global val/test totals are floor(ratio * N) and train takes the remainder.
    Each class starts at floor(quota) for val and test; a small integer program
    then adjusts those cells so every cell stays within one record of its exact
    quota whenever the global totals allow it, and otherwise minimises the
    overshoot.
    """
    n_total = sum(counts.values())
    cids = sorted(counts)
    m = len(cids)
    q = {s: np.array([getattr(ratios, s) * counts[c] for c in cids]) for s in SPLITS}
    base = {s: np.floor(q[s]) for s in ("val", "test")}
    remaining = {s: math.floor(getattr(ratios, s) * n_total) - int(base[s].sum()) for s in ("val", "test")}
    extra = _place_extras(counts, cids, q, base, remaining)
    cells = {}
    for i, cid in enumerate(cids):
        v = int(base["val"][i] + extra["val"][i])
        t = int(base["test"][i] + extra["test"][i])
        cells[cid] = {"train": counts[cid] - v - t, "val": v, "test": t}
    return cells


def _place_extras(counts, cids, q, base, remaining):
    """Solve for per-class offsets ``up - down`` added to the floored val/test cells.

    A cell within one record of a fractional quota is floor or floor + 1; an
    integral quota also admits quota - 1, hence the ``down`` variables. Train
    cells that cannot stay within one record pay a large slack penalty.
    """
    from scipy.optimize import Bounds, LinearConstraint, milp

    m = len(cids)
    n = np.array([counts[c] for c in cids], dtype=float)
    frac = {s: q[s] - base[s] for s in ("val", "test")}
    free = n - base["val"] - base["test"]
    hi_tr = np.floor(q["train"] + 1 + 1e-9)
    lo_tr = np.ceil(q["train"] - 1 - 1e-9)
    tie = 1e-6 * np.arange(m) / max(m, 1)
    # x = [up_v, up_t, down_v, down_t, over, under], m entries each
    c = np.concatenate([
        1 - 2 * frac["val"] + tie, 1 - 2 * frac["test"] + tie,
        np.ones(m), np.ones(m),
        np.full(m, 1e3), np.full(m, 1e3),
    ])
    eye = np.eye(m)
    zeros = np.zeros((m, m))
    row = np.ones((1, m))
    zrow = np.zeros((1, m))
    a_eq = np.block([[row, zrow, -row, zrow, zrow, zrow], [zrow, row, zrow, -row, zrow, zrow]])
    # train cell = free - up_v - up_t + down_v + down_t
    take = np.hstack([-eye, -eye, eye, eye])
    cons = [
        LinearConstraint(a_eq, [remaining["val"], remaining["test"]], [remaining["val"], remaining["test"]]),
        LinearConstraint(np.hstack([take, -eye, zeros]), -np.inf, hi_tr - free),
        LinearConstraint(np.hstack([take, zeros, eye]), lo_tr - free, np.inf),
        LinearConstraint(np.hstack([take, zeros, zeros]), -free, np.inf),
    ]
    can_drop = {s: ((frac[s] < 1e-9) & (base[s] >= 1)).astype(float) for s in ("val", "test")}
    upper = np.concatenate([np.ones(2 * m), can_drop["val"], can_drop["test"], np.full(2 * m, np.inf)])
    res = milp(c, constraints=cons, integrality=np.ones(6 * m), bounds=Bounds(np.zeros(6 * m), upper))
    if not res.success:
        raise ManifestError(f"cannot apportion splits: {res.message}")
    x = np.round(res.x)
    return {"val": x[:m] - x[2 * m:3 * m], "test": x[m:2 * m] - x[3 * m:4 * m]}


def split_dataset(
    manifest: DatasetManifest,
    ratios: SplitRatios = SplitRatios(),
    seed: int = 0,
    overwrite: bool = False,
) -> DatasetManifest:
    """Stratified random train/val/test assignment, deterministic in ``seed``."""
    if not manifest.records:
        raise ManifestError("cannot split an empty manifest")
    if manifest.has_splits and not overwrite:
        raise ManifestError("manifest already has split assignments (pass overwrite=True)")
    counts = Counter(r.class_id for r in manifest.records)
    cells = _apportion(dict(counts), ratios)
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.class_id, []).append(i)
    assignment: dict[int, str] = {}
    for cid in sorted(by_class):
        idx = np.array(by_class[cid])
        perm = idx[rng.permutation(len(idx))]
        n_train, n_val = cells[cid]["train"], cells[cid]["val"]
        for j, i in enumerate(perm):
            assignment[int(i)] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
    records = tuple(replace(r, split=assignment[i]) for i, r in enumerate(manifest.records))
    return replace(manifest, records=records, seed=seed)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass
class ClassStatistics:
    per_class: dict[int, dict[str, int]]
    names: dict[int, str]
    total: int
    imbalance_ratio: float

    def format(self) -> str:
        cols = [*SPLITS, UNASSIGNED]
        used = [c for c in cols if any(v.get(c, 0) for v in self.per_class.values())]
        lines = ["class_id\tname\t" + "\t".join(used) + "\ttotal"]
        for cid in sorted(self.per_class):
            row = self.per_class[cid]
            lines.append(
                f"{cid}\t{self.names[cid]}\t"
                + "\t".join(str(row.get(c, 0)) for c in used)
                + f"\t{sum(row.values())}"
            )
        lines.append(f"total records: {self.total}")
        lines.append(f"imbalance ratio (max/min class count): {self.imbalance_ratio:.2f}")
        return "\n".join(lines)


def class_statistics(manifest: DatasetManifest) -> ClassStatistics:
    if not manifest.records:
        raise ManifestError("cannot compute statistics of an empty manifest")
    per_class: dict[int, dict[str, int]] = {c.class_id: {} for c in manifest.classes}
    for r in manifest.records:
        row = per_class.setdefault(r.class_id, {})
        row[r.split] = row.get(r.split, 0) + 1
    totals = [sum(v.values()) for cid, v in per_class.items() if cid != UNLABELED and sum(v.values()) > 0]
    return ClassStatistics(
        per_class=per_class,
        names={UNLABELED: "(unlabeled)", **{c.class_id: c.name for c in manifest.classes}},
        total=len(manifest.records),
        imbalance_ratio=max(totals) / min(totals) if totals else float("nan"),
    )


# ---------------------------------------------------------------------------
# manifest files
# ---------------------------------------------------------------------------


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    """Write ``manifest.tsv`` and its sibling ``classes.tsv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{MANIFEST_HEADER}\tseed={manifest.seed}"]
    for r in manifest.records:
        lines.append(f"{r.path}\t{r.class_id}\t{r.split}\t{r.width}\t{r.height}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    class_lines = ["class_id\tname\tdescription"]
    for c in sorted(manifest.classes, key=lambda c: c.class_id):
        class_lines.append(f"{c.class_id}\t{c.name}\t{c.description}")
    classes_path(path).write_text("\n".join(class_lines) + "\n", encoding="utf-8")
    return path


def classes_path(manifest_path: str | os.PathLike) -> Path:
    return Path(manifest_path).with_name("classes.tsv")


def read_class_table(path: str | os.PathLike) -> dict[int, tuple[str, str]]:
    table = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if lineno == 1 or not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ManifestError("expected class_id<TAB>name<TAB>description", lineno)
        try:
            cid = int(parts[0])
        except ValueError:
            raise ManifestError(f"bad class_id {parts[0]!r}", lineno) from None
        table[cid] = (parts[1], parts[2] if len(parts) > 2 else "")
    return table


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from None
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MANIFEST_HEADER):
        raise ManifestError(f"missing header {MANIFEST_HEADER!r}", 1)
    seed = 0
    for token in lines[0].split("\t")[2:]:
        if token.startswith("seed="):
            seed = int(token[5:])
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"expected 5 tab-separated fields, got {len(parts)}", lineno)
        p, cid, split, w, h = parts
        try:
            records.append(ImageRecord(p, int(cid), split, int(w), int(h)))
        except ManifestError as e:
            raise ManifestError(str(e), lineno) from None
        except ValueError:
            raise ManifestError(f"non-integer class_id/width/height in {line!r}", lineno) from None
    table = read_class_table(classes_path(path)) if classes_path(path).exists() else {}
    counts = Counter(r.class_id for r in records if r.class_id != UNLABELED)
    ids = sorted(set(table) | set(counts))
    classes = tuple(
        ClassSpec(cid, table.get(cid, (f"class_{cid}", ""))[0], counts.get(cid, 0), table.get(cid, ("", ""))[1])
        for cid in ids
    )
    return DatasetManifest(classes, tuple(records), seed)


def load_images(
    manifest: DatasetManifest,
    root: str | os.PathLike,
    split: str | None = None,
    size: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Load records as float32 N x H x W x 3 in [0, 1] plus dense label indices (-1 = unlabeled)."""
    root = Path(root)
    records = manifest.records if split is None else manifest.subset(split)
    index = manifest.class_index()
    images = []
    for r in records:
        with Image.open(root / r.path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            images.append(np.asarray(im, dtype=np.float32) / 255.0)
    labels = np.array([index.get(r.class_id, -1) for r in records], dtype=np.int64)
    if not images:
        return np.zeros((0, size or 0, size or 0, 3), np.float32), labels
    return np.stack(images), labels


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_BACKGROUNDS = ("noise", "stripes", "checker", "gradient", "flat")
_STROKES = ("filled", "outline", "striped")


@dataclass(frozen=True)
class ShapeFamily:
    """Class-defining parameters of a procedural shape."""

    vertices: int
    stroke: str
    hue: float
    star: bool = False
    aspect: float = 1.0
    extras: tuple[str, ...] = field(default_factory=tuple)


def shape_family(class_index: int, num_classes: int) -> ShapeFamily:
    """Deterministic shape family of a class: polygon count, stroke pattern, hue band."""
    vertices = 3 + class_index % 5
    stroke = _STROKES[(class_index // 5) % 3]
    star = (class_index // 15) % 2 == 1
    aspect = (1.0, 0.55)[(class_index // 30) % 2]
    # golden-ratio hue sequence keeps neighbouring class ids apart in hue
    hue = (class_index * 0.618033988749895) % 1.0
    return ShapeFamily(vertices, stroke, hue, star, aspect)


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    import colorsys

    return colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0.0), 1.0), min(max(v, 0.0), 1.0))


def _background(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.1, 0.9, size=3)
    alt = rng.uniform(0.1, 0.9, size=3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if kind == "noise":
        coarse = rng.uniform(0, 1, size=(size // 4 + 1, size // 4 + 1))
        t = np.kron(coarse, np.ones((4, 4)))[:size, :size]
    elif kind == "stripes":
        angle = rng.uniform(0, np.pi)
        freq = rng.uniform(3, 8)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)))
    elif kind == "checker":
        cells = int(rng.integers(2, 6))
        t = ((np.floor(xx * cells) + np.floor(yy * cells)) % 2).astype(np.float64)
    elif kind == "gradient":
        angle = rng.uniform(0, 2 * np.pi)
        t = (xx - 0.5) * np.cos(angle) + (yy - 0.5) * np.sin(angle) + 0.5
    else:
        t = np.zeros((size, size))
    t = np.clip(t, 0, 1)[..., None]
    return (1 - t) * base + t * alt


def _polygon(fam: ShapeFamily, cx: float, cy: float, radius: float, angle: float) -> list[tuple[float, float]]:
    pts = []
    n = fam.vertices * (2 if fam.star else 1)
    for k in range(n):
        r = radius * (0.45 if fam.star and k % 2 else 1.0)
        a = angle + 2 * np.pi * k / n
        x, y = r * np.cos(a), r * fam.aspect * np.sin(a)
        pts.append((cx + x * np.cos(angle) - y * np.sin(angle), cy + x * np.sin(angle) + y * np.cos(angle)))
    return pts


def render_sample(spec: SyntheticCorpusSpec, class_index: int, image_index: int) -> np.ndarray:
    """Render one uint8 H x W x 3 image from its own (seed, class, image) RNG stream."""
    rng = np.random.default_rng([spec.seed, class_index, image_index])
    fam = shape_family(class_index, spec.num_classes)
    size = spec.image_size
    ss = 4  # supersampling factor for antialiased edges
    bg = _background(str(rng.choice(spec.backgrounds)), size, rng)
    canvas = Image.fromarray((bg * 255).round().astype(np.uint8)).resize((size * ss, size * ss), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)

    hue = fam.hue + rng.uniform(-spec.hue_spread, spec.hue_spread)
    sat = 0.75 + rng.uniform(-spec.color_jitter, spec.color_jitter)
    val = 0.85 + rng.uniform(-spec.color_jitter, spec.color_jitter)
    color = tuple(int(round(255 * c)) for c in _hsv_to_rgb(hue, sat, val))
    dark = tuple(int(c * 0.3) for c in color)

    scale = rng.uniform(*spec.scale_range)
    radius = 0.5 * size * ss * scale
    margin = radius * 0.9
    cx = rng.uniform(margin, size * ss - margin) if size * ss > 2 * margin else size * ss / 2
    cy = rng.uniform(margin, size * ss - margin) if size * ss > 2 * margin else size * ss / 2
    angle = np.deg2rad(rng.uniform(-spec.rotation_range, spec.rotation_range))
    pts = _polygon(fam, cx, cy, radius, angle)
    width = max(2, int(radius * 0.18))
    if fam.stroke == "filled":
        draw.polygon(pts, fill=color, outline=dark)
    elif fam.stroke == "outline":
        draw.line(pts + [pts[0]], fill=color, width=width, joint="curve")
    else:
        draw.polygon(pts, fill=color)
        inner = _polygon(fam, cx, cy, radius * 0.55, angle)
        draw.polygon(inner, fill=dark)
        inner2 = _polygon(fam, cx, cy, radius * 0.25, angle)
        draw.polygon(inner2, fill=color)
    canvas = canvas.resize((size, size), Image.BOX)
    return np.asarray(canvas, dtype=np.uint8)


def generate_synthetic_corpus(
    spec: SyntheticCorpusSpec,
    out_dir: str | os.PathLike,
    class_names: Sequence[str] | None = None,
    write_images: bool = True,
) -> DatasetManifest:
    """Render the corpus under ``out_dir`` and write ``manifest.tsv`` + ``classes.tsv``.

    Records are unassigned; call :func:`split_dataset` afterwards.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ManifestError(f"cannot create output directory {out}: {e}") from None
    if not os.access(out, os.W_OK):
        raise ManifestError(f"output directory {out} is not writable")
    if class_names is None:
        if spec.num_classes == len(FIREARMS_CLASSES):
            class_names = [name for name, _, _ in FIREARMS_CLASSES]
        else:
            class_names = [f"shape_{i + 1:02d}" for i in range(spec.num_classes)]
    classes = []
    records = []
    for ci, count in enumerate(spec.per_class_counts):
        fam = shape_family(ci, spec.num_classes)
        desc = f"{fam.vertices}-gon {'star ' if fam.star else ''}{fam.stroke}, hue {fam.hue:.3f}"
        classes.append(ClassSpec(ci + 1, class_names[ci], count, desc))
        for j in range(count):
            rel = f"images/c{ci + 1:02d}/{j:05d}.png"
            if write_images:
                (out / rel).parent.mkdir(parents=True, exist_ok=True)
                pixels = render_sample(spec, ci, j)
                Image.fromarray(pixels).save(out / rel, format="PNG", optimize=False)
            records.append(ImageRecord(rel, ci + 1, UNASSIGNED, spec.image_size, spec.image_size))
    manifest = DatasetManifest(tuple(classes), tuple(records), spec.seed)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest


def manifest_from_counts(counts: Iterable[int], size: int = 32, names: Sequence[str] | None = None) -> DatasetManifest:
    """Image-less manifest with the given per-class counts (for arithmetic and tests)."""
    counts = list(counts)
    classes = tuple(
        ClassSpec(i + 1, names[i] if names else f"class_{i + 1}", n) for i, n in enumerate(counts)
    )
    records = tuple(
        ImageRecord(f"c{i + 1:02d}/{j:05d}.png", i + 1, UNASSIGNED, size, size)
        for i, n in enumerate(counts)
        for j in range(n)
    )
    return DatasetManifest(classes, records)
