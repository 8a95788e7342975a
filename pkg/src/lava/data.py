"""Dataset ingestion, split management, and the procedural composite-image generator.

Composites place one or two class glyphs on a noisy canvas so that local crops
of a dual-object image can land on either object — the instrument behind the
multi-crop disagreement analyses.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DataError, ConfigurationError
from .semantics import normalize_name

SPLITS = ("labelled", "unlabelled", "validation", "test")

GLYPH_NAMES = ("disc", "ring", "square", "frame", "diamond", "plus",
               "cross", "triangle", "hstripes", "vstripes")

# Distinct hues, one per glyph prototype.
GLYPH_COLORS = np.array([
    [0.95, 0.20, 0.20], [0.20, 0.90, 0.25], [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.15], [0.85, 0.20, 0.90], [0.15, 0.90, 0.90],
    [0.95, 0.55, 0.15], [0.55, 0.95, 0.55], [0.60, 0.40, 0.95],
    [0.95, 0.60, 0.75],
])


@dataclass
class ManifestItem:
    """One dataset row. The true class is hidden behind `label` for unlabelled items."""

    key: str
    split: str
    _true_class: str
    path: str | None = None
    image: np.ndarray | None = None
    is_dual: bool = False
    secondary_class: str | None = None

    @property
    def label(self) -> str | None:
        """Training-facing label: None for unlabelled items."""
        if self.split == "unlabelled":
            return None
        return self._true_class


@dataclass
class DatasetManifest:
    root: str | None
    items: list[ManifestItem]
    classes: list[str]

    def __post_init__(self):
        known = set(self.classes)
        for item in self.items:
            if item.split not in SPLITS:
                raise DataError(f"unknown split {item.split!r} for {item.key}")
            if item._true_class not in known:
                raise DataError(f"unknown class {item._true_class!r} for {item.key}")

    def by_split(self, split: str) -> list[ManifestItem]:
        return [it for it in self.items if it.split == split]

    def class_index(self, name: str) -> int:
        return self.classes.index(name)

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for it in self.items:
            out[it.split] += 1
        return out


def item_image(item: ManifestItem, root: str | None = None) -> np.ndarray:
    """Load the item's image as float32 (H, W, 3) in [0, 1]."""
    if item.image is not None:
        return item.image
    path = item.path
    if path is None:
        raise DataError(f"item {item.key} has neither inline image nor path")
    if root is not None and not os.path.isabs(path):
        path = os.path.join(root, path)
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr


def make_ssl_split(manifest: DatasetManifest, shots_per_class: int,
                   seed: int) -> DatasetManifest:
    """Keep exactly `shots_per_class` labelled items per class; rest become unlabelled.

    Validation/test items pass through untouched. Deterministic per seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x551]))
    pool = [it for it in manifest.items if it.split in ("labelled", "unlabelled")]
    passthrough = [it for it in manifest.items if it.split not in ("labelled", "unlabelled")]
    new_items: list[ManifestItem] = []
    chosen_keys: set[str] = set()
    for cls in manifest.classes:
        members = [it for it in pool if it._true_class == cls]
        if len(members) < shots_per_class:
            raise DataError(
                f"class {cls!r} has {len(members)} items, needs {shots_per_class}")
        idx = rng.choice(len(members), size=shots_per_class, replace=False)
        chosen_keys.update(members[i].key for i in idx)
    for it in pool:
        split = "labelled" if it.key in chosen_keys else "unlabelled"
        new_items.append(ManifestItem(key=it.key, split=split, _true_class=it._true_class,
                                      path=it.path, image=it.image, is_dual=it.is_dual,
                                      secondary_class=it.secondary_class))
    return DatasetManifest(root=manifest.root, items=new_items + list(passthrough),
                           classes=list(manifest.classes))


@dataclass(frozen=True)
class CompositeSpec:
    class_names: tuple[str, ...] = GLYPH_NAMES
    canvas_size: int = 32
    glyph_size: int = 12
    objects_per_image: int = 1          # 1 or 2
    dual_fraction: float = 1.0          # used when objects_per_image == 2
    placement_jitter: int = 3
    noise_level: float = 0.08
    domain: str = "base"                # "base" | "shifted"
    seed: int = 0

    def validate(self) -> None:
        if self.objects_per_image not in (1, 2):
            raise ConfigurationError("objects_per_image must be 1 or 2")
        if self.objects_per_image == 2 and len(self.class_names) < 2:
            raise ConfigurationError("need >= 2 classes for dual-object composites")
        if self.objects_per_image == 2 and self.canvas_size < 2 * self.glyph_size:
            raise ConfigurationError(
                "canvas must be at least 2x glyph size for dual-object composites")
        if len(self.class_names) > len(GLYPH_NAMES):
            raise ConfigurationError(f"at most {len(GLYPH_NAMES)} glyph classes supported")
        if self.domain not in ("base", "shifted"):
            raise ConfigurationError(f"unknown domain {self.domain!r}")


def _glyph_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one glyph prototype with per-item deformation, as a [0,1] mask."""
    scale = rng.uniform(0.85, 1.15)
    angle = rng.uniform(-0.35, 0.35)
    yy, xx = np.mgrid[0:size, 0:size]
    cy = cx = (size - 1) / 2.0
    y = (yy - cy) / (size / 2.0) / scale
    x = (xx - cx) / (size / 2.0) / scale
    xr = x * np.cos(angle) - y * np.sin(angle)
    yr = x * np.sin(angle) + y * np.cos(angle)
    r = np.sqrt(xr ** 2 + yr ** 2)
    if kind == "disc":
        mask = r <= 0.8
    elif kind == "ring":
        mask = (r <= 0.85) & (r >= 0.45)
    elif kind == "square":
        mask = (np.abs(xr) <= 0.7) & (np.abs(yr) <= 0.7)
    elif kind == "frame":
        outer = (np.abs(xr) <= 0.8) & (np.abs(yr) <= 0.8)
        inner = (np.abs(xr) <= 0.45) & (np.abs(yr) <= 0.45)
        mask = outer & ~inner
    elif kind == "diamond":
        mask = (np.abs(xr) + np.abs(yr)) <= 0.9
    elif kind == "plus":
        mask = ((np.abs(xr) <= 0.25) & (np.abs(yr) <= 0.85)) | \
               ((np.abs(yr) <= 0.25) & (np.abs(xr) <= 0.85))
    elif kind == "cross":
        mask = (np.abs(xr - yr) <= 0.3) | (np.abs(xr + yr) <= 0.3)
        mask &= (np.abs(xr) <= 0.85) & (np.abs(yr) <= 0.85)
    elif kind == "triangle":
        mask = (yr >= -0.7) & (np.abs(xr) <= (yr + 0.7) * 0.6) & (yr <= 0.75)
    elif kind == "hstripes":
        mask = (np.sin(yr * np.pi * 2.5) > 0.1) & (r <= 0.9)
    elif kind == "vstripes":
        mask = (np.sin(xr * np.pi * 2.5) > 0.1) & (r <= 0.9)
    else:
        raise ConfigurationError(f"unknown glyph kind {kind!r}")
    return mask.astype(np.float32)


def _render_composite(spec: CompositeSpec, class_idx: int, second_idx: int | None,
                      rng: np.random.Generator) -> np.ndarray:
    n = spec.canvas_size
    g = spec.glyph_size
    shifted = spec.domain == "shifted"
    background = 0.85 if shifted else 0.08
    img = np.full((n, n, 3), background, dtype=np.float32)
    if spec.noise_level > 0:
        img += spec.noise_level * rng.uniform(-1.0, 1.0, size=(n, n, 3)).astype(np.float32)

    if second_idx is None:
        anchors = [((n - g) // 2, (n - g) // 2)]
        indices = [class_idx]
    else:
        # Opposite halves keep the two glyphs disjoint.
        left = (rng.integers(0, n - g + 1), rng.integers(0, n // 2 - g + 1))
        right = (rng.integers(0, n - g + 1), rng.integers(n // 2, n - g + 1))
        anchors = [tuple(int(v) for v in left), tuple(int(v) for v in right)]
        if rng.random() < 0.5:
            anchors.reverse()
        indices = [class_idx, second_idx]

    for (ay, ax), idx in zip(anchors, indices):
        jitter = spec.placement_jitter
        if second_idx is None and jitter > 0:
            ay = int(np.clip(ay + rng.integers(-jitter, jitter + 1), 0, n - g))
            ax = int(np.clip(ax + rng.integers(-jitter, jitter + 1), 0, n - g))
        mask = _glyph_mask(GLYPH_NAMES[idx], g, rng)
        color = GLYPH_COLORS[idx].astype(np.float32)
        if shifted:
            color = 0.9 - 0.65 * color  # darker, inverted-ish palette on light ground
        intensity = rng.uniform(0.85, 1.0)
        patch = img[ay:ay + g, ax:ax + g]
        patch[:] = patch * (1 - mask[..., None]) + (color * intensity) * mask[..., None]
    return np.clip(img, 0.0, 1.0)


def generate_composite_dataset(spec: CompositeSpec, n_per_class: int) -> DatasetManifest:
    """Deterministic composite dataset; class histogram is exactly uniform."""
    spec.validate()
    classes = [normalize_name(c) for c in spec.class_names]
    items: list[ManifestItem] = []
    for ci, cls in enumerate(classes):
        for j in range(n_per_class):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(spec.seed) & 0xFFFFFFFF, ci, j]))
            dual = spec.objects_per_image == 2 and rng.random() < spec.dual_fraction
            second = None
            if dual:
                others = [k for k in range(len(classes)) if k != ci]
                second = int(others[int(rng.integers(0, len(others)))])
            img = _render_composite(spec, ci, second, rng)
            items.append(ManifestItem(
                key=f"{cls}/{cls}_{j:05d}.png", split="labelled", _true_class=cls,
                image=img, is_dual=dual,
                secondary_class=classes[second] if second is not None else None))
    return DatasetManifest(root=None, items=items, classes=classes)


def save_dataset(manifest: DatasetManifest, root: str) -> None:
    """Write images as PNG under root/<class>/ plus manifest.tsv (and dual metadata)."""
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "manifest.tsv"), "w", encoding="utf-8") as mf, \
            open(os.path.join(root, "composite_meta.tsv"), "w", encoding="utf-8") as xf:
        mf.write("relative_path\tclass\tsplit\n")
        xf.write("relative_path\tis_dual\tsecondary_class\n")
        for item in manifest.items:
            rel = item.key
            img = item_image(item, manifest.root)
            out_path = os.path.join(root, rel)
            os.makedirs(os.path.dirname(out_path), exist_ok=True)
            Image.fromarray((np.clip(img, 0, 1) * 255.0 + 0.5).astype(np.uint8)).save(out_path)
            mf.write(f"{rel}\t{item._true_class}\t{item.split}\n")
            xf.write(f"{rel}\t{int(item.is_dual)}\t{item.secondary_class or ''}\n")


def load_dataset(root: str) -> DatasetManifest:
    """Read manifest.tsv with columns (relative_path, class, split)."""
    manifest_path = os.path.join(root, "manifest.tsv")
    if not os.path.exists(manifest_path):
        raise DataError(f"missing manifest file {manifest_path}")
    dual_info: dict[str, tuple[bool, str | None]] = {}
    meta_path = os.path.join(root, "composite_meta.tsv")
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as f:
            next(f)
            for line in f:
                rel, is_dual, second = line.rstrip("\n").split("\t")
                dual_info[rel] = (is_dual == "1", second or None)

    items: list[ManifestItem] = []
    classes: list[str] = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if header != ["relative_path", "class", "split"]:
            raise DataError(f"{manifest_path}: bad header {header}")
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{manifest_path}:{lineno}: expected 3 columns")
            rel, cls, split = parts
            cls = normalize_name(cls)
            if split not in SPLITS:
                raise DataError(f"{manifest_path}:{lineno}: unknown split {split!r}")
            full = os.path.join(root, rel)
            if not os.path.exists(full):
                raise DataError(f"{manifest_path}:{lineno}: missing image file {rel!r}")
            if cls not in classes:
                classes.append(cls)
            dual, second = dual_info.get(rel, (False, None))
            items.append(ManifestItem(key=rel, split=split, _true_class=cls, path=full,
                                      is_dual=dual, secondary_class=second))
    if not items:
        raise DataError(f"{manifest_path}: no rows")
    return DatasetManifest(root=root, items=items, classes=classes)
