"""Multi-crop view generation: random resized crops plus spatial augmentations.

Pure functions of (image, config, seed); every view carries metadata describing
exactly how it was produced.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
JITTER_STRENGTH = 0.4
JITTER_PROB = 0.8
BLUR_PROB = 0.5
BLUR_SIGMA = (0.1, 1.0)
SOLARIZE_THRESHOLD = 0.5
SOLARIZE_PROB = 0.2


@dataclass(frozen=True)
class CropConfig:
    n_small_student: int = 6
    n_small_teacher: int = 0
    n_large_student: int = 2
    n_large_teacher: int = 2
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    large_out_size: int = 32
    small_out_size: int = 16
    horizontal_flip: bool = True
    color_jitter: bool = True
    blur: bool = True
    solarization: bool = True

    def validate(self) -> None:
        for lo, hi in (self.global_scale, self.local_scale):
            if not (0.0 <= lo < hi <= 1.0):
                raise ConfigurationError(f"invalid scale range ({lo}, {hi})")
        counts = (self.n_small_student, self.n_small_teacher,
                  self.n_large_student, self.n_large_teacher)
        if any(c < 0 for c in counts):
            raise ConfigurationError("crop counts must be >= 0")
        if sum(counts) == 0:
            raise ConfigurationError("at least one crop must be requested")
        if self.large_out_size < 1 or self.small_out_size < 1:
            raise ConfigurationError("output sizes must be >= 1")


@dataclass(frozen=True)
class ViewMeta:
    role: str          # "student" | "teacher"
    size_class: str    # "large" | "small"
    index: int         # index within (role, size_class)
    rect: tuple[int, int, int, int]   # (x0, y0, w, h) in source pixels
    scale: float       # actual area fraction of the crop
    flipped: bool
    jitter: tuple[float, float, float] | None   # brightness, contrast, saturation
    blur_sigma: float | None
    solarized: bool
    seed: int


@dataclass
class ViewSet:
    student_views: list[np.ndarray] = field(default_factory=list)
    teacher_views: list[np.ndarray] = field(default_factory=list)
    student_meta: list[ViewMeta] = field(default_factory=list)
    teacher_meta: list[ViewMeta] = field(default_factory=list)


def _sub_rng(seed: int, role: str, size_class: str, index: int) -> np.random.Generator:
    role_code = 0 if role == "student" else 1
    size_code = 0 if size_class == "large" else 1
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFF, role_code, size_code, index]))


def _sample_rect(h: int, w: int, scale_range: tuple[float, float],
                 rng: np.random.Generator) -> tuple[int, int, int, int, float]:
    """Sample (x0, y0, cw, ch, fraction) with fraction inside scale_range."""
    area = float(h * w)
    lo, hi = scale_range
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1])))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if cw < 1 or ch < 1 or cw > w or ch > h:
            continue
        frac = cw * ch / area
        if not (lo <= frac <= hi):
            continue
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        return x0, y0, cw, ch, frac
    # Center-crop fallback: square side chosen inside the scale range.
    side = int(math.floor(math.sqrt(area * hi)))
    side = max(1, min(side, h, w))
    while side > 1 and side * side / area > hi:
        side -= 1
    frac = side * side / area
    x0 = (w - side) // 2
    y0 = (h - side) // 2
    return x0, y0, side, side, frac


def _resize(img: np.ndarray, out_size: int) -> np.ndarray:
    if img.shape[0] == out_size and img.shape[1] == out_size:
        return img
    channels = [
        np.asarray(
            Image.fromarray(img[:, :, c].astype(np.float32), mode="F").resize(
                (out_size, out_size), Image.BILINEAR),
            dtype=np.float32)
        for c in range(img.shape[2])
    ]
    return np.stack(channels, axis=-1)


def _apply_jitter(img: np.ndarray, factors: tuple[float, float, float]) -> np.ndarray:
    b, c, s = factors
    img = img * b
    gray_mean = float(img.mean())
    img = gray_mean + (img - gray_mean) * c
    luma = img.mean(axis=2, keepdims=True)
    img = luma + (img - luma) * s
    return img


def _make_view(image: np.ndarray, role: str, size_class: str, index: int,
               config: CropConfig, base_seed: int) -> tuple[np.ndarray, ViewMeta]:
    rng = _sub_rng(base_seed, role, size_class, index)
    scale_range = config.global_scale if size_class == "large" else config.local_scale
    out_size = config.large_out_size if size_class == "large" else config.small_out_size
    h, w = image.shape[:2]
    x0, y0, cw, ch, frac = _sample_rect(h, w, scale_range, rng)
    view = image[y0:y0 + ch, x0:x0 + cw].astype(np.float32)
    view = _resize(view, out_size)

    flipped = False
    if config.horizontal_flip and rng.random() < 0.5:
        view = view[:, ::-1].copy()
        flipped = True

    jitter = None
    if config.color_jitter and rng.random() < JITTER_PROB:
        jitter = tuple(rng.uniform(1.0 - JITTER_STRENGTH, 1.0 + JITTER_STRENGTH, 3))
        view = _apply_jitter(view, jitter)

    blur_sigma = None
    if config.blur and rng.random() < BLUR_PROB:
        blur_sigma = float(rng.uniform(*BLUR_SIGMA))
        view = np.stack([gaussian_filter(view[:, :, c], blur_sigma)
                         for c in range(view.shape[2])], axis=-1)

    solarized = False
    if config.solarization and size_class == "large" and index == 0 \
            and rng.random() < SOLARIZE_PROB:
        view = np.where(view >= SOLARIZE_THRESHOLD, 1.0 - view, view)
        solarized = True

    view = np.clip(view, 0.0, 1.0).astype(np.float32)
    meta = ViewMeta(role=role, size_class=size_class, index=index,
                    rect=(x0, y0, cw, ch), scale=frac, flipped=flipped,
                    jitter=jitter, blur_sigma=blur_sigma, solarized=solarized,
                    seed=int(base_seed))
    return view, meta


def generate_views(image: np.ndarray, config: CropConfig, rng_seed: int) -> ViewSet:
    """Generate the per-image student/teacher view sets. Deterministic per seed."""
    config.validate()
    if image.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {image.shape}")
    h, w = image.shape[:2]
    if h < config.small_out_size or w < config.small_out_size:
        raise ValueError(
            f"image {h}x{w} smaller than small_out_size {config.small_out_size}")

    vs = ViewSet()
    plan = [
        ("student", "large", config.n_large_student),
        ("student", "small", config.n_small_student),
        ("teacher", "large", config.n_large_teacher),
        ("teacher", "small", config.n_small_teacher),
    ]
    for role, size_class, count in plan:
        for i in range(count):
            view, meta = _make_view(image, role, size_class, i, config, rng_seed)
            if role == "student":
                vs.student_views.append(view)
                vs.student_meta.append(meta)
            else:
                vs.teacher_views.append(view)
                vs.teacher_meta.append(meta)
    return vs


def write_view_metadata_csv(viewsets: list[ViewSet], path: str) -> None:
    """Dump crop metadata for analysis tooling."""
    fields = ["image_index", "role", "size_class", "index", "x0", "y0", "w", "h",
              "scale", "flipped", "jitter", "blur_sigma", "solarized", "seed"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for img_idx, vs in enumerate(viewsets):
            for meta in vs.student_meta + vs.teacher_meta:
                d = asdict(meta)
                writer.writerow([
                    img_idx, d["role"], d["size_class"], d["index"],
                    *d["rect"], f"{d['scale']:.8g}", d["flipped"],
                    "" if d["jitter"] is None else "/".join(f"{v:.6g}" for v in d["jitter"]),
                    "" if d["blur_sigma"] is None else f"{d['blur_sigma']:.6g}",
                    d["solarized"], d["seed"],
                ])
