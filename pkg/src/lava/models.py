"""Teacher-student model core: architecture stack, EMA update, schedules, centering."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError


def temperature_softmax(logits: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax of logits / tau along the last dimension, max-subtracted for stability."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    scaled = logits / tau
    scaled = scaled - scaled.max(dim=-1, keepdim=True).values
    return F.softmax(scaled, dim=-1)


class WeightNormLinear(nn.Module):
    """Linear layer reparameterized as direction x trainable magnitude per output row."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        w = torch.empty(out_features, in_features)
        nn.init.kaiming_uniform_(w, a=math.sqrt(5))
        self.direction = nn.Parameter(w)
        self.magnitude = nn.Parameter(w.norm(dim=1).detach().clone())
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None

    def weight(self) -> torch.Tensor:
        norms = self.direction.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return self.direction / norms * self.magnitude.unsqueeze(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight(), self.bias)


class ConvBackbone(nn.Module):
    """Small convolutional encoder mapping an image to a feature vector of dim `out_dim`.

    Global mean pooling makes it size-agnostic so large and small crops share one encoder.
    """

    def __init__(self, in_channels: int, out_dim: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_dim = out_dim
        mid = max(16, out_dim // 2)
        self.conv1 = nn.Conv2d(in_channels, mid, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(mid, out_dim, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(out_dim, out_dim, 3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"backbone expects (N,{self.in_channels},H,W), got {tuple(x.shape)}"
            )
        if x.shape[2] < 4 or x.shape[3] < 4:
            raise ConfigurationError(f"image too small for backbone: {tuple(x.shape)}")
        h = F.gelu(self.conv1(x))
        h = F.gelu(self.conv2(h))
        h = F.gelu(self.conv3(h))
        return h.mean(dim=(2, 3))


@dataclass(frozen=True)
class StackConfig:
    """Dimensions of a model stack. Defaults are desk-scale; paper-scale values are reachable."""

    n_classes: int
    in_channels: int = 3
    feature_dim: int = 64      # |z|
    projection_dim: int = 32   # |q|
    semantic_dim: int = 16     # |m|, must match the embedding table
    ssl_dim: int = 128         # |ssl logits|
    hidden_dim: int = 128

    def validate(self) -> None:
        for name in ("n_classes", "in_channels", "feature_dim", "projection_dim",
                     "semantic_dim", "ssl_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")


class ModelStack(nn.Module):
    """Backbone + projection with four heads (semantic, classifier, self-distillation)."""

    def __init__(self, config: StackConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = ConvBackbone(config.in_channels, config.feature_dim)
        self.projection = nn.Sequential(
            nn.Linear(config.feature_dim, config.hidden_dim),
            nn.GELU(),
            nn.Linear(config.hidden_dim, config.hidden_dim),
            nn.GELU(),
            nn.Linear(config.hidden_dim, config.projection_dim),
        )
        self.semantic_head = nn.Sequential(
            WeightNormLinear(config.projection_dim, config.hidden_dim),
            nn.GELU(),
            WeightNormLinear(config.hidden_dim, config.semantic_dim),
        )
        self.classifier = WeightNormLinear(config.projection_dim, config.n_classes)
        self.ssl_head = WeightNormLinear(config.projection_dim, config.ssl_dim)

    def forward_raw(self, images: torch.Tensor):
        """Return (z, q, m, class_logits, ssl_logits) without temperature sharpening."""
        z = self.backbone(images)
        q = self.projection(z)
        m = self.semantic_head(q)
        logits = self.classifier(q)
        ssl_logits = self.ssl_head(q)
        return z, q, m, logits, ssl_logits

    def forward(self, images: torch.Tensor, tau: float):
        """Return (z, q, m, p, ssl_logits); p is the tau-sharpened classifier softmax."""
        z, q, m, logits, ssl_logits = self.forward_raw(images)
        p = temperature_softmax(logits, tau)
        return z, q, m, p, ssl_logits

    def class_logits(self, q: torch.Tensor) -> torch.Tensor:
        return self.classifier(q)

    def reinit_classifier(self, n_classes: int, generator_seed: int | None = None) -> None:
        """Replace the classifier head for a new target class set."""
        if generator_seed is not None:
            torch.manual_seed(generator_seed)
        dtype = self.classifier.direction.dtype
        self.classifier = WeightNormLinear(self.config.projection_dim, n_classes).to(dtype)
        object.__setattr__(self, "config",
                           StackConfig(**{**self.config.__dict__, "n_classes": n_classes}))


@dataclass
class TeacherStudentPair:
    """Student + EMA teacher over identical architectures, with centering state."""

    student: ModelStack
    teacher: ModelStack
    momentum: float = 0.996
    step: int = 0
    center: torch.Tensor = field(default=None)  # type: ignore[assignment]

    @classmethod
    def create(cls, config: StackConfig, seed: int | None = None,
               momentum: float = 0.996) -> "TeacherStudentPair":
        if seed is not None:
            torch.manual_seed(seed)
        student = ModelStack(config)
        teacher = copy.deepcopy(student)
        teacher.requires_grad_(False)
        center = torch.zeros(config.ssl_dim, dtype=next(student.parameters()).dtype)
        return cls(student=student, teacher=teacher, momentum=momentum, step=0, center=center)

    def to(self, dtype: torch.dtype) -> "TeacherStudentPair":
        self.student.to(dtype)
        self.teacher.to(dtype)
        self.center = self.center.to(dtype)
        return self

    def sync_teacher(self) -> None:
        """Copy student parameters into the teacher (hard sync)."""
        ema_update(self, 0.0)


def ema_update(pair: TeacherStudentPair, gamma: float) -> None:
    """Teacher <- gamma * teacher + (1 - gamma) * student, elementwise over all parameters."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    s_params = list(pair.student.parameters())
    t_params = list(pair.teacher.parameters())
    if len(s_params) != len(t_params) or any(
        sp.shape != tp.shape for sp, tp in zip(s_params, t_params)
    ):
        raise ConfigurationError("student/teacher parameter shapes differ")
    with torch.no_grad():
        for sp, tp in zip(s_params, t_params):
            tp.mul_(gamma).add_(sp, alpha=1.0 - gamma)


def update_center(pair: TeacherStudentPair, teacher_ssl_logits: torch.Tensor,
                  center_momentum: float = 0.9) -> None:
    """Running-mean update of the self-distillation centering vector."""
    if teacher_ssl_logits.dim() != 2 or teacher_ssl_logits.shape[0] == 0:
        raise ValueError("teacher_ssl_logits must be a non-empty (N, c) batch")
    if not 0.0 <= center_momentum < 1.0:
        raise ValueError(f"center_momentum must be in [0, 1), got {center_momentum}")
    if teacher_ssl_logits.shape[1] != pair.center.shape[0]:
        raise ConfigurationError("center dimension mismatch")
    with torch.no_grad():
        batch_mean = teacher_ssl_logits.mean(dim=0).to(pair.center.dtype)
        pair.center = center_momentum * pair.center + (1.0 - center_momentum) * batch_mean


SCHEDULE_KINDS = ("constant", "cosine", "warmup-cosine")


@dataclass(frozen=True)
class Schedule:
    """Scalar schedule over [0, total_steps]."""

    kind: str
    start: float
    end: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be >= 1")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ConfigurationError("warmup_steps out of range")
        if self.kind == "warmup-cosine" and self.warmup_steps == 0:
            raise ConfigurationError("warmup-cosine needs warmup_steps > 0")

    def value(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        if self.kind == "constant":
            return self.start
        warm = self.warmup_steps if self.kind == "warmup-cosine" else 0
        if step < warm:
            return self.start * step / warm
        t = step - warm
        total = self.total_steps - warm
        if total == 0:
            return self.end
        return self.end + (self.start - self.end) * (1.0 + math.cos(math.pi * t / total)) / 2.0
