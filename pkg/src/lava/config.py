"""Run configuration: per-stage defaults plus a line-oriented "key = value" file
format with dotted keys and '#' comments. Unknown keys are hard errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .errors import ConfigurationError
from .losses import AggregationStrategy, LossWeights
from .views import CropConfig

STAGES = ("synth", "pretrain", "adapt", "transfer", "eval", "episodes", "analyze")

# Stage-specific defaults from the reference hyperparameter tables.
STAGE_GAMMA = {"pretrain": 0.996, "adapt": 0.95, "transfer": 0.99}
STAGE_TAU_T = {"pretrain": 0.07, "adapt": 0.07, "transfer": 0.04}


@dataclass
class ModelConfig:
    in_channels: int = 3
    feature_dim: int = 64
    projection_dim: int = 32
    semantic_dim: int = 16
    ssl_dim: int = 128
    hidden_dim: int = 128


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    warmup_epochs: int = 1
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.4
    grad_clip: float = 3.0
    tau_s: float = 0.1
    tau_t: float = 0.04
    warmup_teacher_temp: bool = False
    teacher_temp_start: float = 0.04
    teacher_temp_warmup_epochs: int = 2
    momentum_start: float = 0.99
    momentum_end: float = 1.0
    center_momentum: float = 0.9
    max_steps: int = 0           # 0 = run the full epoch budget; >0 = stop early
    phase2_epochs: int = 5       # pretrain: semantic-head fitting on frozen features
    labelled_per_batch: int = 64


@dataclass
class LossConfig:
    w_ssl: float = 0.0
    w_sem: float = 1.0
    w_pl: float = 1.0
    w_cls: float = 0.0
    eta: float = 0.4
    strategy: str = "pair-wise average soft"

    def weights(self) -> LossWeights:
        return LossWeights(self.w_ssl, self.w_sem, self.w_pl, self.w_cls)

    def aggregation(self) -> AggregationStrategy:
        try:
            return AggregationStrategy.from_name(self.strategy)
        except ValueError as e:
            raise ConfigurationError(str(e)) from e


@dataclass
class EvalConfig:
    knn_k: int = 20
    n_episodes: int = 600
    ci_multiplier: float = 1.96
    ways_min: int = 2
    ways_max: int = 5
    shots_min: int = 1
    shots_max: int = 10
    n_query: int = 5
    fsl_epochs: int = 30
    episode_split: str = "test"


@dataclass
class DataConfig:
    root: str = ""            # target dataset directory
    source_root: str = ""     # source dataset directory (pretrain / analyze)
    embeddings: str = ""      # embedding table path
    shots_per_class: int = 0  # 0 = keep manifest splits as-is


@dataclass
class SynthConfig:
    n_classes: int = 10
    n_per_class: int = 50
    dual_fraction: float = 0.0
    noise_level: float = 0.08
    domain: str = "base"
    embedding_dim: int = 16
    validation_fraction: float = 0.2


@dataclass
class RunConfig:
    stage: str
    seed: int = 0
    out_dir: str = "out"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    crops: CropConfig = field(default_factory=CropConfig)

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.train.tau_s <= 0 or self.train.tau_t <= 0:
            raise ConfigurationError("temperatures must be positive")
        self.crops.validate()


def default_config(stage: str) -> RunConfig:
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage!r}")
    cfg = RunConfig(stage=stage)
    if stage == "pretrain":
        cfg.train.momentum_start = STAGE_GAMMA["pretrain"]
        cfg.train.tau_t = STAGE_TAU_T["pretrain"]
        cfg.train.warmup_teacher_temp = True
        cfg.train.teacher_temp_start = 0.04
        cfg.loss = LossConfig(w_ssl=1.0, w_sem=0.0, w_pl=0.0, w_cls=0.0)
        cfg.crops = CropConfig(n_small_student=8)
    elif stage == "adapt":
        cfg.train.momentum_start = STAGE_GAMMA["adapt"]
        cfg.train.tau_t = STAGE_TAU_T["adapt"]
        cfg.train.epochs = 50
        cfg.loss = LossConfig(w_ssl=1.0, w_sem=0.0, w_pl=0.0, w_cls=0.0)
        cfg.crops = CropConfig(n_small_student=8)
    elif stage == "transfer":
        cfg.train.momentum_start = STAGE_GAMMA["transfer"]
        cfg.train.tau_t = STAGE_TAU_T["transfer"]
        cfg.train.warmup_teacher_temp = False
        cfg.loss = LossConfig(w_ssl=0.0, w_sem=1.0, w_pl=1.0, w_cls=0.0)
        cfg.crops = CropConfig()  # 6 small student / 0 small teacher / 2 + 2 large
    return cfg


_CROP_KEYS = {
    "n_small_student": int, "n_small_teacher": int,
    "n_large_student": int, "n_large_teacher": int,
    "large_out_size": int, "small_out_size": int,
    "horizontal_flip": "bool", "color_jitter": "bool",
    "blur": "bool", "solarization": "bool",
    "global_scale_lo": float, "global_scale_hi": float,
    "local_scale_lo": float, "local_scale_hi": float,
}


def _cast(raw: str, kind):
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"bad boolean {raw!r}")
    try:
        return kind(raw)
    except ValueError as e:
        raise ConfigurationError(f"bad value {raw!r}") from e


def _section_schema(obj) -> dict[str, type]:
    out = {}
    for name, value in asdict(obj).items():
        if isinstance(value, bool):
            out[name] = "bool"
        elif isinstance(value, int):
            out[name] = int
        elif isinstance(value, float):
            out[name] = float
        else:
            out[name] = str
    return out


def apply_key(cfg: RunConfig, key: str, raw: str) -> None:
    if key == "seed":
        cfg.seed = _cast(raw, int)
        return
    if key == "out_dir":
        cfg.out_dir = raw
        return
    if "." not in key:
        raise ConfigurationError(f"unknown config key {key!r}")
    section, name = key.split(".", 1)
    if section == "crops":
        if name not in _CROP_KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
        kind = _CROP_KEYS[name]
        value = _cast(raw, kind)
        kwargs = {f: getattr(cfg.crops, f) for f in CropConfig.__dataclass_fields__}
        if name.startswith(("global_scale", "local_scale")):
            which, bound = name.rsplit("_", 1)
            lo, hi = kwargs[which]
            kwargs[which] = (value, hi) if bound == "lo" else (lo, value)
        else:
            kwargs[name] = value
        cfg.crops = CropConfig(**kwargs)
        return
    sections = {"model": cfg.model, "train": cfg.train, "loss": cfg.loss,
                "eval": cfg.eval, "data": cfg.data, "synth": cfg.synth}
    if section not in sections:
        raise ConfigurationError(f"unknown config key {key!r}")
    obj = sections[section]
    schema = _section_schema(obj)
    if name not in schema:
        raise ConfigurationError(f"unknown config key {key!r}")
    setattr(obj, name, _cast(raw, schema[name]))


def parse_config(path: str, stage: str) -> RunConfig:
    cfg = default_config(stage)
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key == "stage":
                if raw != stage:
                    raise ConfigurationError(
                        f"{path}:{lineno}: config stage {raw!r} != requested {stage!r}")
                continue
            try:
                apply_key(cfg, key, raw)
            except ConfigurationError as e:
                raise ConfigurationError(f"{path}:{lineno}: {e}") from e
    cfg.validate()
    return cfg


def resolved_lines(cfg: RunConfig) -> list[str]:
    """Flatten a config back to parseable key = value lines."""
    lines = [f"stage = {cfg.stage}", f"seed = {cfg.seed}", f"out_dir = {cfg.out_dir}"]
    for section_name, obj in (("model", cfg.model), ("train", cfg.train),
                              ("loss", cfg.loss), ("eval", cfg.eval),
                              ("data", cfg.data), ("synth", cfg.synth)):
        for name, value in asdict(obj).items():
            lines.append(f"{section_name}.{name} = {value}")
    c = cfg.crops
    for name in ("n_small_student", "n_small_teacher", "n_large_student",
                 "n_large_teacher", "large_out_size", "small_out_size",
                 "horizontal_flip", "color_jitter", "blur", "solarization"):
        lines.append(f"crops.{name} = {getattr(c, name)}")
    lines.append(f"crops.global_scale_lo = {c.global_scale[0]}")
    lines.append(f"crops.global_scale_hi = {c.global_scale[1]}")
    lines.append(f"crops.local_scale_lo = {c.local_scale[0]}")
    lines.append(f"crops.local_scale_hi = {c.local_scale[1]}")
    return lines


def write_resolved(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(resolved_lines(cfg)) + "\n")
