from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.errors import ConfigFileError
from src.models import ArchSpec, BatchLayout, Method, StructureKind, SyntheticStyle


class Settings(BaseSettings):
    """Process settings from environment variables (prefix ``CADASEG_``)."""

    model_config = SettingsConfigDict(env_prefix="CADASEG_", env_file=".env", extra="ignore")

    out_root: str = "./runs"
    log_level: str = "INFO"
    config_path: str = "./config/circular.yaml"


class StylePair(BaseModel):
    source: SyntheticStyle = Field(default_factory=lambda: SyntheticStyle(
        background_level=0.15, foreground_contrast=0.7, noise_sigma=0.03, blur_radius=0.0,
        texture_seed=1))
    target: SyntheticStyle = Field(default_factory=lambda: SyntheticStyle(
        background_level=0.75, foreground_contrast=-0.45, noise_sigma=0.06, blur_radius=1.0,
        texture_seed=2))


class PreprocessConfig(BaseModel):
    clahe: bool = False
    clahe_clip: float = Field(2.0, gt=0)
    clahe_tiles: int = Field(8, ge=1)
    gamma: float = Field(1.0, gt=0)


class AugmentConfig(BaseModel):
    enabled: bool = True
    crop: int = Field(56, ge=1, description="Square crop side")
    resize_to: Optional[int] = Field(64, ge=1, description="Side after the crop is resized")
    p_hflip: float = Field(0.5, ge=0, le=1)
    p_vflip: float = Field(0.5, ge=0, le=1)


class DataConfig(BaseModel):
    kind: StructureKind = StructureKind.CIRCULAR
    counts: Tuple[int, int, int, int, int] = (20, 4, 16, 4, 10)
    image_size: int = Field(64, ge=8)
    seed: int = 0
    spacing: float = Field(1.0, gt=0)
    root: Optional[str] = Field(None, description="Ingestion directory; synthetic when unset")
    green_channel: bool = False
    split_fractions: Dict[str, float] = Field(
        default_factory=lambda: {"validation": 0.1, "test": 0.2})
    style: StylePair = Field(default_factory=StylePair)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)

    @field_validator("counts")
    @classmethod
    def _check_counts(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(c <= 0 for c in value):
            raise ValueError(f"data.counts must all be positive, got {value}")
        return value


class ScheduleConfig(BaseModel):
    k_max: int = Field(500, ge=0)
    lr0: float = Field(5e-4, gt=0)
    lr_decay: float = Field(0.95, gt=0, le=1)
    lr_step: int = Field(1000, gt=0)


class LossConfig(BaseModel):
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(0.1, ge=0)
    tau: float = Field(0.1, gt=0)
    ce_weight: float = Field(0.5, ge=0)
    dice_weight: float = Field(0.5, ge=0)
    dice_smooth: float = Field(1e-5, gt=0)


class MeanTeacherConfig(BaseModel):
    ema_decay: float = Field(0.99, ge=0, le=1)
    noise_sigma: float = Field(0.05, ge=0)
    ramp_scale: float = Field(0.1, ge=0)
    ramp_sharpness: float = Field(5.0, ge=0)


class DsbnConfig(BaseModel):
    eps: float = Field(1e-5, gt=0)
    momentum: float = Field(0.9, gt=0, lt=1)


class OptimConfig(BaseModel):
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)


class TrainConfig(BaseModel):
    validate_every: int = Field(100, gt=0)
    finetune_iterations: int = Field(200, ge=0)
    finetune_batch_size: int = Field(4, ge=2)
    show_progress: bool = False


class ExperimentConfig(BaseModel):
    """Complete description of one experiment."""

    method: Method = Method.CS_CADA
    seed: int = 0
    data: DataConfig = Field(default_factory=DataConfig)
    arch: ArchSpec = Field(default_factory=ArchSpec)
    batch_layout: BatchLayout = Field(default_factory=lambda: BatchLayout(
        n_source_labeled=4, n_target_labeled=2, n_target_unlabeled=2))
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    mean_teacher: MeanTeacherConfig = Field(default_factory=MeanTeacherConfig)
    dsbn: DsbnConfig = Field(default_factory=DsbnConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @model_validator(mode="after")
    def _check_layout(self) -> "ExperimentConfig":
        layout = self.batch_layout
        if self.method == Method.CS_CADA and min(
            layout.n_source_labeled, layout.n_target_labeled, layout.n_target_unlabeled
        ) <= 0:
            raise ValueError("cs_cada needs a positive quota for every pool")
        return self

    @model_validator(mode="after")
    def _check_augment_scale(self) -> "ExperimentConfig":
        # training crops must come back at the scale validation and test images are seen at
        aug, size = self.data.augment, self.data.image_size
        if not aug.enabled:
            return self
        if aug.crop > size:
            raise ValueError(f"data.augment.crop {aug.crop} exceeds data.image_size {size}")
        if aug.resize_to is not None and aug.resize_to != size:
            raise ValueError(
                f"data.augment.resize_to {aug.resize_to} must be null or equal data.image_size {size}")
        return self

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by dot-notation key."""
        value: Any = self.model_dump(mode="json")
        for k in key.split("."):
            if isinstance(value, dict):
                value = value.get(k)
            else:
                return default
        return value if value is not None else default

    def snapshot(self) -> Dict[str, Any]:
        """JSON-compatible dump used in manifests and checkpoints."""
        return self.model_dump(mode="json")

    def with_overrides(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        """Copy with dotted-key overrides applied and re-validated."""
        raw = self.snapshot()
        for key, value in overrides.items():
            set_dotted(raw, key, value)
        return ExperimentConfig.model_validate(raw)


def set_dotted(target: Dict[str, Any], key: str, value: Any) -> None:
    """Assign ``value`` at dotted ``key``, creating sections as needed."""
    parts = key.split(".")
    node = target
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def parse_assignments(assignments: List[str]) -> Dict[str, Any]:
    """Parse ``key.path=value`` pairs; values are read as YAML scalars."""
    overrides: Dict[str, Any] = {}
    for item in assignments:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    return overrides


def load_experiment_config(
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """Load a YAML experiment file and apply dotted overrides.

    Raises ConfigFileError when the file is missing or unparseable, and
    pydantic's ValidationError when values are out of range.
    """
    path = Path(config_path or get_settings().config_path)
    if not path.exists():
        raise ConfigFileError(str(path), "no such file")
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigFileError(str(path), f"invalid YAML ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigFileError(str(path), "top level must be a mapping")

    for key, value in (overrides or {}).items():
        set_dotted(raw, key, value)
    return ExperimentConfig.model_validate(raw)


# Global settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create the global settings instance."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings
