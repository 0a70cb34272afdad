from typing import Optional, List, Dict, Any
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class DomainId(str, Enum):
    """Domain tag selecting the normalization set of every DSBN layer."""
    SOURCE = "S"
    TARGET = "T"


class StructureKind(str, Enum):
    """Structure family of a synthetic dataset."""
    TUBULAR = "tubular"
    CIRCULAR = "circular"


class SampleRole(str, Enum):
    """Role of a sample inside a composed mini-batch."""
    SOURCE_LABELED = "source_labeled"
    TARGET_LABELED = "target_labeled"
    TARGET_UNLABELED = "target_unlabeled"


class Method(str, Enum):
    """Training variants: the full method, its ablations and the SDA baselines."""
    BASELINE_SOURCE = "baseline_source"
    BASELINE_TARGET = "baseline_target"
    JOINT_TRAINING = "joint_training"
    FINETUNE_LAST = "finetune_last"
    FINETUNE_ALL = "finetune_all"
    DSBN_ONLY = "dsbn_only"
    SEMT_ONLY = "semt_only"
    SS_CADA = "ss_cada"
    CS_CADA = "cs_cada"


class FinetuneScope(str, Enum):
    """Parameters updated when fine-tuning a source-pretrained model."""
    LAST_BLOCK = "last_block"
    ALL = "all"


class LabeledSample(BaseModel):
    """Image with its class-id mask."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray = Field(..., description="2D float image in [0, 1]")
    mask: np.ndarray = Field(..., description="2D integer class-id mask")
    domain: DomainId
    id: str

    @field_validator("image")
    @classmethod
    def _check_image(cls, value: np.ndarray) -> np.ndarray:
        if value.ndim != 2 or value.size == 0:
            raise ValueError(f"image must be a non-empty 2D grid, got shape {value.shape}")
        return value

    @model_validator(mode="after")
    def _check_alignment(self) -> "LabeledSample":
        if self.mask.shape != self.image.shape:
            raise ValueError(
                f"mask shape {self.mask.shape} differs from image shape {self.image.shape}"
            )
        if not np.issubdtype(self.mask.dtype, np.integer):
            raise ValueError(f"mask must hold integer class ids, got {self.mask.dtype}")
        return self


class UnlabeledSample(BaseModel):
    """Target-domain image without annotation."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray = Field(..., description="2D float image in [0, 1]")
    domain: DomainId = DomainId.TARGET
    id: str

    @field_validator("image")
    @classmethod
    def _check_image(cls, value: np.ndarray) -> np.ndarray:
        if value.ndim != 2 or value.size == 0:
            raise ValueError(f"image must be a non-empty 2D grid, got shape {value.shape}")
        return value

    @field_validator("domain")
    @classmethod
    def _check_domain(cls, value: DomainId) -> DomainId:
        if value != DomainId.TARGET:
            raise ValueError("unlabeled samples belong to the target domain")
        return value


class BatchLayout(BaseModel):
    """Per-pool quotas of one mini-batch."""
    n_source_labeled: int = Field(8, ge=0)
    n_target_labeled: int = Field(4, ge=0)
    n_target_unlabeled: int = Field(4, ge=0)

    @property
    def total(self) -> int:
        return self.n_source_labeled + self.n_target_labeled + self.n_target_unlabeled


class SyntheticStyle(BaseModel):
    """Rendering style of one synthetic domain."""
    background_level: float = Field(0.2, ge=0.0, le=1.0)
    foreground_contrast: float = Field(0.6, ge=-1.0, le=1.0,
                                       description="Sign selects bright-on-dark vs dark-on-bright")
    noise_sigma: float = Field(0.03, ge=0.0)
    blur_radius: float = Field(0.0, ge=0.0, description="Gaussian blur sigma in pixels")
    texture_seed: int = 0

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "background_level": 0.8,
                "foreground_contrast": -0.5,
                "noise_sigma": 0.05,
                "blur_radius": 1.0,
                "texture_seed": 7,
            }
        }
    )


class SampleBatch(BaseModel):
    """Mixed-domain mini-batch, each sample tagged with its role."""
    source_labeled: List[LabeledSample] = Field(default_factory=list)
    target_labeled: List[LabeledSample] = Field(default_factory=list)
    target_unlabeled: List[UnlabeledSample] = Field(default_factory=list)

    def role_counts(self) -> Dict[SampleRole, int]:
        return {
            SampleRole.SOURCE_LABELED: len(self.source_labeled),
            SampleRole.TARGET_LABELED: len(self.target_labeled),
            SampleRole.TARGET_UNLABELED: len(self.target_unlabeled),
        }

    @property
    def size(self) -> int:
        return sum(self.role_counts().values())


class DomainDatasets(BaseModel):
    """The five splits of a two-domain experiment."""
    source_labeled: List[LabeledSample]
    target_labeled: List[LabeledSample]
    target_unlabeled: List[UnlabeledSample]
    validation: List[LabeledSample]
    test: List[LabeledSample]
    # Masks of target_unlabeled, withheld from training; only read when re-partitioning.
    target_unlabeled_reference: List[LabeledSample] = Field(default_factory=list)
    n_classes: int = Field(2, ge=2)
    spacing: float = Field(1.0, gt=0.0, description="Pixel spacing in mm")

    def counts(self) -> Dict[str, int]:
        return {
            "source_labeled": len(self.source_labeled),
            "target_labeled": len(self.target_labeled),
            "target_unlabeled": len(self.target_unlabeled),
            "validation": len(self.validation),
            "test": len(self.test),
        }


class ArchSpec(BaseModel):
    """U-Net descriptor: one channel width per resolution level."""
    widths: List[int] = Field(default_factory=lambda: [16, 32, 64, 128])
    n_classes: int = Field(3, ge=2)
    in_channels: int = Field(1, ge=1)
    projection_hidden: int = Field(256, ge=1)
    projection_dim: int = Field(128, ge=1)

    @field_validator("widths")
    @classmethod
    def _check_widths(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("widths must be non-empty")
        if any(w <= 0 for w in value):
            raise ValueError(f"widths must be positive, got {value}")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"widths must be strictly increasing, got {value}")
        return value

    @property
    def depth(self) -> int:
        """Number of down-sampling steps."""
        return len(self.widths) - 1


class LossBreakdown(BaseModel):
    """Components of one training objective evaluation.

    ``lambda1`` is the weight actually applied to ``l_unsup``; during training it
    is the configured weight times ``consistency_weight``.
    """
    iteration: int = 0
    l_sup: float = Field(..., ge=0)
    l_unsup: float = Field(0.0, ge=0)
    l_ct: float = Field(0.0, ge=0)
    total: float = Field(..., ge=0)
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(0.1, ge=0)
    consistency_weight: float = Field(1.0, ge=0)
    lr: float = Field(0.0, ge=0)


class ValidationRecord(BaseModel):
    """One validation round."""
    iteration: int
    mean_dice: float = Field(..., ge=0, le=100)
    is_best: bool = False


class TrainHistory(BaseModel):
    """Everything a training run records."""
    rows: List[LossBreakdown] = Field(default_factory=list)
    validation: List[ValidationRecord] = Field(default_factory=list)
    best_iteration: Optional[int] = None
    best_dice: Optional[float] = None
    pool_reads: Dict[str, int] = Field(default_factory=dict)

    def append(self, row: LossBreakdown) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError(
                f"history rows must increase: {row.iteration} after {self.rows[-1].iteration}"
            )
        self.rows.append(row)

    def record_validation(self, iteration: int, mean_dice: float) -> bool:
        """Record a validation score; returns True when it is a new best."""
        is_best = self.best_dice is None or mean_dice > self.best_dice
        if is_best:
            self.best_dice = mean_dice
            self.best_iteration = iteration
        self.validation.append(
            ValidationRecord(iteration=iteration, mean_dice=mean_dice, is_best=is_best)
        )
        return is_best

    def reset_best(self) -> None:
        """Forget the best score so later rounds select among themselves."""
        self.best_dice = None
        self.best_iteration = None


class MetricStat(BaseModel):
    """Mean and standard deviation over test cases."""
    mean: float
    sd: float = Field(..., ge=0)


class ClassMetrics(BaseModel):
    """Aggregated metrics of one foreground class (or of their average)."""
    dice_pct: MetricStat
    recall_pct: MetricStat
    precision_pct: MetricStat
    assd_mm: Optional[MetricStat] = None
    assd_missing: int = Field(0, ge=0, description="Cases where ASSD was undefined")

    @model_validator(mode="after")
    def _check_ranges(self) -> "ClassMetrics":
        for name in ("dice_pct", "recall_pct", "precision_pct"):
            stat = getattr(self, name)
            if not 0.0 <= stat.mean <= 100.0:
                raise ValueError(f"{name} mean {stat.mean} outside [0, 100]")
        if self.assd_mm is not None and self.assd_mm.mean < 0:
            raise ValueError("assd must be non-negative")
        return self


class MetricsRow(BaseModel):
    """One table row: a method evaluated on a test set."""
    method: str
    n_cases: int = Field(..., ge=1)
    test_set_hash: str
    classes: Dict[str, ClassMetrics] = Field(..., description="Per class, plus 'average'")

    @property
    def mean_dice(self) -> float:
        return self.classes["average"].dice_pct.mean

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "method": "cs_cada",
                "n_cases": 10,
                "test_set_hash": "3f2a...",
                "classes": {
                    "average": {
                        "dice_pct": {"mean": 79.3, "sd": 3.7},
                        "recall_pct": {"mean": 83.1, "sd": 3.9},
                        "precision_pct": {"mean": 77.3, "sd": 6.6},
                        "assd_mm": {"mean": 1.2, "sd": 0.4},
                        "assd_missing": 0,
                    }
                },
            }
        }
    )


class CurveRow(BaseModel):
    """One point of an annotation-ratio sweep."""
    method: str
    ratio: float = Field(..., gt=0, le=1)
    n_labeled: int = Field(..., ge=1)
    mean_dice: float = Field(..., ge=0, le=100)
    upper_bound: bool = False


class RunManifest(BaseModel):
    """Everything needed to re-run an experiment exactly."""
    config: Dict[str, Any]
    dataset_hash: str
    outputs: Dict[str, str] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    started_at: str
    finished_at: Optional[str] = None
    status: str = "running"
