"""
basemodels.py
-------------
Pydantic models for srwseg: network/training/corpus configuration, augmentation
policies, the tensor bundles exchanged between the SNR, ISW, network and
training modules, and the records written by training and evaluation.
"""

from __future__ import annotations

import math
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .enums import *

__all__ = [
    "NetworkConfig",
    "PhotometricConfig",
    "AugmentPolicy",
    "TrainingConfig",
    "CorpusConfig",
    "CorpusManifest",
    "CorpusProgress",
    "SamplePair",
    "SnrParams",
    "SnrOutput",
    "WhiteningMask",
    "KMeansResult",
    "ForwardArtifacts",
    "LossBundle",
    "EpochRecord",
    "TrainingProgress",
    "TrainingResult",
    "ConfusionCounts",
    "SegmentationMetrics",
    "ImageMetrics",
    "MetricSummary",
    "MetricsReport",
    "GradientCheckEntry",
    "GradientCheckReport",
    "CheckResult",
    "SelfTestReport",
    "AblationRow",
    "CheckpointData",
]


def _parse_stage_list(v: Any) -> Any:
    """Accept ``"1,2,3"``, ``""``, ``"none"``, a set or a list of stage indices."""
    if v is None:
        return v
    if isinstance(v, int):
        return [v]
    if isinstance(v, str):
        text = v.strip().strip("{}[]()")
        if text.lower() in ("", "none"):
            return []
        return [int(tok) for tok in text.split(",") if tok.strip()]
    if isinstance(v, (set, frozenset, tuple)):
        return sorted(v)
    return v


def _check_stages(v: List[int]) -> List[int]:
    if any(s not in (1, 2, 3, 4) for s in v):
        raise ValueError(f"stages must be a subset of {{1, 2, 3, 4}}, got {v}")
    return sorted(set(v))


def _parse_int_list(v: Any) -> Any:
    if isinstance(v, int):
        return [v]
    if isinstance(v, str):
        return [int(tok) for tok in v.strip().strip("[]()").split(",") if tok.strip()]
    return v


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class NetworkConfig(BaseModel):
    """
    Architecture of the compact DeepLabv3+-style segmentation network.

    :param stage_channels: Output channels of the four residual stages.
    :param srw_stages: Stages (1-based) followed by an SRW block. Empty = plain baseline.
    :param isw_stages: Stages whose features feed covariance capture. ``None`` means
                       "same as ``srw_stages``".
    :param aspp_dilations: Atrous rates of the context head; rate 1 is the 1x1 branch.
    :param num_classes: Always 2 (lesion vs background).
    :param input_size: Training/inference resolution ``(H, W)``, multiples of 16.
    :param reduction: Bottleneck ratio of the SNR channel attention.
    :param snr_eps: Instance-normalization epsilon.
    :param batch_shared_attention: Pool attention over the whole batch (ablation only).
    """

    stage_channels: List[int] = Field(
        default_factory=lambda: [32, 64, 128, 256],
        description="Output channels of the four residual stages",
    )
    srw_stages: List[int] = Field(
        default_factory=lambda: [1, 2, 3],
        description="Stages followed by an SRW (SNR + ISW) block, subset of 1..4",
    )
    isw_stages: Optional[List[int]] = Field(
        default=None,
        description="Covariance-capture stages; None = same as srw_stages",
    )
    aspp_dilations: List[int] = Field(
        default_factory=lambda: [1, 6, 12],
        description="ASPP atrous rates (1 = 1x1 branch)",
    )
    num_classes: int = Field(default=2, description="Number of classes (binary task)")
    input_size: Tuple[int, int] = Field(
        default=(64, 64), description="Input (H, W), multiples of 16"
    )
    reduction: int = Field(
        default=16, ge=1, description="SNR attention reduction ratio r"
    )
    snr_eps: float = Field(default=1e-5, gt=0, description="Instance-norm epsilon")
    batch_shared_attention: bool = Field(
        default=False, description="Share SNR attention across the batch"
    )
    blocks_per_stage: int = Field(
        default=2, ge=1, description="Basic residual blocks per stage"
    )
    aspp_channels: int = Field(default=64, ge=1, description="ASPP branch width")
    low_level_channels: int = Field(
        default=24, ge=1, description="Projected stage-1 skip width"
    )
    decoder_channels: int = Field(default=64, ge=1, description="Decoder conv width")

    @field_validator("srw_stages", "isw_stages", mode="before")
    def parse_stages(cls, v):
        return _parse_stage_list(v)

    @field_validator("stage_channels", "aspp_dilations", mode="before")
    def parse_int_lists(cls, v):
        return _parse_int_list(v)

    @field_validator("srw_stages")
    def validate_srw_stages(cls, v):
        return _check_stages(v)

    @field_validator("isw_stages")
    def validate_isw_stages(cls, v):
        return None if v is None else _check_stages(v)

    @field_validator("stage_channels")
    def validate_stage_channels(cls, v):
        if len(v) != 4 or any(c < 1 for c in v):
            raise ValueError("stage_channels must hold 4 positive integers")
        return v

    @field_validator("aspp_dilations")
    def validate_dilations(cls, v):
        if not v or any(d < 1 for d in v):
            raise ValueError("aspp_dilations must be non-empty positive integers")
        return v

    @field_validator("num_classes")
    def validate_num_classes(cls, v):
        if v != 2:
            raise ValueError("only binary segmentation (num_classes = 2) is supported")
        return v

    @field_validator("input_size", mode="before")
    def parse_input_size(cls, v):
        if isinstance(v, int):
            return (v, v)
        if isinstance(v, str):
            parts = [int(t) for t in v.replace("x", ",").split(",") if t.strip()]
            return (parts[0], parts[-1])
        return v

    @field_validator("input_size")
    def validate_input_size(cls, v):
        if any(s < 16 or s % 16 for s in v):
            raise ValueError(f"input_size must be multiples of 16, got {v}")
        return v

    @property
    def whitening_stages(self) -> List[int]:
        """Stages where covariance is captured for the whitening losses."""
        return self.srw_stages if self.isw_stages is None else self.isw_stages

    @property
    def active_stages(self) -> List[int]:
        """Every stage that carries an SNR block or a covariance capture."""
        return sorted(set(self.srw_stages) | set(self.whitening_stages))

    @property
    def is_baseline(self) -> bool:
        return not self.active_stages

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "stage_channels": [32, 64, 128, 256],
                "srw_stages": [1, 2, 3],
                "aspp_dilations": [1, 6, 12],
                "input_size": [64, 64],
            }
        }
    )


class PhotometricConfig(BaseModel):
    """
    Photometric perturbation ranges.

    :param brightness: Brightness factor drawn from ``[1 - b, 1 + b]``.
    :param contrast: Contrast factor drawn from ``[1 - c, 1 + c]``.
    :param saturation: Saturation factor drawn from ``[1 - s, 1 + s]``.
    :param blur_sigma: Gaussian blur sigma range ``(low, high)``; ``(0, 0)`` disables blur.
    :param blur_probability: Probability of applying the blur.
    """

    brightness: float = Field(default=0.3, ge=0, lt=1)
    contrast: float = Field(default=0.3, ge=0, lt=1)
    saturation: float = Field(default=0.3, ge=0, lt=1)
    blur_sigma: Tuple[float, float] = Field(default=(0.1, 1.5))
    blur_probability: float = Field(default=1.0, ge=0, le=1)

    @field_validator("blur_sigma")
    def validate_blur_sigma(cls, v):
        low, high = v
        if low < 0 or high < low:
            raise ValueError("blur_sigma must satisfy 0 <= low <= high")
        return v

    @classmethod
    def off(cls) -> "PhotometricConfig":
        """Zero-strength perturbation: leaves images unchanged."""
        return cls(
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            blur_sigma=(0.0, 0.0),
            blur_probability=0.0,
        )


class AugmentPolicy(BaseModel):
    """
    Training augmentation policy (geometric ops hit image and mask alike,
    photometric ops hit the image only).

    :param hflip: Enable random horizontal flips.
    :param flip_probability: Flip probability when ``hflip`` is on.
    :param scale_range: Random rescale factor range, ``None`` disables scaling.
    :param crop_size: Square crop side; ``None`` crops back to the input size.
    :param photometric: Colour jitter / blur ranges, ``None`` disables them.
    """

    hflip: bool = True
    flip_probability: float = Field(default=0.5, ge=0, le=1)
    scale_range: Optional[Tuple[float, float]] = (1.0, 1.25)
    crop_size: Optional[int] = Field(default=None, gt=0)
    photometric: Optional[PhotometricConfig] = Field(
        default_factory=lambda: PhotometricConfig(
            brightness=0.2,
            contrast=0.2,
            saturation=0.2,
            blur_sigma=(0.1, 1.0),
            blur_probability=0.3,
        )
    )

    @field_validator("scale_range")
    def validate_scale_range(cls, v):
        if v is not None and (v[0] <= 0 or v[1] < v[0]):
            raise ValueError("scale_range must satisfy 0 < low <= high")
        return v

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        """Policy that returns its input unchanged."""
        return cls(hflip=False, scale_range=None, crop_size=None, photometric=None)

    @property
    def is_identity(self) -> bool:
        return (
            not self.hflip
            and self.scale_range is None
            and self.crop_size is None
            and self.photometric is None
        )


class TrainingConfig(BaseModel):
    """
    Optimisation and objective settings.

    :param lr0: Initial SGD learning rate.
    :param momentum: SGD momentum.
    :param poly_power: Exponent of the polynomial learning-rate decay.
    :param epochs: Number of epochs.
    :param batch_size: Images per step (each contributes one raw/transformed pair).
    :param isw_weight: Weight of the whitening loss per layer.
    :param dc_weight: Weight of the dual-causality loss per layer.
    :param warmup_epochs: Epochs that only accumulate covariance statistics.
    :param seed: Seed for every random stream of the run.
    """

    lr0: float = Field(default=1e-2, gt=0, description="Initial learning rate")
    momentum: float = Field(default=0.9, ge=0, lt=1, description="SGD momentum")
    poly_power: float = Field(default=0.9, gt=0, description="Poly schedule power")
    epochs: int = Field(default=50, ge=1, description="Training epochs")
    batch_size: int = Field(default=8, ge=1, description="Batch size")
    isw_weight: float = Field(default=0.6, ge=0, description="Whitening loss weight")
    dc_weight: float = Field(default=1.0, ge=0, description="Dual-causality loss weight")
    warmup_epochs: int = Field(
        default=5, ge=0, description="Statistics-only epochs before L_ISW turns on"
    )
    seed: int = Field(default=0, ge=0, description="Run seed")
    device: str = Field(default="cpu", description="Torch device string")
    deterministic: bool = Field(
        default=True, description="Single-threaded deterministic kernels"
    )
    num_workers: int = Field(default=0, ge=0, description="DataLoader workers")
    checkpoint_every: int = Field(
        default=1, ge=1, description="Write last.ckpt every N epochs"
    )
    weight_decay: float = Field(default=0.0, ge=0, description="SGD weight decay")
    ema_momentum: float = Field(
        default=0.99, ge=0, lt=1, description="Momentum of the variance EMA"
    )
    center_before_cov: bool = Field(
        default=True, description="Zero-center features before covariance"
    )
    dc_on_aug_path: bool = Field(
        default=False, description="Also apply L_dc on the transformed path"
    )
    whitening: WhiteningMode = Field(
        default=WhiteningMode.ISW, description="Whitening objective: isw, dwt or none"
    )
    augment: AugmentPolicy = Field(default_factory=AugmentPolicy)
    style: PhotometricConfig = Field(
        default_factory=PhotometricConfig,
        description="Style transform T producing the whitening pair",
    )

    @model_validator(mode="after")
    def _warmup_before_end(self) -> "TrainingConfig":
        if self.warmup_epochs >= self.epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})"
            )
        return self

    def phase_of(self, epoch: int) -> TrainPhase:
        """Phase of a 1-based epoch."""
        return TrainPhase.WARMUP if epoch <= self.warmup_epochs else TrainPhase.FULL


class CorpusConfig(BaseModel):
    """
    Synthetic two-modality corpus settings.

    :param seed: Generator seed.
    :param source_count: Source-modality scenes, split 80/10/10.
    :param target_count: Target-modality scenes (test-target only).
    :param image_size: Square frame side.
    :param lesion_kind: Lesion shape family.
    :param concurrency: Concurrent sample writes.
    """

    seed: int = Field(default=0, ge=0)
    source_count: int = Field(default=600, ge=10)
    target_count: int = Field(default=100, ge=1)
    image_size: int = Field(default=64, ge=32)
    lesion_kind: LesionKind = LesionKind.POLYP
    train_fraction: float = Field(default=0.8, gt=0, lt=1)
    val_fraction: float = Field(default=0.1, gt=0, lt=1)
    concurrency: int = Field(default=8, ge=1, le=64)

    @field_validator("image_size")
    def validate_image_size(cls, v):
        if v % 16:
            raise ValueError("image_size must be a multiple of 16")
        return v

    @model_validator(mode="after")
    def _fractions_leave_a_test_split(self) -> "CorpusConfig":
        if self.train_fraction + self.val_fraction >= 1:
            raise ValueError("train_fraction + val_fraction must leave a test split")
        return self

    def split_counts(self) -> Dict[str, int]:
        n_train = int(round(self.source_count * self.train_fraction))
        n_val = int(round(self.source_count * self.val_fraction))
        return {
            Split.TRAIN: n_train,
            Split.VAL: n_val,
            Split.TEST_SOURCE: self.source_count - n_train - n_val,
            Split.TEST_TARGET: self.target_count,
        }


# ---------------------------------------------------------------------------
# Corpus records
# ---------------------------------------------------------------------------


class CorpusManifest(BaseModel):
    """
    Manifest written next to a corpus.

    :param seed: Generator seed (``None`` for user-supplied data).
    :param splits: Split name -> ordered list of sample ids.
    :param counts: Split name -> number of samples.
    :param generator_version: Version of the generator that wrote the corpus.
    """

    seed: Optional[int] = None
    splits: Dict[str, List[str]] = Field(default_factory=dict)
    counts: Dict[str, int] = Field(default_factory=dict)
    generator_version: str = ""
    image_size: Optional[int] = None
    lesion_kind: Optional[LesionKind] = None

    @model_validator(mode="after")
    def _splits_disjoint(self) -> "CorpusManifest":
        seen: Dict[str, str] = {}
        for name, ids in self.splits.items():
            for item_id in ids:
                if item_id in seen:
                    raise ValueError(
                        f"id '{item_id}' appears in both '{seen[item_id]}' and '{name}'"
                    )
                seen[item_id] = name
            if name in self.counts and self.counts[name] != len(ids):
                raise ValueError(f"count mismatch for split '{name}'")
        return self

    def modality_of(self, split: str) -> Modality:
        return Modality.TARGET if split == Split.TEST_TARGET else Modality.SOURCE

    def split_of(self, item_id: str) -> Optional[str]:
        for name, ids in self.splits.items():
            if item_id in ids:
                return name
        return None


class CorpusProgress(BaseModel):
    """Progress of a corpus build."""

    written: int = 0
    total: int = 0
    item_id: str = ""

    @property
    def percentage(self) -> float:
        return 100.0 * self.written / self.total if self.total else 0.0


class SamplePair(BaseModel):
    """
    One segmentation sample.

    :param image: ``(3, H, W)`` float32 array in ``[0, 1]``.
    :param image_aug: Optional style-transformed copy of ``image``.
    :param mask: ``(H, W)`` uint8 array with values in ``{0, 1}``.
    :param modality: Modality tag.
    :param id: Sample id.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray
    image_aug: Optional[np.ndarray] = None
    mask: np.ndarray
    modality: Modality = Modality.SOURCE
    id: str = ""

    @field_validator("image", "image_aug")
    def validate_image(cls, v):
        if v is None:
            return v
        if v.ndim != 3 or v.shape[0] != 3:
            raise ValueError(f"image must have shape (3, H, W), got {v.shape}")
        return np.clip(v.astype(np.float32, copy=False), 0.0, 1.0)

    @field_validator("mask")
    def validate_mask(cls, v):
        if v.ndim != 2:
            raise ValueError(f"mask must have shape (H, W), got {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("mask values must be in {0, 1}")
        return v.astype(np.uint8, copy=False)

    @model_validator(mode="after")
    def _aligned(self) -> "SamplePair":
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError("image and mask are not spatially aligned")
        if self.image_aug is not None and self.image_aug.shape != self.image.shape:
            raise ValueError("image_aug must match image shape")
        return self


# ---------------------------------------------------------------------------
# Tensor bundles
# ---------------------------------------------------------------------------


class SnrParams(BaseModel):
    """
    Channel-attention parameters of one SNR block, stored input-major:
    ``hidden = relu(gap @ fc1_weight + fc1_bias)``,
    ``logits = hidden @ fc2_weight + fc2_bias``.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    fc1_weight: torch.Tensor
    fc1_bias: torch.Tensor
    fc2_weight: torch.Tensor
    fc2_bias: torch.Tensor
    eps: float = Field(default=1e-5, gt=0)

    @property
    def channels(self) -> int:
        return self.fc1_weight.shape[0]

    @property
    def hidden(self) -> int:
        return self.fc1_weight.shape[1]


class SnrOutput(BaseModel):
    """Everything one SNR block produces for a feature map F."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    normalized: torch.Tensor
    enhanced: torch.Tensor
    corrupted: torch.Tensor
    residual_plus: torch.Tensor
    residual_minus: torch.Tensor
    alpha: torch.Tensor

    def select(self, index: slice) -> "SnrOutput":
        """Slice every tensor along the batch dimension."""
        return SnrOutput(
            normalized=self.normalized[index],
            enhanced=self.enhanced[index],
            corrupted=self.corrupted[index],
            residual_plus=self.residual_plus[index],
            residual_minus=self.residual_minus[index],
            alpha=self.alpha[index],
        )


class WhiteningMask(BaseModel):
    """
    Binary ``C x C`` mask of style-bearing covariance entries.

    :param m: Symmetric float tensor with zero diagonal and entries in ``{0, 1}``.
    :param selected_count: Number of ones in ``m`` (twice the upper-triangle count).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: torch.Tensor
    selected_count: int = Field(ge=0)

    @model_validator(mode="after")
    def _mask_invariants(self) -> "WhiteningMask":
        m = self.m
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"mask must be square, got {tuple(m.shape)}")
        if not torch.equal(m, m.t()):
            raise ValueError("mask must be symmetric")
        if torch.any(torch.diagonal(m) != 0):
            raise ValueError("mask diagonal must be zero")
        if not torch.all((m == 0) | (m == 1)):
            raise ValueError("mask entries must be 0 or 1")
        upper = int(torch.triu(m, diagonal=1).sum().item())
        if self.selected_count != 2 * upper:
            raise ValueError("selected_count must equal 2 x upper-triangle count")
        return self

    @classmethod
    def empty(cls, channels: int, dtype=torch.float32, device=None) -> "WhiteningMask":
        return cls(
            m=torch.zeros(channels, channels, dtype=dtype, device=device), selected_count=0
        )

    @property
    def channels(self) -> int:
        return self.m.shape[0]


class KMeansResult(BaseModel):
    """
    Result of a 1-D k-means run.

    :param assignments: Cluster index per input value (input order).
    :param centroids: Centroid per effective cluster, ascending.
    :param iterations: Lloyd iterations performed.
    :param converged: Whether assignments stopped changing before ``max_iters``.
    :param inertia: Within-cluster sum of squared errors.
    """

    assignments: List[int]
    centroids: List[float]
    iterations: int = 0
    converged: bool = True
    inertia: float = 0.0

    @property
    def effective_k(self) -> int:
        return len(self.centroids)


class ForwardArtifacts(BaseModel):
    """
    Output of one network forward.

    :param logits: ``(N, 2, H, W)`` logits of the raw path.
    :param per_stage_snr: Raw-path SNR outputs, one per SNR stage.
    :param per_stage_snr_aug: Transformed-path SNR outputs (train mode only).
    :param per_stage_theta_raw: Raw-path covariance per whitening stage.
    :param per_stage_theta_aug: Transformed-path covariance per whitening stage.
    :param snr_stages: Stage index of every ``per_stage_snr`` entry.
    :param whitening_stages: Stage index of every ``per_stage_theta_*`` entry.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    logits: torch.Tensor
    per_stage_snr: List[SnrOutput] = Field(default_factory=list)
    per_stage_snr_aug: List[SnrOutput] = Field(default_factory=list)
    per_stage_theta_raw: List[torch.Tensor] = Field(default_factory=list)
    per_stage_theta_aug: List[torch.Tensor] = Field(default_factory=list)
    snr_stages: List[int] = Field(default_factory=list)
    whitening_stages: List[int] = Field(default_factory=list)


class LossBundle(BaseModel):
    """
    Decomposed training objective:
    ``total = task + sum(isw_weight * isw_i) + sum(dc_weight * dc_j)``.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    task: torch.Tensor
    dc_per_layer: List[torch.Tensor] = Field(default_factory=list)
    isw_per_layer: List[torch.Tensor] = Field(default_factory=list)
    total: torch.Tensor
    isw_weight: float = 0.0
    dc_weight: float = 0.0
    phase: TrainPhase = TrainPhase.FULL

    def recompose(self) -> torch.Tensor:
        """Recompute ``total`` from the parts, in the same order it was composed."""
        total = self.task
        for term in self.isw_per_layer:
            total = total + self.isw_weight * term
        for term in self.dc_per_layer:
            total = total + self.dc_weight * term
        return total

    def as_floats(self) -> Dict[str, float]:
        return {
            "task": float(self.task.detach()),
            "dc": float(sum(float(t.detach()) for t in self.dc_per_layer)),
            "isw": float(sum(float(t.detach()) for t in self.isw_per_layer)),
            "total": float(self.total.detach()),
        }


# ---------------------------------------------------------------------------
# Training records
# ---------------------------------------------------------------------------


class EpochRecord(BaseModel):
    """One line of the training log."""

    epoch: int
    lr: float
    task_loss: float
    dc_loss: float
    isw_loss: float
    val_iou: Optional[float] = None
    phase: TrainPhase = TrainPhase.FULL


class TrainingProgress(BaseModel):
    """
    Progress report passed to training callbacks after every epoch.

    :param epoch: Finished epoch (1-based).
    :param epochs: Total epochs.
    :param global_step: Optimizer steps so far.
    :param record: The epoch's log record.
    :param best_val_iou: Best validation IoU so far.
    """

    epoch: int
    epochs: int
    global_step: int
    record: EpochRecord
    best_val_iou: Optional[float] = None

    @property
    def percentage(self) -> float:
        return 100.0 * self.epoch / self.epochs


class TrainingResult(BaseModel):
    """Outcome of a training run."""

    output_dir: str
    last_checkpoint: str
    best_checkpoint: Optional[str] = None
    best_val_iou: Optional[float] = None
    history: List[EpochRecord] = Field(default_factory=list)


# ---------------------------------------------------------------------------
# Evaluation records
# ---------------------------------------------------------------------------


class ConfusionCounts(BaseModel):
    """Pixel counts with lesion (class 1) as positive."""

    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)
    tn: int = Field(ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


class SegmentationMetrics(BaseModel):
    iou: float = Field(ge=0, le=1)
    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    mean_accuracy: float = Field(ge=0, le=1)


class ImageMetrics(SegmentationMetrics):
    """Metrics of one image plus its confusion counts."""

    id: str
    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)
    tn: int = Field(ge=0)


class MetricSummary(BaseModel):
    mean: float
    std: float = Field(ge=0)


class MetricsReport(BaseModel):
    """
    Per-split evaluation report (macro-averaged over images, population std).

    :param model: Model identifier (usually the checkpoint path).
    :param split: Evaluated split.
    :param n: Number of images.
    :param metrics: Metric name -> mean/std.
    :param per_image: Per-image metrics in evaluation order.
    """

    model: str
    split: Split
    n: int = Field(ge=0)
    metrics: Dict[str, MetricSummary]
    per_image: List[ImageMetrics] = Field(default_factory=list)

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "model": "runs/srw/best.ckpt",
                "split": "test-target",
                "n": 100,
                "metrics": {"iou": {"mean": 0.71, "std": 0.12}},
                "per_image": [],
            }
        }
    )

    def mean(self, name: str) -> float:
        return self.metrics[name].mean


# ---------------------------------------------------------------------------
# Self-test records
# ---------------------------------------------------------------------------


class GradientCheckEntry(BaseModel):
    """
    Finite-difference result for one component.

    :param max_rel_error: Largest tensor-wise relative error over the checked inputs.
    :param skipped: The point is non-differentiable for this component.
    """

    component: CheckComponent
    max_rel_error: float = math.nan
    tolerance: float
    passed: bool
    skipped: bool = False
    note: str = ""


class GradientCheckReport(BaseModel):
    entries: List[GradientCheckEntry] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed or e.skipped for e in self.entries)


class CheckResult(BaseModel):
    """One row of the self-test table."""

    name: str
    passed: bool
    detail: str = ""


class SelfTestReport(BaseModel):
    results: List[CheckResult] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def table(self) -> str:
        width = max((len(r.name) for r in self.results), default=4)
        lines = [f"{'check'.ljust(width)}  result  detail"]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{r.name.ljust(width)}  {status:<6}  {r.detail}")
        return "\n".join(lines)


class AblationRow(BaseModel):
    """One configuration of the SRW placement sweep."""

    srw_stages: List[int]
    target_iou: float
    target_iou_std: float
    source_iou: float
    checkpoint: str


class CheckpointData(BaseModel):
    """
    Contents of a checkpoint file.

    :param network_config: Architecture the weights belong to.
    :param training_config: Run configuration (``None`` for bare model exports).
    :param model_state: Network ``state_dict``.
    :param optimizer_state: Optimizer ``state_dict``, if saved.
    :param variance_states: ISW statistics per whitening stage.
    :param seeds: Seeds of the run's random streams.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    magic: str
    format_version: int
    generator_version: str = ""
    network_config: NetworkConfig
    training_config: Optional[TrainingConfig] = None
    model_state: Dict[str, Any]
    optimizer_state: Optional[Dict[str, Any]] = None
    variance_states: List[Dict[str, Any]] = Field(default_factory=list)
    epoch: int = 0
    global_step: int = 0
    best_val_iou: Optional[float] = None
    seeds: Dict[str, int] = Field(default_factory=dict)
