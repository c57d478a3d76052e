__all__ = [
    "SRWSegBase",
    "FeatureError",
    "ShapeMismatchError",
    "NonFiniteInputError",
    "DegenerateInputError",
    "AttentionRangeError",
    "WhiteningStateError",
    "WarmupIncompleteError",
    "ConfigError",
    "DatasetError",
    "SceneGenerationError",
    "DatasetLoadError",
    "EmptyDatasetError",
    "OutputExistsError",
    "InputSizeMismatchError",
    "AugmentationError",
    "TrainingError",
    "NonFiniteLossError",
    "MissingPairError",
    "CheckpointError",
    "ReportExportError",
]


from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple


class SRWSegBase(Exception):
    """Base exception for all srwseg-related errors."""

    pass


class FeatureError(SRWSegBase):
    """Base exception for invalid feature maps and feature-level operands."""

    pass


class DatasetError(SRWSegBase):
    """Base exception for corpus generation and loading errors."""

    pass


class TrainingError(SRWSegBase):
    """Base exception for training-loop errors."""

    pass


class WhiteningStateError(SRWSegBase):
    """Base exception for misuse of the ISW statistics state."""

    pass


class ShapeMismatchError(FeatureError, ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, what: str, expected: object, got: object):
        message = f"Shape mismatch for {what}: expected {expected}, got {got}."
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(message)


class NonFiniteInputError(FeatureError, ValueError):
    """Raised when an input contains NaN or infinite values."""

    def __init__(self, what: str):
        message = f"{what} contains non-finite values."
        self.what = what
        super().__init__(message)


class DegenerateInputError(FeatureError, ValueError):
    """Raised when an input is valid in shape but degenerate for the operation."""

    def __init__(self, what: str, reason: str):
        message = f"Degenerate {what}: {reason}"
        self.what = what
        self.reason = reason
        super().__init__(message)


class AttentionRangeError(FeatureError, ValueError):
    """Raised when attention weights leave [0, 1]; the attention head is broken."""

    def __init__(self, low: float, high: float):
        message = (
            f"Attention weights must lie in [0, 1], got range [{low:.6g}, {high:.6g}]."
        )
        self.low = low
        self.high = high
        super().__init__(message)


class WarmupIncompleteError(WhiteningStateError, RuntimeError):
    """Raised when a whitening mask is requested before the statistics are warm."""

    def __init__(self, warm_samples: int, required: int):
        message = (
            f"Covariance statistics are not warm yet ({warm_samples}/{required} "
            "samples); keep accumulating before clustering."
        )
        self.warm_samples = warm_samples
        self.required = required
        super().__init__(message)


class ConfigError(SRWSegBase, ValueError):
    """Raised when a configuration is invalid or references unknown keys."""

    def __init__(self, reason: str, key: Optional[str] = None):
        message = f"Invalid configuration key '{key}': {reason}" if key else reason
        self.key = key
        self.reason = reason
        super().__init__(message)


class SceneGenerationError(DatasetError, RuntimeError):
    """Raised when a scene cannot satisfy the lesion-area constraint."""

    def __init__(self, seed: int, attempts: int):
        message = (
            f"Scene generation failed for seed {seed} after {attempts} resamples; "
            "reseed and try again."
        )
        self.seed = seed
        self.attempts = attempts
        super().__init__(message)


class DatasetLoadError(DatasetError, ValueError):
    """Raised when one or more dataset items fail validation."""

    def __init__(self, root: Path, items: Sequence[Tuple[str, str]]):
        listed = "; ".join(f"{item_id}: {reason}" for item_id, reason in items)
        message = f"{len(items)} invalid item(s) in {root}: {listed}"
        self.root = root
        self.items: List[Tuple[str, str]] = list(items)
        super().__init__(message)


class EmptyDatasetError(DatasetError, ValueError):
    """Raised when a dataset or split holds no samples."""

    def __init__(self, where: str):
        message = f"Dataset is empty: {where}"
        self.where = where
        super().__init__(message)


class OutputExistsError(DatasetError, FileExistsError):
    """Raised when refusing to overwrite an existing output directory."""

    def __init__(self, path: Path):
        message = f"Output directory '{path}' already exists; pass force to overwrite."
        self.path = path
        super().__init__(message)


class InputSizeMismatchError(DatasetError, ValueError):
    """Raised when corpus frames do not match the network's ``input_size``."""

    def __init__(self, expected: Tuple[int, int], actual: Tuple[int, int], where: str):
        message = (
            f"{where} holds {actual[0]}x{actual[1]} frames but the network expects "
            f"input_size {expected[0]}x{expected[1]}"
        )
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        self.where = where
        super().__init__(message)


class AugmentationError(DatasetError, ValueError):
    """Raised when an augmentation policy cannot be applied to an image."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"Augmentation failed: {reason}")


class NonFiniteLossError(TrainingError, FloatingPointError):
    """Raised when the training objective becomes NaN or infinite."""

    def __init__(
        self,
        step: int,
        layer_losses: Dict[str, float],
        grad_norms: Dict[str, float],
    ):
        message = (
            f"Non-finite loss at step {step}; layer losses={layer_losses}, "
            f"grad norms={grad_norms}"
        )
        self.step = step
        self.layer_losses = layer_losses
        self.grad_norms = grad_norms
        super().__init__(message)


class MissingPairError(TrainingError, ValueError):
    """Raised when a train-mode forward needs the transformed image but lacks it."""

    def __init__(self, stages: Sequence[int]):
        message = (
            f"x_aug is required in train mode while SRW stages {list(stages)} are active."
        )
        self.stages = list(stages)
        super().__init__(message)


class CheckpointError(SRWSegBase, ValueError):
    """Raised when a checkpoint is missing, foreign or of an unsupported version."""

    def __init__(self, path: Path, reason: str):
        message = f"Cannot load checkpoint '{path}': {reason}"
        self.path = path
        self.reason = reason
        super().__init__(message)


class ReportExportError(SRWSegBase, OSError):
    """Raised when a report or overlay cannot be written."""

    def __init__(self, path: Path, reason: str):
        message = f"Failed to export to '{path}': {reason}"
        self.path = path
        self.reason = reason
        super().__init__(message)
