from enum import StrEnum

__all__ = [
    "Modality",
    "Split",
    "LesionKind",
    "RunMode",
    "TrainPhase",
    "WhiteningMode",
    "CheckComponent",
    "KMeansInit",
]


class Modality(StrEnum):
    """Imaging modality of a synthetic frame."""

    SOURCE = "source-like"
    TARGET = "target-like"


class Split(StrEnum):
    TRAIN = "train"
    VAL = "val"
    TEST_SOURCE = "test-source"
    TEST_TARGET = "test-target"


class LesionKind(StrEnum):
    """Shape family of the synthetic lesion."""

    # compact, roughly isotropic blob
    POLYP = "polyp"
    # elongated band-like region
    BARRETT = "barrett"


class RunMode(StrEnum):
    TRAIN = "train"
    EVAL = "eval"


class TrainPhase(StrEnum):
    """Training phase; ISW masks only exist in the full phase."""

    WARMUP = "warmup"
    FULL = "full"


class WhiteningMode(StrEnum):
    ISW = "isw"
    DWT = "dwt"
    NONE = "none"


class CheckComponent(StrEnum):
    """Components covered by the finite-difference gradient check."""

    INSTANCE_NORM = "instance_norm"
    ATTENTION = "attention"
    RESTITUTION = "restitution"
    SNR = "snr"
    DC_LOSS = "dc_loss"
    DWT_LOSS = "dwt_loss"
    ISW_LOSS = "isw_loss"
    END_TO_END = "end_to_end"


class KMeansInit(StrEnum):
    OPTIMAL_SPLIT = "optimal-split"
    EXTREMES = "extremes"
