"""
checkpoint.py
-------------
Versioned checkpoint files.  A checkpoint is a ``torch.save`` archive of plain
containers (no pickled classes), tagged with the magic string ``SRWSEG1``::

    magic, format_version, generator_version,
    network_config, training_config,
    model_state, optimizer_state, variance_states,
    epoch, global_step, best_val_iou, seeds

Files are written next to their destination and moved into place atomically.
"""

import logging
import os
import tempfile
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import torch
from pydantic import ValidationError

from ._version import __version__
from .basemodels import CheckpointData, TrainingConfig
from .exceptions import CheckpointError
from .isw import VarianceState
from .network import SRWSegNet, build_model

logger = logging.getLogger(__name__)

__all__ = ["CHECKPOINT_MAGIC", "save_checkpoint", "load_checkpoint", "load_model"]

CHECKPOINT_MAGIC = "SRWSEG1"
CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(
    path: Union[str, Path],
    model: SRWSegNet,
    optimizer: Optional[torch.optim.Optimizer] = None,
    variance_states: Sequence[VarianceState] = (),
    training_config: Optional[TrainingConfig] = None,
    epoch: int = 0,
    global_step: int = 0,
    best_val_iou: Optional[float] = None,
    seeds: Optional[Dict[str, int]] = None,
) -> Path:
    """
    Write a checkpoint atomically.

    :param path: Destination file.
    :param model: Network whose weights and config are stored.
    :return: ``path``.
    """
    path = Path(path)
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "generator_version": __version__,
        "network_config": model.config.model_dump(mode="json"),
        "training_config": (
            None if training_config is None else training_config.model_dump(mode="json")
        ),
        "model_state": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "optimizer_state": None if optimizer is None else optimizer.state_dict(),
        "variance_states": [s.state_dict() for s in variance_states],
        "epoch": epoch,
        "global_step": global_step,
        "best_val_iou": best_val_iou,
        "seeds": dict(seeds or {}),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info("Saved checkpoint %s (epoch %d)", path, epoch)
    return path


def load_checkpoint(
    path: Union[str, Path], map_location: Union[str, torch.device] = "cpu"
) -> CheckpointData:
    """
    Read and validate a checkpoint.

    :raises CheckpointError: Missing file, unreadable archive, foreign magic
        string or unsupported format version.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(path, "file not found")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointError(path, f"unreadable archive ({e})") from e
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(path, f"not an {CHECKPOINT_MAGIC} checkpoint")
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            path, f"unsupported format version {payload.get('format_version')}"
        )
    try:
        return CheckpointData.model_validate(payload)
    except ValidationError as e:
        raise CheckpointError(path, f"malformed contents ({e})") from e


def load_model(
    path: Union[str, Path], device: Union[str, torch.device] = "cpu"
) -> Tuple[SRWSegNet, CheckpointData]:
    """Rebuild the network stored in a checkpoint, in eval mode."""
    data = load_checkpoint(path, map_location=device)
    model = build_model(data.network_config)
    try:
        model.load_state_dict(data.model_state)
    except RuntimeError as e:
        raise CheckpointError(Path(path), f"weights do not fit the stored config ({e})") from e
    model.to(device).eval()
    return model, data
