import asyncio
import inspect
import json
import logging
import os
import random
import shutil
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Type

import numpy as np
import torch
from pydantic import BaseModel

from .exceptions import ConfigError, OutputExistsError

logger = logging.getLogger(__name__)

__all__ = [
    "call_callback",
    "derive_seed",
    "seed_everything",
    "make_staging_dir",
    "finalize_output",
    "parse_flat_config",
    "route_config_values",
    "config_key_help",
    "default_cache_dir",
]


async def call_callback(callback, *args, **kwargs):
    """
    Call a callback, supporting both coroutine and regular functions.

    :param callback: The callback function to call (``None`` is a no-op).
    :param args: Positional arguments for the callback.
    :param kwargs: Keyword arguments for the callback.
    """
    if callback is None:
        return
    if inspect.iscoroutinefunction(callback):
        await callback(*args, **kwargs)
    else:
        callback(*args, **kwargs)


def derive_seed(base: int, *keys: int) -> int:
    """
    Derive an independent 32-bit seed from a base seed and integer keys.

    :param base: Run seed.
    :param keys: Stream identifiers, e.g. ``(domain, index)`` or ``(epoch, index)``.
    :return: Seed usable by numpy and torch.
    """
    seq = np.random.SeedSequence(entropy=base, spawn_key=tuple(keys))
    return int(seq.generate_state(1)[0])


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """
    Seed python, numpy and torch; in deterministic mode also pin torch to one
    thread and deterministic kernels.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
        if torch.backends.cudnn.is_available():
            torch.backends.cudnn.benchmark = False
            torch.backends.cudnn.deterministic = True


def make_staging_dir(output_dir: Path) -> Path:
    """Create a hidden staging directory next to ``output_dir`` (same filesystem)."""
    output_dir.parent.mkdir(parents=True, exist_ok=True)
    return Path(
        tempfile.mkdtemp(prefix=f".{output_dir.name}-", dir=output_dir.parent)
    )


async def finalize_output(staging: Path, output_dir: Path, force: bool = False) -> Path:
    """
    Move a fully written staging directory into place.

    Nothing is visible at ``output_dir`` until every file has been written, so a
    failed run never leaves a partial output behind.

    :param staging: Directory holding the finished output.
    :param output_dir: Final destination.
    :param force: Replace an existing ``output_dir``.
    :return: ``output_dir``.
    :raises OutputExistsError: ``output_dir`` exists and ``force`` is false.
    """
    try:
        if output_dir.exists():
            if not force:
                raise OutputExistsError(output_dir)
            logger.warning("Overwriting existing output %s", output_dir)
            await asyncio.to_thread(shutil.rmtree, output_dir)
        await asyncio.to_thread(os.replace, staging, output_dir)
        logger.debug("Moved %s → %s", staging, output_dir)
    except BaseException:
        try:
            if staging.exists():
                await asyncio.to_thread(shutil.rmtree, staging)
        except Exception as e:
            logger.warning("Failed to clean staging dir: %s", e)
        raise
    return output_dir


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    lowered = raw.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    # comma lists and bare strings are left to the pydantic validators
    return raw


def parse_flat_config(lines: Iterable[str], source: str = "<config>") -> Dict[str, Any]:
    """
    Parse flat ``key = value`` lines (``#`` starts a comment).

    :param lines: Config lines, or ``key=value`` override strings.
    :param source: Name used in error messages.
    :return: Mapping of key to parsed value.
    :raises ConfigError: A line is not of the form ``key = value``.
    """
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{text}'")
        key, raw = text.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


def route_config_values(
    values: Mapping[str, Any], models: Mapping[str, Type[BaseModel]]
) -> Dict[str, Dict[str, Any]]:
    """
    Route flat keys to the models declaring them. A key declared by several
    models (e.g. ``seed``) goes to all of them.

    :raises ConfigError: A key is not a field of any model.
    """
    routed: Dict[str, Dict[str, Any]] = {name: {} for name in models}
    for key, value in values.items():
        owners = [name for name, model in models.items() if key in model.model_fields]
        if not owners:
            raise ConfigError("not a documented config key", key=key)
        for owner in owners:
            routed[owner][key] = value
    return routed


def config_key_help(models: Mapping[str, Type[BaseModel]]) -> str:
    """Render every config key with its default and description."""
    lines = []
    for name, model in models.items():
        lines.append(f"{name} keys:")
        for key, field in model.model_fields.items():
            default = (
                field.default_factory() if field.default_factory else field.default
            )
            if isinstance(default, BaseModel):
                default = "<nested: JSON object>"
            desc = field.description or ""
            lines.append(f"  {key} (default {default!s}) {desc}".rstrip())
    return "\n".join(lines)


def default_cache_dir() -> Path:
    """Corpus cache root, redirected by ``SRWSEG_CACHE``."""
    env = os.environ.get("SRWSEG_CACHE")
    return Path(env).expanduser() if env else Path.home() / ".cache" / "srwseg"
