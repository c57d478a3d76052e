"""
synthdata.py
------------
Synthetic two-modality lesion corpus, the augmentation pipeline, the
photometric style transform used to build whitening pairs, and the loader for
corpora on disk (generated or user-supplied, same layout)::

    <root>/images/<id>.png   8-bit RGB
    <root>/masks/<id>.png    8-bit grayscale, values {0, 255}
    <root>/manifest.json     CorpusManifest

All generator and augmenter outputs are pure functions of ``(seed, config)``.
"""

from __future__ import annotations

import asyncio
import io
import json
import logging
import shutil
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import aiofiles
import numpy as np
import torch
from PIL import Image
from pydantic import ValidationError
from scipy import ndimage
from torch.utils.data import Dataset

from ._version import __version__
from .basemodels import (
    AugmentPolicy,
    CorpusConfig,
    CorpusManifest,
    CorpusProgress,
    PhotometricConfig,
    SamplePair,
)
from .enums import LesionKind, Modality, Split
from .exceptions import (
    AugmentationError,
    ConfigError,
    DatasetLoadError,
    EmptyDatasetError,
    InputSizeMismatchError,
    OutputExistsError,
    SceneGenerationError,
)
from .utils import call_callback, derive_seed, finalize_output, make_staging_dir

logger = logging.getLogger(__name__)

__all__ = [
    "SOURCE_COLOR_MATRIX",
    "TARGET_COLOR_MATRIX",
    "generate_scene",
    "apply_modality",
    "hflip",
    "color_jitter",
    "gaussian_blur",
    "augment",
    "style_transform",
    "build_corpus",
    "iter_dataset",
    "load_dataset",
    "SegmentationDataset",
    "TrainingPairs",
    "modality_separability",
]

GENERATOR_VERSION = f"srwseg-synth/{__version__}"

# Frozen modality constants
SOURCE_COLOR_MATRIX = np.array(
    [[1.00, 0.08, 0.02], [0.06, 0.90, 0.04], [0.02, 0.05, 0.75]]
)
SOURCE_GAMMA = 0.9
TARGET_COLOR_MATRIX = np.array(
    [[0.45, 0.10, 0.05], [0.12, 0.95, 0.20], [0.10, 0.25, 1.00]]
)
TARGET_GAMMA = 1.1
TARGET_GREEN_CONTRAST = 0.15
LOCAL_CONTRAST_SIGMA = 2.0

# Frozen scene constants
LESION_PERCENTILE = 85.0
MIN_AREA_FRACTION = 0.02
MAX_AREA_FRACTION = 0.30
MAX_SCENE_ATTEMPTS = 20
MAX_RESEEDS = 5
BACKGROUND_TINT = np.array([0.62, 0.42, 0.36])
BACKGROUND_SPREAD = 0.10
LESION_OFFSET = np.array([0.16, -0.06, -0.08])
LESION_TEXTURE = 0.09


def _standardize(field: np.ndarray) -> np.ndarray:
    std = field.std()
    return (field - field.mean()) / (std if std > 0 else 1.0)


def _lesion_sigma(size: int, kind: LesionKind) -> Tuple[float, float]:
    if kind == LesionKind.BARRETT:
        # elongated band along the rows
        return (size / 14.0, size / 4.0)
    return (size / 7.0, size / 7.0)


def generate_scene(
    seed: int, size: int = 64, lesion_kind: LesionKind = LesionKind.POLYP
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Render one modality-free scene.

    The background is blurred 3-channel noise around a fixed tint.  The lesion is
    the largest connected region where an independent blurred field exceeds its
    85th percentile; it must cover 2-30 % of the frame (up to 20 resamples).
    Inside the lesion a finer texture and an intensity offset are added.

    :param seed: Scene seed.
    :param size: Square side, ``>= 32`` and even.
    :param lesion_kind: ``polyp`` (compact blob) or ``barrett`` (elongated band).
    :return: ``(image, mask)``: ``(3, size, size)`` float32 in ``[0, 1]`` and
        ``(size, size)`` uint8 in ``{0, 1}``.
    :raises SceneGenerationError: No acceptable lesion within 20 resamples.
    """
    if size < 32 or size % 2:
        raise ConfigError(f"scene size must be even and >= 32, got {size}", key="image_size")
    rng = np.random.default_rng(seed)
    kind = LesionKind(lesion_kind)

    background = np.stack(
        [ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 8.0) for _ in range(3)]
    )
    image = BACKGROUND_TINT[:, None, None] + BACKGROUND_SPREAD * np.stack(
        [_standardize(c) for c in background]
    )

    sigma = _lesion_sigma(size, kind)
    mask = None
    for _ in range(MAX_SCENE_ATTEMPTS):
        field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
        region = field > np.percentile(field, LESION_PERCENTILE)
        labels, count = ndimage.label(region)
        if count == 0:
            continue
        sizes = np.bincount(labels.ravel())[1:]
        blob = labels == (int(np.argmax(sizes)) + 1)
        fraction = blob.mean()
        if MIN_AREA_FRACTION <= fraction <= MAX_AREA_FRACTION:
            mask = blob
            break
    if mask is None:
        raise SceneGenerationError(seed, MAX_SCENE_ATTEMPTS)

    texture = _standardize(ndimage.gaussian_filter(rng.standard_normal((size, size)), 0.8))
    lesion = LESION_OFFSET[:, None, None] + LESION_TEXTURE * texture[None]
    image = image + lesion * mask[None]
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def apply_modality(image: np.ndarray, modality: Union[Modality, str]) -> np.ndarray:
    """
    Color a scene as one imaging modality: a fixed 3x3 color matrix, then gamma;
    target-like frames also get a local-contrast boost on green.  Geometry is
    untouched.

    :raises AugmentationError: Unknown modality tag.
    """
    try:
        modality = Modality(modality)
    except ValueError as e:
        raise AugmentationError(f"unknown modality {modality!r}") from e

    if modality == Modality.SOURCE:
        matrix, gamma = SOURCE_COLOR_MATRIX, SOURCE_GAMMA
    else:
        matrix, gamma = TARGET_COLOR_MATRIX, TARGET_GAMMA
    out = np.clip(np.einsum("ij,jhw->ihw", matrix, image.astype(np.float64)), 0.0, 1.0) ** gamma
    if modality == Modality.TARGET:
        green = out[1]
        local_mean = ndimage.gaussian_filter(green, LOCAL_CONTRAST_SIGMA)
        out[1] = local_mean + (1.0 + TARGET_GREEN_CONTRAST) * (green - local_mean)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def hflip(image: np.ndarray, mask: Optional[np.ndarray] = None):
    """Mirror ``(3, H, W)`` images and ``(H, W)`` masks left-right."""
    flipped = np.ascontiguousarray(image[..., ::-1])
    if mask is None:
        return flipped
    return flipped, np.ascontiguousarray(mask[..., ::-1])


def _gray(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def color_jitter(
    image: np.ndarray, brightness: float, contrast: float, saturation: float
) -> np.ndarray:
    """Apply brightness, contrast and saturation factors, in that order."""
    out = image * brightness
    out = (out - _gray(out).mean()) * contrast + _gray(out).mean()
    gray = _gray(out)[None]
    out = (out - gray) * saturation + gray
    return np.clip(out, 0.0, 1.0)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Blur every channel spatially; ``sigma <= 0`` is a no-op."""
    if sigma <= 0:
        return image
    return ndimage.gaussian_filter(image, sigma=(0, sigma, sigma))


def _photometric(image: np.ndarray, rng: np.random.Generator, cfg: PhotometricConfig) -> np.ndarray:
    # draws are made unconditionally so the stream does not depend on the ranges
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
    sigma = rng.uniform(*cfg.blur_sigma)
    apply_blur = rng.random() < cfg.blur_probability

    out = image.astype(np.float64)
    if (b, c, s) != (1.0, 1.0, 1.0):
        out = color_jitter(out, b, c, s)
    if apply_blur and cfg.blur_sigma[1] > 0:
        out = gaussian_blur(out, sigma)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def style_transform(
    image: np.ndarray, seed: int, config: Optional[PhotometricConfig] = None
) -> np.ndarray:
    """
    Photometric-only transform producing the second image of a whitening pair.
    Geometry is never changed, so the pair shares its mask.

    :param image: ``(3, H, W)`` in ``[0, 1]``.
    :param seed: Transform seed.
    :param config: Jitter and blur ranges (default: +-0.3 jitter, sigma 0.1-1.5).
    """
    return _photometric(image, np.random.default_rng(seed), config or PhotometricConfig())


def augment(
    image: np.ndarray,
    mask: np.ndarray,
    seed: int,
    policy: Optional[AugmentPolicy] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Training augmentation: random scale, random crop and horizontal flip on image
    and mask alike (mask by nearest neighbour), then color jitter and blur on the
    image only.  A frame scaled below the crop is mirror-padded out to it.

    :param image: ``(3, H, W)`` float image.
    :param mask: ``(H, W)`` binary mask.
    :param seed: Augmentation seed.
    :param policy: Enabled transforms and their ranges.
    :raises AugmentationError: ``crop_size`` exceeds the image.
    """
    policy = policy or AugmentPolicy()
    h, w = mask.shape
    if image.shape[1:] != mask.shape:
        raise AugmentationError(f"image {image.shape[1:]} and mask {mask.shape} not aligned")
    if policy.crop_size is not None and policy.crop_size > min(h, w):
        raise AugmentationError(f"crop {policy.crop_size} larger than image {h}x{w}")
    if policy.is_identity:
        return image.copy(), mask.copy()

    rng = np.random.default_rng(seed)
    img = image.astype(np.float32)
    msk = mask.astype(np.uint8)

    if policy.scale_range is not None:
        scale = rng.uniform(*policy.scale_range)
        new_h, new_w = max(1, round(h * scale)), max(1, round(w * scale))
        if (new_h, new_w) != (h, w):
            img = ndimage.zoom(img, (1, new_h / h, new_w / w), order=1, grid_mode=True, mode="nearest")
            msk = ndimage.zoom(msk, (new_h / h, new_w / w), order=0, grid_mode=True, mode="nearest")

    crop_h = crop_w = policy.crop_size
    if crop_h is None:
        crop_h, crop_w = h, w
    cur_h, cur_w = msk.shape
    pad_h, pad_w = max(0, crop_h - cur_h), max(0, crop_w - cur_w)
    if pad_h or pad_w:
        # downscaled below the crop: mirror the borders back out to it
        spatial = ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2))
        img = np.pad(img, ((0, 0), *spatial), mode="symmetric")
        msk = np.pad(msk, spatial, mode="symmetric")
        cur_h, cur_w = msk.shape
    top = int(rng.integers(0, cur_h - crop_h + 1))
    left = int(rng.integers(0, cur_w - crop_w + 1))
    img = img[:, top : top + crop_h, left : left + crop_w]
    msk = msk[top : top + crop_h, left : left + crop_w]

    if policy.hflip and rng.random() < policy.flip_probability:
        img, msk = hflip(img, msk)

    if policy.photometric is not None:
        img = _photometric(img, rng, policy.photometric)
    return np.clip(img, 0.0, 1.0).astype(np.float32), np.ascontiguousarray(msk)


# ---------------------------------------------------------------------------
# Corpus on disk
# ---------------------------------------------------------------------------


def _encode_png(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def _image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)


def _render_sample(
    base_seed: int, domain: int, index: int, size: int, kind: LesionKind, modality: Modality
) -> Tuple[bytes, bytes]:
    for reseed in range(MAX_RESEEDS):
        seed = derive_seed(base_seed, domain, index, reseed)
        try:
            base, mask = generate_scene(seed, size, kind)
            break
        except SceneGenerationError:
            logger.debug("Scene %d/%d rejected, reseeding", domain, index)
    else:
        raise SceneGenerationError(base_seed, MAX_RESEEDS * MAX_SCENE_ATTEMPTS)
    image = apply_modality(base, modality)
    return _encode_png(_image_to_uint8(image)), _encode_png(mask * 255)


def _assign_splits(config: CorpusConfig) -> dict:
    counts = config.split_counts()
    source_ids = [f"src-{i:04d}" for i in range(config.source_count)]
    order = np.random.default_rng(derive_seed(config.seed, 2)).permutation(len(source_ids))
    shuffled = [source_ids[i] for i in order]
    n_train, n_val = counts[Split.TRAIN], counts[Split.VAL]
    return {
        Split.TRAIN.value: sorted(shuffled[:n_train]),
        Split.VAL.value: sorted(shuffled[n_train : n_train + n_val]),
        Split.TEST_SOURCE.value: sorted(shuffled[n_train + n_val :]),
        Split.TEST_TARGET.value: [f"tgt-{i:04d}" for i in range(config.target_count)],
    }


async def build_corpus(
    config: Optional[CorpusConfig] = None,
    output_dir: Union[str, Path] = "corpus",
    force: bool = False,
    progress_callback: Optional[Callable[[CorpusProgress], None]] = None,
) -> CorpusManifest:
    """
    Generate the synthetic corpus and write it to ``output_dir``.

    Source-like scenes are split train/val/test-source; target-like scenes form
    test-target only.  Everything is written to a staging directory first and
    moved into place at the end.

    :param config: Corpus configuration.
    :param output_dir: Destination directory.
    :param force: Replace an existing ``output_dir``.
    :param progress_callback: Sync or async callable receiving :class:`CorpusProgress`.
    :return: The written manifest.
    :raises OutputExistsError: ``output_dir`` exists and ``force`` is false.
    """
    config = config or CorpusConfig()
    output_dir = Path(output_dir)
    if output_dir.exists() and not force:
        raise OutputExistsError(output_dir)

    splits = _assign_splits(config)
    jobs = [
        (item_id, 0 if item_id.startswith("src") else 1, int(item_id.split("-")[1]))
        for ids in splits.values()
        for item_id in ids
    ]
    jobs.sort()
    total = len(jobs)

    staging = make_staging_dir(output_dir)
    (staging / "images").mkdir()
    (staging / "masks").mkdir()

    semaphore = asyncio.Semaphore(config.concurrency)
    progress = CorpusProgress(total=total)
    progress_lock = asyncio.Lock()

    async def _write_one(item_id: str, domain: int, index: int) -> None:
        async with semaphore:
            modality = Modality.SOURCE if domain == 0 else Modality.TARGET
            image_png, mask_png = await asyncio.to_thread(
                _render_sample,
                config.seed,
                domain,
                index,
                config.image_size,
                config.lesion_kind,
                modality,
            )
            async with aiofiles.open(staging / "images" / f"{item_id}.png", "wb") as f:
                await f.write(image_png)
            async with aiofiles.open(staging / "masks" / f"{item_id}.png", "wb") as f:
                await f.write(mask_png)
            async with progress_lock:
                progress.written += 1
                progress.item_id = item_id
                await call_callback(progress_callback, progress.model_copy())

    try:
        tasks = [asyncio.create_task(_write_one(*job)) for job in jobs]
        try:
            await asyncio.gather(*tasks)
        except BaseException:
            for t in tasks:
                t.cancel()
            raise

        manifest = CorpusManifest(
            seed=config.seed,
            splits=splits,
            counts={name: len(ids) for name, ids in splits.items()},
            generator_version=GENERATOR_VERSION,
            image_size=config.image_size,
            lesion_kind=config.lesion_kind,
        )
        async with aiofiles.open(staging / "manifest.json", "w") as f:
            await f.write(manifest.model_dump_json(indent=2))
    except BaseException:
        await asyncio.to_thread(shutil.rmtree, staging, True)
        raise

    await finalize_output(staging, output_dir, force=force)
    logger.info(
        "Wrote corpus to %s: %s",
        output_dir,
        ", ".join(f"{k}={v}" for k, v in manifest.counts.items()),
    )
    return manifest


def _read_manifest(root: Path) -> Optional[CorpusManifest]:
    path = root / "manifest.json"
    if not path.exists():
        return None
    try:
        return CorpusManifest.model_validate(json.loads(path.read_text()))
    except (json.JSONDecodeError, ValidationError) as e:
        raise DatasetLoadError(root, [("manifest.json", str(e))]) from e


def _load_item(root: Path, item_id: str) -> Tuple[np.ndarray, np.ndarray]:
    image_path = root / "images" / f"{item_id}.png"
    mask_path = root / "masks" / f"{item_id}.png"
    if not image_path.exists():
        raise ValueError("missing image")
    if not mask_path.exists():
        raise ValueError("missing mask")
    with Image.open(image_path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    with Image.open(mask_path) as im:
        raw = np.asarray(im.convert("L"))
    if raw.shape != image.shape[1:]:
        raise ValueError(f"image {image.shape[1:]} and mask {raw.shape} sizes differ")
    bad = np.setdiff1d(np.unique(raw), [0, 255])
    if bad.size:
        raise ValueError(f"non-binary mask values {bad.tolist()[:5]}")
    return image, (raw // 255).astype(np.uint8)


def _resolve_ids(root: Path, split: Optional[Union[Split, str]]):
    manifest = _read_manifest(root)
    if manifest is None:
        if split is not None:
            raise DatasetLoadError(root, [("manifest.json", f"required to select split '{split}'")])
        image_dir = root / "images"
        ids = sorted(p.stem for p in image_dir.glob("*.png")) if image_dir.is_dir() else []
        return ids, Modality.SOURCE
    if split is None:
        ids = sorted(i for ids in manifest.splits.values() for i in ids)
        return ids, None
    split = Split(split)
    return list(manifest.splits.get(split.value, [])), manifest.modality_of(split)


def iter_dataset(
    path: Union[str, Path], split: Optional[Union[Split, str]] = None
) -> Iterator[SamplePair]:
    """
    Stream the pairs of a corpus in id order.

    Broken items are skipped while streaming and reported together at the end.

    :param path: Corpus root.
    :param split: Split to read (all splits when ``None``).
    :raises EmptyDatasetError: No items found.
    :raises DatasetLoadError: After the last valid item, if any item failed.
    """
    root = Path(path)
    ids, modality = _resolve_ids(root, split)
    if not ids:
        raise EmptyDatasetError(f"{root}" + (f" [{split}]" if split else ""))

    manifest = _read_manifest(root) if modality is None else None
    errors: List[Tuple[str, str]] = []
    for item_id in ids:
        try:
            image, mask = _load_item(root, item_id)
        except (OSError, ValueError) as e:
            errors.append((item_id, str(e)))
            continue
        item_modality = modality
        if item_modality is None:
            item_modality = manifest.modality_of(manifest.split_of(item_id))
        yield SamplePair(image=image, mask=mask, modality=item_modality, id=item_id)
    if errors:
        raise DatasetLoadError(root, errors)


class SegmentationDataset(Dataset):
    """
    In-memory split of a corpus.

    :param pairs: Loaded samples in id order.
    :param root: Corpus root they came from.
    :param split: Split name, if any.
    """

    def __init__(
        self, pairs: Sequence[SamplePair], root: Optional[Path] = None, split: Optional[str] = None
    ):
        self.pairs = list(pairs)
        self.root = root
        self.split = split

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int) -> SamplePair:
        return self.pairs[index]

    @property
    def ids(self) -> List[str]:
        return [p.id for p in self.pairs]

    def check_input_size(self, input_size: Tuple[int, int]) -> None:
        """
        :raises InputSizeMismatchError: Some frame is not ``input_size``.
        """
        expected = tuple(input_size)
        for pair in self.pairs:
            if tuple(pair.mask.shape) != expected:
                raise InputSizeMismatchError(expected, tuple(pair.mask.shape), repr(self))

    def tensors(self, indices: Optional[Sequence[int]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Stack images ``(N, 3, H, W)`` float32 and masks ``(N, H, W)`` long."""
        chosen = self.pairs if indices is None else [self.pairs[i] for i in indices]
        images = torch.from_numpy(np.stack([p.image for p in chosen]))
        masks = torch.from_numpy(np.stack([p.mask for p in chosen]).astype(np.int64))
        return images, masks

    def __repr__(self) -> str:
        return f"SegmentationDataset(root={self.root}, split={self.split}, n={len(self)})"


def load_dataset(
    path: Union[str, Path], split: Optional[Union[Split, str]] = None
) -> SegmentationDataset:
    """
    Load and validate a corpus split.

    :raises EmptyDatasetError: The directory or split holds no items.
    :raises DatasetLoadError: Itemized list of every broken item.
    """
    root = Path(path)
    pairs = list(iter_dataset(root, split))
    logger.debug("Loaded %d samples from %s [%s]", len(pairs), root, split or "all")
    return SegmentationDataset(pairs, root=root, split=None if split is None else Split(split).value)


class TrainingPairs(Dataset):
    """
    Training view of a dataset: augmented image, its style-transformed twin and
    the shared mask.  Draws depend on ``(seed, epoch, index)`` only.
    """

    def __init__(
        self,
        dataset: SegmentationDataset,
        seed: int = 0,
        policy: Optional[AugmentPolicy] = None,
        style: Optional[PhotometricConfig] = None,
    ):
        self.dataset = dataset
        self.seed = seed
        self.policy = policy or AugmentPolicy()
        self.style = style or PhotometricConfig()
        self.epoch = 1

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.dataset)

    def __getitem__(self, index: int):
        pair = self.dataset[index]
        image, mask = augment(
            pair.image, pair.mask, derive_seed(self.seed, self.epoch, index, 0), self.policy
        )
        image_aug = style_transform(image, derive_seed(self.seed, self.epoch, index, 1), self.style)
        return (
            torch.from_numpy(image),
            torch.from_numpy(image_aug),
            torch.from_numpy(mask.astype(np.int64)),
        )


def modality_separability(n_seeds: int = 200, size: int = 32, seed: int = 0) -> float:
    """
    Held-out accuracy of a least-squares linear classifier on per-channel means
    of source-like vs target-like renderings of the same scenes.

    Even-indexed scenes train the classifier, odd-indexed ones test it.
    """
    features, labels = [], []
    for i in range(n_seeds):
        base, _ = generate_scene(derive_seed(seed, 3, i), size)
        for label, modality in enumerate((Modality.SOURCE, Modality.TARGET)):
            features.append(apply_modality(base, modality).mean(axis=(1, 2)))
            labels.append((i % 2, 2.0 * label - 1.0))
    x = np.hstack([np.asarray(features, dtype=np.float64), np.ones((len(features), 1))])
    fold = np.array([f for f, _ in labels])
    y = np.array([t for _, t in labels])
    w, *_ = np.linalg.lstsq(x[fold == 0], y[fold == 0], rcond=None)
    predicted = np.sign(x[fold == 1] @ w)
    return float((predicted == y[fold == 1]).mean())
