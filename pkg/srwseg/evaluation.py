"""
evaluation.py
-------------
Pixel confusion counts, per-image segmentation metrics, per-split reports
(macro mean and population std over images), and report/overlay export.
"""

from __future__ import annotations

import asyncio
import io
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import aiofiles
import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .basemodels import (
    ConfusionCounts,
    ImageMetrics,
    MetricsReport,
    MetricSummary,
    SegmentationMetrics,
)
from .enums import Split
from .exceptions import (
    DegenerateInputError,
    EmptyDatasetError,
    ReportExportError,
    ShapeMismatchError,
)
from .network import SRWSegNet, predict_mask
from .synthdata import SegmentationDataset

logger = logging.getLogger(__name__)

__all__ = [
    "METRIC_NAMES",
    "confusion",
    "metrics_from_counts",
    "summarize",
    "evaluate",
    "export_report",
    "load_report",
    "boundary",
    "render_overlay",
    "export_overlays",
]

METRIC_NAMES = ("iou", "precision", "recall", "mean_accuracy")

ArrayLike = Union[np.ndarray, torch.Tensor]


def _to_numpy(a: ArrayLike) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def confusion(pred_mask: ArrayLike, gt_mask: ArrayLike) -> ConfusionCounts:
    """
    Pixel counts with lesion (1) as the positive class.

    :raises ShapeMismatchError: Masks differ in shape.
    :raises DegenerateInputError: A mask holds values other than 0 and 1.
    """
    pred, gt = _to_numpy(pred_mask), _to_numpy(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeMismatchError("masks", gt.shape, pred.shape)
    for name, m in (("predicted mask", pred), ("ground-truth mask", gt)):
        if not np.isin(m, (0, 1)).all():
            raise DegenerateInputError(name, "values must be 0 or 1")
    pred, gt = pred.astype(bool), gt.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=int(pred.size) - tp - fp - fn)


def metrics_from_counts(c: ConfusionCounts) -> SegmentationMetrics:
    """
    IoU, precision, recall and mean accuracy (mean of sensitivity and
    specificity).

    Degenerate cases: empty ground truth and empty prediction score 1 on every
    metric; any other zero denominator scores 0, except specificity without
    negatives, which scores 1.
    """
    if c.tp + c.fp + c.fn == 0:
        iou = precision = recall = 1.0
    else:
        iou = c.tp / (c.tp + c.fp + c.fn)
        precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
        recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    specificity = c.tn / (c.tn + c.fp) if c.tn + c.fp else 1.0
    return SegmentationMetrics(
        iou=iou,
        precision=precision,
        recall=recall,
        mean_accuracy=0.5 * (recall + specificity),
    )


def summarize(
    per_image: Sequence[ImageMetrics], model: str, split: Union[Split, str]
) -> MetricsReport:
    """Aggregate per-image metrics into a report (population std)."""
    metrics = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(m, name) for m in per_image], dtype=np.float64)
        metrics[name] = MetricSummary(
            mean=float(values.mean()) if values.size else 0.0,
            std=float(values.std()) if values.size else 0.0,
        )
    return MetricsReport(
        model=model, split=Split(split), n=len(per_image), metrics=metrics, per_image=list(per_image)
    )


def _model_device(model: torch.nn.Module) -> torch.device:
    return next(model.parameters()).device


def _predict_all(model: SRWSegNet, dataset: SegmentationDataset, batch_size: int) -> List[np.ndarray]:
    device = _model_device(model)
    dtype = next(model.parameters()).dtype
    preds: List[np.ndarray] = []
    for start in range(0, len(dataset), batch_size):
        indices = range(start, min(start + batch_size, len(dataset)))
        images, _ = dataset.tensors(indices)
        preds.extend(predict_mask(model, images.to(device=device, dtype=dtype)).cpu().numpy())
    return preds


def evaluate(
    model: SRWSegNet,
    dataset: SegmentationDataset,
    split: Optional[Union[Split, str]] = None,
    model_id: str = "",
    batch_size: int = 16,
) -> MetricsReport:
    """
    Evaluate ``model`` image by image on ``dataset``.

    :param model: Network; switched to eval mode.
    :param dataset: Loaded split.
    :param split: Split tag of the report (defaults to ``dataset.split``).
    :param model_id: Identifier stored in the report.
    :raises EmptyDatasetError: ``dataset`` is empty.
    :raises InputSizeMismatchError: Frames differ from the model's ``input_size``.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError(f"evaluation set {dataset!r}")
    split = split or dataset.split
    if split is None:
        raise ValueError("split tag required for a dataset loaded without a split")
    dataset.check_input_size(model.config.input_size)

    per_image = []
    for pair, pred in zip(dataset.pairs, _predict_all(model, dataset, batch_size)):
        counts = confusion(pred, pair.mask)
        scores = metrics_from_counts(counts)
        per_image.append(ImageMetrics(id=pair.id, **scores.model_dump(), **counts.model_dump()))

    report = summarize(per_image, model_id, split)
    logger.info(
        "Evaluated %s on %s (n=%d): iou=%.4f±%.4f",
        model_id or "model",
        report.split.value,
        report.n,
        report.metrics["iou"].mean,
        report.metrics["iou"].std,
    )
    return report


async def export_report(report: MetricsReport, path: Union[str, Path]) -> Path:
    """
    Write a report as JSON.

    :raises ReportExportError: ``path`` is not writable.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        async with aiofiles.open(path, "w") as f:
            await f.write(report.model_dump_json(indent=2))
    except OSError as e:
        raise ReportExportError(path, str(e)) from e
    logger.info("Report written to %s", path)
    return path


def load_report(path: Union[str, Path]) -> MetricsReport:
    return MetricsReport.model_validate(json.loads(Path(path).read_text()))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Inner boundary pixels of a binary mask."""
    m = mask.astype(bool)
    return m & ~ndimage.binary_erosion(m)


def render_overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """``(H, W, 3)`` uint8 image with green predicted and red ground-truth boundaries."""
    rgb = np.round(np.clip(image, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    rgb[boundary(pred)] = (0, 255, 0)
    rgb[boundary(gt)] = (255, 0, 0)
    return rgb


def _encode_png(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    return buf.getvalue()


async def export_overlays(
    model: SRWSegNet,
    dataset: SegmentationDataset,
    path: Union[str, Path],
    limit: int = 16,
) -> List[Path]:
    """
    Save prediction overlays for the first ``limit`` images as ``<id>.png``.

    :return: Written files, ``min(limit, len(dataset))`` of them.
    :raises ReportExportError: ``path`` is not writable.
    """
    out_dir = Path(path)
    count = min(limit, len(dataset))
    if count <= 0:
        return []
    subset = SegmentationDataset(dataset.pairs[:count], root=dataset.root, split=dataset.split)
    preds = _predict_all(model, subset, batch_size=16)
    written: List[Path] = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for pair, pred in zip(subset.pairs, preds):
            png = await asyncio.to_thread(
                lambda p=pair, q=pred: _encode_png(render_overlay(p.image, q, p.mask))
            )
            target = out_dir / f"{pair.id}.png"
            async with aiofiles.open(target, "wb") as f:
                await f.write(png)
            written.append(target)
    except OSError as e:
        raise ReportExportError(out_dir, str(e)) from e
    logger.info("Wrote %d overlays to %s", len(written), out_dir)
    return written
