import numpy as np
import pytest
import torch
from srwseg import (
    ConfusionCounts,
    DegenerateInputError,
    ImageMetrics,
    InputSizeMismatchError,
    ReportExportError,
    ShapeMismatchError,
    Split,
    build_model,
    confusion,
    evaluate,
    export_overlays,
    export_report,
    load_dataset,
    load_report,
    metrics_from_counts,
    render_overlay,
    summarize,
)


def test_confusion_counts():
    pred = np.array([[1, 1, 0], [0, 0, 1]])
    gt = np.array([[1, 0, 0], [1, 0, 1]])
    assert confusion(pred, gt) == ConfusionCounts(tp=2, fp=1, fn=1, tn=2)
    assert confusion(torch.from_numpy(pred), torch.from_numpy(gt)).total == 6


def test_confusion_rejects_bad_masks():
    with pytest.raises(ShapeMismatchError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DegenerateInputError):
        confusion(np.full((2, 2), 2), np.zeros((2, 2)))


def test_metrics_from_counts():
    m = metrics_from_counts(ConfusionCounts(tp=2, fp=1, fn=1, tn=2))
    assert m.iou == pytest.approx(0.5)
    assert m.precision == pytest.approx(2 / 3)
    assert m.recall == pytest.approx(2 / 3)
    assert m.mean_accuracy == pytest.approx(0.5 * (2 / 3 + 2 / 3))


def test_empty_prediction_of_empty_lesion_is_perfect():
    m = metrics_from_counts(ConfusionCounts(tp=0, fp=0, fn=0, tn=16))
    assert (m.iou, m.precision, m.recall, m.mean_accuracy) == (1.0, 1.0, 1.0, 1.0)


def test_missed_lesion_scores_zero():
    m = metrics_from_counts(ConfusionCounts(tp=0, fp=0, fn=4, tn=12))
    assert (m.iou, m.precision, m.recall) == (0.0, 0.0, 0.0)
    assert m.mean_accuracy == pytest.approx(0.5)


def test_summarize_uses_population_std():
    per_image = [
        ImageMetrics(id=str(i), iou=v, precision=v, recall=v, mean_accuracy=v, tp=0, fp=0, fn=0, tn=1)
        for i, v in enumerate((0.2, 0.4))
    ]
    report = summarize(per_image, "m", Split.TEST_TARGET)
    assert report.n == 2
    assert report.metrics["iou"].mean == pytest.approx(0.3)
    assert report.metrics["iou"].std == pytest.approx(0.1)


def test_evaluate_split(corpus, tiny_network):
    dataset = load_dataset(corpus, Split.TEST_TARGET)
    report = evaluate(build_model(tiny_network), dataset, model_id="tiny")
    assert report.split == Split.TEST_TARGET
    assert report.n == len(dataset)
    assert [m.id for m in report.per_image] == dataset.ids
    for m in report.per_image:
        assert m.tp + m.fp + m.fn + m.tn == 32 * 32
        assert 0.0 <= m.iou <= 1.0


def test_evaluate_rejects_mismatched_input_size(corpus, tiny_network):
    model = build_model(tiny_network.model_copy(update={"input_size": (64, 64)}))
    with pytest.raises(InputSizeMismatchError):
        evaluate(model, load_dataset(corpus, Split.TEST_TARGET))


async def test_report_export_round_trip(tmp_path, corpus, tiny_network):
    report = evaluate(build_model(tiny_network), load_dataset(corpus, Split.TEST_SOURCE))
    path = await export_report(report, tmp_path / "reports" / "test-source.json")
    assert load_report(path) == report


async def test_report_export_failure(tmp_path, corpus, tiny_network):
    report = evaluate(build_model(tiny_network), load_dataset(corpus, Split.TEST_SOURCE))
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ReportExportError):
        await export_report(report, blocker / "report.json")


def test_render_overlay_colors():
    image = np.zeros((3, 6, 6), dtype=np.float32)
    gt = np.zeros((6, 6), dtype=np.uint8)
    gt[1:5, 1:5] = 1
    pred = np.zeros_like(gt)
    pred[2:4, 2:4] = 1
    rgb = render_overlay(image, pred, gt)
    assert rgb.shape == (6, 6, 3) and rgb.dtype == np.uint8
    assert tuple(rgb[1, 1]) == (255, 0, 0)
    assert tuple(rgb[2, 2]) == (0, 255, 0)
    assert tuple(rgb[0, 0]) == (0, 0, 0)


async def test_export_overlays(tmp_path, corpus, tiny_network):
    dataset = load_dataset(corpus, Split.TEST_TARGET)
    written = await export_overlays(build_model(tiny_network), dataset, tmp_path / "ov", limit=3)
    assert [p.name for p in written] == [f"{i}.png" for i in dataset.ids[:3]]
    assert all(p.stat().st_size > 0 for p in written)
