import json
import math

import pytest
import torch
from srwseg import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    DegenerateInputError,
    InputSizeMismatchError,
    NonFiniteLossError,
    OutputExistsError,
    RunMode,
    Split,
    Trainer,
    TrainingConfig,
    TrainPhase,
    WhiteningMask,
    WhiteningMode,
    WhiteningStateError,
    build_model,
    forward,
    load_checkpoint,
    load_dataset,
    load_model,
    poly_lr,
    predict_mask,
    save_checkpoint,
    total_loss,
    train,
)


def test_poly_lr():
    assert poly_lr(0.01, 0, 1000) == pytest.approx(0.01)
    assert poly_lr(0.01, 500, 1000, 0.9) == pytest.approx(5.359e-3, rel=1e-3)
    assert poly_lr(0.01, 1000, 1000) == 0.0
    with pytest.raises(ValueError):
        poly_lr(0.01, -1, 1000)


def _step_inputs(network_config, seed=0):
    gen = torch.Generator().manual_seed(seed)
    model = build_model(network_config, seed=seed)
    x = torch.rand(2, 3, 32, 32, generator=gen)
    artifacts = forward(model, x, (x * 0.8).clamp(0, 1), mode=RunMode.TRAIN)
    target = (torch.rand(2, 32, 32, generator=gen) > 0.7).long()
    return artifacts, target


def _full_masks(artifacts):
    masks = []
    for theta in artifacts.per_stage_theta_raw:
        c = theta.shape[-1]
        m = torch.zeros(c, c)
        m[0, 1] = m[1, 0] = 1
        masks.append(WhiteningMask(m=m, selected_count=2))
    return masks


def test_zero_weights_reduce_to_task_loss(tiny_network):
    artifacts, target = _step_inputs(tiny_network)
    config = TrainingConfig(epochs=2, warmup_epochs=0, isw_weight=0.0, dc_weight=0.0)
    bundle = total_loss(artifacts.logits, target, artifacts, None, config, TrainPhase.FULL)
    assert bundle.dc_per_layer == [] and bundle.isw_per_layer == []
    assert torch.equal(bundle.total, bundle.task)


def test_warmup_holds_whitening_term_at_zero(tiny_network):
    artifacts, target = _step_inputs(tiny_network)
    config = TrainingConfig(epochs=2, warmup_epochs=1)
    bundle = total_loss(artifacts.logits, target, artifacts, None, config, TrainPhase.WARMUP)
    assert [t.item() for t in bundle.isw_per_layer] == [0.0, 0.0]
    assert len(bundle.dc_per_layer) == 2


def test_total_loss_recomposes(tiny_network):
    artifacts, target = _step_inputs(tiny_network, seed=1)
    config = TrainingConfig(epochs=2, warmup_epochs=0, isw_weight=0.6, dc_weight=1.0)
    bundle = total_loss(
        artifacts.logits, target, artifacts, _full_masks(artifacts), config, TrainPhase.FULL
    )
    manual = bundle.task + 0.6 * sum(bundle.isw_per_layer) + 1.0 * sum(bundle.dc_per_layer)
    assert bundle.total.item() == pytest.approx(manual.item(), rel=1e-6)
    assert bundle.as_floats()["total"] == pytest.approx(bundle.total.item())


def test_full_phase_needs_masks(tiny_network):
    artifacts, target = _step_inputs(tiny_network)
    config = TrainingConfig(epochs=2, warmup_epochs=0)
    with pytest.raises(WhiteningStateError):
        total_loss(artifacts.logits, target, artifacts, None, config, TrainPhase.FULL)


def test_deep_whitening_mode_ignores_masks(tiny_network):
    artifacts, target = _step_inputs(tiny_network)
    config = TrainingConfig(epochs=2, warmup_epochs=0, whitening=WhiteningMode.DWT)
    bundle = total_loss(artifacts.logits, target, artifacts, None, config, TrainPhase.FULL)
    assert len(bundle.isw_per_layer) == 2
    assert all(t.item() > 0 for t in bundle.isw_per_layer)


def test_target_must_be_binary(tiny_network):
    artifacts, target = _step_inputs(tiny_network)
    config = TrainingConfig(epochs=2, warmup_epochs=0)
    with pytest.raises(DegenerateInputError):
        total_loss(artifacts.logits, target * 2, artifacts, None, config, TrainPhase.WARMUP)


def test_trainer_updates_statistics_during_warmup(corpus, tiny_network, quick_training):
    trainer = Trainer(quick_training, tiny_network, load_dataset(corpus, Split.TRAIN))
    record = trainer.train_epoch(1)
    assert record.phase == TrainPhase.WARMUP
    assert record.isw_loss == 0.0
    assert trainer.masks is None
    assert all(state.is_warm for state in trainer.variance_states)
    assert trainer.global_step == trainer.steps_per_epoch

    record = trainer.train_epoch(2)
    assert record.phase == TrainPhase.FULL
    assert len(trainer.masks) == len(tiny_network.whitening_stages)


async def test_train_writes_run_directory(tmp_path, corpus, tiny_network, quick_training):
    progress = []
    result = await train(
        quick_training,
        corpus,
        tiny_network,
        tmp_path / "run",
        progress_callback=lambda p: progress.append(p.epoch),
    )
    assert progress == [1, 2]
    assert [r.phase for r in result.history] == [TrainPhase.WARMUP, TrainPhase.FULL]
    lines = (tmp_path / "run" / "training_log.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [1, 2]
    assert result.best_checkpoint is not None

    data = load_checkpoint(result.last_checkpoint)
    assert data.magic == CHECKPOINT_MAGIC
    assert data.epoch == 2
    assert data.network_config == tiny_network
    assert len(data.variance_states) == len(tiny_network.whitening_stages)

    with pytest.raises(OutputExistsError):
        await train(quick_training, corpus, tiny_network, tmp_path / "run")


async def test_training_is_reproducible(tmp_path, corpus, tiny_network, quick_training):
    a = await train(quick_training, corpus, tiny_network, tmp_path / "a")
    b = await train(quick_training, corpus, tiny_network, tmp_path / "b")
    assert [r.task_loss for r in a.history] == pytest.approx([r.task_loss for r in b.history], rel=1e-6)


def test_checkpoint_round_trip(tmp_path, tiny_network):
    model = build_model(tiny_network, seed=2)
    path = save_checkpoint(tmp_path / "m.ckpt", model, epoch=3, seeds={"run": 2})
    restored, data = load_model(path)
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(predict_mask(model, x), predict_mask(restored, x))
    assert data.epoch == 3 and data.seeds == {"run": 2}
    assert not list(tmp_path.glob(".m.ckpt-*"))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(tmp_path / "missing.ckpt")
    assert info.value.reason == "file not found"

    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)

    foreign = tmp_path / "foreign.ckpt"
    torch.save({"magic": "OTHER", "format_version": 1}, foreign)
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(foreign)
    assert "SRWSEG1" in info.value.reason

    future = tmp_path / "future.ckpt"
    torch.save({"magic": CHECKPOINT_MAGIC, "format_version": 99}, future)
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(future)
    assert "version" in info.value.reason


def test_non_finite_loss_reports_this_steps_gradients(monkeypatch, corpus, tiny_network, quick_training):
    trainer = Trainer(quick_training, tiny_network, load_dataset(corpus, Split.TRAIN))
    real_total_loss = total_loss

    def diverging(*args, **kwargs):
        bundle = real_total_loss(*args, **kwargs)
        return bundle.model_copy(update={"total": bundle.total * float("nan")})

    monkeypatch.setattr("srwseg.training.total_loss", diverging)
    weights = {name: p.detach().clone() for name, p in trainer.model.named_parameters()}
    images, images_aug, target = next(iter(trainer._loader(1)))

    with pytest.raises(NonFiniteLossError) as info:
        trainer.train_step(images, images_aug, target, TrainPhase.WARMUP)

    # a fresh trainer has no earlier gradients, so these come from the failing step
    assert info.value.step == 0
    assert info.value.grad_norms
    assert all(math.isnan(v) for v in info.value.grad_norms.values())
    assert "task" in info.value.layer_losses
    for name, p in trainer.model.named_parameters():
        assert torch.equal(p.detach(), weights[name])
    assert trainer.global_step == 0


async def test_train_rejects_mismatched_input_size(tmp_path, corpus, tiny_network, quick_training):
    network = tiny_network.model_copy(update={"input_size": (64, 64)})
    with pytest.raises(InputSizeMismatchError) as info:
        await train(quick_training, corpus, network, tmp_path / "run")
    assert info.value.expected == (64, 64)
    assert info.value.actual == (32, 32)
    assert not (tmp_path / "run").exists()
