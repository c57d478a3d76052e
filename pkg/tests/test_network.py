import logging

import pytest
import torch
from srwseg import (
    ConfigError,
    MissingPairError,
    RunMode,
    ShapeMismatchError,
    build_model,
    forward,
    mask_from_logits,
    pair_variance,
    predict_mask,
)


def _batch(seed=0, n=2, size=32):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed))


def test_build_model_is_deterministic(tiny_network):
    a = build_model(tiny_network, seed=4).state_dict()
    b = build_model(tiny_network, seed=4).state_dict()
    c = build_model(tiny_network, seed=5).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_build_model_leaves_global_rng_alone(tiny_network):
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_model(tiny_network, seed=0)
    assert torch.equal(torch.rand(3), expected)


def test_build_model_rejects_invalid_mapping():
    with pytest.raises(ConfigError):
        build_model({"num_classes": 3})


def test_eval_forward_shapes(tiny_network):
    model = build_model(tiny_network)
    artifacts = forward(model, _batch(), mode=RunMode.EVAL)
    assert artifacts.logits.shape == (2, 2, 32, 32)
    assert len(artifacts.per_stage_snr) == 2
    assert artifacts.per_stage_theta_raw == []
    assert artifacts.whitening_stages == []


def test_non_square_input_keeps_resolution(tiny_network):
    model = build_model(tiny_network).eval()
    x = torch.rand(1, 3, 32, 48)
    assert model(x).logits.shape == (1, 2, 32, 48)


def test_input_size_must_be_multiple_of_16(tiny_network):
    model = build_model(tiny_network).eval()
    with pytest.raises(ShapeMismatchError):
        model(torch.rand(1, 3, 30, 32))


def test_train_forward_requires_pair(tiny_network):
    model = build_model(tiny_network)
    with pytest.raises(MissingPairError):
        forward(model, _batch(), mode=RunMode.TRAIN)


def test_train_forward_artifacts(tiny_network):
    model = build_model(tiny_network)
    x = _batch(1)
    artifacts = forward(model, x, x.flip(1), mode=RunMode.TRAIN)
    assert artifacts.logits.shape == (2, 2, 32, 32)
    assert artifacts.snr_stages == [1, 2]
    assert artifacts.whitening_stages == [1, 2]
    assert [t.shape for t in artifacts.per_stage_theta_raw] == [(2, 4, 4), (2, 8, 8)]
    assert [t.shape for t in artifacts.per_stage_theta_aug] == [(2, 4, 4), (2, 8, 8)]
    assert len(artifacts.per_stage_snr_aug) == 2
    assert artifacts.per_stage_snr[0].enhanced.shape[0] == 2


def test_identical_pair_has_zero_variance(tiny_network):
    model = build_model(tiny_network)
    x = _batch(2)
    artifacts = forward(model, x, x.clone(), mode=RunMode.TRAIN)
    for raw, aug in zip(artifacts.per_stage_theta_raw, artifacts.per_stage_theta_aug):
        assert pair_variance(raw, aug).abs().max().item() < 1e-10


def test_baseline_trains_without_pair(tiny_network):
    model = build_model(tiny_network.model_copy(update={"srw_stages": []}))
    artifacts = forward(model, _batch(), mode=RunMode.TRAIN)
    assert artifacts.per_stage_snr == []
    assert artifacts.per_stage_theta_raw == []
    assert len(model.snr) == 0


def test_eval_mode_ignores_pair(tiny_network, caplog):
    model = build_model(tiny_network)
    x = _batch(3)
    with caplog.at_level(logging.WARNING):
        with_pair = forward(model, x, x * 0.5, mode=RunMode.EVAL)
    without_pair = forward(model, x, mode=RunMode.EVAL)
    assert torch.equal(with_pair.logits, without_pair.logits)
    assert "ignored" in caplog.text


def test_gradients_reach_attention_weights(tiny_network):
    model = build_model(tiny_network)
    x = _batch(4)
    artifacts = forward(model, x, x.flip(1), mode=RunMode.TRAIN)
    artifacts.logits.sum().backward()
    assert model.snr["1"].fc1_weight.grad is not None


def test_mask_from_logits_ties_go_to_background():
    logits = torch.zeros(1, 2, 2, 2)
    logits[0, 1, 0, 0] = 1.0
    logits[0, 0, 1, 1] = 1.0
    mask = mask_from_logits(logits)
    assert mask.dtype == torch.uint8
    assert mask.tolist() == [[[1, 0], [0, 0]]]


def test_predict_mask_is_binary(tiny_network):
    model = build_model(tiny_network)
    mask = predict_mask(model, _batch(5))
    assert mask.shape == (2, 32, 32)
    assert set(mask.unique().tolist()) <= {0, 1}
    assert not model.training
