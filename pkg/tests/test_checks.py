import warnings

import pytest
import torch
from srwseg import (
    CheckComponent,
    WhiteningMask,
    brute_force_two_split,
    check_covariance,
    check_entropy_bounds,
    check_instance_norm,
    check_isw_loss_at,
    check_kmeans_optimal,
    check_pair_variance_closed_form,
    check_restitution_partition,
    check_whitening_efficacy,
    finite_difference_check,
    relative_error,
    run_selftest,
)


def test_relative_error():
    a = torch.tensor([1.0, 2.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(a, torch.tensor([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
    assert relative_error(torch.zeros(2), torch.zeros(2)) == 0.0


@pytest.mark.parametrize(
    "component",
    [c for c in CheckComponent if c != CheckComponent.END_TO_END],
)
def test_component_gradients(component):
    entry = finite_difference_check(component, seed=0)
    assert entry.passed, entry
    assert entry.max_rel_error < 1e-4


def test_isw_check_skips_kink():
    theta = torch.eye(3, dtype=torch.float64)
    m = torch.zeros(3, 3)
    m[0, 1] = m[1, 0] = 1
    entry = check_isw_loss_at(theta, WhiteningMask(m=m, selected_count=2))
    assert entry.skipped and not entry.passed


def test_isw_check_away_from_kink():
    theta = torch.tensor([[1.0, 0.5, 0.1], [0.5, 1.0, -0.3], [0.1, -0.3, 1.0]], dtype=torch.float64)
    m = torch.ones(3, 3) - torch.eye(3)
    entry = check_isw_loss_at(theta, WhiteningMask(m=m, selected_count=6))
    assert entry.passed and not entry.skipped


@pytest.mark.parametrize(
    "check",
    [
        check_restitution_partition,
        check_instance_norm,
        check_entropy_bounds,
        check_pair_variance_closed_form,
        check_covariance,
    ],
)
def test_property_oracles(check):
    result = check(20)
    assert result.passed, result.detail


def test_brute_force_two_split():
    assert brute_force_two_split([0, 0, 0, 10, 11, 20, 20, 20]) == pytest.approx(108.8)
    assert brute_force_two_split([1.0]) == 0.0


def test_brute_force_only_scores_two_group_splits():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert brute_force_two_split([1.0, 1.0]) == 0.0
        assert brute_force_two_split([0.0, 0.1, 5.0, 5.1]) == pytest.approx(0.01)


def test_kmeans_against_brute_force():
    assert check_kmeans_optimal(seeds=50).passed


@pytest.mark.slow
def test_end_to_end_gradient():
    entry = finite_difference_check(CheckComponent.END_TO_END, seed=0)
    assert entry.passed, entry


def test_whitening_efficacy_uses_plain_gradient_descent(monkeypatch):
    seen = []

    class RecordingSGD(torch.optim.SGD):
        def __init__(self, params, **kwargs):
            seen.append(kwargs)
            super().__init__(params, **kwargs)

    monkeypatch.setattr(torch.optim, "SGD", RecordingSGD)
    result = check_whitening_efficacy()
    assert result.passed, result.detail
    assert len(seen) == 1 and seen[0]["momentum"] == 0.0


@pytest.mark.slow
def test_selftest_passes():
    report = run_selftest(0)
    assert report.passed, report.table()
