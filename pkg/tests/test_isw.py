import pytest
import torch
from pydantic import ValidationError
from srwseg import (
    DegenerateInputError,
    KMeansInit,
    VarianceState,
    WarmupIncompleteError,
    WhiteningMask,
    center_features,
    cluster_variance,
    covariance,
    deep_whitening_loss,
    isw_loss,
    kmeans_1d,
    pair_variance,
    update_variance_ema,
)
from srwseg.checks import brute_force_two_split

# optimal 2-split is {0,0,0} | {10,11,20,20,20}; min/max seeding converges elsewhere
COUNTEREXAMPLE = [0, 0, 0, 10, 11, 20, 20, 20]


def _features(seed, shape=(3, 4, 6, 6)):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def test_covariance_is_symmetric_psd():
    theta = covariance(center_features(_features(0)))
    assert theta.shape == (3, 4, 4)
    assert torch.allclose(theta, theta.transpose(1, 2))
    assert bool((torch.linalg.eigvalsh(theta) >= -1e-12).all())


def test_covariance_of_constant_map_is_zero():
    theta = covariance(center_features(torch.full((1, 3, 4, 4), 2.5)))
    assert torch.count_nonzero(theta) == 0


def test_covariance_matches_definition():
    f = _features(1, (1, 2, 2, 2))
    flat = f.reshape(2, 4)
    assert torch.allclose(covariance(f)[0], flat @ flat.T / 4)


def test_pair_variance_closed_form():
    a = covariance(center_features(_features(2)))
    b = covariance(center_features(_features(3)))
    assert torch.allclose(pair_variance(a, b), ((a - b) ** 2 / 4).mean(dim=0))


def test_pair_variance_of_identical_pair_is_zero():
    a = covariance(center_features(_features(4)))
    assert torch.count_nonzero(pair_variance(a, a.clone())) == 0


def test_pair_variance_shape_mismatch():
    with pytest.raises(ValueError):
        pair_variance(torch.zeros(2, 3, 3), torch.zeros(1, 3, 3))


def test_deep_whitening_loss_of_identity_is_zero():
    eye = torch.eye(5).expand(2, 5, 5)
    assert deep_whitening_loss(eye).item() == 0.0
    assert deep_whitening_loss(torch.zeros(4, 4)).item() == pytest.approx(0.25)


def test_ema_first_update_initializes():
    state = VarianceState(2)
    v = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    update_variance_ema(state, v, samples=4)
    assert torch.equal(state.ema_v, v)
    assert state.warm_samples == 4
    update_variance_ema(state, torch.zeros(2, 2))
    assert state.ema_v[0, 1].item() == pytest.approx(0.99)


def test_ema_momentum_must_be_below_one():
    with pytest.raises(ValueError):
        VarianceState(4, momentum=1.0)


def test_variance_state_round_trip():
    state = VarianceState(3, momentum=0.9)
    update_variance_ema(state, torch.ones(3, 3), samples=2)
    restored = VarianceState.from_state_dict(state.state_dict())
    assert restored.momentum == 0.9
    assert restored.warm_samples == 2
    assert torch.equal(restored.ema_v, state.ema_v)


def test_kmeans_optimal_split_beats_extremes_seeding():
    optimal = kmeans_1d(COUNTEREXAMPLE, k=2)
    extremes = kmeans_1d(COUNTEREXAMPLE, k=2, init=KMeansInit.EXTREMES)
    assert optimal.assignments == [0, 0, 0, 1, 1, 1, 1, 1]
    assert optimal.inertia == pytest.approx(108.8)
    assert optimal.inertia == pytest.approx(brute_force_two_split(COUNTEREXAMPLE))
    assert extremes.inertia == pytest.approx(135.75)


def test_kmeans_centroids_ascending():
    result = kmeans_1d([5.0, -1.0, 4.8, -1.2, 5.1], k=2)
    assert result.centroids[0] < result.centroids[1]
    assert result.assignments == [1, 0, 1, 0, 1]


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_matches_brute_force(seed):
    values = torch.randn(7, generator=torch.Generator().manual_seed(seed)).tolist()
    assert kmeans_1d(values, k=2).inertia == pytest.approx(brute_force_two_split(values), abs=1e-9)


def test_kmeans_identical_values_collapse_to_one_cluster():
    result = kmeans_1d([3.0, 3.0, 3.0], k=2)
    assert result.effective_k == 1
    assert result.centroids == [3.0]
    assert result.assignments == [0, 0, 0]


def test_kmeans_empty_input():
    with pytest.raises(DegenerateInputError):
        kmeans_1d([], k=2)


def test_cluster_variance_requires_warm_statistics():
    with pytest.raises(WarmupIncompleteError):
        cluster_variance(VarianceState(4))


def test_cluster_variance_selects_high_variance_pairs():
    state = VarianceState(4)
    v = torch.full((4, 4), 0.01)
    v[0, 1] = v[1, 0] = 2.0
    v[2, 3] = v[3, 2] = 2.1
    update_variance_ema(state, v)
    mask = cluster_variance(state)
    expected = torch.zeros(4, 4)
    expected[0, 1] = expected[1, 0] = expected[2, 3] = expected[3, 2] = 1
    assert torch.equal(mask.m, expected)
    assert mask.selected_count == 4


def test_cluster_variance_all_equal_gives_empty_mask():
    state = VarianceState(3)
    update_variance_ema(state, torch.ones(3, 3))
    assert cluster_variance(state).selected_count == 0


def test_isw_loss_value():
    m = torch.zeros(3, 3)
    m[0, 1] = m[1, 0] = 1
    mask = WhiteningMask(m=m, selected_count=2)
    theta = torch.tensor([[1.0, -2.0, 5.0], [-2.0, 1.0, 5.0], [5.0, 5.0, 1.0]])
    assert isw_loss(theta, mask).item() == pytest.approx(2.0)
    assert isw_loss(torch.stack([theta, 2 * theta]), mask).item() == pytest.approx(3.0)


def test_isw_loss_with_empty_mask_is_zero_and_differentiable():
    theta = torch.randn(2, 4, 4, requires_grad=True)
    loss = isw_loss(theta, WhiteningMask.empty(4))
    loss.backward()
    assert loss.item() == 0.0
    assert torch.count_nonzero(theta.grad) == 0


def test_whitening_mask_rejects_asymmetric_matrix():
    m = torch.zeros(3, 3)
    m[0, 1] = 1
    with pytest.raises(ValidationError):
        WhiteningMask(m=m, selected_count=2)


ROOT2 = 2**0.5


@pytest.mark.parametrize(
    "rows, expected",
    [
        ([[ROOT2, 0.0], [0.0, ROOT2]], [[1.0, 0.0], [0.0, 1.0]]),
        ([[1.0, 1.0], [1.0, -1.0]], [[1.0, 0.0], [0.0, 1.0]]),
        ([[1.0, 3.0], [2.0, 2.0]], [[5.0, 4.0], [4.0, 4.0]]),
    ],
)
def test_covariance_hand_computed(rows, expected):
    f = torch.tensor(rows, dtype=torch.float64).view(1, 2, 1, 2)
    assert covariance(f)[0].tolist() == [pytest.approx(r) for r in expected]


def test_centering_two_pixels():
    f = torch.tensor([1.0, 3.0], dtype=torch.float64).view(1, 1, 1, 2)
    assert center_features(f).flatten().tolist() == [-1.0, 1.0]


@pytest.mark.parametrize(
    "theta, expected",
    [
        ([[1.0, 0.0], [0.0, 1.0]], 0.0),
        ([[1.0, 0.5], [0.5, 1.0]], 0.25),
        ([[2.0, 0.0], [0.0, 2.0]], 0.5),
    ],
)
def test_deep_whitening_loss_hand_computed(theta, expected):
    assert deep_whitening_loss(torch.tensor(theta)).item() == pytest.approx(expected)


def test_pair_variance_single_element():
    v = pair_variance(torch.tensor([[[2.0]]]), torch.tensor([[[0.0]]]))
    assert v.item() == 1.0


@pytest.mark.parametrize("momentum, expected", [(0.5, 2.0), (0.0, 4.0)])
def test_ema_one_step(momentum, expected):
    state = VarianceState(2, momentum=momentum)
    update_variance_ema(state, torch.zeros(2, 2))
    update_variance_ema(state, torch.full((2, 2), 4.0))
    assert torch.equal(state.ema_v, torch.full((2, 2), expected))


@pytest.mark.parametrize(
    "values, low, high",
    [
        ([0.0, 0.1, 5.0, 5.1], [0.0, 0.1], [5.0, 5.1]),
        ([5.1, 0.0, 5.0, 0.1], [0.0, 0.1], [5.0, 5.1]),
    ],
)
def test_kmeans_separates_two_groups(values, low, high):
    result = kmeans_1d(values, k=2)
    groups = {0: [], 1: []}
    for v, a in zip(values, result.assignments):
        groups[a].append(v)
    assert sorted(groups[0]) == low and sorted(groups[1]) == high
    assert result.centroids == pytest.approx([0.05, 5.05])


def test_kmeans_single_cluster_is_the_mean():
    result = kmeans_1d([1.0, 2.0, 6.0], k=1)
    assert result.centroids == [pytest.approx(3.0)]
    assert result.assignments == [0, 0, 0]


def test_cluster_variance_picks_the_outlier_pair():
    state = VarianceState(3)
    v = torch.zeros(3, 3)
    v[0, 1] = v[1, 0] = 0.01
    v[0, 2] = v[2, 0] = 0.02
    v[1, 2] = v[2, 1] = 3.0
    update_variance_ema(state, v)
    mask = cluster_variance(state)
    expected = torch.zeros(3, 3)
    expected[1, 2] = expected[2, 1] = 1
    assert torch.equal(mask.m, expected)
    assert mask.selected_count == 2


def test_isw_loss_on_both_off_diagonal_entries():
    m = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    theta = torch.tensor([[1.0, 0.5], [0.5, 1.0]])
    assert isw_loss(theta, WhiteningMask(m=m, selected_count=2)).item() == pytest.approx(0.5)


def test_whitening_losses_ignore_batch_order():
    raw = covariance(center_features(_features(5, (5, 4, 6, 6))))
    aug = covariance(center_features(_features(6, (5, 4, 6, 6))))
    perm = torch.tensor([3, 0, 4, 1, 2])
    m = torch.zeros(4, 4)
    m[0, 2] = m[2, 0] = m[1, 3] = m[3, 1] = 1
    mask = WhiteningMask(m=m, selected_count=4)
    assert isw_loss(raw[perm], mask).item() == pytest.approx(isw_loss(raw, mask).item(), rel=1e-12)
    assert deep_whitening_loss(raw[perm]).item() == pytest.approx(deep_whitening_loss(raw).item(), rel=1e-12)
    assert torch.allclose(pair_variance(raw[perm], aug[perm]), pair_variance(raw, aug), atol=1e-12)
