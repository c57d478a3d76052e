"""
checks.py
---------
Numerical self-tests: analytic-vs-central-difference gradient checks for every
differentiable component, seeded property oracles, the k-means brute-force
comparison and the whitening-efficacy run.  ``srwseg selftest`` runs them all.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .basemodels import (
    CheckResult,
    GradientCheckEntry,
    GradientCheckReport,
    NetworkConfig,
    SelfTestReport,
    SnrParams,
    TrainingConfig,
    WhiteningMask,
)
from .enums import CheckComponent, TrainPhase
from .isw import (
    VarianceState,
    center_features,
    cluster_variance,
    covariance,
    deep_whitening_loss,
    isw_loss,
    kmeans_1d,
    pair_variance,
    update_variance_ema,
)
from .network import build_model
from .snr import (
    channel_attention,
    dual_causality_loss,
    instance_normalize,
    pixel_entropy,
    restitution_split,
    snr_forward,
)
from .synthdata import modality_separability
from .training import total_loss

logger = logging.getLogger(__name__)

__all__ = [
    "FD_STEP",
    "COMPONENT_TOLERANCE",
    "END_TO_END_TOLERANCE",
    "relative_error",
    "finite_difference_check",
    "gradient_check_report",
    "check_isw_loss_at",
    "check_restitution_partition",
    "check_instance_norm",
    "check_entropy_bounds",
    "check_pair_variance_closed_form",
    "check_covariance",
    "brute_force_two_split",
    "check_kmeans_optimal",
    "check_whitening_efficacy",
    "check_modality_separability",
    "run_selftest",
]

FD_STEP = 1e-6
COMPONENT_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
DTYPE = torch.float64


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """``max|a - n| / max(max|a|, max|n|, 1e-12)``."""
    diff = (analytic - numeric).abs().max().item()
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return diff / scale


def _compare_gradients(
    fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], h: float = FD_STEP
) -> float:
    """Worst tensor-wise relative error of autograd vs central differences."""
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    analytic = torch.autograd.grad(fn(*inputs), inputs)
    worst = 0.0
    with torch.no_grad():
        for t, grad in zip(inputs, analytic):
            numeric = torch.zeros_like(t)
            flat, num_flat = t.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = fn(*inputs).item()
                flat[i] = orig - h
                minus = fn(*inputs).item()
                flat[i] = orig
                num_flat[i] = (plus - minus) / (2 * h)
            worst = max(worst, relative_error(grad, numeric))
    return worst


def _projection(gen: torch.Generator, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=DTYPE)


def _random_params(gen: torch.Generator, channels: int, hidden: int) -> List[torch.Tensor]:
    return [
        _projection(gen, channels, hidden) * 0.5,
        _projection(gen, hidden) * 0.1,
        _projection(gen, hidden, channels) * 0.5,
        _projection(gen, channels) * 0.1,
    ]


def _as_params(w1, b1, w2, b2) -> SnrParams:
    return SnrParams(fc1_weight=w1, fc1_bias=b1, fc2_weight=w2, fc2_bias=b2)


def check_isw_loss_at(
    theta: torch.Tensor, mask: WhiteningMask, tolerance: float = COMPONENT_TOLERANCE
) -> GradientCheckEntry:
    """
    Gradient check of the selective whitening loss with respect to ``theta``.

    A masked entry within one step of zero sits on the kink of ``|.|``; such a
    point is reported as skipped.
    """
    theta = theta.detach().to(DTYPE)
    m = mask.m.to(DTYPE)
    on_kink = (m.bool() if theta.ndim == 2 else m.bool().expand_as(theta)) & (theta.abs() <= FD_STEP)
    if mask.selected_count and bool(on_kink.any()):
        return GradientCheckEntry(
            component=CheckComponent.ISW_LOSS,
            tolerance=tolerance,
            passed=False,
            skipped=True,
            note="masked covariance entry at 0: loss not differentiable there",
        )
    err = _compare_gradients(lambda t: isw_loss(t, mask), [theta])
    return GradientCheckEntry(
        component=CheckComponent.ISW_LOSS,
        max_rel_error=err,
        tolerance=tolerance,
        passed=err < tolerance,
    )


def _random_mask(gen: torch.Generator, channels: int) -> WhiteningMask:
    upper = torch.triu(torch.rand(channels, channels, generator=gen, dtype=DTYPE) < 0.5, diagonal=1)
    if not upper.any():
        upper[0, 1] = True
    m = (upper | upper.t()).to(DTYPE)
    return WhiteningMask(m=m, selected_count=int(m.sum().item()))


def _tiny_network_config() -> NetworkConfig:
    return NetworkConfig(
        stage_channels=[4, 8, 8, 8],
        srw_stages=[1, 2, 3],
        aspp_dilations=[1, 2],
        input_size=(16, 16),
        blocks_per_stage=1,
        aspp_channels=8,
        low_level_channels=4,
        decoder_channels=8,
    )


def _end_to_end_error(seed: int, n_params: int = 20) -> float:
    gen = torch.Generator().manual_seed(seed)
    net_cfg = _tiny_network_config()
    model = build_model(net_cfg, seed=seed).to(DTYPE).train()
    train_cfg = TrainingConfig(epochs=2, warmup_epochs=0, isw_weight=0.6, dc_weight=1.0)
    x = torch.rand(2, 3, 16, 16, generator=gen, dtype=DTYPE)
    x_aug = (x + 0.1 * torch.randn(x.shape, generator=gen, dtype=DTYPE)).clamp(0, 1)
    target = (torch.rand(2, 16, 16, generator=gen) > 0.5).long()

    with torch.no_grad():
        artifacts = model(x, x_aug)
    masks = []
    for stage, raw, aug in zip(
        artifacts.whitening_stages, artifacts.per_stage_theta_raw, artifacts.per_stage_theta_aug
    ):
        state = VarianceState(net_cfg.stage_channels[stage - 1])
        update_variance_ema(state, pair_variance(raw, aug))
        masks.append(cluster_variance(state))

    def loss() -> torch.Tensor:
        out = model(x, x_aug)
        return total_loss(out.logits, target, out, masks, train_cfg, TrainPhase.FULL).total

    params = [p for p in model.parameters() if p.requires_grad]
    sizes = torch.tensor([p.numel() for p in params], dtype=DTYPE)
    picks = torch.multinomial(sizes / sizes.sum(), n_params, replacement=True, generator=gen)
    chosen: List[Tuple[torch.Tensor, int]] = [
        (params[i], int(torch.randint(params[i].numel(), (1,), generator=gen)))
        for i in picks.tolist()
    ]

    model.zero_grad()
    loss().backward()
    analytic = torch.tensor([p.grad.view(-1)[j].item() for p, j in chosen], dtype=DTYPE)
    numeric = torch.zeros(n_params, dtype=DTYPE)
    with torch.no_grad():
        for k, (p, j) in enumerate(chosen):
            flat = p.view(-1)
            orig = flat[j].item()
            flat[j] = orig + FD_STEP
            plus = loss().item()
            flat[j] = orig - FD_STEP
            minus = loss().item()
            flat[j] = orig
            numeric[k] = (plus - minus) / (2 * FD_STEP)
    return relative_error(analytic, numeric)


def finite_difference_check(
    component: Union[CheckComponent, str],
    seed: int = 0,
    tolerance: Optional[float] = None,
) -> GradientCheckEntry:
    """
    Compare analytic gradients of one component with central differences
    (step ``1e-6``, float64) on tiny random inputs.

    :param component: Component to check.
    :param seed: Input seed.
    :param tolerance: Pass threshold on the max relative error (default
        ``1e-4``, ``1e-3`` for ``end_to_end``).
    :return: Report entry; failures are entries, never exceptions.
    """
    component = CheckComponent(component)
    if tolerance is None:
        tolerance = END_TO_END_TOLERANCE if component == CheckComponent.END_TO_END else COMPONENT_TOLERANCE
    gen = torch.Generator().manual_seed(seed)

    try:
        if component == CheckComponent.INSTANCE_NORM:
            x = _projection(gen, 2, 3, 4, 4)
            w = _projection(gen, 2, 3, 4, 4)
            err = _compare_gradients(lambda f: (instance_normalize(f) * w).sum(), [x])
        elif component == CheckComponent.ATTENTION:
            r = _projection(gen, 2, 8, 3, 3)
            w = _projection(gen, 2, 8)
            err = _compare_gradients(
                lambda res, *p: (channel_attention(res, _as_params(*p)) * w).sum(),
                [r, *_random_params(gen, 8, 4)],
            )
        elif component == CheckComponent.RESTITUTION:
            r = _projection(gen, 2, 4, 3, 3)
            alpha = 0.1 + 0.8 * torch.rand(2, 4, generator=gen, dtype=DTYPE)
            w1, w2 = _projection(gen, 2, 4, 3, 3), _projection(gen, 2, 4, 3, 3)

            def _restitution(res, a):
                plus, minus = restitution_split(res, a)
                return (plus * w1).sum() + (minus * w2).sum()

            err = _compare_gradients(_restitution, [r, alpha])
        elif component == CheckComponent.SNR:
            x = _projection(gen, 2, 8, 3, 3)
            w1, w2 = _projection(gen, 2, 8, 3, 3), _projection(gen, 2, 8, 3, 3)

            def _snr(f, *p):
                out = snr_forward(f, _as_params(*p))
                return (out.enhanced * w1).sum() + (out.corrupted * w2).sum()

            err = _compare_gradients(_snr, [x, *_random_params(gen, 8, 4)])
        elif component == CheckComponent.DC_LOSS:
            parts = [_projection(gen, 1, 4, 3, 3) for _ in range(3)]
            err = _compare_gradients(dual_causality_loss, parts)
        elif component == CheckComponent.DWT_LOSS:
            x = _projection(gen, 2, 4, 3, 3)
            err = _compare_gradients(lambda f: deep_whitening_loss(covariance(center_features(f))), [x])
        elif component == CheckComponent.ISW_LOSS:
            x = _projection(gen, 2, 4, 3, 3)
            theta = covariance(center_features(x))
            return check_isw_loss_at(theta, _random_mask(gen, 4), tolerance)
        else:
            err = _end_to_end_error(seed)
    except Exception as e:
        logger.exception("Gradient check of %s crashed", component.value)
        return GradientCheckEntry(
            component=component, tolerance=tolerance, passed=False, note=f"error: {e}"
        )

    return GradientCheckEntry(
        component=component,
        max_rel_error=err,
        tolerance=tolerance,
        passed=err < tolerance,
    )


def gradient_check_report(seed: int = 0) -> GradientCheckReport:
    return GradientCheckReport(entries=[finite_difference_check(c, seed) for c in CheckComponent])


# ---------------------------------------------------------------------------
# Property oracles
# ---------------------------------------------------------------------------


def _seeded_features(seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    n, c, h, w = (int(v) for v in torch.randint(1, 6, (4,), generator=gen))
    scale = torch.rand(1, c, 1, 1, generator=gen, dtype=DTYPE) * 5
    shift = torch.randn(1, c, 1, 1, generator=gen, dtype=DTYPE) * 3
    return torch.randn(n, c, h, w, generator=gen, dtype=DTYPE) * scale + shift


def check_restitution_partition(n: int = 100) -> CheckResult:
    failures = 0
    for seed in range(n):
        f = _seeded_features(seed)
        c = f.shape[1]
        gen = torch.Generator().manual_seed(seed)
        hidden = max(1, c // 2)
        params = _as_params(*_random_params(gen, c, hidden))
        out = snr_forward(f, params)
        failures += not torch.allclose(
            out.residual_plus + out.residual_minus, f - out.normalized, atol=1e-12
        )
    return CheckResult(name="restitution partition", passed=failures == 0, detail=f"{n - failures}/{n}")


def check_instance_norm(n: int = 100, eps: float = 1e-5) -> CheckResult:
    failures = 0
    for seed in range(n):
        f = _seeded_features(seed)
        out = instance_normalize(f, eps)
        mean = out.mean(dim=(2, 3))
        var = out.pow(2).mean(dim=(2, 3))
        raw_var = f.var(dim=(2, 3), unbiased=False)
        expected = raw_var / (raw_var + eps)
        ok = mean.abs().max() < 1e-9 and torch.allclose(var, expected, atol=1e-9)
        failures += not ok
    return CheckResult(name="instance norm", passed=failures == 0, detail=f"{n - failures}/{n}")


def check_entropy_bounds(n: int = 100) -> CheckResult:
    failures = 0
    for seed in range(n):
        f = _seeded_features(seed)
        if f.shape[1] < 2:
            f = torch.cat([f, -f], dim=1)
        e = pixel_entropy(f * 10)
        failures += not bool((e >= 0).all() and (e <= math.log(f.shape[1]) + 1e-12).all())
    return CheckResult(name="entropy bounds", passed=failures == 0, detail=f"{n - failures}/{n}")


def check_pair_variance_closed_form(n: int = 100) -> CheckResult:
    failures = 0
    for seed in range(n):
        f = _seeded_features(seed)
        gen = torch.Generator().manual_seed(seed + 10_000)
        g = f * (1 + 0.3 * torch.rand(f.shape[:2], generator=gen, dtype=DTYPE)[..., None, None])
        a, b = covariance(center_features(f)), covariance(center_features(g))
        v = pair_variance(a, b)
        failures += not torch.allclose(v, ((a - b) ** 2 / 4).mean(dim=0), atol=1e-12)
    return CheckResult(name="pair variance closed form", passed=failures == 0, detail=f"{n - failures}/{n}")


def check_covariance(n: int = 100) -> CheckResult:
    failures = 0
    for seed in range(n):
        theta = covariance(center_features(_seeded_features(seed)))
        symmetric = torch.allclose(theta, theta.transpose(1, 2), atol=1e-12)
        psd = bool((torch.linalg.eigvalsh(theta) >= -1e-9).all())
        failures += not (symmetric and psd)
    return CheckResult(name="covariance symmetric psd", passed=failures == 0, detail=f"{n - failures}/{n}")


def brute_force_two_split(values: Sequence[float]) -> float:
    """Minimum within-cluster SSE over every split into two non-empty groups."""
    data = np.asarray(values, dtype=np.float64)
    if data.size < 2:
        return 0.0
    best = math.inf
    for bits in itertools.product((0, 1), repeat=data.size - 1):
        # the first value is pinned to group 0, so group 1 needs at least one bit
        if not any(bits):
            continue
        labels = np.array((0,) + bits)
        sse = sum(((g - g.mean()) ** 2).sum() for g in (data[labels == 0], data[labels == 1]))
        best = min(best, sse)
    return float(best)


def check_kmeans_optimal(seeds: int = 200, max_size: int = 10) -> CheckResult:
    failures = 0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        size = int(rng.integers(2, max_size + 1))
        values = rng.choice(rng.normal(size=size), size=size) if seed % 4 == 0 else rng.normal(size=size)
        result = kmeans_1d(values, k=2, seed=seed)
        optimum = brute_force_two_split(values)
        failures += not math.isclose(result.inertia, optimum, rel_tol=1e-9, abs_tol=1e-12)
    return CheckResult(name="kmeans vs brute force", passed=failures == 0, detail=f"{seeds - failures}/{seeds}")


def check_whitening_efficacy(
    seed: int = 0, steps: int = 500, channels: int = 8, target: float = 0.9
) -> CheckResult:
    """
    Minimize the deep whitening loss of a learnable linear map over correlated
    features by plain gradient descent and measure the drop of the mean absolute
    off-diagonal covariance.  The step size decays geometrically.
    """
    gen = torch.Generator().manual_seed(seed)
    mixing = torch.eye(channels, dtype=DTYPE) + 0.6 * torch.randn(channels, channels, generator=gen, dtype=DTYPE)
    z = torch.randn(4, channels, 8, 8, generator=gen, dtype=DTYPE)
    features = torch.einsum("ij,njhw->nihw", mixing, z)
    weight = torch.eye(channels, dtype=DTYPE, requires_grad=True)
    off = ~torch.eye(channels, dtype=torch.bool)

    def off_diagonal() -> float:
        with torch.no_grad():
            theta = covariance(center_features(torch.einsum("ij,njhw->nihw", weight, features)))
            return theta.mean(dim=0)[off].abs().mean().item()

    before = off_diagonal()
    optimizer = torch.optim.SGD([weight], lr=0.1, momentum=0.0)
    schedule = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=0.995)
    used = steps
    for step in range(1, steps + 1):
        optimizer.zero_grad()
        mapped = torch.einsum("ij,njhw->nihw", weight, features)
        deep_whitening_loss(covariance(center_features(mapped))).backward()
        optimizer.step()
        schedule.step()
        if step % 25 == 0 and off_diagonal() <= (1 - target) * before:
            used = step
            break
    after = off_diagonal()
    reduction = 1 - after / before
    return CheckResult(
        name="whitening efficacy",
        passed=reduction >= target,
        detail=f"off-diagonal {before:.4f} -> {after:.4f} ({reduction:.1%}) in {used} steps",
    )


def check_modality_separability(n_seeds: int = 200) -> CheckResult:
    accuracy = modality_separability(n_seeds)
    return CheckResult(
        name="modality separability", passed=accuracy >= 0.95, detail=f"accuracy {accuracy:.3f}"
    )


def run_selftest(seed: int = 0) -> SelfTestReport:
    """Every gradient check followed by every property oracle."""
    started = time.perf_counter()
    results: List[CheckResult] = []
    for entry in gradient_check_report(seed).entries:
        if entry.skipped:
            detail = f"skipped: {entry.note}"
        elif entry.note:
            detail = entry.note
        else:
            detail = f"max rel err {entry.max_rel_error:.2e} (tol {entry.tolerance:.0e})"
        results.append(
            CheckResult(name=f"grad {entry.component.value}", passed=entry.passed or entry.skipped, detail=detail)
        )
    for check in (
        check_restitution_partition,
        check_instance_norm,
        check_entropy_bounds,
        check_pair_variance_closed_form,
        check_covariance,
        check_kmeans_optimal,
        check_whitening_efficacy,
        check_modality_separability,
    ):
        result = check()
        logger.debug("%s: %s (%s)", result.name, "pass" if result.passed else "FAIL", result.detail)
        results.append(result)
    logger.info("Self-test finished in %.1fs", time.perf_counter() - started)
    return SelfTestReport(results=results)
