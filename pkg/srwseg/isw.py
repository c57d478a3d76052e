"""
isw.py
------
Instance Selective Whitening.  Channel covariances of the enhanced features are
captured for a raw image and its style-transformed twin; the element-wise
variance across each pair (smoothed by an EMA) shows which covariance entries
carry style.  A 1-D k-means splits those variances into a high and a low group
and the high group becomes the whitening mask.  Only masked entries are pushed
toward zero.

Mask construction is a discrete selection and never carries gradients; only
``theta`` inside :func:`isw_loss` does.
"""

from __future__ import annotations

import logging
from typing import Any, Dict, Optional, Sequence

import numpy as np
import torch

from .basemodels import KMeansResult, WhiteningMask
from .enums import KMeansInit
from .exceptions import (
    DegenerateInputError,
    ShapeMismatchError,
    WarmupIncompleteError,
)

logger = logging.getLogger(__name__)

__all__ = [
    "center_features",
    "covariance",
    "deep_whitening_loss",
    "pair_variance",
    "VarianceState",
    "update_variance_ema",
    "kmeans_1d",
    "cluster_variance",
    "isw_loss",
]


def center_features(features: torch.Tensor) -> torch.Tensor:
    """Subtract the spatial mean of every (sample, channel)."""
    return features - features.mean(dim=(2, 3), keepdim=True)


def covariance(features: torch.Tensor) -> torch.Tensor:
    """
    ``theta = M M^T / (H W)`` per sample, with ``M`` the ``C x HW`` flattening.

    Callers center first (:func:`center_features`) for a true covariance.

    :param features: ``(N, C, H, W)``.
    :return: ``(N, C, C)`` symmetric positive semi-definite matrices.
    """
    if features.ndim != 4:
        raise ShapeMismatchError("covariance input", "(N, C, H, W)", tuple(features.shape))
    n, c, h, w = features.shape
    flat = features.reshape(n, c, h * w)
    return torch.bmm(flat, flat.transpose(1, 2)) / (h * w)


def _as_batched(theta: torch.Tensor, what: str) -> torch.Tensor:
    if theta.ndim == 2:
        theta = theta.unsqueeze(0)
    if theta.ndim != 3 or theta.shape[-1] != theta.shape[-2]:
        raise ShapeMismatchError(what, "square (N, C, C) or (C, C)", tuple(theta.shape))
    return theta


def deep_whitening_loss(theta: torch.Tensor) -> torch.Tensor:
    """
    ``mean |theta_mu - I|`` with ``theta_mu`` the batch-mean covariance.

    :param theta: ``(N, C, C)`` or ``(C, C)``.
    :raises ShapeMismatchError: ``theta`` is not square.
    """
    theta_mu = _as_batched(theta, "covariance").mean(dim=0)
    eye = torch.eye(theta_mu.shape[0], dtype=theta_mu.dtype, device=theta_mu.device)
    return (theta_mu - eye).abs().mean()


def pair_variance(theta_orig: torch.Tensor, theta_aug: torch.Tensor) -> torch.Tensor:
    """
    Element-wise variance of each (raw, transformed) covariance pair, averaged
    over the batch.  Equals ``mean_i (theta(x_i) - theta(T x_i))^2 / 4``.

    :param theta_orig: ``(N, C, C)`` covariances of the raw images.
    :param theta_aug: ``(N, C, C)`` covariances of the transformed images.
    :return: ``(C, C)`` non-negative symmetric matrix.
    :raises ShapeMismatchError: Shapes or batch sizes differ.
    """
    a = _as_batched(theta_orig, "raw covariance")
    b = _as_batched(theta_aug, "transformed covariance")
    if a.shape != b.shape:
        raise ShapeMismatchError("covariance pair", tuple(a.shape), tuple(b.shape))
    mu = (a + b) / 2
    return (0.5 * ((a - mu).pow(2) + (b - mu).pow(2))).mean(dim=0)


class VarianceState:
    """
    Running (EMA) estimate of the paired-variance matrix of one layer.

    Owned by a single training loop; never mutated concurrently.

    :param channels: Channel count ``C``.
    :param momentum: EMA momentum in ``[0, 1)``.
    :param min_warm_samples: Samples required before a mask may be computed.
    """

    def __init__(self, channels: int, momentum: float = 0.99, min_warm_samples: int = 1):
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.channels = channels
        self.momentum = momentum
        self.min_warm_samples = min_warm_samples
        self.v: Optional[torch.Tensor] = None
        self.ema_v: Optional[torch.Tensor] = None
        self.warm_samples = 0

    @property
    def is_warm(self) -> bool:
        return self.ema_v is not None and self.warm_samples >= self.min_warm_samples

    def state_dict(self) -> Dict[str, Any]:
        return {
            "channels": self.channels,
            "momentum": self.momentum,
            "min_warm_samples": self.min_warm_samples,
            "ema_v": None if self.ema_v is None else self.ema_v.detach().cpu().clone(),
            "warm_samples": self.warm_samples,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        if state["channels"] != self.channels:
            raise ShapeMismatchError("variance state channels", self.channels, state["channels"])
        self.momentum = float(state["momentum"])
        self.min_warm_samples = int(state["min_warm_samples"])
        self.ema_v = state["ema_v"]
        self.warm_samples = int(state["warm_samples"])

    @classmethod
    def from_state_dict(cls, state: Dict[str, Any]) -> "VarianceState":
        obj = cls(state["channels"])
        obj.load_state_dict(state)
        return obj

    def __repr__(self) -> str:
        return (
            f"VarianceState(channels={self.channels}, momentum={self.momentum}, "
            f"warm_samples={self.warm_samples})"
        )


def update_variance_ema(
    state: VarianceState, v_batch: torch.Tensor, samples: int = 1
) -> VarianceState:
    """
    ``ema <- momentum * ema + (1 - momentum) * v_batch``; the first call
    initializes ``ema = v_batch``.

    :param state: Layer statistics, updated in place and returned.
    :param v_batch: ``(C, C)`` paired variance of the current batch.
    :param samples: Samples that produced ``v_batch`` (added to ``warm_samples``).
    """
    if v_batch.shape != (state.channels, state.channels):
        raise ShapeMismatchError(
            "variance batch", (state.channels, state.channels), tuple(v_batch.shape)
        )
    v_batch = v_batch.detach()
    state.v = v_batch
    if state.ema_v is None:
        state.ema_v = v_batch.clone()
    else:
        ema = state.ema_v.to(device=v_batch.device, dtype=v_batch.dtype)
        state.ema_v = state.momentum * ema + (1.0 - state.momentum) * v_batch
    state.warm_samples += samples
    return state


def _optimal_two_split(sorted_vals: np.ndarray) -> np.ndarray:
    """Centroids of the minimum-SSE contiguous 2-split of sorted values."""
    n = sorted_vals.size
    prefix = np.concatenate(([0.0], np.cumsum(sorted_vals)))
    prefix_sq = np.concatenate(([0.0], np.cumsum(sorted_vals**2)))
    cut = np.arange(1, n)
    left_n, right_n = cut, n - cut
    left_sum, right_sum = prefix[cut], prefix[-1] - prefix[cut]
    sse = (
        prefix_sq[cut] - left_sum**2 / left_n
        + (prefix_sq[-1] - prefix_sq[cut]) - right_sum**2 / right_n
    )
    best = int(np.argmin(sse)) + 1
    return np.array([sorted_vals[:best].mean(), sorted_vals[best:].mean()])


def kmeans_1d(
    values: Sequence[float],
    k: int = 2,
    max_iters: int = 50,
    seed: int = 0,
    init: KMeansInit = KMeansInit.OPTIMAL_SPLIT,
) -> KMeansResult:
    """
    Lloyd's algorithm on scalars.

    Initialization: for ``k == 2`` the minimum-SSE contiguous split of the sorted
    values (``init="optimal-split"``) or the min/max pair (``init="extremes"``);
    for other ``k``, evenly spaced quantiles of the distinct values.  Emptied
    clusters are reseeded from ``seed``.  When fewer distinct values than ``k``
    exist, the effective number of clusters drops to that count.

    :param values: Non-empty scalars.
    :param k: Requested cluster count, ``>= 1``.
    :param max_iters: Iteration cap.
    :param seed: Seed for reseeding emptied clusters.
    :return: :class:`KMeansResult` with ascending centroids.
    :raises DegenerateInputError: ``values`` is empty.
    """
    data = np.asarray(values, dtype=np.float64).ravel()
    if data.size == 0:
        raise DegenerateInputError("k-means input", "no values")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    distinct = np.unique(data)
    k_eff = min(k, distinct.size)
    if k_eff == 1:
        mean = float(data.mean())
        inertia = float(((data - mean) ** 2).sum())
        return KMeansResult(
            assignments=[0] * data.size, centroids=[mean], iterations=0, inertia=inertia
        )

    if k_eff == 2 and init == KMeansInit.OPTIMAL_SPLIT:
        centroids = _optimal_two_split(np.sort(data))
    elif k_eff == 2:
        centroids = np.array([distinct[0], distinct[-1]])
    else:
        centroids = np.quantile(distinct, np.linspace(0.0, 1.0, k_eff))

    rng = np.random.default_rng(seed)
    assignments = np.full(data.size, -1)
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        # argmin picks the lowest index on ties
        new_assignments = np.argmin(np.abs(data[:, None] - centroids[None, :]), axis=1)
        if np.array_equal(new_assignments, assignments):
            converged = True
            break
        assignments = new_assignments
        for j in range(k_eff):
            members = data[assignments == j]
            centroids[j] = members.mean() if members.size else rng.choice(data)

    order = np.argsort(centroids, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(k_eff)
    assignments = remap[assignments]
    centroids = centroids[order]
    inertia = float(((data - centroids[assignments]) ** 2).sum())
    logger.debug("kmeans_1d: n=%d k=%d iterations=%d", data.size, k_eff, iterations)
    return KMeansResult(
        assignments=assignments.tolist(),
        centroids=centroids.tolist(),
        iterations=iterations,
        converged=converged,
        inertia=inertia,
    )


def cluster_variance(state: VarianceState, max_iters: int = 50) -> WhiteningMask:
    """
    Mask the high-variance group of the strict-upper-triangle EMA entries
    (mirrored to the lower triangle, diagonal excluded).

    Fewer than two entries, all-equal entries or a single effective cluster
    give an empty mask.

    :raises WarmupIncompleteError: The statistics are not warm yet.
    """
    if not state.is_warm:
        raise WarmupIncompleteError(state.warm_samples, state.min_warm_samples)
    ema = state.ema_v
    c = state.channels
    rows, cols = torch.triu_indices(c, c, offset=1)
    entries = ema[rows, cols].detach().cpu().double().numpy()
    if entries.size < 2 or np.ptp(entries) == 0:
        logger.debug("cluster_variance: degenerate variances, empty mask (C=%d)", c)
        return WhiteningMask.empty(c, dtype=ema.dtype, device=ema.device)

    result = kmeans_1d(entries, k=2, max_iters=max_iters)
    if result.effective_k < 2:
        return WhiteningMask.empty(c, dtype=ema.dtype, device=ema.device)
    high = torch.as_tensor(np.asarray(result.assignments) == result.effective_k - 1)
    m = torch.zeros(c, c, dtype=ema.dtype, device=ema.device)
    sel_rows, sel_cols = rows[high].to(ema.device), cols[high].to(ema.device)
    m[sel_rows, sel_cols] = 1
    m[sel_cols, sel_rows] = 1
    selected = 2 * int(high.sum())
    logger.debug("cluster_variance: %d/%d entries masked", selected, c * (c - 1))
    return WhiteningMask(m=m, selected_count=selected)


def isw_loss(theta: torch.Tensor, mask: WhiteningMask) -> torch.Tensor:
    """
    ``sum |theta * M| / selected_count`` per sample, averaged over the batch;
    zero for an empty mask.

    :param theta: ``(N, C, C)`` or ``(C, C)`` covariance.
    :param mask: Whitening mask of matching size.
    :raises ShapeMismatchError: Sizes differ.
    """
    theta = _as_batched(theta, "covariance")
    if theta.shape[-1] != mask.channels:
        raise ShapeMismatchError("whitening mask", theta.shape[-1], mask.channels)
    if mask.selected_count == 0:
        return theta.sum() * 0.0
    m = mask.m.to(device=theta.device, dtype=theta.dtype)
    per_sample = (theta * m).abs().sum(dim=(1, 2)) / mask.selected_count
    return per_sample.mean()
