"""
snr.py
------
Style Normalization and Restitution.  Instance normalization removes style
statistics from a feature map; a squeeze-style channel attention splits the
removed residual into a task-relevant part (added back, "enhanced") and a
task-irrelevant part ("corrupted").  The dual-causality loss asks the enhanced
features to be less entropic than the normalized ones and the corrupted
features to be more entropic.

All functions here are pure; :class:`SNRBlock` only owns the attention weights.
"""

from __future__ import annotations

import logging
import math
from typing import Tuple, Union

import torch
from torch import nn
import torch.nn.functional as F

from .basemodels import SnrOutput, SnrParams
from .exceptions import (
    AttentionRangeError,
    DegenerateInputError,
    NonFiniteInputError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

__all__ = [
    "effective_reduction",
    "instance_normalize",
    "channel_attention",
    "restitution_split",
    "snr_forward",
    "pixel_entropy",
    "margin_loss",
    "dual_causality_loss",
    "SNRBlock",
]


def _check_feature_map(features: torch.Tensor, what: str = "feature map") -> None:
    if features.ndim != 4 or min(features.shape) < 1:
        raise ShapeMismatchError(what, "(N>=1, C>=1, H>=1, W>=1)", tuple(features.shape))
    if not torch.isfinite(features).all():
        raise NonFiniteInputError(what)


def effective_reduction(channels: int, reduction: int = 16) -> int:
    """
    Bottleneck ratio actually used for ``channels``: ``min(r, C // 4)``, at least 1,
    so toy layers keep a hidden width of 4 or more.
    """
    return max(1, min(reduction, channels // 4))


def instance_normalize(features: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """
    Standardize every (sample, channel) over its spatial positions, no affine.

    :param features: ``(N, C, H, W)`` finite tensor.
    :param eps: Variance floor, must be positive.
    :return: Tensor of the same shape; a 1x1 map normalizes to zeros.
    :raises NonFiniteInputError: Input contains NaN/inf.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _check_feature_map(features)
    mean = features.mean(dim=(2, 3), keepdim=True)
    centered = features - mean
    var = centered.pow(2).mean(dim=(2, 3), keepdim=True)
    return centered * torch.rsqrt(var + eps)


def channel_attention(
    residual: torch.Tensor, params: SnrParams, batch_shared: bool = False
) -> torch.Tensor:
    """
    ``alpha = sigmoid(FC2(relu(FC1(GAP(R)))))`` per sample.

    :param residual: ``(N, C, H, W)`` residual ``F - IN(F)``.
    :param params: Attention weights; ``fc1_weight`` is ``C x hidden``.
    :param batch_shared: Pool over the batch as well and share one vector.
    :return: ``(N, C)`` attention weights in ``(0, 1)``.
    :raises ShapeMismatchError: Channel count disagrees with ``params``.
    """
    _check_feature_map(residual, "residual")
    n, c = residual.shape[:2]
    w1, b1, w2, b2 = params.fc1_weight, params.fc1_bias, params.fc2_weight, params.fc2_bias
    if w1.shape[0] != c or w2.shape[1] != c:
        raise ShapeMismatchError("attention weights", f"{c} channels", (tuple(w1.shape), tuple(w2.shape)))
    if w1.shape[1] != w2.shape[0] or b1.shape != (w1.shape[1],) or b2.shape != (c,):
        raise ShapeMismatchError(
            "attention bottleneck",
            f"fc1 {tuple(w1.shape)} -> fc2 ({w1.shape[1]}, {c})",
            (tuple(b1.shape), tuple(w2.shape), tuple(b2.shape)),
        )

    pooled = residual.mean(dim=(2, 3))
    if batch_shared:
        pooled = pooled.mean(dim=0, keepdim=True)
    hidden = F.relu(pooled @ w1 + b1)
    alpha = torch.sigmoid(hidden @ w2 + b2)
    return alpha.expand(n, c) if batch_shared else alpha


def restitution_split(
    residual: torch.Tensor, alpha: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Split the residual channel-wise: ``R+ = alpha * R``, ``R- = (1 - alpha) * R``.

    :param residual: ``(N, C, H, W)``.
    :param alpha: ``(N, C)`` or ``(C,)`` weights in ``[0, 1]``.
    :return: ``(R_plus, R_minus)``, summing exactly to ``R``.
    :raises AttentionRangeError: ``alpha`` is non-finite or leaves ``[0, 1]``.
    """
    _check_feature_map(residual, "residual")
    c = residual.shape[1]
    if alpha.shape[-1] != c or alpha.ndim not in (1, 2):
        raise ShapeMismatchError("alpha", f"(N, {c}) or ({c},)", tuple(alpha.shape))
    if alpha.ndim == 2 and alpha.shape[0] != residual.shape[0]:
        raise ShapeMismatchError("alpha batch", residual.shape[0], alpha.shape[0])
    if not torch.isfinite(alpha).all() or alpha.min() < 0 or alpha.max() > 1:
        raise AttentionRangeError(float(alpha.min()), float(alpha.max()))

    gate = alpha.reshape(-1, c, 1, 1) if alpha.ndim == 2 else alpha.view(1, c, 1, 1)
    r_plus = gate * residual
    return r_plus, residual - r_plus


def snr_forward(
    features: torch.Tensor, params: SnrParams, batch_shared: bool = False
) -> SnrOutput:
    """
    Full SNR pass: IN, residual, attention, restitution.

    :param features: ``(N, C, H, W)`` stage output ``F``.
    :param params: Attention weights and IN epsilon.
    :return: :class:`SnrOutput` with ``enhanced = IN(F) + R+``.
    """
    normalized = instance_normalize(features, params.eps)
    residual = features - normalized
    alpha = channel_attention(residual, params, batch_shared=batch_shared)
    r_plus, r_minus = restitution_split(residual, alpha)
    return SnrOutput(
        normalized=normalized,
        enhanced=normalized + r_plus,
        corrupted=normalized + r_minus,
        residual_plus=r_plus,
        residual_minus=r_minus,
        alpha=alpha,
    )


def pixel_entropy(features: torch.Tensor) -> torch.Tensor:
    """
    Entropy (natural log) of the channel softmax at every pixel.

    :param features: ``(N, C, H, W)`` with ``C >= 2``.
    :return: ``(N, H, W)`` values in ``[0, ln C]``.
    :raises DegenerateInputError: ``C == 1``.
    """
    _check_feature_map(features)
    c = features.shape[1]
    if c < 2:
        raise DegenerateInputError("entropy input", "needs at least 2 channels")
    log_p = F.log_softmax(features, dim=1)
    entropy = -(log_p.exp() * log_p).sum(dim=1)
    return entropy.clamp(0.0, math.log(c))


def margin_loss(x: Union[torch.Tensor, float]) -> Union[torch.Tensor, float]:
    """
    ``ln(1 + exp(x))`` evaluated as ``max(x, 0) + ln(1 + exp(-|x|))``.

    Floats in, float out; tensors in, tensor out.

    :raises NonFiniteInputError: ``x`` is NaN or infinite.
    """
    as_float = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(x, dtype=torch.float64) if as_float else x
    if not torch.isfinite(t).all():
        raise NonFiniteInputError("margin_loss input")
    # logaddexp(x, 0) is the overflow-safe form with the exact derivative at 0
    out = torch.logaddexp(t, torch.zeros_like(t))
    return float(out) if as_float else out


def dual_causality_loss(
    enhanced: torch.Tensor, normalized: torch.Tensor, corrupted: torch.Tensor
) -> torch.Tensor:
    """
    ``L_dc = L+ + L-`` averaged over the batch, with
    ``L+ = margin(mean_px E(enhanced) - mean_px E(normalized))`` and
    ``L- = margin(mean_px E(normalized) - mean_px E(corrupted))``.

    :raises ShapeMismatchError: The three maps differ in shape.
    """
    if not (enhanced.shape == normalized.shape == corrupted.shape):
        raise ShapeMismatchError(
            "dual-causality operands",
            tuple(normalized.shape),
            (tuple(enhanced.shape), tuple(corrupted.shape)),
        )
    e_plus = pixel_entropy(enhanced).mean(dim=(1, 2))
    e_norm = pixel_entropy(normalized).mean(dim=(1, 2))
    e_minus = pixel_entropy(corrupted).mean(dim=(1, 2))
    per_sample = margin_loss(e_plus - e_norm) + margin_loss(e_norm - e_minus)
    return per_sample.mean()


class SNRBlock(nn.Module):
    """
    SNR block with its own attention weights.

    :param channels: Channel count ``C`` of the incoming features.
    :param reduction: Requested bottleneck ratio (see :func:`effective_reduction`).
    :param eps: Instance-norm epsilon.
    :param batch_shared: Share one attention vector across the batch.
    """

    def __init__(
        self,
        channels: int,
        reduction: int = 16,
        eps: float = 1e-5,
        batch_shared: bool = False,
    ):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.batch_shared = batch_shared
        hidden = max(1, channels // effective_reduction(channels, reduction))
        self.fc1_weight = nn.Parameter(torch.empty(channels, hidden))
        self.fc1_bias = nn.Parameter(torch.zeros(hidden))
        self.fc2_weight = nn.Parameter(torch.empty(hidden, channels))
        self.fc2_bias = nn.Parameter(torch.zeros(channels))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # fan-in normal; weights are stored input-major, so fan-in is dim 0
        nn.init.normal_(self.fc1_weight, std=math.sqrt(2.0 / self.fc1_weight.shape[0]))
        nn.init.normal_(self.fc2_weight, std=math.sqrt(1.0 / self.fc2_weight.shape[0]))
        nn.init.zeros_(self.fc1_bias)
        nn.init.zeros_(self.fc2_bias)

    @property
    def params(self) -> SnrParams:
        return SnrParams(
            fc1_weight=self.fc1_weight,
            fc1_bias=self.fc1_bias,
            fc2_weight=self.fc2_weight,
            fc2_bias=self.fc2_bias,
            eps=self.eps,
        )

    def forward(self, features: torch.Tensor) -> SnrOutput:
        return snr_forward(features, self.params, batch_shared=self.batch_shared)

    def extra_repr(self) -> str:
        return f"channels={self.channels}, hidden={self.fc1_weight.shape[1]}, eps={self.eps}"
