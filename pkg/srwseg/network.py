"""
network.py
----------
Compact DeepLabv3+-style binary segmentation model with SRW insertion points.

Layout::

    stem (3x3, stride 1)
    stage 1..4 (2 basic blocks each, strides 2, 2, 2, 1; stage 4 dilation 2)
        -> SNR after configured stages, enhanced features continue downstream
        -> covariance capture at whitening stages (train mode, paired input)
    ASPP on stage 4 (output stride 8)
    decoder: upsample to stage-1 size, fuse projected stage-1 features,
             two 3x3 convs, classifier, upsample to the input size

In train mode the raw and style-transformed batches are concatenated and share
the encoder prefix up to the deepest active stage; only the raw half continues.
"""

from __future__ import annotations

import logging
from typing import Any, Dict, List, Optional, Union

import torch
from pydantic import ValidationError
from torch import nn
import torch.nn.functional as F

from .basemodels import ForwardArtifacts, NetworkConfig, SnrOutput
from .enums import RunMode
from .exceptions import ConfigError, MissingPairError, ShapeMismatchError
from .isw import center_features, covariance
from .snr import SNRBlock

logger = logging.getLogger(__name__)

__all__ = [
    "BasicBlock",
    "ASPP",
    "Decoder",
    "SRWSegNet",
    "build_model",
    "forward",
    "mask_from_logits",
    "predict_mask",
    "count_parameters",
]

STAGE_STRIDES = (2, 2, 2, 1)
STAGE_DILATIONS = (1, 1, 1, 2)


def _conv_bn_relu(in_ch: int, out_ch: int, kernel: int = 3, dilation: int = 1) -> nn.Sequential:
    padding = dilation * (kernel // 2)
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=padding, dilation=dilation, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with an identity (or 1x1 projected) shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(
            in_ch, out_ch, 3, stride=stride, padding=dilation, dilation=dilation, bias=False
        )
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + residual)


class ASPP(nn.Module):
    """
    Atrous spatial pyramid pooling: one branch per rate (rate 1 is a 1x1 conv)
    plus an image-pooling branch, concatenated and projected.

    The pooling branch has no batch norm so a batch of one image still trains.
    """

    def __init__(self, in_ch: int, out_ch: int, rates: List[int]):
        super().__init__()
        self.branches = nn.ModuleList(
            _conv_bn_relu(in_ch, out_ch, kernel=1) if r == 1 else _conv_bn_relu(in_ch, out_ch, dilation=r)
            for r in rates
        )
        self.image_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_ch, out_ch, 1),
            nn.ReLU(inplace=True),
        )
        self.project = _conv_bn_relu(out_ch * (len(rates) + 1), out_ch, kernel=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = F.interpolate(
            self.image_pool(x), size=x.shape[2:], mode="bilinear", align_corners=False
        )
        return self.project(torch.cat([pooled] + [b(x) for b in self.branches], dim=1))


class Decoder(nn.Module):
    """Low-level fusion decoder producing 2-class logits at the input size."""

    def __init__(
        self, context_ch: int, low_ch: int, low_proj_ch: int, mid_ch: int, num_classes: int
    ):
        super().__init__()
        self.low_level = _conv_bn_relu(low_ch, low_proj_ch, kernel=1)
        self.fuse = nn.Sequential(
            _conv_bn_relu(context_ch + low_proj_ch, mid_ch),
            _conv_bn_relu(mid_ch, mid_ch),
        )
        self.classifier = nn.Conv2d(mid_ch, num_classes, 1)

    def forward(
        self, context: torch.Tensor, low_level: torch.Tensor, out_size
    ) -> torch.Tensor:
        up = F.interpolate(
            context, size=low_level.shape[2:], mode="bilinear", align_corners=False
        )
        fused = self.fuse(torch.cat([up, self.low_level(low_level)], dim=1))
        return F.interpolate(
            self.classifier(fused), size=out_size, mode="bilinear", align_corners=False
        )


class SRWSegNet(nn.Module):
    """
    Segmentation network with SNR blocks and covariance capture points.

    :param config: Network configuration.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        ch = config.stage_channels
        self.stem = _conv_bn_relu(3, ch[0])

        stages = []
        in_ch = ch[0]
        for out_ch, stride, dilation in zip(ch, STAGE_STRIDES, STAGE_DILATIONS):
            blocks = [BasicBlock(in_ch, out_ch, stride=stride, dilation=dilation)]
            blocks += [
                BasicBlock(out_ch, out_ch, dilation=dilation)
                for _ in range(config.blocks_per_stage - 1)
            ]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)

        self.snr = nn.ModuleDict(
            {
                str(s): SNRBlock(
                    ch[s - 1],
                    reduction=config.reduction,
                    eps=config.snr_eps,
                    batch_shared=config.batch_shared_attention,
                )
                for s in config.srw_stages
            }
        )
        self.aspp = ASPP(ch[3], config.aspp_channels, config.aspp_dilations)
        self.decoder = Decoder(
            config.aspp_channels,
            ch[0],
            config.low_level_channels,
            config.decoder_channels,
            config.num_classes,
        )
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    @property
    def snr_stages(self) -> List[int]:
        return list(self.config.srw_stages)

    @property
    def whitening_stages(self) -> List[int]:
        return list(self.config.whitening_stages)

    def _check_input(self, x: torch.Tensor, what: str) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatchError(what, "(N, 3, H, W)", tuple(x.shape))
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeMismatchError(f"{what} spatial size", "multiples of 16", tuple(x.shape[2:]))

    def forward(
        self,
        x: torch.Tensor,
        x_aug: Optional[torch.Tensor] = None,
        center_cov: bool = True,
    ) -> ForwardArtifacts:
        """
        Run the network.

        :param x: ``(N, 3, H, W)`` raw images.
        :param x_aug: Style-transformed twins of ``x``; required in train mode
            when any whitening stage is configured, ignored in eval mode.
        :param center_cov: Subtract spatial means before the covariance.
        :raises MissingPairError: Train mode without ``x_aug``.
        """
        self._check_input(x, "input")
        n = x.shape[0]
        whitening = set(self.whitening_stages)
        paired = False
        if self.training and whitening:
            if x_aug is None:
                raise MissingPairError(sorted(whitening))
            if x_aug.shape != x.shape:
                raise ShapeMismatchError("transformed input", tuple(x.shape), tuple(x_aug.shape))
            paired = True
        elif x_aug is not None and not self.training:
            logger.warning("x_aug is ignored in eval mode")

        last_paired_stage = max(self.config.active_stages, default=0) if paired else 0
        h = torch.cat([x, x_aug], dim=0) if paired else x
        h = self.stem(h)

        artifacts: Dict[str, List[Any]] = {
            "per_stage_snr": [],
            "per_stage_snr_aug": [],
            "per_stage_theta_raw": [],
            "per_stage_theta_aug": [],
        }
        low_level = None
        for idx, stage in enumerate(self.stages, start=1):
            h = stage(h)
            key = str(idx)
            if key in self.snr:
                out: SnrOutput = self.snr[key](h)
                h = out.enhanced
                if paired:
                    artifacts["per_stage_snr"].append(out.select(slice(0, n)))
                    artifacts["per_stage_snr_aug"].append(out.select(slice(n, None)))
                else:
                    artifacts["per_stage_snr"].append(out)
            if paired and idx in whitening:
                feats = center_features(h) if center_cov else h
                theta = covariance(feats)
                artifacts["per_stage_theta_raw"].append(theta[:n])
                artifacts["per_stage_theta_aug"].append(theta[n:])
            if paired and idx == last_paired_stage:
                h = h[:n]
                paired = False
            if idx == 1:
                low_level = h[:n]

        logits = self.decoder(self.aspp(h), low_level, x.shape[2:])
        return ForwardArtifacts(
            logits=logits,
            snr_stages=self.snr_stages,
            whitening_stages=self.whitening_stages if artifacts["per_stage_theta_raw"] else [],
            **artifacts,
        )


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(
    config: Union[NetworkConfig, Dict[str, Any], None] = None, seed: int = 0
) -> SRWSegNet:
    """
    Build a network with deterministic initialization.

    :param config: :class:`NetworkConfig` or a mapping of its fields.
    :param seed: Initialization seed; the global RNG state is left untouched.
    :raises ConfigError: The configuration is invalid.
    """
    if config is None:
        config = NetworkConfig()
    elif not isinstance(config, NetworkConfig):
        try:
            config = NetworkConfig.model_validate(config)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SRWSegNet(config)

    logger.info(
        "Built model: srw_stages=%s whitening_stages=%s parameters=%d",
        config.srw_stages,
        config.whitening_stages,
        count_parameters(model),
    )
    return model


def forward(
    model: SRWSegNet,
    x: torch.Tensor,
    x_aug: Optional[torch.Tensor] = None,
    mode: RunMode = RunMode.EVAL,
    center_cov: bool = True,
) -> ForwardArtifacts:
    """Switch ``model`` to ``mode`` and run it."""
    model.train(RunMode(mode) == RunMode.TRAIN)
    return model(x, x_aug, center_cov=center_cov)


def mask_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Binary mask from 2-class logits; ties go to class 0."""
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeMismatchError("logits", "(N, 2, H, W)", tuple(logits.shape))
    return (logits[:, 1] > logits[:, 0]).to(torch.uint8)


@torch.no_grad()
def predict_mask(model: SRWSegNet, x: torch.Tensor) -> torch.Tensor:
    """
    Eval-mode prediction.

    :return: ``(N, H, W)`` uint8 mask in ``{0, 1}``.
    """
    model.eval()
    return mask_from_logits(model(x).logits)
