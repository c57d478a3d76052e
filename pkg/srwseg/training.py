"""
training.py
-----------
Combined objective, polynomial learning-rate schedule and the training loop.

``total = task + sum_l isw_weight * L_isw(l) + sum_l dc_weight * L_dc(l)``

Per step: augment the batch, build the style-transformed twin of every image,
run both through the shared encoder, update the per-layer variance EMA, and (in
the full phase) recompute the whitening masks before composing the loss.  The
first ``warmup_epochs`` epochs only collect statistics: the whitening term is
held at zero.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import shutil
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import aiofiles
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from .basemodels import (
    EpochRecord,
    ForwardArtifacts,
    LossBundle,
    NetworkConfig,
    TrainingConfig,
    TrainingProgress,
    TrainingResult,
    WhiteningMask,
)
from .checkpoint import save_checkpoint
from .enums import Split, TrainPhase, WhiteningMode
from .evaluation import evaluate
from .exceptions import (
    DegenerateInputError,
    EmptyDatasetError,
    NonFiniteLossError,
    OutputExistsError,
    ShapeMismatchError,
    WhiteningStateError,
)
from .isw import (
    VarianceState,
    cluster_variance,
    deep_whitening_loss,
    isw_loss,
    pair_variance,
    update_variance_ema,
)
from .network import build_model
from .snr import dual_causality_loss
from .synthdata import SegmentationDataset, TrainingPairs, load_dataset
from .utils import (
    call_callback,
    derive_seed,
    finalize_output,
    make_staging_dir,
    seed_everything,
)

logger = logging.getLogger(__name__)

__all__ = ["total_loss", "poly_lr", "Trainer", "train"]

LOG_NAME = "training_log.jsonl"
LAST_NAME = "last.ckpt"
BEST_NAME = "best.ckpt"


def poly_lr(lr0: float, step: int, max_steps: int, power: float = 0.9) -> float:
    """
    ``lr0 * (1 - step / max_steps) ** power``; steps past ``max_steps`` give 0.

    :raises ValueError: Negative ``step`` or non-positive ``max_steps``.
    """
    if step < 0 or max_steps <= 0:
        raise ValueError(f"invalid schedule position step={step} max_steps={max_steps}")
    if step >= max_steps:
        return 0.0
    return lr0 * (1.0 - step / max_steps) ** power


def total_loss(
    logits: torch.Tensor,
    target_mask: torch.Tensor,
    artifacts: ForwardArtifacts,
    masks: Optional[Sequence[WhiteningMask]],
    config: TrainingConfig,
    phase: TrainPhase,
) -> LossBundle:
    """
    Compose the training objective.

    :param logits: ``(N, 2, H, W)`` raw-path logits.
    :param target_mask: ``(N, H, W)`` binary ground truth.
    :param artifacts: Forward artifacts of the same step.
    :param masks: One whitening mask per captured layer (needed for the
        selective whitening term in the full phase).
    :param config: Loss weights and whitening mode.
    :param phase: ``warmup`` holds the selective whitening term at zero.
    :raises DegenerateInputError: ``target_mask`` is not binary.
    """
    if target_mask.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeMismatchError("target mask", (logits.shape[0], *logits.shape[2:]), tuple(target_mask.shape))
    if not ((target_mask == 0) | (target_mask == 1)).all():
        raise DegenerateInputError("target mask", "values must be 0 or 1")
    phase = TrainPhase(phase)
    task = F.cross_entropy(logits, target_mask.long())

    dc_terms: List[torch.Tensor] = []
    if config.dc_weight > 0:
        for i, out in enumerate(artifacts.per_stage_snr):
            term = dual_causality_loss(out.enhanced, out.normalized, out.corrupted)
            if config.dc_on_aug_path and i < len(artifacts.per_stage_snr_aug):
                aug = artifacts.per_stage_snr_aug[i]
                term = 0.5 * (term + dual_causality_loss(aug.enhanced, aug.normalized, aug.corrupted))
            dc_terms.append(term)

    isw_terms: List[torch.Tensor] = []
    if config.isw_weight > 0 and config.whitening != WhiteningMode.NONE:
        thetas = [
            torch.cat([raw, aug], dim=0)
            for raw, aug in zip(artifacts.per_stage_theta_raw, artifacts.per_stage_theta_aug)
        ]
        if config.whitening == WhiteningMode.DWT:
            isw_terms = [deep_whitening_loss(theta) for theta in thetas]
        elif phase == TrainPhase.WARMUP or not thetas:
            isw_terms = [logits.new_zeros(()) for _ in thetas]
        else:
            if masks is None or len(masks) != len(thetas):
                raise WhiteningStateError(
                    f"{len(thetas)} whitening masks required, got {0 if masks is None else len(masks)}"
                )
            isw_terms = [isw_loss(theta, mask) for theta, mask in zip(thetas, masks)]

    bundle = LossBundle(
        task=task,
        dc_per_layer=dc_terms,
        isw_per_layer=isw_terms,
        total=task,
        isw_weight=config.isw_weight,
        dc_weight=config.dc_weight,
        phase=phase,
    )
    bundle.total = bundle.recompose()
    return bundle


class Trainer:
    """
    Single-writer training loop over one model and its whitening statistics.

    :param config: Optimisation settings.
    :param network_config: Architecture.
    :param train_set: Source-modality training split.
    :param val_set: Validation split (optional).
    """

    def __init__(
        self,
        config: TrainingConfig,
        network_config: NetworkConfig,
        train_set: SegmentationDataset,
        val_set: Optional[SegmentationDataset] = None,
    ):
        if len(train_set) == 0:
            raise EmptyDatasetError("training split")
        self.config = config
        self.network_config = network_config
        self.train_set = train_set
        self.val_set = val_set
        self.device = torch.device(config.device)

        seed_everything(config.seed, config.deterministic)
        self.model = build_model(network_config, seed=derive_seed(config.seed, 10)).to(self.device)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(),
            lr=config.lr0,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        channels = network_config.stage_channels
        self.variance_states = (
            [
                VarianceState(channels[s - 1], momentum=config.ema_momentum)
                for s in network_config.whitening_stages
            ]
            if config.whitening == WhiteningMode.ISW
            else []
        )
        self.masks: Optional[List[WhiteningMask]] = None
        self.pairs = TrainingPairs(train_set, config.seed, config.augment, config.style)
        self.steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
        self.max_steps = self.steps_per_epoch * config.epochs
        self.global_step = 0
        self.epoch = 0
        self.best_val_iou: Optional[float] = None
        self.history: List[EpochRecord] = []

    @property
    def needs_pair(self) -> bool:
        return bool(self.network_config.whitening_stages)

    def _loader(self, epoch: int) -> DataLoader:
        self.pairs.set_epoch(epoch)
        generator = torch.Generator().manual_seed(derive_seed(self.config.seed, 20, epoch))
        return DataLoader(
            self.pairs,
            batch_size=self.config.batch_size,
            shuffle=True,
            generator=generator,
            num_workers=self.config.num_workers,
        )

    def _update_statistics(self, artifacts: ForwardArtifacts, phase: TrainPhase) -> None:
        if not self.variance_states:
            return
        batch = artifacts.per_stage_theta_raw[0].shape[0]
        for state, raw, aug in zip(
            self.variance_states, artifacts.per_stage_theta_raw, artifacts.per_stage_theta_aug
        ):
            update_variance_ema(state, pair_variance(raw.detach(), aug.detach()), samples=batch)
        if phase == TrainPhase.FULL:
            self.masks = [cluster_variance(state) for state in self.variance_states]
            logger.debug(
                "step %d masks: %s",
                self.global_step,
                [m.selected_count for m in self.masks],
            )

    def _grad_norms(self) -> Dict[str, float]:
        return {
            name: float(p.grad.norm())
            for name, p in self.model.named_parameters()
            if p.grad is not None
        }

    def train_step(
        self,
        images: torch.Tensor,
        images_aug: torch.Tensor,
        target: torch.Tensor,
        phase: TrainPhase,
    ) -> LossBundle:
        """One optimizer step on a batch; returns the step's loss bundle."""
        lr = poly_lr(self.config.lr0, self.global_step, self.max_steps, self.config.poly_power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        self.model.train()
        images, target = images.to(self.device), target.to(self.device)
        x_aug = images_aug.to(self.device) if self.needs_pair else None
        artifacts = self.model(images, x_aug, center_cov=self.config.center_before_cov)
        self._update_statistics(artifacts, phase)
        bundle = total_loss(artifacts.logits, target, artifacts, self.masks, self.config, phase)

        self.optimizer.zero_grad(set_to_none=True)
        bundle.total.backward()

        if not torch.isfinite(bundle.total):
            # norms are of this step's gradients; the weights are left untouched
            layer_losses = {"task": float(bundle.task.detach())}
            for stage, t in zip(artifacts.snr_stages, bundle.dc_per_layer):
                layer_losses[f"dc/stage{stage}"] = float(t.detach())
            for stage, t in zip(artifacts.whitening_stages, bundle.isw_per_layer):
                layer_losses[f"isw/stage{stage}"] = float(t.detach())
            raise NonFiniteLossError(self.global_step, layer_losses, self._grad_norms())

        self.optimizer.step()
        self.global_step += 1
        logger.debug(
            "step %d lr=%.3e %s", self.global_step, lr, json.dumps(bundle.as_floats())
        )
        return bundle

    def train_epoch(self, epoch: int) -> EpochRecord:
        """Run one epoch and validate; ``epoch`` is 1-based."""
        phase = self.config.phase_of(epoch)
        if self.config.whitening != WhiteningMode.ISW:
            phase = TrainPhase.FULL
        lr = poly_lr(self.config.lr0, self.global_step, self.max_steps, self.config.poly_power)
        sums = {"task": 0.0, "dc": 0.0, "isw": 0.0}
        steps = 0
        for images, images_aug, target in self._loader(epoch):
            losses = self.train_step(images, images_aug, target, phase).as_floats()
            for key in sums:
                sums[key] += losses[key]
            steps += 1

        val_iou = None
        if self.val_set is not None and len(self.val_set):
            val_iou = evaluate(self.model, self.val_set, Split.VAL).mean("iou")
        self.epoch = epoch
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            task_loss=sums["task"] / steps,
            dc_loss=sums["dc"] / steps,
            isw_loss=sums["isw"] / steps,
            val_iou=val_iou,
            phase=phase,
        )
        self.history.append(record)
        logger.info(
            "epoch %d/%d [%s] lr=%.2e task=%.4f dc=%.4f isw=%.4f val_iou=%s",
            epoch,
            self.config.epochs,
            phase.value,
            lr,
            record.task_loss,
            record.dc_loss,
            record.isw_loss,
            "n/a" if val_iou is None else f"{val_iou:.4f}",
        )
        return record

    def save(self, path: Path) -> Path:
        return save_checkpoint(
            path,
            self.model,
            optimizer=self.optimizer,
            variance_states=self.variance_states,
            training_config=self.config,
            epoch=self.epoch,
            global_step=self.global_step,
            best_val_iou=self.best_val_iou,
            seeds={"run": self.config.seed, "init": derive_seed(self.config.seed, 10)},
        )

    async def fit(
        self,
        output_dir: Path,
        progress_callback: Optional[Callable[[TrainingProgress], None]] = None,
    ) -> List[EpochRecord]:
        """
        Train for ``config.epochs`` epochs, writing the JSON-lines log and the
        last/best checkpoints into ``output_dir``.
        """
        log_path = output_dir / LOG_NAME
        for epoch in range(self.epoch + 1, self.config.epochs + 1):
            record = await asyncio.to_thread(self.train_epoch, epoch)
            async with aiofiles.open(log_path, "a") as f:
                await f.write(record.model_dump_json() + "\n")

            improved = record.val_iou is not None and (
                self.best_val_iou is None or record.val_iou > self.best_val_iou
            )
            if improved:
                self.best_val_iou = record.val_iou
                await asyncio.to_thread(self.save, output_dir / BEST_NAME)
                logger.info("New best val IoU %.4f at epoch %d", record.val_iou, epoch)
            if epoch % self.config.checkpoint_every == 0 or epoch == self.config.epochs:
                await asyncio.to_thread(self.save, output_dir / LAST_NAME)

            await call_callback(
                progress_callback,
                TrainingProgress(
                    epoch=epoch,
                    epochs=self.config.epochs,
                    global_step=self.global_step,
                    record=record,
                    best_val_iou=self.best_val_iou,
                ),
            )
        return self.history


async def train(
    config: TrainingConfig,
    corpus_path: Union[str, Path],
    network_config: Optional[NetworkConfig] = None,
    output_dir: Union[str, Path] = "runs/srw",
    force: bool = False,
    progress_callback: Optional[Callable[[TrainingProgress], None]] = None,
) -> TrainingResult:
    """
    Train on the ``train`` split of a corpus, validating on ``val``.

    Output goes to a staging directory that replaces ``output_dir`` only once
    training finished, so a failed run leaves nothing behind.

    :raises OutputExistsError: ``output_dir`` exists and ``force`` is false.
    :raises InputSizeMismatchError: Corpus frames differ from ``network_config.input_size``.
    :raises NonFiniteLossError: The objective diverged.
    """
    network_config = network_config or NetworkConfig()
    output_dir = Path(output_dir)
    if output_dir.exists() and not force:
        raise OutputExistsError(output_dir)

    train_set = load_dataset(corpus_path, Split.TRAIN)
    try:
        val_set = load_dataset(corpus_path, Split.VAL)
    except EmptyDatasetError:
        logger.warning("No validation split in %s; best checkpoint disabled", corpus_path)
        val_set = None

    train_set.check_input_size(network_config.input_size)
    if val_set is not None:
        val_set.check_input_size(network_config.input_size)

    trainer = Trainer(config, network_config, train_set, val_set)
    staging = make_staging_dir(output_dir)
    try:
        history = await trainer.fit(staging, progress_callback)
    except BaseException:
        await asyncio.to_thread(shutil.rmtree, staging, True)
        raise
    await finalize_output(staging, output_dir, force=force)

    best = output_dir / BEST_NAME
    return TrainingResult(
        output_dir=str(output_dir),
        last_checkpoint=str(output_dir / LAST_NAME),
        best_checkpoint=str(best) if best.exists() else None,
        best_val_iou=trainer.best_val_iou,
        history=history,
    )
