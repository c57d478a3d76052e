"""
02_train_srw.py
---------------
Train a network with SRW blocks after stages 1-3 on the corpus written by
01_generate_corpus.py.  The first epochs only collect covariance statistics.
"""

import asyncio
import logging

from srwseg import NetworkConfig, TrainingConfig, TrainingProgress, train

logging.basicConfig(level=logging.INFO)


async def on_epoch(p: TrainingProgress):
    r = p.record
    print(f"[{p.percentage:5.1f}%] epoch {r.epoch} ({r.phase}) task={r.task_loss:.4f} val_iou={r.val_iou}")


async def main():
    training = TrainingConfig(epochs=20, warmup_epochs=3, batch_size=8, seed=0)
    network = NetworkConfig(srw_stages=[1, 2, 3])
    result = await train(training, "./data/corpus", network, "./runs/srw", force=True, progress_callback=on_epoch)
    print(f"\nbest: {result.best_checkpoint} (val iou {result.best_val_iou})")


asyncio.run(main())
