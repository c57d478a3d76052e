"""
04_ablation.py
--------------
Sweep the SRW placement and compare IoU on the held-out modality.
Runs are trained one after another; each gets its own run directory.
"""

import asyncio
from srwseg import AblationRow, NetworkConfig, Split, TrainingConfig, evaluate, load_dataset, load_model, train
from srwseg.cli import ABLATION_STAGES, format_ablation_table

CORPUS = "./data/corpus"


async def run_one(stages, training: TrainingConfig) -> AblationRow:
    tag = "-".join(map(str, stages)) or "none"
    result = await train(training, CORPUS, NetworkConfig(srw_stages=stages), f"./runs/ablate/{tag}", force=True)
    checkpoint = result.best_checkpoint or result.last_checkpoint
    model, _ = load_model(checkpoint)
    target = evaluate(model, load_dataset(CORPUS, Split.TEST_TARGET))
    source = evaluate(model, load_dataset(CORPUS, Split.TEST_SOURCE))
    return AblationRow(
        srw_stages=list(stages),
        target_iou=target.mean("iou"),
        target_iou_std=target.metrics["iou"].std,
        source_iou=source.mean("iou"),
        checkpoint=checkpoint,
    )


async def main():
    training = TrainingConfig(epochs=20, warmup_epochs=3)
    rows = [await run_one(stages, training) for stages in ABLATION_STAGES]
    print(format_ablation_table(rows))


asyncio.run(main())
