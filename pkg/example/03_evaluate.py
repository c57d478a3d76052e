"""
03_evaluate.py
--------------
Evaluate a checkpoint on both test splits and save reports and overlays.
"""

import asyncio
from srwseg import Split, evaluate, export_overlays, export_report, load_dataset, load_model


async def main():
    model, checkpoint = load_model("./runs/srw/best.ckpt")
    print(f"checkpoint from epoch {checkpoint.epoch}, srw stages {checkpoint.network_config.srw_stages}")

    for split in (Split.TEST_SOURCE, Split.TEST_TARGET):
        dataset = load_dataset("./data/corpus", split)
        report = evaluate(model, dataset, model_id="srw")
        await export_report(report, f"./runs/srw/reports/{split}.json")
        await export_overlays(model, dataset, f"./runs/srw/overlays/{split}", limit=8)
        for name, m in report.metrics.items():
            print(f"{split:<12} {name:<14} {m.mean:.4f} ± {m.std:.4f}")


asyncio.run(main())
