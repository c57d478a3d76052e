"""
01_generate_corpus.py
---------------------
Generate the synthetic two-modality corpus with a progress bar.
Source-like frames are split train/val/test-source, target-like frames
form test-target only.
"""

import asyncio
from srwseg import CorpusConfig, CorpusProgress, build_corpus


def on_progress(p: CorpusProgress):
    print(f"\r  {p.percentage:5.1f}%  {p.written}/{p.total}  {p.item_id}", end="")


async def main():
    config = CorpusConfig(seed=0, image_size=64, lesion_kind="polyp")
    manifest = await build_corpus(config, "./data/corpus", force=True, progress_callback=on_progress)
    print()
    for split, count in manifest.counts.items():
        print(f"{split:<12} {count}")


asyncio.run(main())
