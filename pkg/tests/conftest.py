import asyncio

import pytest
from srwseg import CorpusConfig, NetworkConfig, TrainingConfig, build_corpus


@pytest.fixture
def tiny_network():
    return NetworkConfig(
        stage_channels=[4, 8, 8, 8],
        srw_stages=[1, 2],
        aspp_dilations=[1, 2],
        input_size=(32, 32),
        blocks_per_stage=1,
        aspp_channels=8,
        low_level_channels=4,
        decoder_channels=8,
    )


@pytest.fixture
def quick_training():
    return TrainingConfig(
        epochs=2,
        warmup_epochs=1,
        batch_size=4,
        lr0=0.01,
        seed=3,
    )


@pytest.fixture(scope="session")
def corpus_config():
    return CorpusConfig(seed=0, source_count=20, target_count=5, image_size=32, concurrency=4)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory, corpus_config):
    root = tmp_path_factory.mktemp("data") / "corpus"
    asyncio.run(build_corpus(corpus_config, root))
    return root
