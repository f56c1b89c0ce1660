import numpy as np
import pytest

import exmem
from exmem import tokenizer

TEXTS = [
    "alpine lakes freeze solid by late november most years",
    "the committee approved the budget after a long debate",
    "sodium reacts violently with water releasing hydrogen",
    "her first novel sold poorly but the second was a hit",
    "migration routes follow the coastline for thousands of miles",
    "the compiler inlines small functions at optimization level two",
    "rainfall in the basin doubled over the last decade",
    "ancient trade roads crossed the mountains at three passes",
    "the orchestra tuned to a slightly sharp concert pitch",
    "fermentation stops once the sugar is fully consumed",
    "glacial till covers most of the northern plain",
    "the patent described a valve with no moving parts",
]


@pytest.fixture(scope="session")
def toy_config():
    return exmem.ModelConfig.toy()


@pytest.fixture(scope="session")
def toy_model(toy_config):
    return exmem.init_model(toy_config, seed=0)


@pytest.fixture(scope="session")
def corpus(toy_config):
    return [tokenizer.encode(t)[:toy_config.l_ref] for t in TEXTS]


@pytest.fixture(scope="session")
def memories(toy_model, corpus):
    return [exmem.write_memory(toy_model, r, ref_id=i)
            for i, r in enumerate(corpus)]


@pytest.fixture()
def bank(toy_config, memories):
    b = exmem.MemoryBank(toy_config.hash())
    for m in memories:
        b.add(m)
    return b


@pytest.fixture(scope="session")
def codebooks(memories):
    rows = np.concatenate(
        [m.keys.reshape(-1, m.keys.shape[-1]) for m in memories]
        + [m.values.reshape(-1, m.values.shape[-1]) for m in memories])
    spec = exmem.QuantizerSpec.desk(rows.shape[-1])
    key_cb = exmem.quantizer_train(rows, spec, seed=11)
    value_cb = exmem.quantizer_train(rows, spec, seed=12)
    return key_cb, value_cb


@pytest.fixture(scope="session")
def embedder():
    return exmem.NgramEmbedder()


@pytest.fixture(scope="session")
def index(corpus, embedder):
    return exmem.RetrievalIndex.build(list(enumerate(corpus)), embedder)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
