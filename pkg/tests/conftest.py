"""Shared fixtures: tiny datasets and small pretrained LMs.

Expensive artifacts (pretrained LMs) are session-scoped so the whole suite
pays for them once.
"""

import numpy as np
import pytest

from lgpt_lab.data import (gen_attribute_lookup_task, gen_multifact_task,
                           gen_stance_task, textualize)
from lgpt_lab.lm import LmConfig, pretrain_lm


def pretrain_corpus(split):
    return [(f"{textualize(ex.graph)}\n{ex.query}", ex.answer)
            for ex in split.train]


TINY_LM_CONFIG = LmConfig(d_llm=16, n_blocks=1, heads=2, d_ff=32,
                          t_max=128, vocab_size=64)


@pytest.fixture(scope="session")
def attr_split():
    """The fixed-seed attribute-lookup dataset used across the suite."""
    return gen_attribute_lookup_task(1000, nodes_per_graph=4,
                                     num_attributes=3, seed=7)


@pytest.fixture(scope="session")
def multifact_split():
    return gen_multifact_task(1000, facts_per_answer=4, seed=11)


@pytest.fixture(scope="session")
def stance_split():
    return gen_stance_task(1000, seed=13)


@pytest.fixture(scope="session")
def tiny_lm(attr_split):
    """A small, quickly pretrained LM for plumbing tests (not for accuracy)."""
    return pretrain_lm(pretrain_corpus(attr_split), TINY_LM_CONFIG,
                       seed=0, max_steps=300, eval_every=100)


@pytest.fixture(scope="session")
def attr_lm(attr_split):
    """Fully pretrained frozen LM for the attribute task (d_llm=64)."""
    return pretrain_lm(pretrain_corpus(attr_split), LmConfig(), seed=0)


@pytest.fixture(scope="session")
def multifact_lm(multifact_split):
    return pretrain_lm(pretrain_corpus(multifact_split), LmConfig(), seed=0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
