"""共享测试夹具"""

import numpy as np
import pytest

from bag_data import Bag, Dataset, GenConfig, create_gen_config, generate_synthetic, split
from taxonomy import DEFAULT_TAXONOMY, FineClass, Subsite


def make_bag(bag_id="b", n=5, d=4, label=FineClass.TA, subsite=Subsite.UNKNOWN, seed=0, mixture=None):
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, d)).astype(np.float32).astype(np.float64)
    return Bag(id=bag_id, features=features, label=label, subsite=subsite, mixture=mixture)


@pytest.fixture
def taxonomy():
    return DEFAULT_TAXONOMY


@pytest.fixture
def tiny_gen_config() -> GenConfig:
    return create_gen_config(
        class_counts={c.name: 4 for c in FineClass},
        dim=6,
        min_bag_size=8,
        max_bag_size=12,
        alpha=0.5,
    )


@pytest.fixture
def tiny_dataset(tiny_gen_config) -> Dataset:
    """每类 4 个包，划分为 3 / 1 / 0"""
    return split(generate_synthetic(tiny_gen_config, seed=0), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
