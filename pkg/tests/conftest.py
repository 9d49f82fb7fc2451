import numpy as np
import pytest

from mmtsvit.data import SITSSample
from mmtsvit.model import ModelConfig


TINY_MODEL = dict(
    t=1, h=2, w=2, d=8, k=3, depth_temporal=2, depth_spatial=1, heads=2,
    max_spatial_tokens=16,
)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY_MODEL)


def make_samples(rng, channels, t_len=4, size=4, dates=(5, 15, 25, 35)):
    return [
        SITSSample(
            rng.normal(size=(t_len, size, size, c)),
            list(dates),
            f"mod{j}",
        )
        for j, c in enumerate(channels)
    ]
