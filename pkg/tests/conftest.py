import numpy as np
import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_volume(rng):
    from vesselshot.volume import Volume3D

    return Volume3D(
        data=rng.normal(size=(8, 8, 8)).astype(np.float32), spacing=(1.0, 1.0, 1.0)
    )
