import numpy as np
import pytest
import torch

from hippovol.imaging import VoxelGrid


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def random_grid(rng):
    def make(shape=(6, 8, 10), subject="s0", timepoint=0.0, seed=None):
        r = np.random.default_rng(seed) if seed is not None else rng
        return VoxelGrid(
            data=r.uniform(0.0, 1.0, shape).astype(np.float32),
            spacing=(1.0, 1.0, 1.0),
            subject_id=subject,
            timepoint_years=timepoint,
        )

    return make
