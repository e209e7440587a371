import numpy as np
import pytest
import torch

from fundus2video.data import random_scene_params, synthesize_pair
from fundus2video.trainer import TrainConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pairs():
    """Four 32x32 scenes with two frames per phase."""
    return [synthesize_pair(random_scene_params(s, image_size=32, frames_per_phase=(2, 2, 2))) for s in range(4)]


@pytest.fixture
def tiny_config():
    return TrainConfig(image_size=32, frames_per_sequence=6, ngf=4, n_blocks=1, ndf=4, n_patches=16,
                       proj_dim=8, epochs=1, augment=False, seed=0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
