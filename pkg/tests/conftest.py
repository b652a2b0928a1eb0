import numpy as np
import pytest

from echosr.blocks import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    """Smallest legal config: N=1, L=1, C=12 (LA width 18, 3 groups of 6)."""
    return ModelConfig(scale=2, channels=12, num_groups=1, chbs_per_group=(1,))


def smooth_fixture_patch(hr_size: int = 144):
    """Deterministic band-limited RGB patch used by training-oriented tests."""
    yy, xx = np.mgrid[0:hr_size, 0:hr_size] / hr_size
    hr = np.stack(
        [
            0.55 + 0.28 * np.sin(2 * np.pi * (2 * xx + yy)) + 0.12 * np.cos(2 * np.pi * 3 * yy),
            0.50 + 0.25 * np.cos(2 * np.pi * (xx + 2 * yy)) + 0.10 * np.sin(2 * np.pi * 4 * xx),
            0.45 + 0.22 * np.sin(2 * np.pi * (3 * xx - 2 * yy)) + 0.15 * yy,
        ]
    )
    return np.clip(hr, 0.0, 1.0)
