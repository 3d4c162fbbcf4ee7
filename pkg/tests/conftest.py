import numpy as np
import pytest

from flowsr.fields import FLOW_CHANNELS, Field4


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_field(rng):
    """Random 4-channel field on a 4x8x8 grid with non-trivial spacing and origin."""
    return Field4(FLOW_CHANNELS, rng.standard_normal((4, 4, 8, 8)), (0.5, 0.125, 0.25), (1.0, 0.0625, 0.125))


def _smooth_hr(rng, extents=(8, 8, 16)):
    """Sum of a few random space-time waves plus a linear temperature profile."""
    T, Z, X = extents
    t, z, x = np.meshgrid(np.arange(T) * 0.1, (np.arange(Z) + 0.5) / Z, np.arange(X) * 2.0 / X, indexing="ij")
    chans = []
    for c in range(4):
        f = np.zeros(extents)
        for _ in range(3):
            k = rng.uniform(0.5, 3.0, size=3)
            f += rng.uniform(0.2, 1.0) * np.sin(k[0] * t + k[1] * np.pi * z + k[2] * np.pi * x + rng.uniform(0, 6))
        chans.append(f)
    chans[1] = chans[1] * 0.1 + (1.0 - z)
    return Field4(FLOW_CHANNELS, np.stack(chans), (0.1, 1.0 / Z, 2.0 / X), (5.0, 0.5 / Z, 0.0))


@pytest.fixture
def tiny_dataset():
    from flowsr.data import make_dataset

    hr = _smooth_hr(np.random.default_rng(7))
    return make_dataset(hr, d_s=4, d_t=2, Ra=1e5, Pr=1.0, seed=7)


@pytest.fixture
def tiny_cfg():
    """Small network and window that fit the tiny dataset (LR extents 4x2x4)."""
    from flowsr.context import UNetConfig
    from flowsr.decoder import MLPConfig
    from flowsr.training import TrainConfig

    return TrainConfig(lr=5e-3, epochs=2, samples_per_epoch=4, points_per_window=32, batch_windows=2,
                       lr_window=(2, 2, 2), upscale=(2, 4, 4),
                       unet=UNetConfig(n_c=4, base_width=2, depth=1),
                       mlp=MLPConfig(n_c=4, hidden=[8, 8]))
