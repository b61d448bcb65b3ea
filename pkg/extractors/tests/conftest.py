import numpy as np
import pytest

from vidfm_extractors.protocol import ExtractionSpec


@pytest.fixture()
def video():
    rng = np.random.default_rng(314)
    return rng.integers(0, 256, size=(18, 8, 8, 3), dtype=np.uint8)


@pytest.fixture()
def diffusion_spec():
    return ExtractionSpec(
        backbone="toy-diffusion",
        checkpoint="release-v1",
        layer=2,
        chunk_len=6,
        stride=2,
        grid_h=4,
        grid_w=4,
        channels=32,
        timestep=400,
    )


@pytest.fixture()
def feedforward_spec():
    return ExtractionSpec(
        backbone="toy-frame",
        checkpoint="release-v1",
        layer=1,
        chunk_len=6,
        stride=1,
        grid_h=4,
        grid_w=4,
        channels=32,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(2718)
