import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from vidprobe import oracle
from vidprobe.probe import ProbeConfig


@pytest.fixture(scope="session")
def small_oracle_config():
    # chunk_len/stride chosen so the chunked index map is exercised for real
    return oracle.OracleConfig(
        kind="orbit",
        n_primitives=5,
        frame_count=16,
        image_h=12,
        image_w=12,
        grid_h=6,
        grid_w=6,
        channels=24,
        chunk_len=8,
        stride=2,
        seed=77,
    )


@pytest.fixture(scope="session")
def oracle_dataset(tmp_path_factory, small_oracle_config):
    """10 orbit scenes, 9 train / 1 test, dial at zero."""
    root = tmp_path_factory.mktemp("oracle_ds")
    train_path, test_path = oracle.build_oracle_dataset(10, small_oracle_config, root)
    return {"root": root, "train": train_path, "test": test_path, "config": small_oracle_config}


@pytest.fixture()
def toy_probe_config():
    return ProbeConfig(
        width=16,
        blocks=1,
        heads=2,
        channels=8,
        grid_h=4,
        grid_w=4,
        frames=2,
        out_h=8,
        out_w=8,
        mlp_ratio=2,
        fusion_width=8,
        reference_indicator=True,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
