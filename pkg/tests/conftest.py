import numpy as np
import pytest
import torch

from elevssl.synthetic import SynthConfig, generate_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """24 small tiles (64x64 RGB, 21x21 elevation), half of them pure."""
    root = tmp_path_factory.mktemp("tiny_data")
    cfg = SynthConfig(
        n_tiles=24,
        seed=11,
        coupling=0.9,
        tile_shape=(64, 64),
        elev_shape=(21, 21),
        pure_fraction=0.5,
    )
    return generate_synthetic(cfg, root)


@pytest.fixture(scope="session")
def manifest100(tmp_path_factory):
    """100 very small tiles for split/IO property tests."""
    root = tmp_path_factory.mktemp("data100")
    cfg = SynthConfig(
        n_tiles=100,
        seed=5,
        coupling=0.9,
        tile_shape=(32, 32),
        elev_shape=(11, 11),
        pure_fraction=0.35,
    )
    return generate_synthetic(cfg, root)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
