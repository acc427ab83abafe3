import os
from pathlib import Path

import numpy as np
import pytest
import torch

from picotab.engine import DEFAULT_MODEL_PATH
from picotab.model import ModelConfig, TabularTransformer

torch.set_num_threads(1)

TINY = ModelConfig(depth=2, dim=16, heads=2, group_size=3, n_thinking=3, max_classes=5, n_bins=8,
                   pos_dim=4, test_chunk=8)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return TabularTransformer(TINY).eval()


@pytest.fixture(scope="session")
def desk_model():
    from picotab.engine import default_model

    if not Path(os.environ.get("PICOTAB_MODEL", DEFAULT_MODEL_PATH)).exists():
        pytest.skip("pretrained desk checkpoint not installed")
    return default_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
