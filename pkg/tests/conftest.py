import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from auxformer import model as M  # noqa: E402


TINY = M.HyperConfig(F=8, L=1, H=2)


@pytest.fixture
def tiny_params():
    def make(cfg=TINY, T=4, J=2, seed=0):
        return M.init_params(cfg, T, J, np.random.default_rng(seed))
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
