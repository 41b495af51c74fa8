from __future__ import annotations

import numpy as np
import pytest

from gdn.model import GeneratorConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_cfg():
    """Small enough for exhaustive finite differences."""
    return GeneratorConfig(k=2, length=30, hidden=8, channels=4, enc_nodes=3, dec_nodes=2)
