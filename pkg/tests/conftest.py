import numpy as np
import pytest
import torch
from hypothesis import settings

from csctrack.model import CSCModel, ModelConfig

settings.register_profile("csctrack", deadline=None, max_examples=60)
settings.load_profile("csctrack")

TINY = ModelConfig(dim=8, channels=(4, 4), patch_size=8, part_size=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return CSCModel(TINY)


def randomize_(module: torch.nn.Module, seed: int = 0, scale: float = 0.5):
    """Overwrite every parameter with seeded uniform noise (e.g. to wake zero-initialised maps)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_((torch.rand(p.shape, generator=g, dtype=p.dtype) * 2 - 1) * scale)
    return module
