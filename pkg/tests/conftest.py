import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.register_profile("thorough", max_examples=400, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_frame(rng, K=17, H=64, W=44, margin=4.0):
    xs = rng.uniform(-margin, H - 1 + margin, K)
    ys = rng.uniform(-margin, W - 1 + margin, K)
    cs = rng.uniform(0.0, 1.0, K)
    return np.stack([xs, ys, cs], axis=1)
