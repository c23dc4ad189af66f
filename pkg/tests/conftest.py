import time

import numpy as np
import pytest

from viewgen import codec as C
from viewgen.synth import generate_dataset


@pytest.fixture(scope="session")
def overfit_images():
    studies = generate_dataset(8, image_side=16, seed=3)
    return np.array([s.images[0] for s in studies])


@pytest.fixture(scope="session")
def overfit_codec(overfit_images):
    """Desk codec (M=32, n=16, f=4) trained 2000 steps on 8 images; ``train_seconds`` records the cost."""
    t0 = time.perf_counter()
    params = C.train_codec(overfit_images, C.CodecConfig(steps=2000, batch_size=8, seed=0))
    params.train_seconds = time.perf_counter() - t0
    return params
