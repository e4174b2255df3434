import numpy as np
import pytest

from crffusion.gaussfilter import FilterPlan
from crffusion.grid import FeatureField


def random_image(rng, height, width):
    """Piecewise-flat colour image with mild noise."""
    base = rng.uniform(0, 1, (2, 2, 3))
    img = np.repeat(np.repeat(base, (height + 1) // 2, axis=0), (width + 1) // 2, axis=1)[:height, :width]
    return np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1)


def coincident_plan(n=2):
    """Dense plan over ``n`` identical feature points, so every K_ij = 1."""
    return FilterPlan(FeatureField("spatial", np.zeros((n, 2))), method="dense")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
