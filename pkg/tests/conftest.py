import numpy as np
import pytest

from mrdebias.data import BiasLevelSpec, RatingDataset, generate_semi_synthetic, make_low_rank_ratings


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_base():
    return make_low_rank_ratings(40, 30, 0.3, seed=5)


@pytest.fixture(scope="session")
def small_synthetic(small_base):
    return generate_semi_synthetic(small_base, BiasLevelSpec.for_level(2, 0.25), seed=11)


def toy_dataset(cells, shape=(3, 3), scale=(1.0, 5.0), **kw):
    u, i, r = zip(*cells) if cells else ((), (), ())
    return RatingDataset(shape[0], shape[1], u, i, r, scale, **kw)
