import numpy as np
import pytest

from tfscreen.matrix import CountMatrix


def make_counts(dense, cells=None, genes=None):
    dense = np.asarray(dense)
    cells = cells or [f"c{i}" for i in range(dense.shape[0])]
    genes = genes or [f"g{j}" for j in range(dense.shape[1])]
    return CountMatrix(dense, tuple(cells), tuple(genes))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
