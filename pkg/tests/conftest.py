import numpy as np
import pytest

from metaselect import CovariateMeta, MetaDataset


def random_dataset(rng, k=40, p=3, tau2=0.05, beta=None, binary=(),
                   ies=(), v_range=(0.05, 0.3)):
    """Random meta-regression dataset with known generating coefficients.

    beta maps term -> coefficient; terms are "const", column index, or an
    (a, b) tuple for a product term.
    """
    x = rng.normal(size=(k, p))
    for j in binary:
        x[:, j] = (x[:, j] > 0).astype(float)
    v = rng.uniform(*v_range, size=k)
    theta = np.zeros(k)
    if beta:
        for term, coef in beta.items():
            if term == "const":
                theta += coef
            elif isinstance(term, tuple):
                a, b = term
                theta += coef * x[:, a] * x[:, b]
            else:
                theta += coef * x[:, term]
    for a, b in ies:
        theta += x[:, a] * x[:, b]
    if tau2 > 0:
        theta = theta + rng.normal(scale=np.sqrt(tau2), size=k)
    y = theta + rng.normal(scale=np.sqrt(v))
    covs = [
        CovariateMeta(f"x{j}", "binary" if j in binary else "metric")
        for j in range(p)
    ]
    return MetaDataset(y=y, v=v, x=x, covariates=covs)


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)


@pytest.fixture
def small_ds(rng):
    return random_dataset(rng, k=30, p=3, binary=(2,))
