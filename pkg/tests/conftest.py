import numpy as np
import pytest

from patchep.gmm import Adaptation, PatchGMM, adapt


def random_spd(rng, dim, scale=1.0):
    a = rng.standard_normal((dim, dim))
    return scale * (a @ a.T + dim * np.eye(dim))


def small_gmm(rng, n_components, dim, mean_scale=1.0, cov_scale=0.2):
    weights = rng.uniform(0.5, 1.5, size=n_components)
    weights /= weights.sum()
    means = mean_scale * rng.standard_normal((n_components, dim))
    covs = np.stack([random_spd(rng, dim, cov_scale / dim) for _ in range(n_components)])
    return PatchGMM(weights=weights, means=means, covs=covs)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def gmm_2d(rng):
    return small_gmm(rng, 3, 2)


@pytest.fixture
def adapted_2d(gmm_2d):
    return adapt(gmm_2d, Adaptation(offset=0.3, mean_var=0.05, scale=0.8))
