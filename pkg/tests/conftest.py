import numpy as np
import pytest

from deepcsp.data import SynthSpec, synth_generate


def random_covariance(rng: np.random.Generator, dim: int, samples: int = 0) -> np.ndarray:
    x = rng.standard_normal((dim, samples or 4 * dim))
    gram = x @ x.T
    return gram / np.trace(gram)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spd_pair(rng):
    return random_covariance(rng, 6), random_covariance(rng, 6)


@pytest.fixture
def toy_latents(rng):
    latents = rng.standard_normal((12, 4, 40))
    labels = np.repeat([0, 1], 6)
    latents[labels == 0, 0] *= 2.0
    latents[labels == 1, 1] *= 2.0
    return latents, labels


@pytest.fixture(scope="session")
def small_epochs():
    epochs, _ = synth_generate(SynthSpec(n_channels=6, n_samples=256, fs=128.0, trials_per_class=20, seed=3))
    return epochs


@pytest.fixture(scope="session")
def planted():
    return synth_generate(SynthSpec(seed=7))
