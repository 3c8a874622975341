import numpy as np
import pytest
from hypothesis import settings

from corrlab.synthgen import SceneConfig, generate_scene

settings.register_profile("corrlab", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("corrlab")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def clean_scene():
    """Noise-free scene, 40% outliers."""
    return generate_scene(SceneConfig(n_correspondences=64, outlier_ratio=0.4,
                                      pixel_noise_std=0.0, seed=7), 0)


@pytest.fixture(scope="session")
def desk_scene():
    return generate_scene(SceneConfig(seed=11), 0)


def permutation_matrix_rows(x, perm):
    return np.asarray(x)[perm]


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
