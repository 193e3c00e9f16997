import pytest

from buildmem.data import SyntheticSpec, generate_synthetic
from buildmem.features import prepare_matrices

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def synth_small():
    return generate_synthetic(SyntheticSpec(n_rows=1500, seed=11, noise_sigma=0.4))


@pytest.fixture(scope="session")
def small_matrices(synth_small):
    ds, _ = synth_small
    return prepare_matrices(ds, 0.2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_ensemble(small_matrices):
    from buildmem.ensemble import train_ensemble
    from buildmem.gbdt import TrainConfig
    train, _, state = small_matrices
    cfg_a = TrainConfig(alpha=0.95, n_trees=50, max_depth=4, min_samples_leaf=20, seed=0)
    cfg_b = TrainConfig(alpha=0.95, n_trees=60, max_depth=3, min_samples_leaf=10, seed=1)
    return train_ensemble(train, cfg_a, cfg_b, 1.05, encoder_state=state)


def surface_space():
    from buildmem.tuner import SearchSpace, Uniform
    return SearchSpace({"x": Uniform(-5.0, 5.0), "y": Uniform(-5.0, 5.0)})


def surface(params, trial_id=None):
    """Smooth bowl with its unique minimum 0 at (1.3, -0.7)."""
    x, y = params["x"], params["y"]
    return (x - 1.3) ** 2 + 2.0 * (y + 0.7) ** 2 + 0.5 * (x - 1.3) * (y + 0.7)
