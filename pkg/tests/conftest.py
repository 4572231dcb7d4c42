import numpy as np
import pytest

from ddltv.ltv_core import LtvDynamics, NoiseModel
from ddltv.data_ensemble import run_ensemble, uniform_input_gen, uniform_x0_gen


def make_periodic_plant(phi=4, seed=None):
    """Stabilizable 2-state, 1-input periodic plant used across tests."""
    a_tab = [
        np.array([
            [0.9 + 0.2 * np.cos(2 * np.pi * k / phi), 0.3],
            [0.1, 0.8 + 0.2 * np.sin(2 * np.pi * k / phi)],
        ])
        for k in range(phi)
    ]
    b_tab = [np.array([[0.1], [1.0]]) for _ in range(phi)]
    return LtvDynamics.from_tables(a_tab, b_tab, period=phi, label="test-periodic")


def random_plant(rng, n, m, horizon, scale=1.0):
    a_tab = [scale * rng.uniform(-1, 1, (n, n)) for _ in range(horizon)]
    b_tab = [rng.uniform(-1, 1, (n, m)) for _ in range(horizon)]
    return LtvDynamics.from_tables(a_tab, b_tab)


@pytest.fixture(scope="session")
def periodic_plant():
    return make_periodic_plant()


@pytest.fixture(scope="session")
def periodic_ensemble(periodic_plant):
    return run_ensemble(
        periodic_plant, L=5, window=(0, 4),
        input_gen=uniform_input_gen(3, 1), x0_gen=uniform_x0_gen(4, 2),
    )


@pytest.fixture(scope="session")
def noisy_periodic_ensemble(periodic_plant):
    noise = NoiseModel(n=2, seed=11, process=("uniform", -0.005, 0.005),
                       measurement=("uniform", -0.002, 0.002))
    return run_ensemble(
        periodic_plant, L=5, window=(0, 4),
        input_gen=uniform_input_gen(1, 1), x0_gen=uniform_x0_gen(2, 2),
        noise=noise,
    )
