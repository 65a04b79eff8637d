import numpy as np
import pytest

from rampflow.ctm import FreewayParams, homogeneous_params


@pytest.fixture
def stretch() -> FreewayParams:
    """Four homogeneous cells; the demo configuration used across the suite."""
    return homogeneous_params(
        4, beta=0.9, v=0.5, w=1.0 / 6.0, x_jam=160.0, c_max=20.0, alpha=0.9)


@pytest.fixture
def nominal_demand() -> np.ndarray:
    return np.array([19.17, 1.67, 1.67, 1.67])


def random_params(rng: np.random.Generator, n_cells: int = 4,
                  *, no_drop: bool = False, wave_sum_cap: bool = False) -> FreewayParams:
    """Draw a random parameter set that passes validation.

    wave_sum_cap additionally enforces v + w <= 1, which the monotonicity
    results need; plain step invariance does not.
    """
    v = rng.uniform(0.05, 0.95, n_cells)
    if wave_sum_cap:
        w = rng.uniform(0.05, 1.0 - v)
    else:
        w = rng.uniform(0.05, 1.0, n_cells)
    x_crit = rng.uniform(5.0, 100.0, n_cells)
    return FreewayParams(
        beta=rng.uniform(0.1, 0.9, n_cells - 1),
        v=v,
        w=w,
        x_jam=x_crit * rng.uniform(1.0, 3.0, n_cells),
        c_max=v * x_crit,
        alpha=np.ones(n_cells) if no_drop else rng.uniform(0.2, 1.0, n_cells),
        u_max=np.full(n_cells, 40.0),
    )


def random_state(rng: np.random.Generator, params: FreewayParams,
                 size: int = 1) -> np.ndarray:
    main = rng.uniform(0.0, params.x_jam, (size, params.n_cells))
    queues = rng.uniform(0.0, 60.0, (size, params.n_cells))
    return np.concatenate([main, queues], axis=-1)
