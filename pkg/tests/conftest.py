import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctmle_cont.data import Dataset, RngSpec
from ctmle_cont.lasso import LassoPath, PenaltyGrid
from ctmle_cont.synthetic import SyntheticConfig, sample

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def random_dataset(seed: int, n: int = 60, p: int = 4, signal: float = 1.0) -> Dataset:
    """Small logistic-treatment dataset with outcomes strictly inside (0, 1)."""
    gen = np.random.default_rng(seed)
    w = gen.normal(size=(n, p))
    lin = signal * w[:, 0] - 0.5 * signal * w[:, 1 % p]
    a = (gen.random(n) < 1 / (1 + np.exp(-lin))).astype(int)
    a[0], a[1] = 1, 0
    y = 1 / (1 + np.exp(-(0.3 + 0.5 * w[:, 0] + 0.4 * a + 0.3 * gen.normal(size=n))))
    return Dataset(w, a, y)


def manual_path(grid, intercepts, betas) -> LassoPath:
    """A path with prescribed coefficients on unstandardised covariates (no fitting)."""
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    p = betas.shape[1]
    return LassoPath(
        grid=PenaltyGrid(grid),
        intercepts=np.asarray(intercepts, dtype=float),
        betas=betas,
        std_intercepts=np.asarray(intercepts, dtype=float),
        std_betas=betas,
        center=np.zeros(p),
        scale=np.ones(p),
        train_risk=np.zeros(len(grid)),
        penalised=np.ones(p, dtype=bool),
    )


@pytest.fixture
def small_dataset():
    return random_dataset(0)


@pytest.fixture(scope="session")
def sim_dataset():
    return sample(SyntheticConfig(10, 0.0), 150, RngSpec(3))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
