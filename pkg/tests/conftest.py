import numpy as np
import pytest
from hypothesis import settings

from mmm.config import EMConfig, RunConfig
from mmm.samplers import McmcConfig
from mmm.schema import MixedDataset, Schema

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

# small budgets keep unit tests quick; the acceptance suite uses the defaults
FAST_MCMC = McmcConfig(gibbs_burnin=20, gibbs_thin=1, gibbs_samples=30, count_iters=80, orthant_draws=100)


def fast_config(seed=0, **em):
    return RunConfig(mcmc=FAST_MCMC, em=EMConfig(**em), seed=seed)


def random_spd(rng, d, ridge=0.5):
    A = rng.standard_normal((d, d))
    return A @ A.T / d + ridge * np.eye(d)


def continuous_dataset(values):
    values = np.asarray(values, dtype=float)
    schema = Schema.from_list([{"name": f"x{j}", "kind": "continuous"} for j in range(values.shape[1])])
    return MixedDataset(schema, values)


def two_blob_continuous(rng, n=300, J=2, T=2, sep=4.0, pi=0.5):
    labels = (rng.random(n) < pi).astype(int)
    Y = rng.standard_normal((n, J, T)) + sep * labels[:, None, None]
    return continuous_dataset(Y), labels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
