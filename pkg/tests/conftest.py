"""
Shared fixtures
Run from project root: pytest
"""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "backend"))

from sfbayes.models import BasisSpec, ModelState, SiteSeries, design_matrix  # noqa: E402
from sfbayes.schemas import PriorSpec, SamplerConfig  # noqa: E402

DATA_DIR = ROOT / "data"


def make_sites(m: int = 3, n: int = 6, seed: int = 7, spacing: float = 1.0):
    """m small curves on irregular grids inside [0, n]"""
    rng = np.random.default_rng(seed)
    sites = []
    for j in range(m):
        times = np.sort(rng.uniform(0.0, n, n))
        times[0], times[-1] = 0.0, float(n)
        values = 2.0 + np.sin(times) + 0.3 * rng.standard_normal(n)
        sites.append(SiteSeries(f"s{j + 1:02d}", (spacing * j, 0.5 * spacing * (j % 2)), times, values))
    return sites


def make_state(sites, degree: int = 1, seed: int = 3) -> ModelState:
    rng = np.random.default_rng(seed)
    m = len(sites)
    return ModelState(
        theta=rng.normal(1.0, 0.5, (degree + 1, m)),
        mu_theta=rng.normal(1.0, 0.2, degree + 1),
        delta=[0.2 * rng.standard_normal(s.n) for s in sites],
        tau2=float(rng.uniform(0.5, 1.5)),
        nu2=float(rng.uniform(0.5, 1.5)),
        kappa2=float(rng.uniform(0.5, 2.0)),
        spatial_decay=float(rng.uniform(0.5, 1.5)),
        ar_decay=float(rng.uniform(0.1, 1.0)),
    )


@pytest.fixture
def micro_sites():
    return make_sites()


@pytest.fixture
def micro_spec(micro_sites):
    return BasisSpec(degree=1, interval=(0.0, 6.0))


@pytest.fixture
def micro_basis(micro_sites, micro_spec):
    return [design_matrix(micro_spec, s.times) for s in micro_sites]


@pytest.fixture
def micro_state(micro_sites):
    return make_state(micro_sites)


@pytest.fixture
def priors():
    return PriorSpec()


@pytest.fixture
def short_sampler():
    return SamplerConfig(total_iterations=100, burn_in=50, thin=5, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
