import numpy as np
import pytest

from generate_pilot_plates import write_pilot_campaign
from src.core.designs import Design


def balanced_design(n_wells: int, pool_size: int, replication: int) -> Design:
    """
    Algebraic balanced design with pairwise co-occurrence <= 1.

    Compounds are (group g, index t) with g < pool_size and t < L = n/a; well
    (m, t0) holds (g, t0 + m*g mod L) for every group, m < replication.
    """
    L = n_wells // replication
    assert L * replication == n_wells
    assert (replication - 1) * (pool_size - 1) < L
    U = np.zeros((n_wells, pool_size * L), dtype=np.uint8)
    for m in range(replication):
        for t0 in range(L):
            for g in range(pool_size):
                U[m * L + t0, g * L + (t0 + m * g) % L] = 1
    return Design.from_membership(U, construction="algebraic")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def reference_design_640():
    return balanced_design(320, 8, 4)


@pytest.fixture
def small_design():
    """16 wells, 8 compounds, pools of 2, every compound in 4 wells."""
    return balanced_design(16, 2, 4)


@pytest.fixture
def planted_design():
    """60 wells, 30 compounds, pools of 2, replication 4."""
    return balanced_design(60, 2, 4)


PLANTED = (3, 17)


@pytest.fixture
def planted_response(planted_design):
    """Two active compounds at coefficient 1.5 (+/-1 coding), noise SD 0.3."""
    rng = np.random.default_rng(7)
    b = np.zeros(planted_design.k)
    b[list(PLANTED)] = 1.5
    return planted_design.x_matrix() @ b + 0.3 * rng.standard_normal(planted_design.n)


@pytest.fixture
def planted_ids(planted_design):
    return [planted_design.compound_ids[j] for j in PLANTED]


@pytest.fixture
def pilot_campaign(tmp_path):
    return write_pilot_campaign(tmp_path, n_wells=60, n_compounds=30, pool_size=2, plates=2, seed=3,
                                missing_mut=("pilot_02.csv",))
