import numpy as np
import pandas as pd
import pytest

from dcvkt.choice import Theta
from dcvkt.data import MarketConfig, prepare_tables
from dcvkt.synth import SyntheticSpec, default_truth, generate

ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def synthetic_dataset(N=200, J=4, seed=0, n_makes=2, n_segments=2, theta=None, **spec_kw):
    """Small synthetic market; returns (dataset, true theta)."""
    truth = theta or default_truth(n_makes, n_segments)
    spec = SyntheticSpec(truth, N=N, J=J, seed=seed, n_makes=n_makes,
                         n_segments=n_segments, **spec_kw)
    veh, hh, _ = generate(spec)
    return prepare_tables(veh, hh, spec.config), truth


@pytest.fixture(scope="session")
def small_market():
    return synthetic_dataset(N=10, J=4, seed=11)


@pytest.fixture(scope="session")
def medium_market():
    return synthetic_dataset(N=300, J=6, seed=5, n_makes=3, n_segments=3)


def simple_config(**kw):
    base = dict(fuel_price=6.0, interest_rate=0.08, car_life_years=14.5,
                terms=("intercept", "n_cars"), km_scale=1000.0)
    base.update(kw)
    return MarketConfig(**base)


def hand_market(fe, price, segments=None, makes=None, n_households=3, incomes=None,
                sales=None, config=None):
    """Explicit small market with one household row per entry of ``incomes``."""
    J = len(fe)
    veh = pd.DataFrame({
        "model_id": [f"C{j}" for j in range(J)],
        "make": makes or ["A"] * J,
        "segment": segments or ["X"] * J,
        "retail_price": price,
        "fuel_economy": fe,
        "engine_displacement": 1.5,
        "volume": 1.0,
        "kerb_weight": 1.0,
        "sales_count": sales if sales is not None else [10.0] * J,
    })
    incomes = incomes if incomes is not None else np.linspace(1.0, 2.0, n_households)
    n = len(incomes)
    hh = pd.DataFrame({
        "household_id": [f"H{i}" for i in range(n)],
        "income": incomes,
        "age": 40.0,
        "female": 0,
        "n_cars": [1.0 + (i % 2) for i in range(n)],
        "family_size": 3.0,
        "chosen_model_id": [f"C{i % J}" for i in range(n)],
        "annual_km": [9000.0 + 500 * i for i in range(n)],
        "weight": 1.0,
    })
    return prepare_tables(veh, hh, config or simple_config(make_constants=False,
                                                           segment_constants=False))


def theta_for(ds, gamma=None, **kw):
    base = dict(mu_beta=-1.5, sigma_beta=0.4, mu_alpha=-1.6, sigma_alpha=0.5,
                sigma_eta=0.4, scale_mu=0.5)
    base.update(kw)
    g = np.zeros(ds.n_terms) if gamma is None else np.asarray(gamma, float)
    return Theta(g, names=ds.term_names, **base)
