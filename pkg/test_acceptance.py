"""
Desk-scale acceptance runs on the default configuration.

These take minutes and are deselected by default; run with `pytest -m slow`.
CGL_WORKERS sets the joblib worker count.
"""
import os
from dataclasses import replace

import numpy as np
import pytest

from ensemble.cli_io import (
    build_setup,
    initial_condition,
    load_config,
    stopping_params,
    validation_suite,
)
from ensemble.ensemble import EnsembleRunner
from ensemble.estimators import (
    check_deterministic_decay,
    check_energy_tails,
    check_girsanov_martingale,
    check_linear_oracle,
    check_mixing,
    check_moment_bound,
    check_novikov_scaling,
    check_projected_decay,
    check_recurrence_growth,
    check_squeezing,
    check_stopping_tails,
    check_truncation_bound,
    ensemble_records,
    estimate_mixing_rate,
    poincare_sweep,
)
from trajectory.coupling import hitting_probability
from trajectory.utils.grid_space import Field, random_band_limited

pytestmark = pytest.mark.slow

DEFAULT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "default.env")


@pytest.fixture(scope="module")
def config():
    return load_config(DEFAULT)


@pytest.fixture(scope="module")
def setup(config):
    return build_setup(config)


@pytest.fixture(scope="module")
def runner(config):
    return EnsembleRunner(int(os.getenv("CGL_WORKERS", "1")), config.run.batch_size)


@pytest.fixture(scope="module")
def u0(setup):
    return initial_condition(setup.grid, 5.0)


def test_validation_suite(config, setup):
    reports = validation_suite(config, setup)
    assert all(r.passed for r in reports), [r.name for r in reports if not r.passed]


def test_deterministic_decay_over_ten_time_units(setup):
    report = check_deterministic_decay(setup, 10.0)
    assert report.passed, report.metrics


def test_projected_decay_is_first_order(setup, u0):
    coarse = check_projected_decay(setup, u0, 1e-2, 5.0)
    fine = check_projected_decay(replace(setup, dt=setup.dt / 2), u0, 1e-2, 5.0)
    assert coarse.passed
    assert fine.metrics["deviation"] <= 0.6 * coarse.metrics["deviation"]


def test_linear_oracle(setup, runner):
    linear = replace(setup, params=replace(setup.params, alpha=0))
    report = check_linear_oracle(linear, Field.zeros(setup.grid), list(range(8)), 20.0, 2000,
                                 runner, window=(10.0, 20.0))
    assert report.passed, report.tables["linear_oracle"]


def test_moment_bound(setup, u0, runner):
    report = check_moment_bound(setup, u0, [0.5, 1.0, 2.0, 5.0, 10.0], 2000, runner)
    assert report.passed, report.tables["moment_bound"]


def test_squeezing(setup, u0, runner):
    report = check_squeezing(setup, u0, [2, 8, 32], 1e-2, 10.0, 200, runner)
    assert report.passed, report.tables["squeezing"]
    assert report.metrics["monotone_in_N"]
    assert report.metrics["rate_monotone_in_N"]


def test_truncated_poincare(setup):
    samples = random_band_limited(setup.grid, np.random.default_rng(0),
                                  0.5 * float(setup.basis.wavenumbers[-1]), 500, real=True)
    report = poincare_sweep(setup.basis, 20.0, 1.0, [4, 8, 16, 32, 64], samples)
    assert report.passed, report.tables["poincare"]


def test_energy_tails(config, setup, u0, runner):
    sp = stopping_params(config, setup, u0, runner)
    report = check_energy_tails(setup, u0, sp, [2.0, 4.0, 8.0], 2000, 20.0, runner=runner)
    assert report.passed, report.tables["energy_tails"]


def test_novikov_scaling(setup, u0, runner):
    report = check_novikov_scaling(setup, u0, [1e-3, 1e-2, 1e-1], 10.0, 50, runner)
    assert abs(report.metrics["slope"] - 2.0) <= 0.3


def test_girsanov_martingale(setup, runner):
    report = check_girsanov_martingale(setup, 0.125, 1.0, 2000, runner)
    assert report.passed, report.metrics


def test_mixing(setup, u0, runner):
    times = [float(t) for t in range(1, 21)]
    report = check_mixing(setup, Field.zeros(setup.grid), u0, times, 2000, 32, runner)
    assert report.passed, report.tables["mixing"]
    assert report.metrics["kappa"] > 0


def test_identical_laws_stay_at_the_floor(setup, u0, runner):
    estimate = estimate_mixing_rate(setup, u0, u0, [2.0, 5.0, 10.0], 200, 32, runner)
    assert np.all(estimate.table["distance"] == 0)
    assert estimate.floor_limited


def test_stopping_tails(config, setup, u0, runner):
    sp = stopping_params(config, setup, u0, runner)
    records = ensemble_records(setup, u0, 20.0, 1000, runner)
    decaying = check_stopping_tails(records, setup.params, replace(sp, L=1.0), [1.0, 2.0, 4.0, 8.0])
    assert decaying.passed, decaying.tables["stopping_tails"]
    flat = check_stopping_tails(records, setup.params, replace(sp, L=0.0), [1.0, 2.0, 4.0, 8.0])
    assert flat.passed, flat.tables["stopping_tails"]


def test_forced_hitting(setup, u0, runner):
    estimate = hitting_probability(setup, u0, 1.0, 12.0, 1000, runner)
    assert estimate.low > 0, estimate


def test_recurrence_growth(setup, u0, runner):
    report = check_recurrence_growth(setup, u0, [1.0, 2.0, 4.0], 1.0, 0.05, 20.0, 200, runner)
    assert report.passed, report.tables["recurrence_growth"]
    assert report.metrics["exponent"] <= 2.4


def test_truncation_bound(config, setup, u0, runner):
    sp = stopping_params(config, setup, u0, runner)
    report = check_truncation_bound(setup, u0, sp, 20.0, 200, runner=runner)
    assert report.passed, report.metrics
