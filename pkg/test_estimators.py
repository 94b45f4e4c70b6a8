"""
Tests for the ensemble runner and the Monte Carlo checks that have exact
outcomes on small setups.
"""
from functools import partial

import numpy as np
import pandas as pd
import pytest

from ensemble.ensemble import (
    EnsembleRunner,
    ModalAmplitudes,
    SquaredNorm,
    mean_and_se,
    sample_observable,
)
from ensemble.estimators import (
    FAIL,
    PASS,
    CheckReport,
    TestFamily,
    check_deterministic_decay,
    check_energy_tails,
    check_moment_bound,
    check_projected_decay,
    check_recurrence_growth,
    check_squeezing,
    check_stopping_tails,
    check_truncation_bound,
    check_unweighted_energy_tail,
    ensemble_records,
    estimate_mixing_rate,
    girsanov_paths,
    low_mode_direction,
    moment_bound,
    ou_oracle,
    poincare_sweep,
    recurrence_moment,
)
from trajectory.dynamics import TrajectoryRecord
from trajectory.functionals import StoppingParams
from trajectory.utils.errors import DomainError
from trajectory.utils.grid_space import Field, l2_norm, random_band_limited
from trajectory.utils.noise import StreamRole, sample_increments


def test_runner_batches():
    runner = EnsembleRunner(batch_size=4)
    assert [len(b) for b in runner.batches(10)] == [4, 4, 2]
    assert list(runner.batches(10)[-1]) == [8, 9]
    assert EnsembleRunner(workers=0, batch_size=0).batch_size == 1


def test_parallel_results_match_serial(setup, u0):
    task = partial(sample_observable, setup, u0, 20, 5, SquaredNorm(setup), StreamRole.PRIMARY)
    serial = np.concatenate(EnsembleRunner(1, 3).map(task, 7), axis=1)
    parallel = np.concatenate(EnsembleRunner(2, 3).map(task, 7), axis=1)
    np.testing.assert_array_equal(serial, parallel)


def test_mean_and_se():
    mean, se = mean_and_se(np.array([1.0, 2.0, 3.0, 4.0]))
    assert mean == 2.5
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    _, single = mean_and_se(np.array([5.0]))
    assert single == 0.0


def test_modal_amplitudes(setup):
    observable = ModalAmplitudes(setup, [0, 2])
    values = observable(setup.basis.modes[[2]].astype(np.complex128))
    np.testing.assert_allclose(values, [[0.0, 1.0]], atol=1e-12)


def test_check_report_to_dict():
    report = CheckReport("demo", PASS, {"x": 1.0}, {"table": pd.DataFrame({"a": [1]})}, ["note"])
    assert report.passed
    assert report.to_dict() == {"name": "demo", "verdict": PASS, "metrics": {"x": 1.0},
                                "warnings": ["note"], "tables": ["table"], "seed": None,
                                "config_hash": None}
    assert not CheckReport("demo", FAIL).passed


def test_ou_oracle_limits(linear_setup):
    params, spec, basis = linear_setup.params, linear_setup.spec, linear_setup.basis
    assert ou_oracle(params, spec, basis, 3, 0.0) == (1.0, 0.0)
    factor, variance = ou_oracle(params, spec, basis, 3, 1e3)
    rate = params.a + basis.wavenumbers[3] ** 2
    assert abs(factor) < 1e-12
    assert variance == pytest.approx(spec.coefficients[3] ** 2 / (2 * rate), rel=1e-12)


def test_ou_oracle_needs_linear_equation(setup):
    with pytest.raises(DomainError):
        ou_oracle(setup.params, setup.spec, setup.basis, 0, 1.0)


def test_moment_bound_formula(params, spec):
    bound = moment_bound(params, spec, 4.0, np.array([0.0, np.inf]))
    C_prime = (l2_norm(params.h) ** 2 + spec.B1)
    np.testing.assert_allclose(bound, [4.0 + C_prime, C_prime])


def test_noiseless_moment_bound_passes(linear_setup, u0):
    report = check_moment_bound(linear_setup, u0, [0.1, 0.5], 500,
                                EnsembleRunner(batch_size=250), noise_on=False)
    assert report.verdict == PASS
    table = report.tables["moment_bound"]
    assert np.all(table["se"] == 0)
    assert list(table["time"]) == pytest.approx([0.1, 0.5])


def test_moment_bound_needs_500_paths(setup, u0):
    with pytest.raises(DomainError):
        check_moment_bound(setup, u0, [0.1], 100)


def test_tail_checks_with_unreachable_thresholds(setup, u0):
    records = ensemble_records(setup, u0, 0.2, 6)
    sp = StoppingParams(K=1.0, L=1.0, M=4.0, rho=4.0)
    energy = check_energy_tails(setup, u0, sp, [1e6, 2e6, 4e6], 6, 0.2, records=records)
    assert energy.verdict == PASS
    assert energy.warnings
    assert energy.metrics["gamma_hat"] is None
    unweighted = check_unweighted_energy_tail(setup, u0, [1e6, 2e6, 4e6], 6, 0.2, records=records)
    assert unweighted.verdict == PASS
    stopping = check_stopping_tails(records, setup.params, sp, [1.0, 2.0])
    assert stopping.verdict == PASS
    assert list(stopping.tables["stopping_tails"]["frequency"]) == [0.0, 0.0]


def test_energy_tails_reject_rho_list(setup, u0):
    sp = StoppingParams(K=1.0, L=1.0, M=4.0, rho=4.0)
    with pytest.raises(DomainError):
        check_energy_tails(setup, u0, sp, [2.0, 1.0, 3.0], 4, 0.1)
    with pytest.raises(DomainError):
        check_energy_tails(setup, u0, sp, [1.0, 2.0], 4, 0.1)


def test_stopping_tails_with_immediate_trigger(setup, u0):
    records = ensemble_records(setup, u0, 0.5, 4)
    sp = StoppingParams(K=1e-6, L=0.0, M=0.0, rho=1e-6)
    report = check_stopping_tails(records, setup.params, sp, [0.0, 0.2])
    assert report.metrics["triggered"] == 1.0
    assert list(report.tables["stopping_tails"]["frequency"]) == [1.0, 0.0]


def test_projected_decay_check(setup, u0):
    report = check_projected_decay(setup, u0, 1e-2, 0.5, tolerance=0.05)
    assert report.verdict == PASS
    assert report.metrics["deviation"] < 0.05


def test_low_mode_direction(basis):
    direction = low_mode_direction(basis, 4)
    assert l2_norm(direction) == pytest.approx(1.0)
    coefficients = basis.coefficients(direction.values)
    np.testing.assert_allclose(coefficients[:4].real, 0.5, rtol=1e-10)
    np.testing.assert_allclose(coefficients[4:], 0.0, atol=1e-12)


def test_poincare_sweep_is_monotone(grid, basis):
    samples = random_band_limited(grid, np.random.default_rng(0), 1.5, 30, real=True)
    report = poincare_sweep(basis, 5.0, 1.0, [16, 2, 4, 8], samples, threshold=1.1)
    epsilons = report.tables["poincare"]["epsilon"].to_numpy()
    assert list(report.tables["poincare"]["N"]) == [2, 4, 8, 16]
    assert np.all(np.diff(epsilons) <= 1e-12)
    assert np.all(epsilons <= 1.0 + 1e-9)
    assert report.verdict == PASS
    assert report.metrics["threshold_N"] == 2


def test_test_family_is_bounded_lipschitz(setup):
    family = TestFamily.build(setup.basis, 12, seed=3)
    assert len(family) == 12
    rng = np.random.default_rng(0)
    assert family.lipschitz_quotient(rng) <= 1.0 + 1e-6
    assert family.lipschitz_quotient(rng, scale=5.0) <= 1.0 + 1e-6
    u = 10 * np.array([f.values for f in random_band_limited(setup.grid, rng, 2.0, 4, real=False)])
    values = family(u)
    assert values.shape == (4, 12)
    assert np.all(np.abs(values) <= 0.5)


def test_identical_initial_laws_have_zero_distance(setup, u0):
    estimate = estimate_mixing_rate(setup, u0, u0, [0.1, 0.2, 0.3], 6, 8, EnsembleRunner(batch_size=3))
    assert np.all(estimate.table["distance"] == 0)
    assert estimate.floor_limited
    assert estimate.kappa is None


def test_independent_noise_gives_positive_distance(setup, u0):
    estimate = estimate_mixing_rate(setup, u0, u0, [0.1], 6, 8, common_noise=False)
    row = estimate.table.iloc[0]
    assert row["distance"] > 0
    assert row["se"] > 0


def test_girsanov_paths_without_shift(setup):
    log_density, coefficient = girsanov_paths(setup, 0.0, 20, range(4))
    np.testing.assert_array_equal(log_density, 0.0)
    assert coefficient.shape == (4,)


def test_girsanov_density_of_constant_shift(linear_setup):
    setup = linear_setup
    log_density, _ = girsanov_paths(setup, 0.5, 20, range(3))
    streams = setup.streams(range(3), StreamRole.PRIMARY)
    first_mode = sum(sample_increments(setup.spec, setup.dt, streams, step).increments[:, 0]
                     for step in range(20))
    b1 = setup.spec.coefficients[0]
    expected = 0.5 * first_mode / b1 ** 2 - 0.5 * 20 * setup.dt * 0.5 ** 2 / b1 ** 2
    np.testing.assert_allclose(log_density, expected, rtol=1e-10, atol=1e-12)


def _spike_record(spike_times, heights, horizon=10.0, dt=0.5):
    """E_psi(t) = 1 + t on every path plus one spike of the given height."""
    times = np.arange(0.0, horizon + dt / 2, dt)
    norm = np.repeat(1.0 + times[:, None], len(spike_times), axis=1)
    for path, (t, height) in enumerate(zip(spike_times, heights)):
        norm[np.argmin(np.abs(times - t)), path] += height
    zeros = np.zeros_like(norm)
    return TrajectoryRecord(times, norm, zeros, zeros, zeros, zeros, np.zeros((norm.shape[1], 4)))


def _spike_grid(first_time):
    times = np.arange(first_time, 10.0, 0.5)
    heights = 1.0 + np.arange(1, 21) / 4.0
    return np.repeat(times, 20), np.tile(heights, times.size)


def test_stopping_tails_decay_with_L(params):
    # threshold 2t + 2 against 2 + t + k/4: path crosses at its spike iff k/4 >= t
    record = _spike_record(*_spike_grid(0.5))
    sp = StoppingParams(K=1.0, L=1.0, M=1.0, rho=1.0)
    report = check_stopping_tails(record, params, sp, [1.0, 2.0, 3.0, 4.0])
    frequencies = report.tables["stopping_tails"]["frequency"].to_numpy()
    np.testing.assert_allclose(frequencies, np.array([81, 49, 25, 9]) / 380)
    assert report.metrics["slope"] < 0
    assert report.verdict == PASS


def test_stopping_tails_are_flat_without_L(params):
    # with L = 0 every spike crosses; all of them lie beyond the largest l
    record = _spike_record(*_spike_grid(5.0))
    sp = StoppingParams(K=1.0, L=0.0, M=1.0, rho=1.0)
    report = check_stopping_tails(record, params, sp, [1.0, 2.0, 3.0, 4.0])
    assert list(report.tables["stopping_tails"]["frequency"]) == [1.0] * 4
    assert report.metrics["spread"] == 0.0
    assert report.metrics["triggered"] == 1.0
    assert report.verdict == PASS


def test_recurrence_moment_on_deterministic_flow(linear_setup, u0):
    # ||u(t)|| <= 2 exp(-t) enters the unit ball before H / 2 = 1
    report = recurrence_moment(linear_setup, u0, Field.zeros(linear_setup.grid), 1.0, 0.1, 2.0, 4,
                               noise_on=False)
    moments = report.tables["recurrence"]["moment"].to_numpy()
    assert report.verdict == PASS
    assert report.metrics["hit_fraction"] == 1.0
    assert report.metrics["relative_change"] == 0.0
    assert np.all(np.diff(moments) >= 0)
    assert moments[-1] <= np.exp(0.1 * np.log(2.0) + 0.1 * linear_setup.dt * linear_setup.record_every)


def test_recurrence_growth_on_deterministic_flow(linear_setup, u0):
    report = check_recurrence_growth(linear_setup, u0, [4.0, 1.0, 2.0], 0.5, 0.1, 3.0, 2,
                                     noise_on=False)
    table = report.tables["recurrence_growth"]
    assert list(table["u0_norm"]) == [1.0, 2.0, 4.0]
    assert list(table["hit_fraction"]) == [1.0, 1.0, 1.0]
    assert np.all(np.diff(table["moment"]) > 0)
    assert 0 < report.metrics["exponent"] <= 0.2
    assert report.verdict == PASS


def test_recurrence_growth_needs_two_norms(setup, u0):
    with pytest.raises(DomainError):
        check_recurrence_growth(setup, u0, [2.0], 1.0, 0.1, 1.0, 2)
    with pytest.raises(DomainError):
        check_recurrence_growth(setup, u0, [0.0, 2.0], 1.0, 0.1, 1.0, 2)


def test_truncation_bound_without_stopping(setup, u0):
    sp = StoppingParams(K=1e6, L=0.0, M=0.0, rho=1e6)
    report = check_truncation_bound(setup, u0, sp, 0.2, 40, runner=EnsembleRunner(batch_size=20))
    assert report.verdict == PASS
    assert report.metrics["triggered"] == 0.0
    assert report.metrics["coverage"] == 1.0
    assert report.metrics["C"] == pytest.approx(1.0, rel=1e-9)
    assert np.isfinite(report.metrics["C_controlled_median"])
    assert len(report.tables["truncation_bound"]) == 40


def test_truncation_bound_with_immediate_stop(setup, u0):
    sp = StoppingParams(K=1e-6, L=0.0, M=0.0, rho=1e-6)
    report = check_truncation_bound(setup, u0, sp, 0.2, 40)
    table = report.tables["truncation_bound"]
    assert report.metrics["triggered"] == 1.0
    assert np.all(table["tau"] == 0.0)
    assert np.all(np.isfinite(table["C"]))


def test_truncation_bound_needs_40_paths(setup, u0):
    sp = StoppingParams(K=1.0, L=0.0, M=0.0, rho=1.0)
    with pytest.raises(DomainError):
        check_truncation_bound(setup, u0, sp, 0.1, 20)


def test_squeezing_over_three_ranks(setup, u0):
    report = check_squeezing(setup, u0, [16, 2, 8], 0.05, 4.0, 6)
    table = report.tables["squeezing"]
    assert list(table["N"]) == [2, 8, 16]
    assert report.verdict == PASS
    assert report.metrics["monotone_in_N"]
    assert np.all(table["c_prime_se"] >= 0)
    assert set(report.metrics) >= {"rate_monotone_in_N", "strictly_better_at_top", "tv_bound"}


def test_deterministic_decay_over_ten_time_units(setup):
    report = check_deterministic_decay(setup, 10.0)
    assert report.verdict == PASS
    assert report.metrics["horizon"] == 10.0
    assert report.metrics["max_ratio"] <= 1 + 1e-6
