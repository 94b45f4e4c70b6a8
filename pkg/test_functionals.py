"""
Tests for the energy functionals, stopping times and Girsanov ledger.
"""
from dataclasses import replace

import numpy as np
import pytest

from trajectory.dynamics import CGLIntegrator, TrajectoryRecord, simulate
from trajectory.functionals import (
    EnergyRecord,
    NovikovLedger,
    StoppingParams,
    StoppingTime,
    calibrate_stopping_params,
    energy_psi,
    first_crossing,
    girsanov_log_density,
    novikov_integrand,
    stopping_tau,
    stopping_times,
    total_variation_bound,
    truncation_constant,
    unweighted_energy_constants,
)
from trajectory.utils.errors import DomainError, GridMismatchError, PreconditionError
from trajectory.utils.grid_space import Field, l2_norm
from trajectory.utils.noise import from_coefficients, sample_increments


def _record(times, e_psi):
    e_psi = np.asarray(e_psi, dtype=float)
    return EnergyRecord(np.asarray(times, dtype=float), e_psi, e_psi, e_psi, e_psi[0])


def test_energy_psi_at_time_zero(setup, u0):
    record = simulate(setup.integrator(), u0, 40, noise=setup.noise([0], 0))
    energy = energy_psi(record, setup.params)
    norm_sq = l2_norm(u0) ** 2
    assert energy.E[0, 0] == pytest.approx(norm_sq, rel=1e-12)
    assert energy.E_psi[0, 0] == pytest.approx(norm_sq, rel=1e-12)
    assert energy.E_hat_psi[0, 0] == 0.0
    assert np.all(energy.E_psi >= energy.E)


def test_energy_of_zero_path_is_zero(linear_setup):
    record = simulate(linear_setup.integrator(), Field.zeros(linear_setup.grid), 40)
    energy = energy_psi(record, linear_setup.params)
    for series in (energy.E, energy.E_hat_psi, energy.E_psi):
        assert not np.any(series)


def test_unweighted_energy_of_decaying_mode(linear_setup, basis):
    # alpha = 0, h = 0, nu = 1: ||u(t)||^2 = exp(-2 lam t) with lam = a + k^2
    params = linear_setup.params
    k = float(basis.wavenumbers[3])
    lam = params.a + k ** 2
    integrator = CGLIntegrator(params, 1e-3)
    record = simulate(integrator, basis[3], 2000, record_every=100)
    energy = energy_psi(record, params)
    t = record.times
    c = params.damping_floor
    expected = np.exp(-2 * lam * t) + c * (1 + k ** 2) * -np.expm1(-2 * lam * t) / (2 * lam)
    np.testing.assert_allclose(energy.E[:, 0], expected, rtol=1e-4)


def test_stopping_params_validation():
    with pytest.raises(DomainError):
        StoppingParams(K=0.0, L=1.0, M=1.0, rho=1.0)
    with pytest.raises(DomainError):
        StoppingParams(K=1.0, L=-1.0, M=1.0, rho=1.0)
    with pytest.raises(DomainError):
        StoppingParams(K=1.0, L=1.0, M=1.0, rho=0.0)


def test_stopping_tau_at_time_zero():
    energy = _record([0.0, 0.5, 1.0], [[3.0], [3.0], [3.0]])
    tau = stopping_tau(energy, StoppingParams(K=1.0, L=0.0, M=0.0, rho=2.0))
    assert tau == StoppingTime(0.0, True, 1.0)
    assert tau.encoded == 0.0


def test_stopping_tau_not_triggered():
    energy = _record([0.0, 0.5, 1.0], [[1.0], [1.2], [1.4]])
    tau = stopping_tau(energy, StoppingParams(K=10.0, L=1.0, M=4.0, rho=100.0))
    assert not tau.triggered
    assert tau.time == np.inf
    assert tau.encoded == 2.0


def test_stopping_times_per_path():
    energy = _record([0.0, 1.0, 2.0, 3.0], [[0.0, 0.0], [1.0, 0.0], [5.0, 0.0], [9.0, 8.0]])
    taus = stopping_times(energy, StoppingParams(K=1.0, L=0.0, M=0.0, rho=1.0))
    np.testing.assert_array_equal(taus, [2.0, 3.0])


def test_first_crossing():
    hits = np.array([[False, False], [True, False], [True, False]])
    np.testing.assert_array_equal(first_crossing(np.array([0.0, 1.0, 2.0]), hits), [1.0, np.inf])


def test_unweighted_energy_constants(params, spec):
    K1, gamma1 = unweighted_energy_constants(params, spec)
    assert K1 == pytest.approx(2 * l2_norm(params.h) ** 2 + spec.B1)
    assert gamma1 == pytest.approx(1 / (4 * spec.B1))
    _, silent = unweighted_energy_constants(params, from_coefficients([0.0]))
    assert silent == np.inf


def test_calibrated_K_tracks_slope():
    times = np.linspace(0.0, 4.0, 41)
    e_psi = np.stack([2.0 * times + 1.0, 2.0 * times + 3.0, 2.0 * times], axis=1)
    sp = calibrate_stopping_params(_record(times, e_psi), rho=4.0)
    assert sp.K == pytest.approx(3.0)
    assert (sp.L, sp.M, sp.rho) == (1.0, 4.0, 4.0)


def test_calibration_falls_back_on_decay():
    times = np.linspace(0.0, 1.0, 11)
    sp = calibrate_stopping_params(_record(times, (5.0 - times)[:, None]), rho=1.0)
    assert sp.K == 1e-6


def test_truncation_constant_of_identical_records():
    times = np.linspace(0.0, 1.0, 11)
    energy = _record(times, (1.0 + times)[:, None])
    assert truncation_constant(energy, energy, K3=1.0)[0] <= 1.0 + 1e-12


def test_novikov_integrand(setup, u0):
    integrator = setup.integrator(track_energy=False)
    block = np.broadcast_to(u0.values, (2, setup.grid.n))
    assert not np.any(novikov_integrand(block, block, 0.5, np.inf, integrator, setup.basis, setup.N))
    other = np.zeros_like(block)
    active = novikov_integrand(block, other, 0.5, np.array([1.0, 0.2]), integrator, setup.basis, setup.N)
    assert np.any(active[0])
    assert not np.any(active[1])
    with pytest.raises(GridMismatchError):
        novikov_integrand(block, other[:1], 0.5, np.inf, integrator, setup.basis, setup.N)


def _ledger(setup, controls, increments):
    ledger = NovikovLedger(controls.shape[1], setup.N, setup.dt, setup.basis)
    for control, dW in zip(controls, increments):
        ledger.update(control, dW)
    ledger.close(controls[-1])
    return ledger


def _controls(setup, steps, batch, seed):
    rng = np.random.default_rng(seed)
    coefficients = rng.standard_normal((steps, batch, setup.N))
    controls = setup.basis.synthesize(coefficients).astype(np.complex128)
    streams = setup.streams(range(batch), 0)
    increments = np.array([sample_increments(setup.spec, setup.dt, streams, s).increments
                           for s in range(steps)])
    return controls, increments


def test_zero_control_has_zero_density(setup):
    controls, increments = _controls(setup, 10, 3, 0)
    ledger = _ledger(setup, np.zeros_like(controls), increments)
    np.testing.assert_array_equal(girsanov_log_density(ledger, setup.spec), 0.0)
    assert not np.any(ledger.integral)


def test_doubling_the_control(setup):
    controls, increments = _controls(setup, 10, 3, 1)
    single = _ledger(setup, controls, increments)
    double = _ledger(setup, 2 * controls, increments)
    np.testing.assert_allclose(double.ito, 2 * single.ito, rtol=1e-12)
    np.testing.assert_allclose(double.quadratic, 4 * single.quadratic, rtol=1e-12)
    np.testing.assert_allclose(double.integral, 4 * single.integral, rtol=1e-12)
    inv_sq = 1 / setup.spec.coefficients[:setup.N] ** 2
    expected = single.ito @ inv_sq - 0.5 * single.quadratic @ inv_sq
    np.testing.assert_allclose(girsanov_log_density(single, setup.spec), expected, rtol=1e-12)


def test_ledger_integral_is_trapezoid(setup):
    controls, increments = _controls(setup, 5, 2, 2)
    ledger = _ledger(setup, controls, increments)
    sq = np.array([np.sum(np.abs(c) ** 2, axis=-1) * setup.grid.dx for c in controls])
    points = np.vstack([sq, sq[-1:]])
    expected = 0.5 * setup.dt * (points[:-1] + points[1:]).sum(axis=0)
    np.testing.assert_allclose(ledger.integral, expected, rtol=1e-12)


def test_ledgers_over_adjacent_intervals_add_up(setup):
    controls, increments = _controls(setup, 8, 2, 3)
    whole = NovikovLedger(2, setup.N, setup.dt, setup.basis)
    first = NovikovLedger(2, setup.N, setup.dt, setup.basis)
    second = NovikovLedger(2, setup.N, setup.dt, setup.basis)
    for step in range(8):
        whole.update(controls[step], increments[step])
        (first if step < 4 else second).update(controls[step], increments[step])
    first.close(controls[4])
    merged = first.merge(second)
    np.testing.assert_allclose(merged.ito, whole.ito, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(merged.quadratic, whole.quadratic, rtol=1e-12)
    np.testing.assert_allclose(merged.integral, whole.integral, rtol=1e-12)
    assert merged.steps == 8


def test_density_needs_active_modes(setup, basis):
    silent = from_coefficients([0.5, 0.0, 0.2] + [0.1] * 13, basis)
    ledger = NovikovLedger(1, 3, setup.dt, basis)
    with pytest.raises(PreconditionError):
        girsanov_log_density(ledger, silent)
    with pytest.raises(PreconditionError):
        total_variation_bound(np.zeros(1), silent, 3)


def test_total_variation_bound(spec):
    assert total_variation_bound(np.zeros(10), spec, 8) == 0.0
    assert total_variation_bound(np.full(10, 1e-4), spec, 8) > 0.0


def test_energy_record_matches_trajectory_record(params):
    times = np.array([0.0, 1.0])
    ones = np.ones((2, 1))
    record = TrajectoryRecord(times, 2 * ones, 3 * ones, 5 * ones, 7 * ones, 11 * ones,
                              np.zeros((1, params.grid.n)))
    energy = energy_psi(record, replace(params, nu=0.5))
    assert energy.E[0, 0] == pytest.approx(2 + 0.5 * 5)
    assert energy.E_hat_psi[0, 0] == pytest.approx(3 + 0.5 * 11)
    assert energy.E_psi[0, 0] == pytest.approx(2 + 3 + 0.5 * (5 + 7))
