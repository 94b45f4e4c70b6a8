"""
Coupled trajectory pairs: u follows the CGL equation, v the feedback
controlled equation, both driven by the same noise. Squeezing, recurrence
and hitting measurements are built on top.
"""
import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.stats import binomtest
from sklearn.linear_model import LinearRegression

from ensemble.ensemble import EnsembleRunner
from trajectory.dynamics import (
    CGLIntegrator,
    Recorder,
    SimulationSetup,
    TrajectoryRecord,
    TrajectoryState,
    simulate,
)
from trajectory.functionals import (
    NovikovLedger,
    StoppingParams,
    StoppingTime,
    first_crossing,
    girsanov_log_density,
)
from trajectory.utils.errors import DomainError
from trajectory.utils.grid_space import Basis, Field, norm_sq, project_values
from trajectory.utils.noise import StreamRole, noise_values, sample_increments

logger = logging.getLogger(__name__)


@dataclass
class CouplingState:
    """
    A batch of (u, v) pairs under shared noise.

    Attributes:
        u: state of the uncontrolled process
        v: state of the controlled process
        d: initial distance ||u0 - v0|| per pair, fixed at construction
        tau: time the control was switched off per pair (inf while active)
        ledger: Girsanov/Novikov ledger of the control
        times: sample times of the w series
        w_norm_sq: ||w||^2 samples, (samples, batch)
        pn_w_norm_sq: ||P_N w||^2 samples, (samples, batch)
        initial_u_norm, initial_v_norm: ||u(0)||^2 and ||v(0)||^2 per pair, the
            reference of the stopping threshold across resumed advances
    """
    u: TrajectoryState
    v: TrajectoryState
    d: np.ndarray
    tau: np.ndarray
    ledger: NovikovLedger
    N: int
    times: List[float] = field(default_factory=list)
    w_norm_sq: List[np.ndarray] = field(default_factory=list)
    pn_w_norm_sq: List[np.ndarray] = field(default_factory=list)
    u_recorder: Optional[Recorder] = None
    v_recorder: Optional[Recorder] = None
    initial_u_norm: Optional[np.ndarray] = None
    initial_v_norm: Optional[np.ndarray] = None

    @property
    def w(self) -> np.ndarray:
        return self.u.u - self.v.u

    @property
    def batch(self) -> int:
        return self.u.batch


def new_pair(integrator: CGLIntegrator, u0, v0, basis: Basis, N: int,
             record_every: int = 10) -> CouplingState:
    u = integrator.initial_state(u0)
    v = integrator.initial_state(v0)
    if u.batch != v.batch:
        shape = (max(u.batch, v.batch), integrator.grid.n)
        u = integrator.initial_state(np.broadcast_to(u.u, shape))
        v = integrator.initial_state(np.broadcast_to(v.u, shape))
    d = np.sqrt(norm_sq(u.u - v.u, integrator.grid))
    ledger = NovikovLedger(u.batch, N, integrator.dt, basis)
    cs = CouplingState(u, v, d, np.full(u.batch, np.inf), ledger, N)
    if u.densities is not None:
        cs.initial_u_norm = u.densities.norm
        cs.initial_v_norm = v.densities.norm
    if integrator.track_energy:
        cs.u_recorder = Recorder(record_every)
        cs.v_recorder = Recorder(record_every)
    _sample(cs, basis, record_every)
    return cs


def _sample(cs: CouplingState, basis: Basis, every: int):
    if cs.u.step % every:
        return
    w = cs.w
    cs.times.append(cs.u.t)
    cs.w_norm_sq.append(norm_sq(w, basis.grid))
    cs.pn_w_norm_sq.append(norm_sq(project_values(w, basis, cs.N), basis.grid))
    if cs.u_recorder is not None:
        cs.u_recorder(cs.u)
        cs.v_recorder(cs.v)


def _weighted_energy(state: TrajectoryState, c: float) -> np.ndarray:
    densities = state.densities
    return densities.norm + densities.psi_norm + c * (state.int_h1 + state.int_psi_h1)


def advance_pair(cs: CouplingState, integrator: CGLIntegrator, basis: Basis, n_steps: int,
                 increments: Optional[Callable[[int], np.ndarray]] = None,
                 sp: Optional[StoppingParams] = None, record_every: int = 10) -> CouplingState:
    """
    Advance every pair by n_steps with shared noise.

    The control is evaluated at each step start and switched off for good
    on pairs whose weighted energy (of u or v) crosses the stopping
    threshold of `sp`.

    Args:
        cs: pair batch, advanced in place
        integrator: stepper bound to the parameters
        basis: noise/projection basis
        n_steps: number of steps
        increments: step index -> (batch, M) noise increments, None for no noise
        sp: stopping parameters, None to keep the control on
        record_every: sampling stride of the w series

    Returns:
        The advanced CouplingState
    """
    c = integrator.params.damping_floor
    for _ in range(n_steps):
        step = cs.u.step
        dW = None if increments is None else increments(step)
        noise = None if dW is None else noise_values(dW, basis)
        active = cs.u.t <= cs.tau
        v_next, control = integrator.step_controlled(cs.u, cs.v, noise, basis, cs.N, active)
        cs.ledger.update(control, dW)
        cs.u = integrator.step_cgl(cs.u, noise)
        cs.v = v_next
        if sp is not None and cs.initial_u_norm is not None:
            threshold_u = (sp.K + sp.L) * cs.u.t + sp.rho + sp.M * cs.initial_u_norm
            threshold_v = (sp.K + sp.L) * cs.v.t + sp.rho + sp.M * cs.initial_v_norm
            crossed = (_weighted_energy(cs.u, c) >= threshold_u) | (_weighted_energy(cs.v, c) >= threshold_v)
            cs.tau = np.where(crossed & np.isinf(cs.tau), cs.u.t, cs.tau)
        _sample(cs, basis, record_every)
    final = integrator.control(cs.u.u, cs.v.u, basis, cs.N)
    cs.ledger.close(np.where((cs.u.t <= cs.tau)[:, None], final, 0.0))
    return cs


def step_difference(w: np.ndarray, u: np.ndarray, v: np.ndarray, integrator: CGLIntegrator,
                    basis: Basis, N: int) -> np.ndarray:
    """
    One step of dw + (a w + Q_N[alpha|u|^q u - alpha|v|^q v - nu w_xx]) dt = 0
    in the same exponential scheme as the pair.
    """
    dt = integrator.dt
    difference = integrator.nonlinear(u) - integrator.nonlinear(v)
    tail = difference - project_values(difference, basis, N)
    return integrator.propagate(w - dt * tail + dt * project_values(integrator.viscous(w), basis, N))


@dataclass
class SqueezeFit:
    """Median intercept c, median rate c' and per-path fits."""
    c: float
    c_prime: float
    success_fraction: float
    rates: np.ndarray
    intercepts: np.ndarray


def fit_squeeze_rate(times: np.ndarray, w_norm_sq: np.ndarray) -> SqueezeFit:
    """
    Per-path least squares of log ||w(t)||^2 = log(c ||w(0)||^2) - c' t.

    Args:
        times: sample times
        w_norm_sq: (samples, paths) squared distances

    Returns:
        SqueezeFit; success_fraction counts paths with negative slope
    """
    w_norm_sq = np.asarray(w_norm_sq)
    if w_norm_sq.ndim != 2 or w_norm_sq.shape[1] == 0:
        raise DomainError("squeeze fit needs a nonempty ensemble")
    usable = np.all(w_norm_sq > 0, axis=0)
    if not np.any(usable):
        raise DomainError("squeeze fit needs pairs with nonzero distance")
    logs = np.log(w_norm_sq[:, usable])
    model = LinearRegression().fit(np.asarray(times)[:, None], logs)
    slopes = model.coef_.ravel()
    intercepts = np.exp(np.atleast_1d(model.intercept_) - logs[0])
    rates = -slopes
    return SqueezeFit(
        c=float(np.median(intercepts)),
        c_prime=float(np.median(rates)),
        success_fraction=float(np.mean(slopes < 0)),
        rates=rates,
        intercepts=intercepts,
    )


def squeeze_success(times: np.ndarray, w_norm_sq: np.ndarray, a: float) -> np.ndarray:
    """||w(T)||^2 / ||w(0)||^2 <= exp(-a T / 4) per path."""
    horizon = times[-1] - times[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = w_norm_sq[-1] / w_norm_sq[0]
    return ratio <= np.exp(-a * horizon / 4.0)


def recurrence_times(times: np.ndarray, norm_sq_u: np.ndarray, norm_sq_u_prime: np.ndarray,
                     d_ball: float) -> np.ndarray:
    inside = (norm_sq_u <= d_ball ** 2) & (norm_sq_u_prime <= d_ball ** 2)
    return first_crossing(np.asarray(times), inside)


def recurrence_time(u_record: TrajectoryRecord, u_prime_record: TrajectoryRecord,
                    d_ball: float, row: int = 0) -> StoppingTime:
    """First sample time both independent copies are inside the ball of radius d_ball."""
    values = recurrence_times(u_record.times, u_record.norm, u_prime_record.norm, d_ball)
    value = float(values[row])
    return StoppingTime(value, bool(np.isfinite(value)), float(u_record.times[-1]))


@dataclass
class HittingEstimate:
    probability: float
    low: float
    high: float
    hits: int
    trials: int


def binomial_estimate(hits: int, trials: int) -> HittingEstimate:
    interval = binomtest(hits, trials).proportion_ci(confidence_level=0.95, method="exact")
    return HittingEstimate(hits / trials, float(interval.low), float(interval.high), hits, trials)


def final_norms(setup: SimulationSetup, u0, n_steps: int, role: StreamRole,
                indices: Sequence[int], noise_on: bool = True) -> np.ndarray:
    """||u(T)|| for the paths `indices` started from u0."""
    integrator = setup.integrator(track_energy=False)
    block = np.broadcast_to(u0.values, (len(indices), setup.grid.n))
    state = integrator.initial_state(block)
    noise = setup.noise(indices, role) if noise_on else None
    for _ in range(n_steps):
        state = integrator.step_cgl(state, None if noise is None else noise(state.step))
    return np.sqrt(norm_sq(state.u, setup.grid))


def hitting_probability(setup: SimulationSetup, u0: Field, d_ball: float, T: float,
                        ensemble_size: int, runner=None, noise_on: bool = True) -> HittingEstimate:
    """
    Fraction of independent paths with ||u(T)|| < d_ball, with a 95% exact interval.

    Args:
        setup: simulation setup
        u0: initial condition shared by every path
        d_ball: ball radius
        T: time horizon
        ensemble_size: number of paths, at least 100
        runner: object with map(task, n_paths); serial when None
        noise_on: False for the deterministic flow

    Returns:
        HittingEstimate
    """
    if ensemble_size < 100:
        raise DomainError(f"ensemble_size = {ensemble_size} must be at least 100")
    task = partial(final_norms, setup, u0, setup.steps(T), StreamRole.PRIMARY, noise_on=noise_on)
    batches = (runner or EnsembleRunner()).map(task, ensemble_size)
    norms = np.concatenate(batches)
    return binomial_estimate(int(np.sum(norms < d_ball)), ensemble_size)


def pair_final_norms(setup: SimulationSetup, u0, u0_prime, n_steps: int,
                     indices: Sequence[int]) -> np.ndarray:
    primary = final_norms(setup, u0, n_steps, StreamRole.PRIMARY, indices)
    partner = final_norms(setup, u0_prime, n_steps, StreamRole.PARTNER, indices)
    return np.maximum(primary, partner)


def pair_hitting_probability(setup: SimulationSetup, u0: Field, u0_prime: Field, d_ball: float,
                             T: float, ensemble_size: int, runner=None) -> HittingEstimate:
    """Probability that two independent copies are both inside the ball at T."""
    task = partial(pair_final_norms, setup, u0, u0_prime, setup.steps(T))
    batches = (runner or EnsembleRunner()).map(task, ensemble_size)
    norms = np.concatenate(batches)
    return binomial_estimate(int(np.sum(norms < d_ball)), ensemble_size)


@dataclass
class PairSummary:
    """Per-pair outcome of a coupled run, (batch,) arrays unless noted."""
    d: np.ndarray
    times: np.ndarray
    w_norm_sq: np.ndarray
    pn_w_norm_sq: np.ndarray
    tau: np.ndarray
    novikov_integral: np.ndarray
    log_density: np.ndarray

    @classmethod
    def concatenate(cls, parts: Sequence["PairSummary"]) -> "PairSummary":
        return cls(
            d=np.concatenate([p.d for p in parts]),
            times=parts[0].times,
            w_norm_sq=np.concatenate([p.w_norm_sq for p in parts], axis=1),
            pn_w_norm_sq=np.concatenate([p.pn_w_norm_sq for p in parts], axis=1),
            tau=np.concatenate([p.tau for p in parts]),
            novikov_integral=np.concatenate([p.novikov_integral for p in parts]),
            log_density=np.concatenate([p.log_density for p in parts]),
        )


def run_pairs(setup: SimulationSetup, u0: Field, v0: Field, horizon: float,
              sp: Optional[StoppingParams], indices: Sequence[int],
              noise_on: bool = True) -> PairSummary:
    """Run the pairs `indices` of a coupled ensemble and summarise them."""
    integrator = setup.integrator(track_energy=sp is not None)
    batch = len(indices)
    block_u = np.broadcast_to(u0.values, (batch, setup.grid.n))
    block_v = np.broadcast_to(v0.values, (batch, setup.grid.n))
    cs = new_pair(integrator, block_u, block_v, setup.basis, setup.N, setup.record_every)
    increments = shared_increments(setup, indices) if noise_on else None
    advance_pair(cs, integrator, setup.basis, setup.steps(horizon), increments, sp,
                 setup.record_every)
    return PairSummary(
        d=cs.d,
        times=np.array(cs.times),
        w_norm_sq=np.array(cs.w_norm_sq),
        pn_w_norm_sq=np.array(cs.pn_w_norm_sq),
        tau=cs.tau,
        novikov_integral=cs.ledger.integral,
        log_density=girsanov_log_density(cs.ledger, setup.spec),
    )


def run_independent(setup: SimulationSetup, u0: Field, horizon: float, role: StreamRole,
                    indices: Sequence[int], tau=np.inf, noise_on: bool = True) -> TrajectoryRecord:
    """Energy record of the paths `indices` started from u0."""
    integrator = setup.integrator()
    block = np.broadcast_to(u0.values, (len(indices), setup.grid.n))
    noise = setup.noise(indices, role) if noise_on else None
    return simulate(integrator, block, setup.steps(horizon), setup.record_every, noise, tau)


def run_truncated_pair(setup: SimulationSetup, u0: Field, v0: Field, horizon: float, tau,
                       indices: Sequence[int], noise_on: bool = True) -> TrajectoryRecord:
    """
    Energy record of the controlled copy stopped at tau.

    Until tau, v follows the controlled equation against a CGL partner u
    under the primary noise of `indices`; from tau on it follows the heat
    flow.
    """
    integrator = setup.integrator()
    batch = len(indices)
    block_u = np.broadcast_to(u0.values, (batch, setup.grid.n))
    block_v = np.broadcast_to(v0.values, (batch, setup.grid.n))
    increments = shared_increments(setup, indices) if noise_on else None
    partner = {"u": integrator.initial_state(block_u)}

    def controlled(v_state, step):
        noise = None if increments is None else noise_values(increments(step), setup.basis)
        v_next, _ = integrator.step_controlled(partner["u"], v_state, noise, setup.basis, setup.N)
        partner["u"] = integrator.step_cgl(partner["u"], noise)
        return v_next

    return simulate(integrator, block_v, setup.steps(horizon), setup.record_every,
                    tau=tau, stepper=controlled)


def shared_increments(setup: SimulationSetup, indices: Sequence[int]) -> Callable[[int], np.ndarray]:
    """Step index -> (batch, M) increments of the primary streams of `indices`."""
    streams = setup.streams(indices, StreamRole.PRIMARY)

    def increments(step: int) -> np.ndarray:
        return sample_increments(setup.spec, setup.dt, streams, step).increments
    return increments
