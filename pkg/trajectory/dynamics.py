"""
Time integrators for the stochastic CGL equation, the feedback-controlled
process, the damped heat flow and the unforced deterministic flow.

All steppers act on a (batch, n) block of trajectories: every row is an
independent trajectory, so an ensemble batch and a single path go through
the same code.
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np

from trajectory.utils.errors import BlowUpError, DomainError, GridMismatchError
from trajectory.utils.grid_space import (
    Basis,
    Field,
    Grid,
    WeightTable,
    check_rank,
    norm_sq,
    phi_weight,
    project_values,
    spectral_norm_sq,
)
from trajectory.utils.noise import (
    NoiseSpec,
    NoiseStream,
    WienerIncrement,
    noise_values,
    sample_increments,
    stream_id,
)

logger = logging.getLogger(__name__)

BLOW_UP_NORM = 1e6


@dataclass(frozen=True, eq=False)
class PhysParams:
    """
    Coefficients of du + (a u - nu u_xx + alpha |u|^q u) dt = h dt + dW.

    Args:
        a: linear damping, a > 0
        nu: complex viscosity with positive real part
        alpha: complex nonlinearity with nonnegative real part
        q: nonlinearity exponent in (0, 2)
        h: deterministic force
        dealias: apply the 2/3 rule to the explicit nonlinearity
    """
    a: float
    nu: complex
    alpha: complex
    q: float
    h: Field
    dealias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "nu", complex(self.nu))
        object.__setattr__(self, "alpha", complex(self.alpha))
        for violation in validate_params(self.a, self.nu, self.alpha, self.q):
            raise DomainError(violation)
        weighted = np.sqrt(norm_sq(phi_weight(self.h.grid).phi * self.h.values, self.h.grid))
        if not np.isfinite(weighted):
            raise DomainError("force h must have finite weighted norm ||phi h||")

    @property
    def grid(self) -> Grid:
        return self.h.grid

    @property
    def damping_floor(self) -> float:
        """a ∧ Re(nu)."""
        return min(self.a, self.nu.real)


def validate_params(a: float, nu: complex, alpha: complex, q: float) -> list:
    violations = []
    if not a > 0:
        violations.append(f"a = {a} violates a > 0")
    if not nu.real > 0:
        violations.append(f"nu_1 = {nu.real} violates nu_1 > 0")
    if not alpha.real >= 0:
        violations.append(f"alpha_1 = {alpha.real} violates alpha_1 >= 0")
    if not 0 < q < 2:
        violations.append(f"q = {q} violates q ∈ (0,2)")
    return violations


class Densities(NamedTuple):
    """Per-row integrands at one time: ||u||^2, ||u||_H1^2, ||psi u||^2,
    ||psi u||_H1^2 and ||psi u||^2 + ||psi u_x||^2."""
    norm: np.ndarray
    h1: np.ndarray
    psi_norm: np.ndarray
    psi_h1: np.ndarray
    psi_hat: np.ndarray


def energy_densities(u: np.ndarray, grid: Grid, psi: np.ndarray) -> Densities:
    spectrum = np.fft.fft(u, axis=-1)
    weighted = psi * u
    weighted_spectrum = np.fft.fft(weighted, axis=-1)
    symbol = 1j * grid.k
    symbol[grid.n // 2] = 0.0
    u_x = np.fft.ifft(symbol * spectrum, axis=-1)
    psi_norm = norm_sq(weighted, grid)
    return Densities(
        norm=norm_sq(u, grid),
        h1=spectral_norm_sq(spectrum, grid, 1),
        psi_norm=psi_norm,
        psi_h1=spectral_norm_sq(weighted_spectrum, grid, 1),
        psi_hat=psi_norm + norm_sq(psi * u_x, grid),
    )


@dataclass
class TrajectoryState:
    """
    A batch of trajectories at a common time.

    Attributes:
        t: current time
        u: (batch, n) samples
        step: number of steps taken
        int_h1: running int ||u||_H1^2 ds per row
        int_psi_h1: running int ||psi u||_H1^2 ds per row
        int_psi_hat: running int ||psi u||^2 + ||psi u_x||^2 ds per row
        densities: integrands at time t, used by the next trapezoid update
    """
    t: float
    u: np.ndarray
    step: int
    int_h1: np.ndarray
    int_psi_h1: np.ndarray
    int_psi_hat: np.ndarray
    densities: Optional[Densities] = None

    @property
    def batch(self) -> int:
        return self.u.shape[0]

    def field(self, grid: Grid, row: int = 0) -> Field:
        return Field(grid, self.u[row])


def _as_block(u0: Union[Field, np.ndarray], grid: Grid) -> np.ndarray:
    values = u0.values if isinstance(u0, Field) else np.asarray(u0)
    block = np.atleast_2d(np.array(values, dtype=np.complex128))
    if block.shape[-1] != grid.n:
        raise GridMismatchError(f"initial data has {block.shape[-1]} nodes, grid has {grid.n}")
    return block


class CGLIntegrator:
    """
    Exponential Euler-Maruyama stepper.

    The linear part a - nu d_xx is solved exactly per Fourier mode, the
    nonlinearity and h enter explicitly before propagation and the noise is
    added after it:

        u_{n+1} = E (u_n + dt (h - alpha |u_n|^q u_n)) + dW_n,
        E = exp(-(a + nu k^2) dt).
    """

    def __init__(self, params: PhysParams, dt: float, track_energy: bool = True,
                 weights: Optional[WeightTable] = None, blow_up_norm: float = BLOW_UP_NORM):
        if not dt > 0:
            raise DomainError(f"time step dt = {dt} must be positive")
        self.params = params
        self.grid = params.grid
        self.dt = dt
        self.track_energy = track_energy
        self.weights = weights or phi_weight(self.grid)
        self.blow_up_norm = blow_up_norm
        k_sq = self.grid.k ** 2
        self.symbol = params.a + params.nu * k_sq
        self.propagator = np.exp(-self.symbol * dt)
        self.h = params.h.values
        self.dealias_mask = None
        if params.dealias:
            self.dealias_mask = np.abs(self.grid.k) <= (2.0 / 3.0) * np.max(np.abs(self.grid.k))

    def nonlinear(self, u: np.ndarray) -> np.ndarray:
        """alpha |u|^q u, optionally 2/3-dealiased."""
        values = self.params.alpha * np.abs(u) ** self.params.q * u
        if self.dealias_mask is not None:
            values = np.fft.ifft(self.dealias_mask * np.fft.fft(values, axis=-1), axis=-1)
        return values

    def propagate(self, values: np.ndarray) -> np.ndarray:
        return np.fft.ifft(self.propagator * np.fft.fft(values, axis=-1), axis=-1)

    def viscous(self, values: np.ndarray) -> np.ndarray:
        """-nu d_xx applied spectrally."""
        k_sq = self.grid.k ** 2
        return np.fft.ifft(self.params.nu * k_sq * np.fft.fft(values, axis=-1), axis=-1)

    def densities(self, u: np.ndarray, t: float) -> Optional[Densities]:
        if not self.track_energy:
            return None
        return energy_densities(u, self.grid, self.weights.psi(t))

    def initial_state(self, u0: Union[Field, np.ndarray], t0: float = 0.0) -> TrajectoryState:
        block = _as_block(u0, self.grid)
        zeros = np.zeros(block.shape[0])
        return TrajectoryState(t0, block, 0, zeros, zeros.copy(), zeros.copy(),
                               self.densities(block, t0))

    def _advance(self, state: TrajectoryState, u_next: np.ndarray) -> TrajectoryState:
        norms = np.sqrt(norm_sq(u_next, self.grid))
        if not np.all(np.isfinite(norms)) or np.any(norms > self.blow_up_norm):
            worst = float(np.nanmax(np.where(np.isfinite(norms), norms, np.inf)))
            raise BlowUpError(state.step + 1, worst)
        t_next = state.t + self.dt
        densities = self.densities(u_next, t_next)
        int_h1, int_psi_h1, int_psi_hat = state.int_h1, state.int_psi_h1, state.int_psi_hat
        if densities is not None and state.densities is not None:
            half = 0.5 * self.dt
            int_h1 = int_h1 + half * (state.densities.h1 + densities.h1)
            int_psi_h1 = int_psi_h1 + half * (state.densities.psi_h1 + densities.psi_h1)
            int_psi_hat = int_psi_hat + half * (state.densities.psi_hat + densities.psi_hat)
        return TrajectoryState(t_next, u_next, state.step + 1, int_h1, int_psi_h1,
                               int_psi_hat, densities)

    def step_cgl(self, state: TrajectoryState, noise: Optional[np.ndarray] = None) -> TrajectoryState:
        u = state.u
        u_next = self.propagate(u + self.dt * (self.h - self.nonlinear(u)))
        if noise is not None:
            u_next = u_next + noise
        return self._advance(state, u_next)

    def control(self, u: np.ndarray, v: np.ndarray, basis: Basis, N: int) -> np.ndarray:
        """A = -P_N[alpha|u|^q u - alpha|v|^q v - nu d_xx (u - v)]."""
        bracket = self.nonlinear(u) - self.nonlinear(v) + self.viscous(u - v)
        return -project_values(bracket, basis, N)

    def step_controlled(self, u_state: TrajectoryState, v_state: TrajectoryState,
                        noise: Optional[np.ndarray], basis: Basis, N: int,
                        active: Optional[np.ndarray] = None):
        """
        Advance v with the feedback drift evaluated at the step start.

        Rows where `active` is False run without control.

        Returns:
            (new v state, control field A at the step start)
        """
        check_aligned(u_state, v_state)
        check_rank(basis, N)
        v = v_state.u
        control = self.control(u_state.u, v, basis, N)
        if active is not None:
            control = np.where(active[:, None], control, 0.0)
        v_next = self.propagate(v + self.dt * (self.h - self.nonlinear(v) + control))
        if noise is not None:
            v_next = v_next + noise
        return self._advance(v_state, v_next), control

    def step_heat(self, state: TrajectoryState) -> TrajectoryState:
        return self._advance(state, self.propagate(state.u))


def check_aligned(u_state: TrajectoryState, v_state: TrajectoryState):
    if u_state.step != v_state.step or abs(u_state.t - v_state.t) > 1e-12 * max(1.0, abs(u_state.t)):
        raise GridMismatchError(
            f"states not time-aligned: t = {u_state.t} (step {u_state.step}) "
            f"vs t = {v_state.t} (step {v_state.step})"
        )
    if u_state.u.shape != v_state.u.shape:
        raise GridMismatchError("paired states have different shapes")


def dt_bound(alpha: complex, q: float, amplitude_bound: float = 10.0) -> float:
    """Empirical stability bound min(0.1, 1/(|alpha| R^q))."""
    stiffness = abs(alpha) * amplitude_bound ** q
    return 0.1 if stiffness == 0 else min(0.1, 1.0 / stiffness)


def dt_max(params: PhysParams, amplitude_bound: float = 10.0) -> float:
    return dt_bound(params.alpha, params.q, amplitude_bound)


# Single-trajectory entry points working with Field and WienerIncrement.

def nonlinearity(u: Field, params: PhysParams) -> Field:
    values = params.alpha * np.abs(u.values) ** params.q * u.values
    return Field(u.grid, values)


def _noise_block(increment: Optional[WienerIncrement], basis: Optional[Basis],
                 batch: int) -> Optional[np.ndarray]:
    if increment is None:
        return None
    if basis is None:
        raise GridMismatchError("a basis is needed to assemble the noise increment")
    return np.broadcast_to(noise_values(np.atleast_2d(increment.increments), basis),
                           (batch, basis.grid.n))


def step_cgl(state: TrajectoryState, params: PhysParams, spec: NoiseSpec, dt: float,
             increment: Optional[WienerIncrement], basis: Optional[Basis] = None) -> TrajectoryState:
    if increment is not None and increment.draws.shape[-1] != spec.M:
        raise GridMismatchError("increment does not match the noise spec")
    integrator = CGLIntegrator(params, dt, track_energy=state.densities is not None)
    return integrator.step_cgl(state, _noise_block(increment, basis, state.batch))


def step_controlled(u_state: TrajectoryState, v_state: TrajectoryState, params: PhysParams,
                    spec: NoiseSpec, dt: float, increment: Optional[WienerIncrement],
                    N: int, basis: Basis):
    integrator = CGLIntegrator(params, dt, track_energy=v_state.densities is not None)
    return integrator.step_controlled(u_state, v_state,
                                      _noise_block(increment, basis, v_state.batch), basis, N)


def step_heat(state: TrajectoryState, params: PhysParams, dt: float) -> TrajectoryState:
    integrator = CGLIntegrator(params, dt, track_energy=state.densities is not None)
    return integrator.step_heat(state)


NoiseSource = Callable[[int], Optional[np.ndarray]]


def stream_noise(spec: NoiseSpec, basis: Basis, dt: float,
                 streams: Sequence[NoiseStream]) -> NoiseSource:
    """Noise block for step index `step`, one row per stream."""
    def source(step: int) -> np.ndarray:
        return noise_values(sample_increments(spec, dt, streams, step).increments, basis)
    return source


def evolve_truncated(state: TrajectoryState, integrator: CGLIntegrator, tau,
                     n_steps: int, noise: Optional[NoiseSource] = None,
                     stepper: Optional[Callable] = None) -> Iterator[TrajectoryState]:
    """
    Follow the flow until tau, then the heat flow for good.

    Args:
        state: starting batch
        integrator: stepper bound to the parameters
        tau: switch time, scalar or one per row (inf never switches)
        n_steps: number of steps to yield
        noise: noise source for the pre-switch flow
        stepper: optional replacement for the pre-switch step, called as
            stepper(state, step_index)

    Yields:
        The state after every step
    """
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (state.batch,))
    for _ in range(n_steps):
        switched = state.t >= tau - 1e-12
        if np.all(switched):
            state = integrator.step_heat(state)
        else:
            if stepper is not None:
                flowed = stepper(state, state.step)
            else:
                flowed = integrator.step_cgl(state, None if noise is None else noise(state.step))
            if np.any(switched):
                heat = integrator.step_heat(state)
                flowed = _select_rows(switched, heat, flowed)
            state = flowed
        yield state


def _select_rows(mask: np.ndarray, when_true: TrajectoryState,
                 when_false: TrajectoryState) -> TrajectoryState:
    def pick(a, b):
        return np.where(mask.reshape((-1,) + (1,) * (np.ndim(a) - 1)), a, b)
    densities = None
    if when_true.densities is not None:
        densities = Densities(*(pick(a, b) for a, b in zip(when_true.densities, when_false.densities)))
    return replace(when_false, u=pick(when_true.u, when_false.u),
                   int_h1=pick(when_true.int_h1, when_false.int_h1),
                   int_psi_h1=pick(when_true.int_psi_h1, when_false.int_psi_h1),
                   int_psi_hat=pick(when_true.int_psi_hat, when_false.int_psi_hat),
                   densities=densities)


@dataclass
class TrajectoryRecord:
    """
    Samples of a batch of trajectories on a uniform time grid.

    Arrays are (samples, batch) except `times` (samples,) and `final` (batch, n).
    """
    times: np.ndarray
    norm: np.ndarray
    psi_norm: np.ndarray
    int_h1: np.ndarray
    int_psi_h1: np.ndarray
    int_psi_hat: np.ndarray
    final: np.ndarray
    blown_up: bool = False

    @property
    def batch(self) -> int:
        return self.norm.shape[1]

    @classmethod
    def concatenate(cls, records: Sequence["TrajectoryRecord"]) -> "TrajectoryRecord":
        first = records[0]
        return cls(
            times=first.times,
            norm=np.concatenate([r.norm for r in records], axis=1),
            psi_norm=np.concatenate([r.psi_norm for r in records], axis=1),
            int_h1=np.concatenate([r.int_h1 for r in records], axis=1),
            int_psi_h1=np.concatenate([r.int_psi_h1 for r in records], axis=1),
            int_psi_hat=np.concatenate([r.int_psi_hat for r in records], axis=1),
            final=np.concatenate([r.final for r in records], axis=0),
            blown_up=any(r.blown_up for r in records),
        )


class Recorder:
    """Collects TrajectoryRecord samples every `every` steps."""

    def __init__(self, every: int):
        self.every = max(1, every)
        self.rows = []

    def __call__(self, state: TrajectoryState):
        if state.step % self.every:
            return
        densities = state.densities
        if densities is None:
            raise DomainError("recording needs an integrator with energy tracking")
        self.rows.append((state.t, densities.norm, densities.psi_norm, state.int_h1,
                          state.int_psi_h1, state.int_psi_hat))

    def record(self, final: np.ndarray) -> TrajectoryRecord:
        times, norm, psi_norm, int_h1, int_psi_h1, int_psi_hat = zip(*self.rows)
        return TrajectoryRecord(np.array(times), np.array(norm), np.array(psi_norm),
                                np.array(int_h1), np.array(int_psi_h1), np.array(int_psi_hat),
                                final)


def simulate(integrator: CGLIntegrator, u0, n_steps: int, record_every: int = 10,
             noise: Optional[NoiseSource] = None, tau=np.inf,
             stepper: Optional[Callable] = None) -> TrajectoryRecord:
    """
    Integrate a batch and record its energy integrands.

    Args:
        integrator: stepper with energy tracking on
        u0: (batch, n) initial data or a single Field
        n_steps: number of steps
        record_every: sampling stride in steps
        noise: noise source, None for the deterministic flow
        tau: truncation time per row (heat flow afterwards)
        stepper: replacement for the pre-truncation step, see evolve_truncated

    Returns:
        TrajectoryRecord
    """
    state = integrator.initial_state(u0)
    recorder = Recorder(record_every)
    recorder(state)
    for state in evolve_truncated(state, integrator, tau, n_steps, noise, stepper):
        recorder(state)
    return recorder.record(state.u)


def deterministic_flow(u0: Field, params: PhysParams, dt: float, T: float) -> Field:
    """Unforced noiseless CGL flow from u0 up to time T."""
    unforced = replace(params, h=Field.zeros(u0.grid))
    integrator = CGLIntegrator(unforced, dt, track_energy=False)
    state = integrator.initial_state(u0)
    for _ in range(int(round(T / dt))):
        state = integrator.step_cgl(state)
    return state.field(u0.grid)


@dataclass(frozen=True, eq=False)
class SimulationSetup:
    """
    Everything a worker needs to integrate a batch of paths.

    Picklable, so batches can be shipped to worker processes.
    """
    params: PhysParams
    spec: NoiseSpec
    basis: Basis
    dt: float
    seed: int
    N: int = 32
    record_every: int = 10

    @property
    def grid(self) -> Grid:
        return self.params.grid

    def integrator(self, track_energy: bool = True) -> CGLIntegrator:
        return CGLIntegrator(self.params, self.dt, track_energy=track_energy)

    def streams(self, indices: Sequence[int], role) -> list:
        return [NoiseStream(self.seed, stream_id(i, role)) for i in indices]

    def noise(self, indices: Sequence[int], role) -> NoiseSource:
        return stream_noise(self.spec, self.basis, self.dt, self.streams(indices, role))

    def steps(self, horizon: float) -> int:
        return int(round(horizon / self.dt))
