"""
Energy functionals, stopping times and the Girsanov/Novikov bookkeeping
evaluated along discrete trajectories.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.linear_model import LinearRegression

from trajectory.dynamics import PhysParams, TrajectoryRecord
from trajectory.utils.errors import DomainError, GridMismatchError
from trajectory.utils.grid_space import Basis, check_rank, l2_norm, norm_sq
from trajectory.utils.noise import NoiseSpec

logger = logging.getLogger(__name__)


@dataclass
class EnergyRecord:
    """
    Energy series on the record's sample times, each (samples, batch).

    Attributes:
        times: sample times
        E: ||u||^2 + c int ||u||_H1^2
        E_hat_psi: ||psi u||^2 + c int (||psi u||^2 + ||psi u_x||^2)
        E_psi: ||u||^2 + ||psi u||^2 + c int (||u||_H1^2 + ||psi u||_H1^2)
        initial_norm: ||u(0)||^2 per row
    with c = a ∧ Re(nu).
    """
    times: np.ndarray
    E: np.ndarray
    E_hat_psi: np.ndarray
    E_psi: np.ndarray
    initial_norm: np.ndarray


def energy_psi(record: TrajectoryRecord, params: PhysParams) -> EnergyRecord:
    c = params.damping_floor
    return EnergyRecord(
        times=record.times,
        E=record.norm + c * record.int_h1,
        E_hat_psi=record.psi_norm + c * record.int_psi_hat,
        E_psi=record.norm + record.psi_norm + c * (record.int_h1 + record.int_psi_h1),
        initial_norm=record.norm[0],
    )


@dataclass(frozen=True)
class StoppingParams:
    """Threshold (K + L) t + rho + M ||u(0)||^2 of the stopping time."""
    K: float
    L: float
    M: float
    rho: float

    def __post_init__(self):
        if not (self.K > 0 and self.rho > 0):
            raise DomainError(f"stopping parameters need K > 0 and rho > 0, got K={self.K}, rho={self.rho}")
        if not (self.L >= 0 and self.M >= 0):
            raise DomainError(f"stopping parameters need L, M >= 0, got L={self.L}, M={self.M}")

    def threshold(self, times: np.ndarray, initial_norm: np.ndarray) -> np.ndarray:
        return (self.K + self.L) * times[:, None] + self.rho + self.M * initial_norm[None, :]


@dataclass(frozen=True)
class StoppingTime:
    """
    First sample time a criterion held, or inf.

    `triggered` is False when nothing happened within `horizon`; tables
    encode that case as horizon + 1.
    """
    time: float
    triggered: bool
    horizon: float

    @property
    def encoded(self) -> float:
        return self.time if self.triggered else self.horizon + 1.0


def first_crossing(times: np.ndarray, hits: np.ndarray) -> np.ndarray:
    """First time per column where `hits` is True, inf otherwise."""
    any_hit = hits.any(axis=0)
    first = np.argmax(hits, axis=0)
    return np.where(any_hit, times[first], np.inf)


def stopping_times(energy: EnergyRecord, sp: StoppingParams) -> np.ndarray:
    hits = energy.E_psi >= sp.threshold(energy.times, energy.initial_norm)
    return first_crossing(energy.times, hits)


def stopping_tau(energy: EnergyRecord, sp: StoppingParams, row: int = 0) -> StoppingTime:
    """
    tau = first t with E_psi(t) >= (K + L) t + rho + M ||u(0)||^2.

    Args:
        energy: energy record covering [0, horizon]
        sp: threshold parameters
        row: trajectory within the batch

    Returns:
        StoppingTime
    """
    value = float(stopping_times(energy, sp)[row])
    return StoppingTime(value, bool(np.isfinite(value)), float(energy.times[-1]))


def unweighted_energy_constants(params: PhysParams, spec: NoiseSpec):
    """
    Explicit (K1, gamma1) of the exponential tail of E_u.

    P{sup_t (E_u(t) - K1 t) >= E_u(0) + rho} <= exp(-gamma1 rho) with
    gamma1 = c / (4 B1), K1 = 2 ||h||^2 / c + B1 and c = a ∧ Re(nu).
    """
    c = params.damping_floor
    h_sq = l2_norm(params.h) ** 2
    K1 = 2.0 * h_sq / c + spec.B1
    gamma1 = np.inf if spec.B1 == 0 else c / (4.0 * spec.B1)
    return K1, gamma1


def calibrate_stopping_params(energy: EnergyRecord, rho: float, L: float = 1.0,
                              M: float = 4.0, factor: float = 1.5) -> StoppingParams:
    """K = factor x the median per-path least-squares slope of E_psi."""
    model = LinearRegression().fit(energy.times[:, None], energy.E_psi)
    slopes = np.atleast_1d(model.coef_.ravel())
    K = factor * float(np.median(slopes))
    if K <= 0:
        logger.warning(f"⚠️ median E_psi slope is {K / factor:.3g}; falling back to K = 1e-6")
        K = 1e-6
    logger.info(f"calibrated K = {K:.6g} from {len(slopes)} pilot paths")
    return StoppingParams(K=K, L=L, M=M, rho=rho)


def truncation_constant(truncated: EnergyRecord, full: EnergyRecord, K3: float) -> np.ndarray:
    """
    Smallest C per path with E_psi_trunc(t) - C K3 t <= C sup_s (E_psi(s) - K3 s).
    """
    excess = np.max(full.E_psi - K3 * full.times[:, None], axis=0)
    ratio = truncated.E_psi / (K3 * truncated.times[:, None] + excess[None, :])
    return np.max(ratio, axis=0)


def novikov_integrand(u: np.ndarray, v: np.ndarray, t: float, tau, integrator,
                      basis: Basis, N: int) -> np.ndarray:
    """
    A(t) = -1_{t <= tau} P_N[alpha(|u|^q u - |v|^q v) - nu d_xx (u - v)].

    Args:
        u, v: (batch, n) time-aligned samples
        t: common time
        tau: stopping time, scalar or per row
        integrator: CGLIntegrator carrying the parameters
        basis: projection basis
        N: projection rank

    Returns:
        (batch, n) control field, zero on rows with t > tau
    """
    if u.shape != v.shape:
        raise GridMismatchError("novikov integrand needs time-aligned states of equal shape")
    check_rank(basis, N)
    active = np.broadcast_to(t <= np.asarray(tau, dtype=float), (u.shape[0],))
    control = integrator.control(u, v, basis, N)
    return np.where(active[:, None], control, 0.0)


class NovikovLedger:
    """
    Running Girsanov bookkeeping for a batch of controlled paths.

    Per mode j <= N it keeps the Ito sum sum a_j dW_j (left point) and the
    quadratic sum sum a_j^2 dt with a_j = <A, e_j>, plus the trapezoid
    integral of ||A||^2. Ledgers over adjacent intervals add up.
    """

    def __init__(self, batch: int, N: int, dt: float, basis: Basis):
        check_rank(basis, N)
        self.N = N
        self.dt = dt
        self.basis = basis
        self.ito = np.zeros((batch, N))
        self.quadratic = np.zeros((batch, N))
        self.integral = np.zeros(batch)
        self.last_sq: Optional[np.ndarray] = None
        self.last_control: Optional[np.ndarray] = None
        self.steps = 0
        self.closed = False

    def _record_point(self, control: np.ndarray):
        sq = norm_sq(control, self.basis.grid)
        if self.last_sq is not None:
            self.integral = self.integral + 0.5 * self.dt * (self.last_sq + sq)
        self.last_sq = sq
        self.last_control = control

    def update(self, control: np.ndarray, increments: Optional[np.ndarray]):
        """Account for one step: control at the step start, noise increment of the step."""
        # after close() the start point of this step is already on the books
        if self.closed:
            self.closed = False
        else:
            self._record_point(control)
        coeffs = np.real(self.basis.coefficients(control, self.N))
        if increments is not None:
            self.ito = self.ito + coeffs * increments[..., :self.N]
        self.quadratic = self.quadratic + coeffs ** 2 * self.dt
        self.steps += 1

    def close(self, control: np.ndarray):
        """Add the last trapezoid panel with the control at the end time."""
        if not self.closed:
            self._record_point(control)
            self.closed = True

    def merge(self, other: "NovikovLedger") -> "NovikovLedger":
        merged = NovikovLedger(self.ito.shape[0], self.N, self.dt, self.basis)
        merged.ito = self.ito + other.ito
        merged.quadratic = self.quadratic + other.quadratic
        merged.integral = self.integral + other.integral
        merged.last_sq = other.last_sq
        merged.last_control = other.last_control
        merged.steps = self.steps + other.steps
        merged.closed = other.closed
        return merged


def girsanov_log_density(ledger: NovikovLedger, spec: NoiseSpec) -> np.ndarray:
    """
    Discrete exponent sum_j (1/b_j^2) sum a_j dW_j - 1/2 sum_j (1/b_j^2) sum a_j^2 dt.

    Args:
        ledger: accumulated ledger
        spec: noise spec; every controlled mode needs b_j > 0

    Returns:
        Log likelihood ratio per path
    """
    spec.require_active(ledger.N)
    inv_sq = 1.0 / spec.coefficients[:ledger.N] ** 2
    return ledger.ito @ inv_sq - 0.5 * (ledger.quadratic @ inv_sq)


def total_variation_bound(integrals: np.ndarray, spec: NoiseSpec, N: int) -> float:
    """
    1/2 ((E exp(6 sup_{j<=N} b_j^-2 int ||A||^2))^(1/2) - 1)^(1/2), a diagnostic.
    """
    spec.require_active(N)
    scale = 6.0 / float(np.min(spec.coefficients[:N]) ** 2)
    with np.errstate(over="ignore"):
        moment = float(np.mean(np.exp(scale * np.asarray(integrals))))
    return 0.5 * np.sqrt(max(np.sqrt(moment) - 1.0, 0.0))
