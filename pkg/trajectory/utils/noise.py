"""
Noise model: trigonometric basis, coefficient sequence b_j and
reproducible Wiener increments for eta = sum_j b_j beta_j(t) e_j(x).
"""
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np
from scipy.special import zeta

from trajectory.utils.errors import DomainError, GridMismatchError, PreconditionError
from trajectory.utils.grid_space import (
    Basis,
    Field,
    Grid,
    inner,
    norm_sq,
    phi_weight,
    spectral_derivative,
)

logger = logging.getLogger(__name__)

_U64 = (1 << 64) - 1


def make_basis(grid: Grid, M: int) -> Basis:
    """
    Real trigonometric modes with unit L2 norm, ordered by increasing |k|.

    The constant mode comes first, then cos/sin pairs at each frequency.

    Args:
        grid: grid to sample on
        M: number of modes, at most n/2 - 1

    Returns:
        Basis with M rows
    """
    if not 1 <= M <= grid.n // 2 - 1:
        raise DomainError(f"basis size M = {M} must lie in 1..n/2-1 = {grid.n // 2 - 1}")
    X = grid.half_width
    frequencies = (np.arange(M) + 1) // 2
    wavenumbers = np.pi * frequencies / X
    modes = np.empty((M, grid.n))
    modes[0] = 1.0 / np.sqrt(2.0 * X)
    for j in range(1, M):
        phase = wavenumbers[j] * grid.x
        modes[j] = (np.cos(phase) if j % 2 else np.sin(phase)) / np.sqrt(X)
    for array in (modes, wavenumbers, frequencies):
        array.setflags(write=False)
    return Basis(grid, modes, wavenumbers, frequencies)


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """
    Coefficients b_j of the retained modes and the summability constants.

    Attributes:
        coefficients: b_1..b_M
        p: decay exponent of the power law, None for explicit lists
        b0: amplitude of the power law, None for explicit lists
        B1: sum b_j^2
        B2: sum b_j^2 ||phi e_j||^2 on the grid, None without a basis
        B3: sum b_j^2 ||d/dx e_j||^2 on the grid, None without a basis
        kind: basis family
    """
    coefficients: np.ndarray
    p: Optional[float]
    b0: Optional[float]
    B1: float
    B2: Optional[float] = None
    B3: Optional[float] = None
    kind: str = "trigonometric"

    @property
    def M(self) -> int:
        return len(self.coefficients)

    def require_active(self, N: int):
        """Every controlled mode j <= N must carry noise."""
        if N > self.M:
            raise PreconditionError(f"control rank N = {N} exceeds the {self.M} noise modes")
        silent = np.flatnonzero(self.coefficients[:N] <= 0)
        if silent.size:
            j = int(silent[0]) + 1
            raise PreconditionError(
                f"noise must act on every controlled mode: b_{j} = 0 but N = {N}"
            )


def _grid_constants(coefficients: np.ndarray, basis: Basis):
    M = len(coefficients)
    if M > len(basis):
        raise GridMismatchError(f"{M} coefficients but only {len(basis)} basis modes")
    modes = basis.modes[:M]
    weight = phi_weight(basis.grid).phi
    b_sq = coefficients ** 2
    B2 = float(np.sum(b_sq * norm_sq(weight * modes, basis.grid)))
    B3 = float(np.sum(b_sq * norm_sq(spectral_derivative(modes, basis.grid), basis.grid)))
    return B2, B3


def make_coefficients(b0: float, p: float, M: int, basis: Optional[Basis] = None) -> NoiseSpec:
    """
    Power-law coefficients b_j = b0 (1 + j)^(-p), j = 1..M.

    Args:
        b0: amplitude, positive
        p: decay exponent, p > 3/2
        M: number of modes
        basis: when given, B2 and B3 are evaluated on its grid

    Returns:
        NoiseSpec
    """
    if not b0 > 0:
        raise DomainError(f"noise amplitude b0 = {b0} must be positive")
    if not p > 1.5:
        raise DomainError(
            f"decay exponent p = {p} <= 3/2: the series B3 = sum b_j^2 k_j^2 diverges"
        )
    coefficients = b0 * (1.0 + np.arange(1, M + 1)) ** (-p)
    return _build_spec(coefficients, p, b0, basis)


def from_coefficients(coefficients: Sequence[float], basis: Optional[Basis] = None) -> NoiseSpec:
    coefficients = np.asarray(coefficients, dtype=float)
    if np.any(coefficients < 0) or not np.all(np.isfinite(coefficients)):
        raise DomainError("noise coefficients must be finite and nonnegative")
    return _build_spec(coefficients, None, None, basis)


def _build_spec(coefficients: np.ndarray, p, b0, basis: Optional[Basis]) -> NoiseSpec:
    coefficients.setflags(write=False)
    B1 = float(np.sum(coefficients ** 2))
    B2 = B3 = None
    if basis is not None:
        B2, B3 = _grid_constants(coefficients, basis)
    return NoiseSpec(coefficients, p, b0, B1, B2, B3)


def series_report(spec: NoiseSpec) -> dict:
    """Finite-M constants next to the idealised infinite series."""
    report = {"M": spec.M, "B1": spec.B1, "B2": spec.B2, "B3": spec.B3}
    if spec.p is not None:
        report["B1_series"] = float(spec.b0 ** 2 * (zeta(2 * spec.p) - 1.0))
        report["tail"] = float(spec.b0 ** 2 * zeta(2 * spec.p, spec.M + 2))
    else:
        report["B1_series"] = spec.B1
        report["tail"] = 0.0
    return report


def forcing_summability(h: Field, basis: Basis, share: float = 1e-3) -> np.ndarray:
    """
    Partial sums of sum_j |<h, e_j>| ||e_j||_{H^1}.

    Logs a warning when the last decile of terms still carries more than
    `share` of the total.
    """
    terms = np.array([abs(inner(h, basis[j])) for j in range(len(basis))])
    terms *= np.sqrt(1.0 + basis.wavenumbers ** 2)
    partial = np.cumsum(terms)
    total = partial[-1]
    decile = max(1, len(terms) // 10)
    if total > 0 and np.sum(terms[-decile:]) > share * total:
        logger.warning(
            f"⚠️ forcing series not settled: last {decile} modes carry "
            f"{np.sum(terms[-decile:]) / total:.2e} of sum |<h,e_j>| ||e_j||_H1"
        )
    return partial


class StreamRole(IntEnum):
    PRIMARY = 0
    PARTNER = 1
    PILOT = 2
    REFERENCE = 3


def stream_id(path_index: int, role: StreamRole) -> int:
    return path_index * len(StreamRole) + int(role)


@dataclass(frozen=True)
class NoiseStream:
    """Counter-based normal draws keyed by (seed, stream id, step)."""
    seed: int
    stream: int

    def normals(self, step: int, size: int) -> np.ndarray:
        key = np.array([self.seed & _U64, self.stream & _U64], dtype=np.uint64)
        counter = np.array([0, step, 0, 0], dtype=np.uint64)
        generator = np.random.Generator(np.random.Philox(key=key, counter=counter))
        return generator.standard_normal(size)


@dataclass(frozen=True, eq=False)
class WienerIncrement:
    """Standard normal draws g_j (shape (..., M)) scaled into b_j sqrt(dt) g_j."""
    dt: float
    draws: np.ndarray
    coefficients: np.ndarray

    @property
    def increments(self) -> np.ndarray:
        return self.coefficients * np.sqrt(self.dt) * self.draws


def sample_increment(spec: NoiseSpec, dt: float, stream: NoiseStream, step: int) -> WienerIncrement:
    if not dt > 0:
        raise DomainError(f"time step dt = {dt} must be positive")
    return WienerIncrement(dt, stream.normals(step, spec.M), spec.coefficients)


def sample_increments(spec: NoiseSpec, dt: float, streams: Sequence[NoiseStream],
                      step: int) -> WienerIncrement:
    """One increment per stream, stacked row-wise."""
    if not dt > 0:
        raise DomainError(f"time step dt = {dt} must be positive")
    draws = np.stack([stream.normals(step, spec.M) for stream in streams])
    return WienerIncrement(dt, draws, spec.coefficients)


def noise_values(increments: np.ndarray, basis: Basis) -> np.ndarray:
    """sum_j dW_j e_j along the last axis of an increment block."""
    if increments.shape[-1] > len(basis):
        raise GridMismatchError(
            f"increment has {increments.shape[-1]} modes, basis only {len(basis)}"
        )
    return basis.synthesize(increments).astype(np.complex128)


def assemble_noise_field(increment: WienerIncrement, basis: Basis) -> Field:
    increments = increment.increments
    if increments.ndim != 1:
        raise GridMismatchError("assemble_noise_field takes a single increment")
    return Field(basis.grid, noise_values(increments, basis))
