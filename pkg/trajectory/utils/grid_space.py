"""
Discrete function spaces on the truncated periodic domain [-X, X).

Fields are complex grid functions; norms, Sobolev multipliers, the space
weights phi/psi, the smooth cutoff chi_A and the finite dimensional
projections P_N / Q_N all live here.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, List, Optional, Sequence

import numpy as np

from trajectory.utils.errors import DomainError, GridMismatchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    """
    Periodic grid on [-X, X) with n nodes.

    Args:
        half_width: X, half the domain length
        n: number of nodes, a power of two not below 64
    """
    half_width: float
    n: int

    def __post_init__(self):
        if self.n < 64 or self.n & (self.n - 1):
            raise DomainError(f"grid size n = {self.n} must be a power of two with n >= 64")
        if not self.half_width > 0:
            raise DomainError(f"half width X = {self.half_width} must be positive")

    @property
    def dx(self) -> float:
        return 2.0 * self.half_width / self.n

    @cached_property
    def x(self) -> np.ndarray:
        nodes = -self.half_width + self.dx * np.arange(self.n)
        nodes.setflags(write=False)
        return nodes

    @cached_property
    def k(self) -> np.ndarray:
        """Wavenumbers pi*m/X in FFT order, m = 0..n/2-1, -n/2..-1."""
        wavenumbers = np.pi * np.fft.fftfreq(self.n, d=1.0 / self.n) / self.half_width
        wavenumbers.setflags(write=False)
        return wavenumbers


@dataclass(frozen=True, eq=False)
class Field:
    """Complex samples of a function on a grid."""
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128)
        if values.shape != (self.grid.n,):
            raise GridMismatchError(
                f"field has shape {values.shape}, grid expects ({self.grid.n},)"
            )
        if not np.all(np.isfinite(values)):
            raise DomainError("field samples must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.n, dtype=np.complex128))

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> "Field":
        return cls(grid, fn(grid.x))

    def _coerce(self, other: "Field") -> np.ndarray:
        _check_same_grid(self, other)
        return other.values

    def __add__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values + self._coerce(other))

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values - self._coerce(other))

    def __mul__(self, scalar: complex) -> "Field":
        return Field(self.grid, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "Field":
        return Field(self.grid, -self.values)


def _check_same_grid(f: Field, g: Field):
    if f.grid != g.grid:
        raise GridMismatchError(f"fields live on different grids: {f.grid} vs {g.grid}")


# Array kernels. They act on the last axis so a (batch, n) block of
# trajectories goes through the same code as a single field.

def norm_sq(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Squared L2 norm along the last axis."""
    return grid.dx * np.sum(np.abs(values) ** 2, axis=-1)


def spectral_norm_sq(spectrum: np.ndarray, grid: Grid, s: float) -> np.ndarray:
    """Squared H^s norm from an already transformed field (numpy FFT convention)."""
    weights = (1.0 + grid.k ** 2) ** s
    return grid.dx / grid.n * np.sum(weights * np.abs(spectrum) ** 2, axis=-1)


def spectral_derivative(values: np.ndarray, grid: Grid, order: int = 1) -> np.ndarray:
    symbol = (1j * grid.k) ** order
    if order % 2:
        # odd derivatives of the Nyquist mode are not representable
        symbol = symbol.copy()
        symbol[grid.n // 2] = 0.0
    return np.fft.ifft(symbol * np.fft.fft(values, axis=-1), axis=-1)


def inner(f: Field, g: Field) -> float:
    """
    Real inner product Re sum f conj(g) dx.

    Args:
        f: first field
        g: second field, on the same grid

    Returns:
        The inner product as a float
    """
    _check_same_grid(f, g)
    return float(np.real(np.vdot(g.values, f.values)) * f.grid.dx)


def l2_norm(f: Field) -> float:
    return float(np.sqrt(norm_sq(f.values, f.grid)))


def sobolev_norm(f: Field, s: float) -> float:
    """
    H^s norm through the DFT multiplier (1 + k^2)^(s/2).

    Args:
        f: field to measure
        s: Sobolev index in [-2, 2]

    Returns:
        The norm; s = 0 is the L2 norm
    """
    if not -2.0 <= s <= 2.0:
        raise DomainError(f"Sobolev index s = {s} outside [-2, 2]")
    if s == 0:
        return l2_norm(f)
    spectrum = np.fft.fft(f.values)
    return float(np.sqrt(spectral_norm_sq(spectrum, f.grid, s)))


def derivative(f: Field, order: int = 1) -> Field:
    return Field(f.grid, spectral_derivative(f.values, f.grid, order))


@dataclass(frozen=True, eq=False)
class WeightTable:
    """Samples of phi(x) = log(x^2 + 2); psi(t, x) is evaluated on demand."""
    grid: Grid
    phi: np.ndarray

    def psi(self, t: float) -> np.ndarray:
        """psi(t, x) = phi(x)(1 - exp(-t/phi(x))) as a real array."""
        if t < 0:
            raise DomainError(f"psi needs t >= 0, got t = {t}")
        return -self.phi * np.expm1(-t / self.phi)


def phi_weight(grid: Grid) -> WeightTable:
    phi = np.log(grid.x ** 2 + 2.0)
    phi.setflags(write=False)
    return WeightTable(grid, phi)


def psi_weight(table: WeightTable, t: float) -> Field:
    return Field(table.grid, table.psi(t))


def _smooth_step(y: np.ndarray) -> np.ndarray:
    """C-infinity ramp from 0 (y <= 0) to 1 (y >= 1)."""
    y = np.clip(y, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        rise = np.where(y > 0, np.exp(-1.0 / np.where(y > 0, y, 1.0)), 0.0)
        fall = np.where(y < 1, np.exp(-1.0 / np.where(y < 1, 1.0 - y, 1.0)), 0.0)
    return rise / (rise + fall)


def cutoff_chi(A: float, grid: Grid) -> Field:
    """
    Smooth cutoff equal to 1 on [-A/2, A/2] and 0 outside [-A, A].

    The ramp on A/2 <= |x| <= A is the exp(-1/y) smooth step: C-infinity,
    with every derivative vanishing at both ends. Its values are fixed and
    must not change between versions.

    Args:
        A: cutoff radius, 0 < A <= 2X
        grid: grid to sample on

    Returns:
        Real valued field with values in [0, 1]
    """
    if not 0 < A <= 2 * grid.half_width:
        raise DomainError(f"cutoff radius A = {A} must satisfy 0 < A <= 2X = {2 * grid.half_width}")
    y = (A - np.abs(grid.x)) / (A / 2.0)
    return Field(grid, _smooth_step(y))


@dataclass(frozen=True, eq=False)
class Basis:
    """
    Real orthonormal modes stored row-wise.

    Attributes:
        grid: grid the modes are sampled on
        modes: (M, n) real array, rows orthonormal under inner()
        wavenumbers: |k_j| per row, nondecreasing
        frequencies: integer frequency index m_j per row
    """
    grid: Grid
    modes: np.ndarray
    wavenumbers: np.ndarray
    frequencies: np.ndarray

    def __len__(self) -> int:
        return self.modes.shape[0]

    def __getitem__(self, j: int) -> Field:
        return Field(self.grid, self.modes[j])

    def coefficients(self, values: np.ndarray, N: Optional[int] = None) -> np.ndarray:
        """Complex modal amplitudes int f e_j dx along the last axis."""
        modes = self.modes if N is None else self.modes[:N]
        return self.grid.dx * np.einsum("...n,jn->...j", values, modes)

    def synthesize(self, coefficients: np.ndarray) -> np.ndarray:
        M = coefficients.shape[-1]
        return np.einsum("...j,jn->...n", coefficients, self.modes[:M])


def check_rank(basis: Basis, N: int):
    if not 1 <= N <= len(basis):
        raise DomainError(f"projection rank N = {N} outside 1..{len(basis)}")


def project_values(values: np.ndarray, basis: Basis, N: int) -> np.ndarray:
    """P_N along the last axis: sum_j <f, e_j> e_j with the real inner product."""
    coeffs = np.real(basis.coefficients(values, N))
    return basis.synthesize(coeffs).astype(np.complex128)


def project_PN(f: Field, basis: Basis, N: int) -> Field:
    """
    Orthogonal projection onto the span of the first N basis modes.

    Args:
        f: field to project
        basis: orthonormal basis on the same grid
        N: number of retained modes

    Returns:
        P_N f
    """
    check_rank(basis, N)
    if f.grid != basis.grid:
        raise GridMismatchError("field and basis live on different grids")
    return Field(f.grid, project_values(f.values, basis, N))


def project_QN(f: Field, basis: Basis, N: int) -> Field:
    return f - project_PN(f, basis, N)


def modal_coefficients(f: Field, basis: Basis, N: int) -> np.ndarray:
    check_rank(basis, N)
    return basis.coefficients(f.values, N)


def truncated_poincare_epsilon(N: int, A: float, s: float,
                               samples: Sequence[Field], basis: Basis) -> float:
    """
    Largest ratio ||Q_N(chi_A f)|| / ||f||_{H^s} over a sample set.

    Args:
        N: projection rank
        A: cutoff radius
        s: positive Sobolev index
        samples: nonzero fields
        basis: basis defining Q_N

    Returns:
        Empirical lower estimate of the smallest valid epsilon
    """
    if not samples:
        raise DomainError("truncated Poincare sweep needs at least one sample")
    if s <= 0:
        raise DomainError(f"Sobolev index s = {s} must be positive")
    check_rank(basis, N)
    chi = cutoff_chi(A, basis.grid).values.real
    block = np.stack([f.values for f in samples])
    cut = chi * block
    tail = cut - project_values(cut, basis, N)
    denominators = np.sqrt(spectral_norm_sq(np.fft.fft(block, axis=-1), basis.grid, s))
    if np.any(denominators == 0):
        raise DomainError("samples must be nonzero in H^s")
    ratios = np.sqrt(norm_sq(tail, basis.grid)) / denominators
    return float(np.max(ratios))


def random_band_limited(grid: Grid, rng: np.random.Generator, k_max: float,
                        count: int, real: bool = True) -> List[Field]:
    """Random unit-norm fields whose spectrum vanishes above k_max."""
    band = np.abs(grid.k) <= k_max
    spectra = (rng.standard_normal((count, grid.n)) + 1j * rng.standard_normal((count, grid.n))) * band
    block = np.fft.ifft(spectra, axis=-1)
    if real:
        block = block.real.astype(np.complex128)
    block /= np.sqrt(norm_sq(block, grid))[:, None]
    return [Field(grid, row) for row in block]
