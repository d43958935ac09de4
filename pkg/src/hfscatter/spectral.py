"""Uniform periodic grids, the unitary Fourier transform and the free propagator.

Position arrays are stored in natural order (nodes ascending from ``-L``) and
frequency arrays centred (``xi`` ascending from ``-pi M / (2L)``).  The Fourier
convention is

    (F u)(xi) = (2 pi)^(-n/2) * integral exp(-i x.xi) u(x) dx

discretised with weight ``h^n`` so that the discrete transform is unitary with
respect to the weighted norms ``h^(n/2) |u|_2`` and ``(pi/L)^(n/2) |u_hat|_2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "GridSpec",
    "Grid",
    "ComplexField",
    "S0State",
    "make_grid",
    "fourier",
    "inverse_fourier",
    "free_propagate",
    "l2_norm",
    "inner",
    "s0_state",
]

POSITION = "position"
FREQUENCY = "frequency"


def _is_power_of_two(m: int) -> bool:
    return m > 0 and (m & (m - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid on ``[-L, L)^n`` with ``M`` points per axis."""

    dim: int
    points_per_axis: int
    half_width: float

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        m = self.points_per_axis
        if not isinstance(m, (int, np.integer)) or m < 8 or not _is_power_of_two(int(m)):
            raise ValueError(f"points_per_axis must be a power of two >= 8, got {m}")
        if not np.isfinite(self.half_width) or self.half_width <= 0:
            raise ValueError(f"half_width must be positive, got {self.half_width}")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.points_per_axis

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.points_per_axis**self.dim

    @property
    def weight(self) -> float:
        """Position-space quadrature weight ``h^n``."""
        return self.spacing**self.dim

    @property
    def freq_step(self) -> float:
        return np.pi / self.half_width

    @property
    def freq_weight(self) -> float:
        """Frequency-space quadrature weight ``(pi/L)^n``."""
        return self.freq_step**self.dim

    @property
    def nyquist(self) -> float:
        return np.pi / self.spacing

    @property
    def stability_dt(self) -> float:
        """Advisory time step budget ``h^2 / pi``."""
        return self.spacing**2 / np.pi

    def axis(self) -> np.ndarray:
        m = self.points_per_axis
        return -self.half_width + self.spacing * np.arange(m)

    def freq_axis(self) -> np.ndarray:
        m = self.points_per_axis
        return self.freq_step * np.arange(-m // 2, m // 2)


@dataclass(frozen=True, eq=False)
class Grid:
    """Materialised nodes and weights for a :class:`GridSpec`."""

    spec: GridSpec

    @cached_property
    def nodes(self) -> np.ndarray:
        """Position nodes, shape ``(*spec.shape, n)``."""
        ax = self.spec.axis()
        mesh = np.meshgrid(*([ax] * self.spec.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def freq_nodes(self) -> np.ndarray:
        """Centred frequency nodes, shape ``(*spec.shape, n)``."""
        ax = self.spec.freq_axis()
        mesh = np.meshgrid(*([ax] * self.spec.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(np.sum(self.nodes**2, axis=-1))

    @cached_property
    def freq_radius(self) -> np.ndarray:
        return np.sqrt(np.sum(self.freq_nodes**2, axis=-1))

    @cached_property
    def k2_fft(self) -> np.ndarray:
        """``|xi|^2`` in FFT (unshifted) ordering, for multipliers."""
        k = 2.0 * np.pi * np.fft.fftfreq(self.spec.points_per_axis, d=self.spec.spacing)
        mesh = np.meshgrid(*([k] * self.spec.dim), indexing="ij", sparse=True)
        return sum(c**2 for c in mesh)

    @cached_property
    def k_fft(self) -> tuple[np.ndarray, ...]:
        k = 2.0 * np.pi * np.fft.fftfreq(self.spec.points_per_axis, d=self.spec.spacing)
        return tuple(np.meshgrid(*([k] * self.spec.dim), indexing="ij", sparse=True))

    @property
    def weight(self) -> float:
        return self.spec.weight

    @property
    def freq_weight(self) -> float:
        return self.spec.freq_weight

    def free_multiplier(self, t: float) -> np.ndarray:
        """``exp(-i t |xi|^2 / 2)`` in FFT ordering."""
        return np.exp(-0.5j * t * self.k2_fft)


_GRID_CACHE: dict[GridSpec, Grid] = {}


def make_grid(spec: GridSpec) -> Grid:
    """Return the (cached) materialised grid for ``spec``."""
    if not isinstance(spec, GridSpec):
        raise TypeError("make_grid expects a GridSpec")
    grid = _GRID_CACHE.get(spec)
    if grid is None:
        grid = _GRID_CACHE[spec] = Grid(spec)
    return grid


@dataclass(eq=False)
class ComplexField:
    """Complex samples of a function on a grid, in position or frequency space."""

    grid: GridSpec
    values: np.ndarray
    space: str = POSITION

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.size != self.grid.size:
            raise ValueError(
                f"field has {self.values.size} values, grid expects {self.grid.size}"
            )
        self.values = self.values.reshape(self.grid.shape)
        if self.space not in (POSITION, FREQUENCY):
            raise ValueError(f"unknown space {self.space!r}")

    def copy(self) -> ComplexField:
        return ComplexField(self.grid, self.values.copy(), self.space)

    @property
    def norm(self) -> float:
        return l2_norm(self)


def _weight(f: ComplexField) -> float:
    return f.grid.weight if f.space == POSITION else f.grid.freq_weight


def l2_norm(f: ComplexField) -> float:
    """Quadrature-weighted L2 norm."""
    return float(np.sqrt(_weight(f) * np.vdot(f.values, f.values).real))


def inner(f: ComplexField, g: ComplexField) -> complex:
    """``<f, g> = integral f conj(g)``, linear in the first slot."""
    if f.space != g.space or f.grid != g.grid:
        raise ValueError("inner product needs fields on the same grid and space")
    return complex(_weight(f) * np.vdot(g.values, f.values))


def _fourier_array(u: np.ndarray, spec: GridSpec) -> np.ndarray:
    scale = spec.weight / (2.0 * np.pi) ** (spec.dim / 2)
    return scale * np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(u)))


def _inverse_fourier_array(uh: np.ndarray, spec: GridSpec) -> np.ndarray:
    scale = (2.0 * np.pi) ** (spec.dim / 2) / spec.weight
    return scale * np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(uh)))


def fourier(u: ComplexField) -> ComplexField:
    """Unitary Fourier transform of a position-space field."""
    if u.space != POSITION:
        raise ValueError("fourier expects a position-space field")
    return ComplexField(u.grid, _fourier_array(u.values, u.grid), FREQUENCY)


def inverse_fourier(uh: ComplexField) -> ComplexField:
    if uh.space != FREQUENCY:
        raise ValueError("inverse_fourier expects a frequency-space field")
    return ComplexField(uh.grid, _inverse_fourier_array(uh.values, uh.grid), POSITION)


def propagate_array(u: np.ndarray, grid: Grid, t: float) -> np.ndarray:
    """Free evolution of position-space samples over the trailing ``n`` axes."""
    axes = tuple(range(-grid.spec.dim, 0))
    return np.fft.ifftn(grid.free_multiplier(t) * np.fft.fftn(u, axes=axes), axes=axes)


def free_propagate(u: ComplexField, t: float) -> ComplexField:
    """Apply ``U_0(t) = exp(-i t H_0)``, ``H_0 = -Laplacian / 2``."""
    grid = make_grid(u.grid)
    if u.space == FREQUENCY:
        mult = np.exp(-0.5j * t * grid.freq_radius**2)
        return ComplexField(u.grid, mult * u.values, FREQUENCY)
    return ComplexField(u.grid, propagate_array(u.values, grid, t), POSITION)


@dataclass(eq=False)
class S0State:
    """A position-space field whose spectrum is negligible outside ``band_radius``."""

    field: ComplexField
    band_radius: float = field(default=np.inf)

    def __post_init__(self):
        if self.field.space != POSITION:
            raise ValueError("S0State holds a position-space field")


def s0_state(u: ComplexField, rel_tol: float = 1e-12) -> S0State:
    """Wrap ``u`` as an :class:`S0State`, measuring its numerical band radius.

    Raises if the spectrum is not below ``rel_tol * max`` on the outermost
    frequency shell, i.e. if ``u`` is not resolved by the grid.
    """
    uh = np.abs(fourier(u).values)
    peak = uh.max()
    grid = make_grid(u.grid)
    if peak == 0.0:
        return S0State(u, 0.0)
    significant = uh >= rel_tol * peak
    band = float(grid.freq_radius[significant].max())
    edge = np.max(np.abs(grid.freq_nodes), axis=-1) >= u.grid.nyquist - 0.5 * u.grid.freq_step
    if np.any(significant & edge):
        raise ValueError(
            f"field is not band limited on this grid: spectrum reaches the Nyquist shell "
            f"above {rel_tol:g} of its peak"
        )
    return S0State(u, band)
