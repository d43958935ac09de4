"""Hartree and Fock terms, Strang-split propagation and conservation diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .potentials import PotentialModel, eval_potential, sample_potential
from .spectral import FREQUENCY, POSITION, ComplexField, GridSpec, make_grid

__all__ = [
    "OrbitalSet",
    "StepperConfig",
    "InteractionKernel",
    "ExternalField",
    "HFPropagator",
    "NumericalInstabilityError",
    "hartree_term",
    "fock_term",
    "rhs_P",
    "step",
    "pseudo_conformal_diagnostic",
    "pseudo_conformal_terms",
    "decay_envelope_check",
    "virial_functional",
    "DecayFit",
]

InteractionLike = Union[PotentialModel, ComplexField, None]


class NumericalInstabilityError(FloatingPointError):
    def __init__(self, orbital: int, time: float):
        super().__init__(f"non-finite values in orbital {orbital} at t = {time:.6g}")
        self.orbital = orbital
        self.time = time


@dataclass
class OrbitalSet:
    """``N`` orbitals on one grid at time ``time``; ``orbitals`` has shape ``(N, *grid.shape)``."""

    grid: GridSpec
    orbitals: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.orbitals, dtype=complex)
        if arr.ndim == self.grid.dim:
            arr = arr[None]
        if arr.shape[1:] != self.grid.shape:
            raise ValueError(f"orbitals have shape {arr.shape[1:]}, grid is {self.grid.shape}")
        self.orbitals = arr

    @classmethod
    def from_fields(cls, fields: Sequence[ComplexField], time: float = 0.0) -> OrbitalSet:
        grids = {f.grid for f in fields}
        if len(grids) != 1:
            raise ValueError("all orbitals must share one grid")
        if any(f.space != POSITION for f in fields):
            raise ValueError("orbitals are stored in position space")
        return cls(fields[0].grid, np.stack([f.values for f in fields]), time)

    @property
    def count(self) -> int:
        return self.orbitals.shape[0]

    def field(self, j: int) -> ComplexField:
        return ComplexField(self.grid, self.orbitals[j], POSITION)

    def fields(self) -> list[ComplexField]:
        return [self.field(j) for j in range(self.count)]

    def norms(self) -> np.ndarray:
        axes = tuple(range(1, self.orbitals.ndim))
        return np.sqrt(self.grid.weight * np.sum(np.abs(self.orbitals) ** 2, axis=axes))


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    scheme: str = "strang"
    dealias: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.scheme != "strang":
            raise ValueError(f"unknown scheme {self.scheme!r}")


class InteractionKernel:
    """Periodic convolution with ``V_int`` as an FFT multiplier.

    Built either from a model (sampled on the grid, wrapped so the origin sits
    at index 0) or from a frequency-space ``V_hat`` field, in which case the
    multiplier is ``(2 pi)^(n/2) V_hat``.
    """

    def __init__(self, v_int: InteractionLike, grid: GridSpec, dealias: bool = False):
        self.grid = grid
        g = make_grid(grid)
        self.axes = tuple(range(-grid.dim, 0))
        if v_int is None or (isinstance(v_int, PotentialModel) and v_int.is_zero):
            self.multiplier = None
        elif isinstance(v_int, PotentialModel):
            samples = np.fft.ifftshift(sample_potential(v_int, grid))
            self.multiplier = np.fft.fftn(samples) * grid.weight
        else:
            if v_int.space != FREQUENCY or v_int.grid != grid:
                raise ValueError("V_hat must be a frequency-space field on the propagation grid")
            if not np.any(v_int.values):
                self.multiplier = None
            else:
                self.multiplier = (2 * np.pi) ** (grid.dim / 2) * np.fft.ifftshift(v_int.values)
        if self.multiplier is not None and dealias:
            kmax = grid.nyquist
            mask = np.ones(grid.shape, dtype=bool)
            for k in g.k_fft:
                mask = mask & (np.abs(k) < (2.0 / 3.0) * kmax)
            self.multiplier = self.multiplier * mask

    @property
    def is_zero(self) -> bool:
        return self.multiplier is None

    def __call__(self, f: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(self.multiplier * np.fft.fftn(f, axes=self.axes), axes=self.axes)


class ExternalField:
    """Samples of ``V_ext(x + velocity * t)``; cached when the frame is at rest."""

    def __init__(self, v_ext: PotentialModel | None, grid: GridSpec, velocity=None):
        self.model = v_ext
        self.grid = grid
        self.velocity = None if velocity is None else np.asarray(velocity, dtype=float)
        if self.velocity is not None and not np.any(self.velocity):
            self.velocity = None
        self._static = None

    @property
    def is_zero(self) -> bool:
        return self.model is None or self.model.is_zero

    def at(self, t: float) -> np.ndarray | None:
        if self.is_zero:
            return None
        if self.velocity is None:
            if self._static is None:
                self._static = sample_potential(self.model, self.grid)
            return self._static
        return sample_potential(self.model, self.grid, shift=self.velocity * t)


def _hartree_fock(u: np.ndarray, kernel: InteractionKernel):
    """Return ``(Q_H, fock)`` with ``Q_H`` of shape ``(N, *grid)`` (real) and the Fock terms."""
    n_orb = u.shape[0]
    if kernel.is_zero or n_orb == 1:
        return None, None
    dens = [kernel(u[k].conj() * u[k]).real for k in range(n_orb)]
    q = np.empty(u.shape, dtype=float)
    fock = np.zeros_like(u)
    for j in range(n_orb):
        q[j] = sum(dens[k] for k in range(n_orb) if k != j)
    for j in range(n_orb):
        for k in range(j + 1, n_orb):
            c = kernel(u[j] * u[k].conj())
            fock[j] -= c * u[k]
            fock[k] -= c.conj() * u[j]
    return q, fock


class HFPropagator:
    """Strang splitting for the Hartree-Fock system on one grid.

    The nonlinear substep treats ``Q_H + V_ext`` as a frozen real multiplier
    (exact phase rotation) and the Fock coupling by a two-stage exponential
    midpoint rule.
    """

    def __init__(self, grid: GridSpec, v_int: InteractionLike, v_ext: PotentialModel | None,
                 cfg: StepperConfig, frame_velocity=None):
        self.grid = grid
        self.cfg = cfg
        self.kernel = InteractionKernel(v_int, grid, cfg.dealias)
        self.external = ExternalField(v_ext, grid, frame_velocity)
        self._g = make_grid(grid)
        self._half = self._g.free_multiplier(0.5 * cfg.dt)
        self._axes = tuple(range(-grid.dim, 0))

    @property
    def is_free(self) -> bool:
        return self.kernel.is_zero and self.external.is_zero

    def diagonal_and_fock(self, u: np.ndarray, t: float):
        q, fock = _hartree_fock(u, self.kernel)
        vext = self.external.at(t)
        if vext is not None:
            q = vext[None] if q is None else q + vext
        return q, fock

    def rhs(self, u: np.ndarray, t: float) -> np.ndarray:
        q, fock = self.diagonal_and_fock(u, t)
        out = np.zeros_like(u) if q is None else q * u
        if fock is not None:
            out = out + fock
        return out

    def _free_half(self, u: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(self._half * np.fft.fftn(u, axes=self._axes), axes=self._axes)

    def _nonlinear(self, u0: np.ndarray, t_mid: float) -> np.ndarray:
        dt = self.cfg.dt
        q0, f0 = self.diagonal_and_fock(u0, t_mid)
        if q0 is None and f0 is None:
            return u0
        if f0 is None:
            # Hartree and external terms preserve |u_j| pointwise: exact rotation.
            return np.exp(-1j * dt * q0) * u0
        uh = (u0 if q0 is None else np.exp(-0.5j * dt * q0) * u0) - 0.5j * dt * f0
        q1, f1 = self.diagonal_and_fock(uh, t_mid)
        if q1 is None:
            return u0 - 1j * dt * f1
        return np.exp(-1j * dt * q1) * u0 - 1j * dt * np.exp(-0.5j * dt * q1) * f1

    def advance(self, u: np.ndarray, t: float) -> np.ndarray:
        """One step from time ``t`` to ``t + dt``."""
        if self.is_free:
            return np.fft.ifftn(self._half**2 * np.fft.fftn(u, axes=self._axes), axes=self._axes)
        v = self._free_half(u)
        v = self._nonlinear(v, t + 0.5 * self.cfg.dt)
        v = self._free_half(v)
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(v.reshape(v.shape[0], -1)), axis=1))[0])
            raise NumericalInstabilityError(bad, t + self.cfg.dt)
        return v


def _check_index(u: OrbitalSet, j: int):
    if not 0 <= j < u.count:
        raise IndexError(f"orbital index {j} out of range for N = {u.count}")


def hartree_term(u: OrbitalSet, v_int: InteractionLike, j: int) -> ComplexField:
    """``Q_H u_j`` with ``Q_H = V_int * sum_{k != j} |u_k|^2``."""
    _check_index(u, j)
    q, _ = _hartree_fock(u.orbitals, InteractionKernel(v_int, u.grid))
    vals = np.zeros(u.grid.shape, complex) if q is None else q[j] * u.orbitals[j]
    return ComplexField(u.grid, vals)


def fock_term(u: OrbitalSet, v_int: InteractionLike, j: int) -> ComplexField:
    """``-sum_{k != j} [V_int * (u_j conj u_k)] u_k``."""
    _check_index(u, j)
    _, fock = _hartree_fock(u.orbitals, InteractionKernel(v_int, u.grid))
    vals = np.zeros(u.grid.shape, complex) if fock is None else fock[j]
    return ComplexField(u.grid, vals)


def rhs_P(u: OrbitalSet, v_int: InteractionLike, v_ext: PotentialModel | None, j: int) -> ComplexField:
    """``P_j = (Q_H + V_ext) u_j + Fock_j``."""
    _check_index(u, j)
    prop = HFPropagator(u.grid, v_int, v_ext, StepperConfig(1.0))
    return ComplexField(u.grid, prop.rhs(u.orbitals, u.time)[j])


def step(u: OrbitalSet, v_int: InteractionLike, v_ext: PotentialModel | None,
         cfg: StepperConfig) -> OrbitalSet:
    """One Strang step; returns a new :class:`OrbitalSet`."""
    prop = HFPropagator(u.grid, v_int, v_ext, cfg)
    return OrbitalSet(u.grid, prop.advance(u.orbitals, u.time), u.time + cfg.dt)


# --- diagnostics ----------------------------------------------------------------

def _gradient_fft(u: np.ndarray, grid: GridSpec) -> list[np.ndarray]:
    g = make_grid(grid)
    axes = tuple(range(-grid.dim, 0))
    uh = np.fft.fftn(u, axes=axes)
    return [np.fft.ifftn(1j * k * uh, axes=axes) for k in g.k_fft]


def _potential_energy(u: np.ndarray, kernel: InteractionKernel, vext: np.ndarray | None,
                      weight: float) -> float:
    """``sum_j int V_ext |u_j|^2 + 1/2 sum_{j != k} (direct - exchange)``."""
    e = 0.0
    if vext is not None:
        e += weight * float(np.sum(vext * np.abs(u) ** 2))
    if not kernel.is_zero and u.shape[0] > 1:
        n_orb = u.shape[0]
        dens = [np.abs(u[k]) ** 2 for k in range(n_orb)]
        for j in range(n_orb):
            for k in range(j + 1, n_orb):
                direct = np.sum(kernel(dens[k]).real * dens[j])
                pair = u[j] * u[k].conj()
                exch = np.sum(kernel(pair) * pair.conj()).real
                e += weight * (direct - exch)
    return e


def pseudo_conformal_terms(u: OrbitalSet, v_int: InteractionLike, v_ext: PotentialModel | None):
    """Return ``(|J u|^2 summed, potential energy P)`` at time ``u.time``.

    ``J = x + i t grad`` so that ``sum_j |grad v_j|^2 = sum_j |J u_j|^2`` for the
    rescaled orbitals ``v_j = (it)^(n/2) exp(-it|x|^2/2) u_j(t, t x)``.
    """
    grid = u.grid
    g = make_grid(grid)
    t = u.time
    grads = _gradient_fft(u.orbitals, grid)
    jnorm = 0.0
    for a, da in enumerate(grads):
        ja = g.nodes[..., a] * u.orbitals + 1j * t * da
        jnorm += grid.weight * float(np.sum(np.abs(ja) ** 2))
    kernel = InteractionKernel(v_int, grid)
    vext = None if v_ext is None or v_ext.is_zero else sample_potential(v_ext, grid)
    return jnorm, _potential_energy(u.orbitals, kernel, vext, grid.weight)


def pseudo_conformal_diagnostic(u: OrbitalSet, v_int: InteractionLike,
                                v_ext: PotentialModel | None) -> float:
    """``sum_j |grad v_j|^2 + 2 t^2 P(t)`` for ``t > 0``.

    ``P`` is the Hartree-Fock potential energy, so the time derivative of this
    quantity is ``4 t Theta`` with ``Theta`` the virial functional built from
    ``V + x.grad(V)/2``; it is non-increasing whenever ``Theta <= 0``.
    """
    if not u.time > 0:
        raise ValueError("pseudo-conformal diagnostic needs t > 0")
    jnorm, energy = pseudo_conformal_terms(u, v_int, v_ext)
    return jnorm + 2.0 * u.time**2 * energy


def _virial_samples(model: PotentialModel, grid: GridSpec) -> np.ndarray:
    """Samples of ``V + x.grad(V) / 2`` by centred differences."""
    x = make_grid(grid).nodes
    step = 1e-5 * grid.spacing
    out = eval_potential(model, x)
    for a in range(grid.dim):
        e = np.zeros(grid.dim)
        e[a] = step
        out = out + 0.5 * x[..., a] * (eval_potential(model, x + e) - eval_potential(model, x - e)) / (2 * step)
    return out


def virial_functional(u: OrbitalSet, v_int: PotentialModel | None, v_ext: PotentialModel | None) -> float:
    """``Theta``: the potential energy functional with ``V`` replaced by ``V + x.grad(V)/2``."""
    grid = u.grid
    out = 0.0
    if v_ext is not None and not v_ext.is_zero:
        w = _virial_samples(v_ext, grid)
        out += grid.weight * float(np.sum(w * np.abs(u.orbitals) ** 2))
    if v_int is not None and not v_int.is_zero and u.count > 1:
        kern = InteractionKernel(None, grid)
        kern.multiplier = np.fft.fftn(np.fft.ifftshift(_virial_samples(v_int, grid))) * grid.weight
        out += _potential_energy(u.orbitals, kern, None, grid.weight)
    return out


@dataclass
class DecayFit:
    constant: float
    envelope_max: float
    residual: float
    free_exponent: float
    samples: int
    log_envelope: np.ndarray = field(repr=False, default=None)


def decay_envelope_check(times, sup_norms, dim: int, log_power: float = 0.75) -> DecayFit:
    """Fit ``log |u(t)|_inf = -(n/2) log t + a log log t + c`` for ``t >= e``.

    Only ``c`` is free.  ``envelope_max`` is the smallest ``C`` with
    ``|u(t)|_inf <= C t^(-n/2) (log t)^a`` on the samples; ``free_exponent`` is
    the slope of an unconstrained fit of ``log |u|_inf`` against ``log t``.
    """
    t = np.asarray(times, dtype=float)
    s = np.asarray(sup_norms, dtype=float)
    keep = t >= np.e
    t, s = t[keep], s[keep]
    if t.size < 3:
        raise ValueError("decay envelope fit needs at least 3 samples with t >= e")
    with np.errstate(divide="ignore"):
        loglog = np.log(np.log(t))
    log_env = np.log(s) + 0.5 * dim * np.log(t) - log_power * np.where(np.isfinite(loglog), loglog, 0.0)
    c = float(np.mean(log_env))
    resid = float(np.sqrt(np.mean((log_env - c) ** 2)))
    slope = float(np.polyfit(np.log(t), np.log(s), 1)[0])
    return DecayFit(c, float(np.exp(np.max(log_env))), resid, slope, int(t.size), log_env)
