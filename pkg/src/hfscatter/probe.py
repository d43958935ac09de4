"""High-velocity probes, the quadratic functional ``I_j(v)`` and its two-term expansion.

Probes are ``Phi_v(x) = exp(i v.x) phi((lambda+1) x)``.  Large speeds are
evaluated in the co-moving frame: a common Galilean boost leaves the
interaction untouched and turns ``V_ext(x)`` into ``V_ext(y + v t)``, so

    exp(-i v.x) ((S - I) Phi_v)_j = (S_v - I) phi_j

where ``S_v`` is the scattering operator with the translated external
potential.  Only ``phi`` has to be resolved by the grid.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .potentials import (NoClosedFormError, PotentialModel, QuadratureRule, analytic_fourier,
                         sample_potential, xray_analytic, xray_numeric)
from .scattering import ScatterConfig, ScatterOutput, apply_S, as_orbitals, born_duhamel
from .dynamics import OrbitalSet
from .spectral import (FREQUENCY, ComplexField, GridSpec, S0State, fourier,
                       make_grid, s0_state)

__all__ = [
    "ProbeConfig",
    "ProbeResult",
    "ProbeWrapError",
    "KernelWindowError",
    "dilate",
    "make_probe",
    "compute_I",
    "kernel_H",
    "kernel_H_tail",
    "leading_term",
    "second_term",
    "vhat_field",
    "expansion_check",
    "second_order_extract",
    "loglog_slope",
    "write_probe_csv",
]

log = logging.getLogger(__name__)

ScatterPlan = Union[ScatterConfig, Callable[[float], ScatterConfig]]


class ProbeWrapError(ValueError):
    """The modulated probe does not fit inside the grid's frequency band."""


class KernelWindowError(RuntimeError):
    def __init__(self, tail: float, tol: float, required_T: float):
        super().__init__(
            f"kernel time-window tail {tail:.3e} exceeds {tol:.1e}; need T_H >= {required_T:.4g}"
        )
        self.tail = tail
        self.required_T = required_T


@dataclass
class ProbeConfig:
    """Base states ``phi``, probe direction, speeds and dilation parameter ``lam``."""

    base_states: Sequence[S0State]
    direction: np.ndarray
    speeds: Sequence[float]
    lam: float = 0.0

    def __post_init__(self):
        self.base_states = tuple(
            s if isinstance(s, S0State) else s0_state(s) for s in self.base_states
        )
        if not self.base_states:
            raise ValueError("at least one base state is required")
        grids = {s.field.grid for s in self.base_states}
        if len(grids) != 1:
            raise ValueError("base states must share one grid")
        d = np.atleast_1d(np.asarray(self.direction, dtype=float))
        if d.size != self.grid.dim:
            raise ValueError(f"direction has {d.size} components, grid dimension is {self.grid.dim}")
        nrm = np.linalg.norm(d)
        if nrm == 0:
            raise ValueError("direction must be non-zero")
        self.direction = d / nrm
        sp = np.asarray(self.speeds, dtype=float)
        if sp.ndim != 1 or sp.size == 0 or np.any(sp < 0) or np.any(np.diff(sp) <= 0):
            raise ValueError("speeds must be non-negative and strictly increasing")
        self.speeds = tuple(float(s) for s in sp)
        if not self.lam > -1:
            raise ValueError(f"lam must exceed -1, got {self.lam}")

    @property
    def grid(self) -> GridSpec:
        return self.base_states[0].field.grid

    @property
    def count(self) -> int:
        return len(self.base_states)

    def with_lam(self, lam: float) -> ProbeConfig:
        return ProbeConfig(self.base_states, self.direction, self.speeds, lam)


def dilate(values: np.ndarray, grid: GridSpec, lam: float) -> np.ndarray:
    """Samples of ``f((lam+1) x)`` from samples of ``f`` by trigonometric interpolation.

    Points mapped outside the box are set to zero, so ``f`` must be negligible
    near the boundary.  Works on the trailing ``n`` axes.
    """
    s = lam + 1.0
    if s == 1.0:
        return np.array(values, dtype=complex)
    ax = grid.axis()
    xi = grid.freq_axis()
    target = s * ax
    # interpolation matrix: samples -> centred Fourier coefficients -> values at s x
    forward = np.exp(-1j * np.outer(xi, ax))
    back = np.exp(1j * np.outer(target, xi)) / grid.points_per_axis
    back[np.abs(target) >= grid.half_width] = 0.0
    mat = back @ forward
    out = np.asarray(values, dtype=complex)
    n = grid.dim
    for a in range(n):
        axis = out.ndim - n + a
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [axis])), 0, axis)
    return out


def _probe_states(cfg: ProbeConfig) -> OrbitalSet:
    """Dilated base states ``phi((lam+1) x)`` as one orbital set."""
    base = np.stack([s.field.values for s in cfg.base_states])
    return OrbitalSet(cfg.grid, dilate(base, cfg.grid, cfg.lam))


def make_probe(cfg: ProbeConfig, speed: float) -> list[S0State]:
    """Lab-frame probes ``exp(i v.x) phi((lam+1) x)`` on the grid.

    Raises :class:`ProbeWrapError` if the shifted spectrum would reach the
    Nyquist frequency.
    """
    grid = cfg.grid
    band = max(s.band_radius for s in cfg.base_states) * (cfg.lam + 1.0)
    if band + speed > grid.nyquist:
        raise ProbeWrapError(
            f"speed {speed:g}: band {band:.3g} + |v| exceeds the grid Nyquist frequency "
            f"{grid.nyquist:.3g}"
        )
    x = make_grid(grid).nodes
    phase = np.exp(1j * speed * (x @ cfg.direction))
    u = _probe_states(cfg)
    return [S0State(ComplexField(grid, phase * u.orbitals[j]), band + speed) for j in range(cfg.count)]


def _plan(scatter: ScatterPlan, speed: float) -> ScatterConfig:
    return scatter(speed) if callable(scatter) else scatter


def _inner_rows(a: np.ndarray, b: np.ndarray, weight: float) -> np.ndarray:
    """``<a_j, b_j>`` for every orbital ``j`` (linear in ``a``)."""
    n = a.shape[0]
    return weight * np.einsum("ij,ij->i", a.reshape(n, -1), b.reshape(n, -1).conj())


def _run(cfg: ProbeConfig, speed: float, v_int, v_ext, scatter: ScatterPlan, frame: str):
    sc = _plan(scatter, speed)
    phi = _probe_states(cfg)
    if frame == "moving":
        out = apply_S(phi, v_int, v_ext, sc, frame_velocity=speed * cfg.direction)
        diff = out.psi.orbitals - phi.orbitals
    elif frame == "lab":
        probes = as_orbitals(make_probe(cfg, speed))
        out = apply_S(probes, v_int, v_ext, sc)
        x = make_grid(cfg.grid).nodes
        diff = np.exp(-1j * speed * (x @ cfg.direction)) * (out.psi.orbitals - probes.orbitals)
    else:
        raise ValueError(f"frame must be 'moving' or 'lab', got {frame!r}")
    return phi, diff, out


def compute_I(cfg: ProbeConfig, speed: float, v_int, v_ext: PotentialModel | None,
              scatter: ScatterPlan, frame: str = "moving") -> np.ndarray:
    """``I_j(v) = i <((S - I) Phi_v)_j, (Phi_v)_j>`` for all ``j``.

    Flags raised by the scattering run propagate as a ``RuntimeError``.
    """
    phi, diff, out = _run(cfg, speed, v_int, v_ext, scatter, frame)
    _raise_if_flagged(out, speed)
    return 1j * _inner_rows(diff, phi.orbitals, cfg.grid.weight)


def _raise_if_flagged(out: ScatterOutput, speed: float):
    if out.flagged:
        raise RuntimeError(
            f"scattering run at speed {speed:g} flagged: residual {out.consistency_residual:.3e}"
        )


# --- the kernel H_j ----------------------------------------------------------------

def _kernel_integrand(uhat: np.ndarray, grid: GridSpec, j: int, mult: np.ndarray, axes):
    # the k = j direct and exchange terms cancel identically; dropping both keeps
    # N = 1 exactly zero instead of round-off sized
    u = np.fft.ifftn(mult * uhat, axes=axes)
    others = np.delete(u, j, axis=0)
    if others.shape[0] == 0:
        return np.zeros(grid.shape, dtype=complex)
    dens = _fourier_array_many(others.conj() * others, grid)
    dens_j = _fourier_array_many(np.abs(u[j]) ** 2, grid)
    direct = np.sum(dens, axis=0) * dens_j.conj()
    exch = np.sum(np.abs(_fourier_array_many(u[j] * others.conj(), grid)) ** 2, axis=0)
    return direct - exch


def _fourier_array_many(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    axes = tuple(range(-grid.dim, 0))
    scale = grid.weight / (2.0 * np.pi) ** (grid.dim / 2)
    return scale * np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(u, axes=axes), axes=axes), axes=axes)


def _kernel(phi: OrbitalSet, j: int, T_H: float, dt_H: float):
    grid = phi.grid
    g = make_grid(grid)
    axes = tuple(range(-grid.dim, 0))
    steps = int(round(2 * T_H / dt_H))
    if abs(steps * dt_H - 2 * T_H) > 1e-9 * T_H:
        raise ValueError(f"dt_H = {dt_H} does not divide [-{T_H}, {T_H}]")
    uhat = np.fft.fftn(phi.orbitals, axes=axes)
    acc = np.zeros(grid.shape, dtype=complex)
    edge = 0.0
    for i in range(steps + 1):
        t = -T_H + i * dt_H
        val = _kernel_integrand(uhat, grid, j, g.free_multiplier(t), axes)
        w = 0.5 * dt_H if i in (0, steps) else dt_H
        acc += w * val
        if i in (0, steps):
            edge = max(edge, grid.freq_weight * float(np.sum(np.abs(val))))
    return acc, edge


def kernel_H_tail(edge_l1: float, T_H: float, dim: int) -> float:
    """Bound on the neglected ``|t| > T_H`` part of ``int |H_j| d xi``.

    The integrand's ``xi``-mass decays like ``t^(-n)``, so each tail is
    ``edge_l1 * T_H / (n - 1)``; in one dimension the window integral diverges.
    """
    if edge_l1 == 0.0:
        return 0.0
    if dim == 1:
        return np.inf
    return 2.0 * edge_l1 * T_H / (dim - 1)


def kernel_H(phi, j: int, lam: float = 0.0, T_H: float = 10.0, dt_H: float = 0.05,
             tol: float | None = None) -> ComplexField:
    """``H_j`` on the centred frequency grid, time-integrated over ``[-T_H, T_H]``.

    ``H_j(xi) = sum_k int F(|u_k|^2) conj F(|u_j|^2) - |F(u_j conj u_k)|^2 dt``
    (the ``k = j`` term vanishes and is skipped)
    with ``u_k = U_0(t) phi_k((lam+1) .)``.  At ``xi = 0`` the integrand tends to
    a positive constant, so ``H_j`` grows linearly with the window near the
    origin; the window must match the scattering window it is compared with.
    With ``tol`` set, a tail estimate above ``tol`` raises
    :class:`KernelWindowError` carrying the window that would meet it.
    """
    phi = as_orbitals(phi)
    if not 0 <= j < phi.count:
        raise IndexError(f"orbital index {j} out of range for N = {phi.count}")
    if lam != 0.0:
        phi = OrbitalSet(phi.grid, dilate(phi.orbitals, phi.grid, lam))
    h, edge = _kernel(phi, j, T_H, dt_H)
    if tol is not None:
        tail = kernel_H_tail(edge, T_H, phi.grid.dim)
        if tail > tol:
            n = phi.grid.dim
            required = np.inf if n == 1 else T_H * (tail / tol) ** (1.0 / (n - 1))
            raise KernelWindowError(tail, tol, required)
    return ComplexField(phi.grid, h, FREQUENCY)


def vhat_field(v_int, grid: GridSpec) -> ComplexField:
    """``V_hat`` on the centred frequency grid: closed form when available, else FFT of samples."""
    if isinstance(v_int, ComplexField):
        return v_int
    if v_int is None or v_int.is_zero:
        return ComplexField(grid, np.zeros(grid.shape), FREQUENCY)
    try:
        return analytic_fourier(v_int, grid)
    except NoClosedFormError:
        return fourier(ComplexField(grid, sample_potential(v_int, grid)))


def leading_term(h: ComplexField, vhat: ComplexField) -> complex:
    """``(2 pi)^(n/2) * int V_hat(xi) H_j(xi) d xi``.

    The ``(2 pi)^(n/2)`` factor comes from writing the convolution
    ``V * f`` as ``(2 pi)^(n/2) F^{-1}(V_hat f_hat)`` in the unitary convention.
    """
    n = h.grid.dim
    return complex((2 * np.pi) ** (n / 2) * h.grid.freq_weight * np.sum(vhat.values * h.values))


def _xray_on_nodes(v_ext: PotentialModel, grid: GridSpec, direction) -> np.ndarray:
    x = make_grid(grid).nodes
    try:
        return np.asarray(xray_analytic(v_ext, x, direction))
    except NoClosedFormError:
        rule = QuadratureRule(half_length=4.0 * grid.half_width)
        return np.asarray(xray_numeric(v_ext, x, direction, rule))


def second_term(phi, v_ext: PotentialModel | None, direction, speed: float) -> np.ndarray:
    """``|v|^{-1} <X V_ext(., v_hat) phi_j, phi_j>`` per orbital (full-line X-ray)."""
    phi = as_orbitals(phi)
    if v_ext is None or v_ext.is_zero or speed == 0:
        return np.zeros(phi.count, dtype=complex)
    xr = _xray_on_nodes(v_ext, phi.grid, direction)
    dens = np.abs(phi.orbitals) ** 2
    return phi.grid.weight * np.sum(xr * dens, axis=tuple(range(1, dens.ndim))) / speed + 0j


@dataclass
class ProbeResult:
    """Per-speed values of ``I_j``, the two expansion terms and the remainder.

    Arrays are indexed ``[speed, j]``; ``leading`` is speed independent.
    """

    speeds: np.ndarray
    direction: np.ndarray
    lam: float
    I: np.ndarray
    leading: np.ndarray
    second: np.ndarray
    slopes: np.ndarray = field(default=None)
    warnings: list = field(default_factory=list)

    @property
    def remainder(self) -> np.ndarray:
        return self.I - self.leading[None, :] - self.second

    def rows(self):
        """Tidy table rows, one per (orbital, speed)."""
        rem = self.remainder
        vhat = " ".join(f"{c:.17g}" for c in self.direction)
        for s, sp in enumerate(self.speeds):
            for j in range(self.I.shape[1]):
                yield {
                    "j": j,
                    "speed": sp,
                    "direction": vhat,
                    "lambda": self.lam,
                    "re_I": self.I[s, j].real,
                    "im_I": self.I[s, j].imag,
                    "leading": self.leading[j].real,
                    "second": self.second[s, j].real,
                    "re_remainder": rem[s, j].real,
                    "im_remainder": rem[s, j].imag,
                }


def loglog_slope(speeds, values) -> float:
    """Least-squares slope of ``log |values|`` against ``log speeds``."""
    y = np.abs(np.asarray(values))
    if np.any(y == 0):
        return -np.inf if np.all(y == 0) else np.nan
    return float(np.polyfit(np.log(np.asarray(speeds, float)), np.log(y), 1)[0])


def expansion_check(cfg: ProbeConfig, v_int, v_ext: PotentialModel | None,
                    scatter: ScatterPlan, dt_H: float | None = None,
                    frame: str = "moving") -> ProbeResult:
    """Compare ``I_j(v)`` with the leading and ``1/|v|`` terms and fit the remainder order.

    The leading term uses the same time window as the scattering runs; when
    ``scatter`` depends on the speed the window of the first speed is used
    (all speeds must share it).
    """
    if len(cfg.speeds) >= 2 and cfg.speeds[-1] < 2 * cfg.speeds[0]:
        raise ValueError("expansion check needs speeds spanning at least one octave")
    phi = _probe_states(cfg)
    plans = [_plan(scatter, s) for s in cfg.speeds]
    windows = {p.T for p in plans}
    if len(windows) != 1:
        raise ValueError("all speeds must share one scattering window T")
    T = windows.pop()
    vh = vhat_field(v_int, cfg.grid)
    lead = np.zeros(cfg.count, dtype=complex)
    if np.any(vh.values) and cfg.count > 1:
        step = dt_H or min(plans[0].dt, 0.05)
        for j in range(cfg.count):
            lead[j] = leading_term(kernel_H(phi, j, 0.0, T, step), vh)
    I = np.array([compute_I(cfg, s, v_int, v_ext, p, frame) for s, p in zip(cfg.speeds, plans)])
    sec = np.array([second_term(phi, v_ext, cfg.direction, s) for s in cfg.speeds])
    res = ProbeResult(np.array(cfg.speeds), cfg.direction, cfg.lam, I, lead, sec)
    rem = np.abs(res.remainder)
    res.slopes = np.array([loglog_slope(cfg.speeds, rem[:, j]) for j in range(cfg.count)])
    for j in range(cfg.count):
        if np.any(np.diff(rem[:, j]) > 0):
            msg = f"remainder of orbital {j} is not decreasing in |v|; grid artifacts suspected"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            res.warnings.append(msg)
    return res


def second_order_extract(cfg: ProbeConfig, speed: float, v_int, v_ext: PotentialModel | None,
                         scatter: ScatterPlan, born: np.ndarray | None = None) -> np.ndarray:
    """``w_v = |v| (i exp(-i v.x)((S - I) Phi_v)_j - int U_0(-t) N_j(U_0(t) phi) dt)``.

    Returns an array of shape ``(N, *grid.shape)``; its weak limit is
    ``X V_ext(., v_hat) phi_j``.  ``born`` may pass a precomputed Duhamel
    integral of the interaction on the free flow (it is speed independent when
    the window is).
    """
    sc = _plan(scatter, speed)
    phi, diff, out = _run(cfg, speed, v_int, v_ext, sc, "moving")
    _raise_if_flagged(out, speed)
    if born is None:
        born = born_duhamel(phi, v_int, sc)
    return speed * (1j * diff - born)


def write_probe_csv(result: ProbeResult, path) -> None:
    """Probe table plus one summary row per orbital with the fitted remainder slope."""
    cols = ["j", "speed", "direction", "lambda", "re_I", "im_I", "leading", "second",
            "re_remainder", "im_remainder"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in result.rows():
            w.writerow([_fmt(row[c]) for c in cols])
        slopes = result.slopes if result.slopes is not None else [np.nan] * result.I.shape[1]
        for j, s in enumerate(slopes):
            w.writerow(["slope", j, _fmt(float(s))] + [""] * (len(cols) - 3))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)
