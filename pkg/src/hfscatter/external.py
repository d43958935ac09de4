"""X-ray data of ``V_ext`` from high-velocity scattering, and their inversion.

Inversion uses the Riesz-potential form

    f = (2 pi |S^{n-2}|)^{-1} I^{-a} X^* I^{a-1} g

where ``I^{a-1}`` acts on each hyperplane ``theta^perp`` and ``I^{-a}`` on the
full space; ``a = 0`` is filtered back-projection.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from sklearn.base import BaseEstimator, TransformerMixin

from .potentials import PotentialModel, QuadratureRule, sample_potential, xray_analytic, xray_numeric
from .probe import ProbeConfig, ScatterPlan, _plan, _probe_states, second_order_extract
from .scattering import born_duhamel
from .spectral import POSITION, ComplexField, GridSpec, make_grid

__all__ = [
    "Sinogram",
    "RieszSpec",
    "XRaySlice",
    "PipelineResult",
    "InsufficientSupportError",
    "half_sphere_directions",
    "perp_basis",
    "analytic_sinogram",
    "numeric_sinogram",
    "extract_xray_slice",
    "xray_adjoint",
    "riesz",
    "riesz_1d",
    "invert_xray",
    "full_vext_pipeline",
    "relative_l2",
    "XRayInverter",
    "write_sinogram_csv",
]

log = logging.getLogger(__name__)


class InsufficientSupportError(ValueError):
    pass


def perp_basis(theta) -> np.ndarray:
    """Orthonormal basis of ``theta^perp`` as rows, shape ``(n-1, n)``."""
    th = np.asarray(theta, dtype=float)
    th = th / np.linalg.norm(th)
    if th.size == 2:
        return np.array([[-th[1], th[0]]])
    if th.size != 3:
        raise ValueError("X-ray directions need n = 2 or 3")
    helper = np.eye(3)[np.argmin(np.abs(th))]
    e1 = np.cross(th, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(th, e1)
    return np.stack([e1, e2])


def half_sphere_directions(count: int, dim: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Directions on a half sphere and surface weights (doubled for the antipodes).

    ``dim = 2``: equally spaced angles in ``[0, pi)``.  ``dim = 3``: Fibonacci
    spiral points on the upper hemisphere.
    """
    if count < 2:
        raise ValueError("at least two directions are required")
    if dim == 2:
        a = np.pi * np.arange(count) / count
        dirs = np.stack([np.cos(a), np.sin(a)], axis=-1)
        return dirs, np.full(count, 2.0 * np.pi / count)
    if dim == 3:
        k = np.arange(count) + 0.5
        z = 1.0 - k / count
        r = np.sqrt(1.0 - z**2)
        phi = np.pi * (3.0 - np.sqrt(5.0)) * k
        dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
        return dirs, np.full(count, 4.0 * np.pi / count)
    raise ValueError("directions are defined for n = 2 or 3")


@dataclass
class Sinogram:
    """Line integrals ``g(theta_i, s)`` on a uniform offset grid in each ``theta_i^perp``.

    ``values`` has shape ``(D, P)`` for ``n = 2`` and ``(D, P, P)`` for ``n = 3``;
    offset ``s`` refers to the point ``s @ perp_basis(theta_i)``.
    """

    directions: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
        self.directions /= np.linalg.norm(self.directions, axis=1, keepdims=True)
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.values = np.asarray(self.values)
        d, n = self.directions.shape
        if n not in (2, 3):
            raise ValueError("sinograms are defined for n = 2 or 3")
        expect = (d,) + (self.offsets.size,) * (n - 1)
        if self.values.shape != expect:
            raise ValueError(f"values have shape {self.values.shape}, expected {expect}")
        if self.weights is None:
            self.weights = np.full(d, (2.0 * np.pi if n == 2 else 4.0 * np.pi) / d)
        self.weights = np.asarray(self.weights, dtype=float)

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    @property
    def spacing(self) -> float:
        return float(self.offsets[1] - self.offsets[0])

    def points(self, i: int) -> np.ndarray:
        """Hyperplane points for direction ``i``, shape ``(P,)*(n-1) + (n,)``."""
        basis = perp_basis(self.directions[i])
        mesh = np.meshgrid(*([self.offsets] * (self.dim - 1)), indexing="ij")
        return np.stack(mesh, axis=-1) @ basis


def _sample(sino_dirs, offsets, fn) -> np.ndarray:
    dirs = np.atleast_2d(np.asarray(sino_dirs, dtype=float))
    out = []
    for th in dirs:
        basis = perp_basis(th)
        mesh = np.meshgrid(*([offsets] * (dirs.shape[1] - 1)), indexing="ij")
        pts = np.stack(mesh, axis=-1) @ basis
        out.append(fn(pts, th))
    return np.array(out)


def analytic_sinogram(model: PotentialModel, directions, offsets, weights=None) -> Sinogram:
    vals = _sample(directions, offsets, lambda p, th: xray_analytic(model, p, th))
    return Sinogram(directions, offsets, vals, weights)


def numeric_sinogram(f, directions, offsets, rule: QuadratureRule | None = None,
                     weights=None) -> Sinogram:
    """Sinogram of a model or callable by composite quadrature along each line."""
    vals = _sample(directions, offsets, lambda p, th: xray_numeric(f, p, th, rule))
    return Sinogram(directions, offsets, vals, weights)


# --- Riesz potentials --------------------------------------------------------------

@dataclass(frozen=True)
class RieszSpec:
    """Multiplier ``|xi|^{-a}`` on the full space or on a hyperplane ``theta^perp``."""

    a: float
    domain: str = "full_space"

    def __post_init__(self):
        if self.domain not in ("full_space", "hyperplane"):
            raise ValueError(f"unknown domain {self.domain!r}")


def _check_order(a: float, dim: int):
    """``|xi|^{-a}`` is locally integrable only for ``a < dim``."""
    if not a < dim:
        raise ValueError(f"Riesz order a = {a} is inadmissible in dimension {dim} (need a < {dim})")


def _check_inversion_order(a: float, dim: int):
    if not abs(a) < dim:
        raise ValueError(f"inversion order a = {a} is inadmissible in dimension {dim} "
                         f"(need |a| < {dim})")


def _multiplier(k: np.ndarray, a: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        m = np.where(k > 0, k ** (-a) if a != 0 else 1.0, 0.0 if a != 0 else 1.0)
    return m


def riesz(f: ComplexField, spec: RieszSpec, pad: int = 2):
    """Apply ``|xi|^{-a}`` to a position field by FFT with ``pad``-fold zero padding.

    The ``xi = 0`` coefficient is set to zero for ``a != 0``; the field's mean
    (the discarded constant) is returned alongside the result.
    """
    if f.space != POSITION:
        raise ValueError("riesz expects a position-space field")
    n = f.grid.dim
    _check_order(spec.a, n)
    mean = complex(np.mean(f.values))
    if spec.a == 0:
        return f.copy(), mean
    m = f.grid.points_per_axis
    size = pad * m
    k1 = 2.0 * np.pi * np.fft.fftfreq(size, d=f.grid.spacing)
    mesh = np.meshgrid(*([k1] * n), indexing="ij", sparse=True)
    k = np.sqrt(sum(c**2 for c in mesh))
    padded = np.fft.fftn(f.values, s=(size,) * n, axes=tuple(range(n)))
    out = np.fft.ifftn(_multiplier(k, spec.a) * padded)[tuple(slice(0, m) for _ in range(n))]
    return ComplexField(f.grid, out, POSITION), mean


@lru_cache(maxsize=64)
def _filter_kernel(beta: float, spacing: float, length: int) -> np.ndarray:
    """Band-limited spatial kernel of ``|sigma|^beta``: ``(1/pi) int_0^{pi/d} s^beta cos(s m d) ds``."""
    band = np.pi / spacing
    m = np.arange(length)
    out = np.empty(length)
    for i in m:
        if beta == 1.0:
            x = i * spacing
            if i == 0:
                out[i] = band**2 / (2.0 * np.pi)
            else:
                out[i] = (band * np.sin(band * x) / x + (np.cos(band * x) - 1.0) / x**2) / np.pi
        else:
            val, _ = integrate.quad(lambda s: s**beta, 0.0, band, weight="cos", wvar=i * spacing,
                                    limit=400)
            out[i] = val / np.pi
    return out


def riesz_1d(values: np.ndarray, spacing: float, a: float, axis: int = -1) -> np.ndarray:
    """``I^{a}`` along one axis of zero-padded samples, ``|sigma|^{-a}`` band-limited to Nyquist.

    Discrete convolution with the exact band-limited kernel; no periodic wrap.
    """
    _check_order(a, 1)
    if a == 0:
        return np.array(values, dtype=float if np.isrealobj(values) else complex)
    v = np.moveaxis(np.asarray(values), axis, -1)
    p = v.shape[-1]
    ker = _filter_kernel(float(-a), float(spacing), p)
    full = np.concatenate([ker[:0:-1], ker])
    size = 1 << int(np.ceil(np.log2(3 * p)))
    fk = np.fft.rfft(full, size) if np.isrealobj(v) else np.fft.fft(full, size)
    if np.isrealobj(v):
        conv = np.fft.irfft(np.fft.rfft(v, size) * fk, size)
    else:
        conv = np.fft.ifft(np.fft.fft(v, size) * fk, size)
    out = spacing * conv[..., p - 1 : 2 * p - 1]
    return np.moveaxis(out, -1, axis)


# --- back-projection and inversion -------------------------------------------------

def xray_adjoint(g: Sinogram, grid: GridSpec) -> ComplexField:
    """``(X^* g)(x) = int_{S^{n-1}} g(theta, x - (theta.x) theta) d sigma`` on the grid nodes.

    Profiles are interpolated (linear / bilinear) and the direction sum uses
    ``g.weights``.  Points outside the offset range read zero.
    """
    if g.directions.shape[0] < 2:
        raise ValueError("back-projection needs at least two directions")
    if g.dim != grid.dim:
        raise ValueError("sinogram and grid dimensions differ")
    x = make_grid(grid).nodes.reshape(-1, grid.dim)
    out = np.zeros(x.shape[0], dtype=np.result_type(g.values, float))
    s0, ds, p = g.offsets[0], g.spacing, g.offsets.size
    for i, th in enumerate(g.directions):
        coords = x @ perp_basis(th).T
        pos = (coords - s0) / ds
        lo = np.floor(pos).astype(int)
        fr = pos - lo
        if g.dim == 2:
            acc = np.zeros(x.shape[0], dtype=out.dtype)
            for shift, wt in ((0, 1.0 - fr[:, 0]), (1, fr[:, 0])):
                idx = lo[:, 0] + shift
                ok = (idx >= 0) & (idx < p)
                acc[ok] += wt[ok] * g.values[i][idx[ok]]
        else:
            acc = np.zeros(x.shape[0], dtype=out.dtype)
            for sa in (0, 1):
                wa = fr[:, 0] if sa else 1.0 - fr[:, 0]
                ia = lo[:, 0] + sa
                for sb in (0, 1):
                    wb = fr[:, 1] if sb else 1.0 - fr[:, 1]
                    ib = lo[:, 1] + sb
                    ok = (ia >= 0) & (ia < p) & (ib >= 0) & (ib < p)
                    acc[ok] += (wa * wb)[ok] * g.values[i][ia[ok], ib[ok]]
        out += g.weights[i] * acc
    return ComplexField(grid, out.reshape(grid.shape), POSITION)


def _sphere_measure(k: int) -> float:
    """``|S^k|``; ``|S^0| = 2``."""
    from scipy.special import gamma

    return 2.0 * np.pi ** ((k + 1) / 2) / gamma((k + 1) / 2)


def _direction_budget(g: Sinogram, rel: float = 1e-3) -> int:
    """Direction count ``Omega * rho`` needed for data of essential band ``Omega``
    and support radius ``rho`` (both measured at ``rel`` of the peak)."""
    vals = np.abs(g.values)
    peak = vals.max(initial=0.0)
    if peak == 0.0:
        return 0
    axes = tuple(range(1, vals.ndim))
    support = np.any(vals >= rel * peak, axis=0)
    grids = np.meshgrid(*([g.offsets] * (g.dim - 1)), indexing="ij")
    rho = float(np.sqrt(sum(c**2 for c in grids))[support].max())
    spec = np.abs(np.fft.fftn(g.values, axes=axes)).max(axis=0)
    k1 = 2.0 * np.pi * np.fft.fftfreq(g.offsets.size, d=g.spacing)
    kg = np.meshgrid(*([k1] * (g.dim - 1)), indexing="ij")
    band = float(np.sqrt(sum(c**2 for c in kg))[spec >= rel * spec.max()].max())
    count = band * rho
    return int(np.ceil(count if g.dim == 2 else count**2))


def invert_xray(g: Sinogram, spec: RieszSpec | float, grid: GridSpec) -> ComplexField:
    """``(2 pi |S^{n-2}|)^{-1} I^{-a} X^* I^{a-1}_{theta^perp} g`` on ``grid``."""
    a = spec.a if isinstance(spec, RieszSpec) else float(spec)
    n = g.dim
    if n < 2:
        raise ValueError("X-ray inversion needs n >= 2")
    _check_inversion_order(a, n)
    if a - 1 >= n - 1:
        raise ValueError(f"hyperplane order a - 1 = {a - 1} is inadmissible in dimension {n - 1}")
    need = _direction_budget(g)
    if g.directions.shape[0] < need:
        warnings.warn(f"{g.directions.shape[0]} directions under-sample the offsets; "
                      f"about {need} are recommended", RuntimeWarning, stacklevel=2)
    if n == 2:
        vals = riesz_1d(g.values, g.spacing, a - 1, axis=1)
    else:
        vals = _riesz_plane(g.values, g.spacing, a - 1)
    filtered = Sinogram(g.directions, g.offsets, vals, g.weights)
    back = xray_adjoint(filtered, grid)
    out, _ = riesz(back, RieszSpec(-a))
    return ComplexField(grid, out.values / (2.0 * np.pi * _sphere_measure(n - 2)), POSITION)


def _riesz_plane(vals: np.ndarray, spacing: float, a: float) -> np.ndarray:
    """``|sigma|^{-a}`` on 2-D hyperplane profiles by zero-padded FFT."""
    p = vals.shape[-1]
    size = 2 * p
    k1 = 2.0 * np.pi * np.fft.fftfreq(size, d=spacing)
    k = np.sqrt(k1[:, None] ** 2 + k1[None, :] ** 2)
    spec = np.fft.fft2(vals, s=(size, size))
    out = np.fft.ifft2(_multiplier(k, a) * spec)[..., :p, :p]
    return out.real if np.isrealobj(vals) else out


# --- extraction from scattering data -----------------------------------------------

@dataclass
class XRaySlice:
    """Line-averaged profile ``g(v_hat, s)`` with the masking bookkeeping."""

    direction: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    valid: np.ndarray
    masked_fraction: float
    imag_ratio: float
    ratio_field: np.ndarray = field(repr=False, default=None)
    mask: np.ndarray = field(repr=False, default=None)


def _extrapolate(speeds: np.ndarray, ws: np.ndarray, linear_term: bool) -> np.ndarray:
    """Value at ``|v| = infinity`` of ``[a |v|] + b + c/|v| + ...`` fitted through the speeds."""
    powers = range(-1 if linear_term else 0, speeds.size - (1 if linear_term else 0))
    basis = np.stack([speeds ** (-k) for k in powers], axis=1)
    coef = np.linalg.lstsq(basis, ws.reshape(speeds.size, -1), rcond=None)[0]
    return coef[1 if linear_term else 0].reshape(ws.shape[1:])


def extract_xray_slice(cfg: ProbeConfig, v_int, v_ext: PotentialModel | None,
                       scatter: ScatterPlan, j: int = 0, eps_div: float = 1e-3,
                       offsets: np.ndarray | None = None,
                       born_cache: dict | None = None) -> XRaySlice:
    """X-ray profile of ``V_ext`` along ``cfg.direction`` from the second-order probe term.

    ``w_v`` is extrapolated to ``|v| = infinity``; when ``V_int`` is present the
    fit includes a ``|v|`` term that absorbs the speed-independent higher-order
    interaction response.  The ratio ``w / phi_j`` is averaged along lines
    parallel to the direction with weights ``|phi_j|^2`` (linear binning onto
    ``offsets``), using only points where ``|phi_j| >= eps_div * max |phi_j|``.
    ``born_cache`` maps ``(T, dt, richardson)`` to Duhamel integrals of the
    interaction; they do not depend on the direction, so a pipeline passes one
    dict to every slice.
    """
    grid = cfg.grid
    speeds = np.asarray(cfg.speeds, dtype=float)
    if speeds.size < 2:
        raise ValueError("extrapolation needs at least two speeds")
    phi = _probe_states(cfg)
    pj = phi.orbitals[j]
    amp = np.abs(pj)
    mask = amp >= eps_div * amp.max()
    # evaluation region: the ball of radius L/2 that the orbitals are meant to occupy
    region = make_grid(grid).radius <= 0.5 * grid.half_width
    masked = 1.0 - float(mask[region].mean())
    if masked > 0.5:
        raise InsufficientSupportError(
            f"insufficient probe support: {masked:.0%} of the ball |x| <= L/2 has |phi| "
            f"below the threshold"
        )
    plans = [_plan(scatter, v) for v in speeds]
    interacting = v_int is not None and not getattr(v_int, "is_zero", False) and cfg.count > 1
    if interacting and speeds.size < 3:
        raise ValueError("with an interaction at least three speeds are required")
    if born_cache is None:
        born_cache = {}
    ws = []
    for v, p in zip(speeds, plans):
        key = (p.T, p.dt, p.richardson)
        if key not in born_cache:
            born_cache[key] = born_duhamel(phi, v_int, p)
        ws.append(second_order_extract(cfg, v, v_int, v_ext, p, born=born_cache[key])[j])
    w = _extrapolate(speeds, np.array(ws), interacting)
    ratio = np.where(mask, w / np.where(mask, pj, 1.0), 0.0)
    if offsets is None:
        offsets = grid.axis()
    s = make_grid(grid).nodes.reshape(-1, grid.dim) @ perp_basis(cfg.direction).T
    num = (np.conj(pj) * w)[mask].ravel()
    den = (amp**2)[mask].ravel()
    coords = s[mask.ravel()]
    prof, valid = _bin_lines(coords, num, den, offsets)
    imag = float(np.linalg.norm(prof.imag) / max(np.linalg.norm(prof), np.finfo(float).tiny))
    return XRaySlice(cfg.direction, offsets, prof.real, valid, masked, imag, ratio, mask)


def _bin_lines(coords: np.ndarray, num: np.ndarray, den: np.ndarray, offsets: np.ndarray):
    """Weighted line averages ``sum num / sum den`` with linear (cloud-in-cell) binning."""
    shape = (offsets.size,) * coords.shape[1]
    top = np.zeros(shape, dtype=complex)
    bot = np.zeros(shape)
    s0, ds = offsets[0], offsets[1] - offsets[0]
    pos = (coords - s0) / ds
    lo = np.floor(pos).astype(int)
    fr = pos - lo
    dims = coords.shape[1]
    for corner in np.ndindex(*(2,) * dims):
        idx = lo + np.array(corner)
        wt = np.prod(np.where(np.array(corner), fr, 1.0 - fr), axis=1)
        ok = np.all((idx >= 0) & (idx < offsets.size), axis=1)
        flat = np.ravel_multi_index(tuple(idx[ok].T), shape)
        np.add.at(top.reshape(-1), flat, wt[ok] * num[ok])
        np.add.at(bot.reshape(-1), flat, wt[ok] * den[ok])
    valid = bot > 1e-12 * bot.max(initial=0.0)
    prof = np.where(valid, top / np.where(valid, bot, 1.0), 0.0)
    return prof, valid


@dataclass
class PipelineResult:
    estimate: ComplexField
    sinogram: Sinogram
    region: np.ndarray
    slices: list
    error: float | None = None
    phantom: np.ndarray | None = None
    stats: dict = field(default_factory=dict)


def relative_l2(est: np.ndarray, ref: np.ndarray, region: np.ndarray | None = None) -> float:
    e = np.asarray(est).real
    r = np.asarray(ref).real
    if region is not None:
        e, r = e[region], r[region]
    den = np.linalg.norm(r)
    return float(np.linalg.norm(e - r) / den) if den > 0 else float(np.linalg.norm(e))


def full_vext_pipeline(base_states, v_int, v_ext: PotentialModel | None, speeds,
                       scatter: ScatterPlan, directions: int = 32, a: float = 0.0, j: int = 0,
                       eps_div: float = 1e-3, phantom: PotentialModel | None = None) -> PipelineResult:
    """Slices over a half-sphere direction set, assembled into a sinogram and inverted.

    With ``phantom`` (synthetic mode) the relative L2 error on the region
    ``|phi_j| >= eps_div max |phi_j|`` is reported.
    """
    probe0 = ProbeConfig(base_states, np.eye(base_states[0].field.grid.dim)[0], speeds)
    grid = probe0.grid
    dirs, wts = half_sphere_directions(directions, grid.dim)
    slices = []
    born_cache: dict = {}
    for th in dirs:
        sl = extract_xray_slice(ProbeConfig(probe0.base_states, th, speeds), v_int, v_ext, scatter,
                                j, eps_div, born_cache=born_cache)
        slices.append(sl)
    offsets = slices[0].offsets
    sino = Sinogram(dirs, offsets, np.array([s.values for s in slices]), wts)
    est = invert_xray(sino, RieszSpec(a, "hyperplane"), grid)
    region = slices[0].mask
    res = PipelineResult(est, sino, region, slices)
    truth = v_ext if phantom is None else phantom
    if truth is not None:
        ref = sample_potential(truth, grid)
        res.phantom = ref
        res.error = relative_l2(est.values, ref, region)
    res.stats = {"masked_fraction": slices[0].masked_fraction,
                 "max_imag_ratio": max(s.imag_ratio for s in slices)}
    return res


class XRayInverter(BaseEstimator, TransformerMixin):
    """Transformer from sinograms to potentials on a fixed grid.

    Parameters
    ----------
    grid : GridSpec
    a : float
        Riesz order; ``0`` is filtered back-projection.
    """

    def __init__(self, grid=None, a=0.0):
        self.grid = grid
        self.a = a

    def fit(self, X=None, y=None):
        if not isinstance(self.grid, GridSpec):
            raise ValueError("XRayInverter needs a GridSpec")
        _check_inversion_order(self.a, self.grid.dim)
        self.n_dim_ = self.grid.dim
        return self

    def transform(self, X: Sinogram) -> np.ndarray:
        if not hasattr(self, "n_dim_"):
            raise AttributeError("XRayInverter is not fitted")
        return invert_xray(X, RieszSpec(self.a, "hyperplane"), self.grid).values.real


def write_sinogram_csv(g: Sinogram, path) -> None:
    """Rows ``theta_1..theta_n, s_1..s_{n-1}, value``."""
    n = g.dim
    cols = [f"theta_{i + 1}" for i in range(n)] + [f"s_{i + 1}" for i in range(n - 1)] + ["value"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i, th in enumerate(g.directions):
            for idx in np.ndindex(*g.values.shape[1:]):
                s = [g.offsets[k] for k in idx]
                w.writerow([f"{c:.17g}" for c in th] + [f"{c:.17g}" for c in s]
                           + [f"{float(np.real(g.values[i][idx])):.17g}"])
