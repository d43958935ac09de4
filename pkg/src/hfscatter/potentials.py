"""Parametric interaction/external potentials, closed-form oracles and assumption checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .spectral import FREQUENCY, ComplexField, GridSpec, make_grid

__all__ = [
    "PotentialModel",
    "NoClosedFormError",
    "XRayTailError",
    "QuadratureRule",
    "AssumptionCheck",
    "AssumptionReport",
    "eval_potential",
    "sample_potential",
    "analytic_fourier",
    "xray_analytic",
    "xray_numeric",
    "validate_assumptions",
    "gaussian",
    "zero_potential",
]

logger = logging.getLogger(__name__)

KINDS = ("gaussian", "smoothed_inverse_power", "compact_bump", "zero")
ROLES = ("interaction", "external")


class NoClosedFormError(ValueError):
    """Raised when an analytic oracle is requested for a kind without one."""


class XRayTailError(RuntimeError):
    """The truncated line integral has a tail above the rule tolerance."""

    def __init__(self, tail: float, tol: float):
        super().__init__(f"line-integral tail estimate {tail:.3e} exceeds tolerance {tol:.3e}")
        self.tail = tail


@dataclass(frozen=True)
class PotentialModel:
    """A radial potential profile, optionally translated.

    ``width_or_power`` is the Gaussian width, the decay power ``gamma`` of the
    smoothed inverse power ``A (eps^2 + |x|^2)^(-gamma/2)``, or the support
    radius of the compact bump.
    """

    kind: str = "zero"
    amplitude: float = 0.0
    width_or_power: float = 1.0
    center: tuple[float, ...] | None = None
    role: str = "external"
    epsilon: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.amplitude >= 0:
            raise ValueError("amplitude must be non-negative")
        if self.kind != "zero" and not self.width_or_power > 0:
            raise ValueError("width_or_power must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))
            if self.role == "interaction" and any(c != 0.0 for c in self.center):
                raise ValueError("an interaction potential must be centred at the origin")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or self.amplitude == 0.0

    def center_vector(self, dim: int) -> np.ndarray:
        if self.center is None:
            return np.zeros(dim)
        c = np.asarray(self.center, dtype=float)
        if c.shape != (dim,):
            raise ValueError(f"center has dimension {c.size}, expected {dim}")
        return c

    def scaled(self, amplitude: float) -> PotentialModel:
        return PotentialModel(
            self.kind, amplitude, self.width_or_power, self.center, self.role, self.epsilon
        )

    def translated(self, shift) -> PotentialModel:
        shift = np.asarray(shift, dtype=float)
        c = self.center_vector(shift.size) + shift
        return PotentialModel(
            self.kind, self.amplitude, self.width_or_power, tuple(c), self.role, self.epsilon
        )

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "amplitude": float(self.amplitude),
            "width_or_power": float(self.width_or_power),
            "role": self.role,
            "epsilon": float(self.epsilon),
        }
        if self.center is not None:
            d["center"] = [float(c) for c in self.center]
        return d


def gaussian(amplitude: float, width: float, center=None, role: str = "external") -> PotentialModel:
    return PotentialModel("gaussian", amplitude, width, center, role)


def zero_potential(role: str = "external") -> PotentialModel:
    return PotentialModel("zero", 0.0, 1.0, None, role)


def _radial_profile(model: PotentialModel, r2: np.ndarray) -> np.ndarray:
    a, w = model.amplitude, model.width_or_power
    if model.kind == "zero" or a == 0.0:
        return np.zeros_like(r2)
    if model.kind == "gaussian":
        return a * np.exp(-0.5 * r2 / w**2)
    if model.kind == "smoothed_inverse_power":
        with np.errstate(divide="ignore"):
            return a * (model.epsilon**2 + r2) ** (-0.5 * w)
    # compact_bump: a * exp(1 - 1/(1 - (r/R)^2)) inside the ball of radius R
    s = r2 / w**2
    out = np.zeros_like(r2)
    inside = s < 1.0
    out[inside] = a * np.exp(1.0 - 1.0 / (1.0 - s[inside]))
    return out


def eval_potential(model: PotentialModel, x) -> np.ndarray | float:
    """Evaluate ``model`` at points ``x`` of shape ``(..., n)`` (or one point)."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim <= 1
    pts = np.atleast_2d(x) if x.ndim == 1 else x
    if x.ndim == 0:
        pts = x.reshape(1, 1)
    dim = pts.shape[-1]
    d = pts - model.center_vector(dim)
    out = _radial_profile(model, np.sum(d * d, axis=-1))
    return float(out.reshape(-1)[0]) if scalar else out


def sample_potential(model: PotentialModel | None, grid: GridSpec, shift=None) -> np.ndarray:
    """Samples of ``V(x + shift)`` on the grid nodes (non-periodic evaluation)."""
    if model is None or model.is_zero:
        return np.zeros(grid.shape)
    nodes = make_grid(grid).nodes
    if shift is not None:
        nodes = nodes + np.asarray(shift, dtype=float)
    return eval_potential(model, nodes)


def analytic_fourier(model: PotentialModel, grid: GridSpec) -> ComplexField:
    """Closed-form ``V_hat`` on the centred frequency grid, unitary convention."""
    xi = make_grid(grid).freq_nodes
    if model.is_zero:
        return ComplexField(grid, np.zeros(grid.shape), FREQUENCY)
    if model.kind != "gaussian":
        raise NoClosedFormError(f"no closed-form Fourier transform for kind {model.kind!r}")
    s = model.width_or_power
    c = model.center_vector(grid.dim)
    k2 = np.sum(xi**2, axis=-1)
    phase = np.exp(-1j * (xi @ c))
    return ComplexField(grid, model.amplitude * s**grid.dim * np.exp(-0.5 * s**2 * k2) * phase, FREQUENCY)


def _unit(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    nrm = np.linalg.norm(theta)
    if not nrm > 0:
        raise ValueError("direction must be non-zero")
    return theta / nrm


def xray_analytic(model: PotentialModel, x_perp, theta) -> np.ndarray | float:
    """Closed-form line integral of ``model`` along ``x_perp + t theta``."""
    theta = _unit(theta)
    x = np.asarray(x_perp, dtype=float)
    scalar = x.ndim == 1
    if model.is_zero:
        return 0.0 if scalar else np.zeros(x.shape[:-1])
    if model.kind != "gaussian":
        raise NoClosedFormError(f"no closed-form X-ray transform for kind {model.kind!r}")
    p = x - model.center_vector(theta.size)
    along = p @ theta
    d2 = np.sum(p * p, axis=-1) - along**2
    s = model.width_or_power
    out = model.amplitude * s * np.sqrt(2.0 * np.pi) * np.exp(-0.5 * d2 / s**2)
    return float(out) if scalar else out


@dataclass(frozen=True)
class QuadratureRule:
    """Composite Gauss-Legendre rule on ``[-half_length, half_length]``."""

    half_length: float = 12.0
    panels: int = 64
    order: int = 8
    tail_tol: float = 1e-10

    def nodes_weights(self) -> tuple[np.ndarray, np.ndarray]:
        g, w = np.polynomial.legendre.leggauss(self.order)
        edges = np.linspace(-self.half_length, self.half_length, self.panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        t = (mid[:, None] + half[:, None] * g[None, :]).ravel()
        wt = (half[:, None] * w[None, :]).ravel()
        return t, wt


Integrand = Union[PotentialModel, Callable[[np.ndarray], np.ndarray]]


def _as_callable(f: Integrand) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(f, PotentialModel):
        return lambda pts: eval_potential(f, pts)
    return f


def xray_numeric(model: Integrand, x_perp, theta, rule: QuadratureRule | None = None):
    """Line integral by composite quadrature; accepts a model or a callable.

    The tail beyond ``rule.half_length`` is estimated from the integrand at the
    window ends times the window length; an estimate above ``rule.tail_tol``
    raises :class:`XRayTailError`.
    """
    rule = rule or QuadratureRule()
    theta = _unit(theta)
    f = _as_callable(model)
    x = np.asarray(x_perp, dtype=float)
    scalar = x.ndim == 1
    pts0 = np.atleast_2d(x)
    t, w = rule.nodes_weights()
    pts = pts0[..., None, :] + t[:, None] * theta
    vals = f(pts)
    ends = np.stack(
        [f(pts0 + rule.half_length * theta), f(pts0 - rule.half_length * theta)], axis=-1
    )
    tail = float(np.max(np.abs(ends))) * rule.half_length if ends.size else 0.0
    if tail > rule.tail_tol:
        raise XRayTailError(tail, rule.tail_tol)
    out = vals @ w
    return float(out[0]) if scalar else out.reshape(x.shape[:-1])


# --- assumption checks ---------------------------------------------------------

PASS, FAIL, NOT_CHECKABLE = "pass", "fail", "not_checkable_numerically"

ITEMS_1_1 = [f"1.1.{i}" for i in range(1, 8)]
ITEMS_1_2 = [f"1.2.{i}" for i in range(1, 9)]


@dataclass
class AssumptionCheck:
    item: str
    status: str
    witness: float | None = None
    note: str = ""


@dataclass
class AssumptionReport:
    checks: list[AssumptionCheck] = field(default_factory=list)

    def status(self, item: str) -> str:
        return next(c.status for c in self.checks if c.item == item)

    def failed(self) -> list[str]:
        return [c.item for c in self.checks if c.status == FAIL]

    @property
    def all_checkable_pass(self) -> bool:
        return not self.failed()


def _ray_samples(dim: int, r: np.ndarray) -> np.ndarray:
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    elif dim == 2:
        a = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        dirs = np.stack([np.cos(a), np.sin(a)], axis=-1)
    else:
        dirs = np.concatenate([np.eye(3), -np.eye(3), np.ones((1, 3)) / np.sqrt(3)])
    return dirs[:, None, :] * r[None, :, None]


def _nonincreasing_witness(profile: np.ndarray) -> float:
    """Largest relative increase along the last axis (0 if non-increasing)."""
    scale = np.max(np.abs(profile))
    if scale == 0 or not np.isfinite(scale):
        return 0.0 if scale == 0 else np.inf
    return float(max(np.max(np.diff(profile, axis=-1)), 0.0) / scale)


def _bounded_tail(profile: np.ndarray) -> tuple[bool, float]:
    """A weighted profile is taken as bounded if it does not grow over the outer half."""
    half = profile.shape[-1] // 2
    sup = float(np.max(profile))
    grows = _nonincreasing_witness(profile[..., half:]) > 1e-9
    return np.isfinite(sup) and not grows, sup


def _gradient(model: PotentialModel, pts: np.ndarray, step: float):
    dim = pts.shape[-1]
    grads, lap = [], 0.0
    v0 = eval_potential(model, pts)
    for a in range(dim):
        e = np.zeros(dim)
        e[a] = step
        vp, vm = eval_potential(model, pts + e), eval_potential(model, pts - e)
        grads.append((vp - vm) / (2 * step))
        lap = lap + (vp - 2 * v0 + vm) / step**2
    return np.stack(grads, axis=-1), lap


def validate_assumptions(model: PotentialModel, grid: GridSpec, tol: float = 1e-9) -> AssumptionReport:
    """Sampled-grid checks for the interaction and external potential assumptions.

    Items without an upper bound on their exponents, and the spectral condition
    on ``H_0 + V``, are reported as not checkable.  Failures are logged as
    warnings; nothing here is a hard gate.
    """
    g = make_grid(grid)
    n = grid.dim
    h = grid.spacing
    off = g.radius > 0.5 * h
    pts = g.nodes[off]
    vals = eval_potential(model, pts)
    scale = float(np.max(np.abs(vals))) if vals.size else 0.0
    r = np.linspace(h, 0.99 * grid.half_width, 400)
    rays = _ray_samples(n, r)
    ray_v = eval_potential(model, rays)
    grad, lap = _gradient(model, pts, 1e-4 * h)

    report = AssumptionReport()
    add = report.checks.append

    vmin = float(np.min(vals)) if vals.size else 0.0
    r2v = r**2 * ray_v
    nonneg = vmin >= -tol * max(scale, 1.0)

    # Assumption on the interaction potential.
    add(AssumptionCheck("1.1.1", PASS if nonneg and np.all(np.isfinite(r2v)) else FAIL, vmin,
                        "V >= 0 and |x|^2 V bounded"))
    gnorm = float(np.sum(np.linalg.norm(grad, axis=-1) ** (n / 2)) * grid.weight) ** (2 / n)
    add(AssumptionCheck("1.1.2", PASS if np.isfinite(gnorm) else FAIL, gnorm, "grad V in L^{n/2}"))
    add(AssumptionCheck("1.1.3", NOT_CHECKABLE, None, "exponent q has no upper bound"))
    add(AssumptionCheck("1.1.4", NOT_CHECKABLE, None, "exponent delta has no upper bound"))
    odd = float(np.max(np.abs(vals - eval_potential(model, -pts)))) if vals.size else 0.0
    add(AssumptionCheck("1.1.5", PASS if odd <= 1e-12 * max(scale, 1.0) else FAIL, odd, "V(-x) = V(x)"))
    mono = _nonincreasing_witness(r2v)
    add(AssumptionCheck("1.1.6", PASS if mono <= tol else FAIL, mono, "|x|^2 V non-increasing"))
    s = n / 2 + 1e-3
    ok, sup = _bounded_tail((1 + r) ** (1 + s) * np.abs(ray_v))
    add(AssumptionCheck("1.1.7", PASS if ok else FAIL, sup, "(1+|x|)^{1+s} V bounded, s > n/2"))

    # Assumption on the external potential.
    add(AssumptionCheck("1.2.1", PASS if nonneg else FAIL, vmin, "V >= 0"))
    add(_homogeneity_check(model, rays, ray_v, tol))
    add(AssumptionCheck("1.2.3", PASS if mono <= tol else FAIL, mono, "|x|^2 V non-increasing"))
    add(AssumptionCheck("1.2.4", NOT_CHECKABLE, None, "zero is not an eigenvalue of H_0 + V"))
    gsup = float(np.max(np.linalg.norm(grad, axis=-1))) if vals.size else 0.0
    lap_n = float(np.sum(np.abs(lap) ** n) * grid.weight) ** (1 / n) if vals.size else 0.0
    ok5 = np.isfinite(gsup) and np.isfinite(lap_n)
    add(AssumptionCheck("1.2.5", PASS if ok5 else FAIL, gsup, "grad V bounded, Laplacian in L^n"))
    add(AssumptionCheck("1.2.6", NOT_CHECKABLE, None, "exponent p has no upper bound"))
    add(AssumptionCheck("1.2.7", NOT_CHECKABLE, None, "exponent beta/delta has no upper bound"))
    delta = 1.5 * n + 1 + 1e-3
    ok8, sup8 = _bounded_tail((1 + r**2) ** (delta / 2) * np.abs(ray_v))
    add(AssumptionCheck("1.2.8", PASS if ok8 else FAIL, sup8, "weighted decay, delta > 3n/2 + 1"))

    for c in report.checks:
        if c.status == FAIL:
            logger.warning("potential %s (%s) fails assumption item %s: %s (witness %s)",
                           model.kind, model.role, c.item, c.note, c.witness)
    return report


def _homogeneity_check(model, rays, ray_v, tol) -> AssumptionCheck:
    note = "homogeneous of degree -gamma, gamma >= 1"
    if model.is_zero:
        return AssumptionCheck("1.2.2", PASS, 0.0, note)
    inner = rays[:, : rays.shape[1] // 2]
    v1 = eval_potential(model, inner)
    v2 = eval_potential(model, 2.0 * inner)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = -np.log2(v2 / v1)
    if not np.all(np.isfinite(gamma)):
        return AssumptionCheck("1.2.2", FAIL, np.inf, note)
    g0 = float(np.median(gamma))
    spread = float(np.max(np.abs(gamma - g0)))
    ok = spread <= 1e-6 and g0 >= 1.0
    return AssumptionCheck("1.2.2", PASS if ok else FAIL, spread, note + f" (fitted gamma {g0:.4g})")
