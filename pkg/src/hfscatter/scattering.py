"""Scattering solutions and the Duhamel form of the scattering operator.

Incoming data ``phi`` are imposed by free back-propagation to ``-T``; the
Hartree-Fock flow then runs to ``+T`` and the outgoing data are

    psi = phi + (1/i) * integral_{-T}^{T} U_0(-t) P(u(t)) dt.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import HFPropagator, InteractionLike, OrbitalSet, StepperConfig
from .potentials import PotentialModel
from .spectral import ComplexField, S0State, make_grid, propagate_array

__all__ = [
    "ScatterConfig",
    "ScatterOutput",
    "Trajectory",
    "solve_scattering_solution",
    "apply_S",
    "born_N",
    "born_duhamel",
    "as_orbitals",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScatterConfig:
    """Time window ``[-T, T]``, step ``dt`` and the tolerance for the neglected tails.

    ``richardson`` replaces the trapezoid Duhamel sum by its Richardson
    extrapolation against the ``2 dt`` sum (Simpson weights); it needs an even
    number of steps.
    """

    T: float
    dt: float
    tail_tol: float = 1e-6
    richardson: bool = False
    norm_budget: float = 0.5
    dealias: bool = False

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        ratio = 2 * self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"dt = {self.dt} does not divide the window [-{self.T}, {self.T}]")
        if self.richardson and round(ratio) % 2:
            raise ValueError("richardson quadrature needs an even number of steps")
        if not self.tail_tol > 0:
            raise ValueError("tail_tol must be positive")

    @property
    def steps(self) -> int:
        return int(round(2 * self.T / self.dt))

    def to_dict(self) -> dict:
        return {"T": self.T, "dt": self.dt, "tail_tol": self.tail_tol,
                "richardson": self.richardson, "norm_budget": self.norm_budget,
                "dealias": self.dealias}


@dataclass
class Trajectory:
    times: np.ndarray
    states: list[OrbitalSet]
    initial_norms: np.ndarray

    @property
    def final(self) -> OrbitalSet:
        return self.states[-1]

    def max_norm_drift(self) -> float:
        return float(max(np.max(np.abs(s.norms() - self.initial_norms)) for s in self.states))


@dataclass
class ScatterOutput:
    """Outgoing data ``psi`` with the measured consistency residual and tail estimate."""

    psi: OrbitalSet
    consistency_residual: float
    tail_estimate: float
    flagged: bool
    final_state: OrbitalSet
    norm_drift: float
    config: ScatterConfig
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "consistency_residual": self.consistency_residual,
            "tail_estimate": self.tail_estimate,
            "flagged": self.flagged,
            "norm_drift": self.norm_drift,
            "config": self.config.to_dict(),
            **self.diagnostics,
        }


def as_orbitals(phi) -> OrbitalSet:
    """Accept an :class:`OrbitalSet`, one field/state or a sequence of them."""
    if isinstance(phi, OrbitalSet):
        return phi
    if isinstance(phi, (S0State, ComplexField)):
        phi = [phi]
    fields = [p.field if isinstance(p, S0State) else p for p in phi]
    return OrbitalSet.from_fields(fields)


def _check_budget(u: OrbitalSet, budget: float):
    norms = u.norms()
    if np.any(norms > budget):
        warnings.warn(
            f"orbital norms {np.round(norms, 4).tolist()} exceed the smallness budget {budget}",
            RuntimeWarning,
            stacklevel=3,
        )


def _march(phi: OrbitalSet, v_int, v_ext, cfg: ScatterConfig, frame_velocity=None):
    """Yield ``(t, u(t), propagator)`` on the step grid from ``-T`` to ``T``."""
    g = make_grid(phi.grid)
    prop = HFPropagator(phi.grid, v_int, v_ext, StepperConfig(cfg.dt, dealias=cfg.dealias),
                        frame_velocity=frame_velocity)
    t = -cfg.T
    u = propagate_array(phi.orbitals, g, t)
    yield t, u, prop
    for i in range(cfg.steps):
        u = prop.advance(u, t)
        t = -cfg.T + (i + 1) * cfg.dt
        yield t, u, prop


def solve_scattering_solution(phi, v_int: InteractionLike, v_ext: PotentialModel | None,
                              cfg: ScatterConfig, sample_every: int | None = None,
                              frame_velocity=None) -> Trajectory:
    """Propagate ``u(-T) = U_0(-T) phi`` to ``+T``; keep every ``sample_every``-th step.

    With ``sample_every=None`` only the two endpoints are kept.
    """
    phi = as_orbitals(phi)
    _check_budget(phi, cfg.norm_budget)
    times, states = [], []
    last = cfg.steps
    for i, (t, u, _) in enumerate(_march(phi, v_int, v_ext, cfg, frame_velocity)):
        keep = i in (0, last) if sample_every is None else (i % sample_every == 0 or i == last)
        if keep:
            times.append(t)
            states.append(OrbitalSet(phi.grid, u, t))
    return Trajectory(np.array(times), states, phi.norms())


def _weights(cfg: ScatterConfig) -> np.ndarray:
    n = cfg.steps
    w = np.full(n + 1, cfg.dt)
    w[0] = w[-1] = 0.5 * cfg.dt
    if cfg.richardson:
        # Simpson: (4 * trapezoid(dt) - trapezoid(2 dt)) / 3
        w = np.full(n + 1, cfg.dt / 3.0)
        w[1:-1:2] *= 4.0
        w[2:-1:2] *= 2.0
    return w


def _norm_rows(u: np.ndarray, weight: float) -> np.ndarray:
    return np.sqrt(weight * np.sum(np.abs(u.reshape(u.shape[0], -1)) ** 2, axis=1))


def _tail(p_edge: float, p_inner: float, T: float) -> float:
    """Integral of ``|P(t)|`` beyond ``T`` assuming power decay fitted on ``[T/2, T]``."""
    if p_edge == 0.0:
        return 0.0
    if p_inner <= p_edge:
        return np.inf
    rate = np.log(p_inner / p_edge) / np.log(2.0)
    return np.inf if rate <= 1.0 else p_edge * T / (rate - 1.0)


def apply_S(phi, v_int: InteractionLike, v_ext: PotentialModel | None, cfg: ScatterConfig,
            frame_velocity=None) -> ScatterOutput:
    """Outgoing data ``psi = S phi`` via the Duhamel integral on the stepper's time grid.

    ``frame_velocity`` evaluates the external potential as ``V_ext(x + v t)``,
    i.e. the scattering of ``exp(i v.x) phi`` seen from the co-moving frame.
    """
    phi = as_orbitals(phi)
    _check_budget(phi, cfg.norm_budget)
    grid = phi.grid
    g = make_grid(grid)
    w = _weights(cfg)
    n = cfg.steps
    acc = np.zeros_like(phi.orbitals)
    p_norm = np.zeros(n + 1)
    u = None
    for i, (t, u, prop) in enumerate(_march(phi, v_int, v_ext, cfg, frame_velocity)):
        p = prop.rhs(u, t)
        p_norm[i] = np.max(_norm_rows(p, grid.weight))
        if np.any(p):
            acc += w[i] * propagate_array(p, g, -t)
    psi = phi.orbitals - 1j * acc
    final = OrbitalSet(grid, u, cfg.T)
    resid = float(np.max(_norm_rows(u - propagate_array(psi, g, cfg.T), grid.weight)))
    q = n // 4
    tail = _tail(p_norm[0], p_norm[q], cfg.T) + _tail(p_norm[-1], p_norm[n - q], cfg.T)
    drift = float(np.max(np.abs(final.norms() - phi.norms())))
    flagged = resid > 10 * cfg.tail_tol
    if flagged:
        log.warning("scattering run flagged: consistency residual %.3e > 10 x tail_tol %.1e",
                    resid, cfg.tail_tol)
    return ScatterOutput(OrbitalSet(grid, psi, cfg.T), resid, float(tail), bool(flagged), final,
                         drift, cfg, {"max_P_norm": float(p_norm.max())})


def born_N(phi, v_int: InteractionLike, t: float) -> list[ComplexField]:
    """Interaction nonlinearity ``N_j`` on the free flow ``U_0(t) phi``."""
    phi = as_orbitals(phi)
    u = propagate_array(phi.orbitals, make_grid(phi.grid), t)
    prop = HFPropagator(phi.grid, v_int, None, StepperConfig(1.0))
    vals = prop.rhs(u, t)
    return [ComplexField(phi.grid, vals[j]) for j in range(phi.count)]


def born_duhamel(phi, v_int: InteractionLike, cfg: ScatterConfig) -> np.ndarray:
    """``integral_{-T}^{T} U_0(-t) N_j(U_0(t) phi) dt`` on the same quadrature as :func:`apply_S`.

    Returns an array of shape ``(N, *grid.shape)``.
    """
    phi = as_orbitals(phi)
    g = make_grid(phi.grid)
    prop = HFPropagator(phi.grid, v_int, None, StepperConfig(cfg.dt))
    acc = np.zeros_like(phi.orbitals)
    if prop.kernel.is_zero:
        return acc
    w = _weights(cfg)
    for i in range(cfg.steps + 1):
        t = -cfg.T + i * cfg.dt
        u = propagate_array(phi.orbitals, g, t)
        acc += w[i] * propagate_array(prop.rhs(u, t), g, -t)
    return acc

