"""Recovery of ``V_hat_int`` from dilation-indexed probe data by truncated Picard series.

The data are ``S_lim(lam) = (2 pi)^(n/2) int V_hat(xi) H_j(xi, lam) d xi``: a
first-kind equation whose discretisation ``T`` (rows: dilations, columns:
frequency nodes in the kernel's band) is inverted through its singular system.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_matrix, check_vector
from .potentials import PotentialModel
from .probe import ProbeConfig, ScatterPlan, _plan, _probe_states, compute_I, kernel_H, second_term
from .scattering import as_orbitals
from .spectral import FREQUENCY, POSITION, ComplexField, GridSpec, inverse_fourier, make_grid

__all__ = [
    "DEFAULT_LAMBDAS",
    "FirstKindOperator",
    "SingularSystem",
    "PicardDiagnostics",
    "SlimData",
    "RankZeroError",
    "collect_slim",
    "assemble_T",
    "singular_system",
    "picard_reconstruct",
    "vint_from_vhat",
    "PicardReconstructor",
    "write_spectrum_csv",
]

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = tuple(np.round(0.1 * np.arange(16), 10))


class RankZeroError(ValueError):
    pass


@dataclass
class FirstKindOperator:
    """``matrix[m, k] = (2 pi)^(n/2) H_j(xi_k, lam_m) w_k`` on the kernel's frequency band."""

    lambda_grid: np.ndarray
    xi_nodes: np.ndarray
    xi_index: np.ndarray
    weight: float
    matrix: np.ndarray
    grid: GridSpec | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=complex)
        if self.matrix.shape != (len(self.lambda_grid), len(self.xi_nodes)):
            raise ValueError("matrix shape must be (len(lambda_grid), len(xi_nodes))")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("operator has non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def embed(self, vec: np.ndarray) -> ComplexField:
        """Zero-fill a band vector onto the full centred frequency grid."""
        if self.grid is None:
            raise ValueError("operator was built without a grid")
        full = np.zeros(self.grid.size, dtype=complex)
        full[self.xi_index] = vec
        return ComplexField(self.grid, full, FREQUENCY)

    def restrict(self, f: ComplexField) -> np.ndarray:
        return f.values.ravel()[self.xi_index]


@dataclass
class SingularSystem:
    """``matrix = g @ diag(mu) @ phi^H`` with orthonormal columns in ``phi`` and ``g``."""

    mu: np.ndarray
    phi: np.ndarray
    g: np.ndarray
    residuals: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return int(np.sum(self.mu > 0))

    def reconstruct(self) -> np.ndarray:
        return (self.g * self.mu) @ self.phi.conj().T


@dataclass
class PicardDiagnostics:
    coefficients: np.ndarray
    ratios: np.ndarray
    partial_sums: np.ndarray
    n_star: int
    residual_norms: np.ndarray
    rule: str
    projection_residual: float | None = None


@dataclass
class SlimData:
    lambdas: np.ndarray
    values: np.ndarray
    residuals: np.ndarray
    flagged: np.ndarray
    speeds: np.ndarray
    raw: np.ndarray

    @property
    def noise_level(self) -> float:
        """Norm of the extrapolation residuals, the default discrepancy level."""
        return float(np.linalg.norm(self.residuals))


def collect_slim(cfg: ProbeConfig, j: int, v_int, v_ext: PotentialModel | None,
                 scatter: ScatterPlan, lambdas: Sequence[float] = DEFAULT_LAMBDAS,
                 v_ext_known: bool = True, tol: float = 1e-3) -> SlimData:
    """``S_lim(lam)`` for orbital ``j`` by extrapolating ``I_j(v)`` to ``|v| = infinity``.

    Per dilation, ``I_j`` is fitted by ``a0 + a1/|v| + a2/|v|^2`` (least squares when
    more than three speeds are given) and ``a0`` returned.  With ``v_ext_known``
    the ``1/|v|`` X-ray term is subtracted first.  The residual reported per
    dilation is the change in ``a0`` when the slowest speed is dropped; values
    above ``tol`` (relative to ``max |a0|``) are flagged.
    """
    speeds = np.asarray(cfg.speeds, dtype=float)
    if speeds.size < 3 or np.any(speeds == 0):
        raise ValueError("extrapolation needs at least three non-zero speeds")
    lams = np.asarray(lambdas, dtype=float)
    raw = np.zeros((lams.size, speeds.size), dtype=complex)
    for m, lam in enumerate(lams):
        c = cfg.with_lam(lam)
        phi = _probe_states(c)
        for s, v in enumerate(speeds):
            val = compute_I(c, v, v_int, v_ext, _plan(scatter, v))[j]
            if v_ext_known:
                val -= second_term(phi, v_ext, c.direction, v)[j]
            raw[m, s] = val
    inv = 1.0 / speeds
    basis = np.stack([np.ones_like(inv), inv, inv**2], axis=1)
    a0 = np.linalg.lstsq(basis, raw.T, rcond=None)[0][0]
    if speeds.size > 3:
        a0_drop = np.linalg.lstsq(basis[1:], raw[:, 1:].T, rcond=None)[0][0]
    else:
        a0_drop = np.linalg.lstsq(basis[1:, :2], raw[:, 1:].T, rcond=None)[0][0]
    resid = np.abs(a0 - a0_drop)
    scale = max(float(np.max(np.abs(a0))), np.finfo(float).tiny)
    flagged = resid > tol * scale
    for m in np.flatnonzero(flagged):
        log.warning("extrapolation residual %.3e at lambda = %g above tolerance", resid[m], lams[m])
    return SlimData(lams, a0, resid, flagged, speeds, raw)


def assemble_T(phi, j: int, lambda_grid: Sequence[float] = DEFAULT_LAMBDAS,
               xi_index: np.ndarray | None = None, T_H: float = 10.0, dt_H: float = 0.05,
               band_tol: float = 1e-8) -> FirstKindOperator:
    """Discretise ``f -> (2 pi)^(n/2) int f(xi) H_j(xi, lam) d xi`` over ``lambda_grid``.

    Without ``xi_index`` the columns are the frequency nodes where
    ``max_lam |H_j| > band_tol * max |H_j|``.
    """
    phi = as_orbitals(phi)
    grid = phi.grid
    lams = np.asarray(lambda_grid, dtype=float)
    rows = np.array([kernel_H(phi, j, lam, T_H, dt_H).values.ravel() for lam in lams])
    if xi_index is None:
        peak = np.abs(rows).max(initial=0.0)
        if peak == 0.0:
            xi_index = np.arange(grid.size)
        else:
            xi_index = np.flatnonzero(np.abs(rows).max(axis=0) > band_tol * peak)
    xi_index = np.asarray(xi_index)
    nodes = make_grid(grid).freq_nodes.reshape(-1, grid.dim)[xi_index]
    w = grid.freq_weight
    mat = (2 * np.pi) ** (grid.dim / 2) * rows[:, xi_index] * w
    return FirstKindOperator(lams, nodes, xi_index, w, mat, grid)


def _as_matrix(T) -> np.ndarray:
    return T.matrix if isinstance(T, FirstKindOperator) else check_matrix(T)


def singular_system(T) -> SingularSystem:
    """Thin SVD with the defining identities checked and recorded."""
    a = _as_matrix(T)
    g, mu, vh = np.linalg.svd(a, full_matrices=False)
    phi = vh.conj().T
    scale = float(mu[0]) if mu.size and mu[0] > 0 else 1.0
    res = {
        "forward": float(np.max(np.abs(a @ phi - g * mu), initial=0.0)) / scale,
        "adjoint": float(np.max(np.abs(a.conj().T @ g - phi * mu), initial=0.0)) / scale,
        "orth_phi": float(np.max(np.abs(phi.conj().T @ phi - np.eye(mu.size)), initial=0.0)),
        "orth_g": float(np.max(np.abs(g.conj().T @ g - np.eye(mu.size)), initial=0.0)),
    }
    return SingularSystem(mu, phi, g, res)


def picard_reconstruct(sys: SingularSystem, slim, rule: str = "discrepancy",
                       n_star: int | None = None, delta: float | None = None,
                       tau: float = 1.5, ratio: float = 1e-6,
                       truth: np.ndarray | None = None):
    """Truncated Picard series ``sum_{n <= n*} <slim, g_n> / mu_n phi_n``.

    Rules: ``"fixed"`` (``n_star`` terms), ``"ratio"`` (all ``mu_n / mu_1 > ratio``)
    and ``"discrepancy"`` (fewest terms with data misfit ``<= tau * delta``).
    Singular values at round-off level are never used.  With ``truth`` the
    norm of its component outside the retained span is reported.
    """
    s = check_vector(slim, size=sys.g.shape[0])
    mu = sys.mu
    floor = np.finfo(float).eps * max(sys.g.shape[0], sys.phi.shape[0]) * (mu[0] if mu.size else 0.0)
    usable = int(np.sum(mu > floor)) if mu.size and mu[0] > 0 else 0
    if usable == 0:
        raise RankZeroError("operator numerically rank-0")
    coef = sys.g.conj().T @ s
    ratios = np.full(mu.size, np.inf)
    ratios[:usable] = np.abs(coef[:usable]) / mu[:usable]
    partial = np.cumsum(np.where(np.isfinite(ratios), ratios, 0.0) ** 2)
    # misfit after k terms: data energy outside the first k left vectors
    outside = max(float(np.linalg.norm(s) ** 2 - np.sum(np.abs(coef) ** 2)), 0.0)
    tail = np.concatenate([np.cumsum((np.abs(coef) ** 2)[::-1])[::-1], [0.0]])
    misfit = np.sqrt(tail + outside)
    if rule == "fixed":
        if n_star is None or n_star < 0:
            raise ValueError("fixed rule needs n_star >= 0")
        k = min(int(n_star), usable)
    elif rule == "ratio":
        k = min(int(np.sum(mu / mu[0] > ratio)), usable)
        if k == 0:
            raise RankZeroError("operator numerically rank-0")
    elif rule == "discrepancy":
        if delta is None:
            raise ValueError("discrepancy rule needs the noise level delta")
        hits = np.flatnonzero(misfit[: usable + 1] <= tau * delta)
        k = int(hits[0]) if hits.size else usable
    else:
        raise ValueError(f"unknown truncation rule {rule!r}")
    est = sys.phi[:, :k] @ (coef[:k] / mu[:k])
    proj = None
    if truth is not None:
        t = np.asarray(truth, dtype=complex)
        proj = float(np.linalg.norm(t - sys.phi[:, :k] @ (sys.phi[:, :k].conj().T @ t)))
    diag = PicardDiagnostics(coef, ratios, partial, k, misfit, rule, proj)
    return est, diag


def vint_from_vhat(vhat: ComplexField):
    """Inverse Fourier transform of a (band-limited) ``V_hat``.

    Returns the real part as a position field and the relative size of the
    discarded imaginary part.
    """
    if vhat.space != FREQUENCY:
        raise ValueError("vint_from_vhat expects a frequency-space field")
    v = inverse_fourier(vhat).values
    nrm = np.linalg.norm(v)
    imag = float(np.linalg.norm(v.imag) / nrm) if nrm > 0 else 0.0
    return ComplexField(vhat.grid, v.real, POSITION), imag


class PicardReconstructor(BaseEstimator):
    """Estimator wrapper: ``fit`` takes the first-kind operator, ``predict`` maps data to ``V_hat``.

    Parameters
    ----------
    rule : {"discrepancy", "fixed", "ratio"}
    n_components : int, optional
        Truncation index for ``rule="fixed"``.
    noise_level : float, optional
        Data noise norm ``delta`` for the discrepancy rule.
    tau : float
        Discrepancy safety factor.
    ratio : float
        Relative singular value cutoff for ``rule="ratio"``.
    """

    def __init__(self, rule="discrepancy", n_components=None, noise_level=None, tau=1.5,
                 ratio=1e-6):
        self.rule = rule
        self.n_components = n_components
        self.noise_level = noise_level
        self.tau = tau
        self.ratio = ratio

    def fit(self, T, y=None):
        self.operator_ = T if isinstance(T, FirstKindOperator) else None
        self.system_ = singular_system(T)
        self.singular_values_ = self.system_.mu
        return self

    def predict(self, slim, truth=None):
        if not hasattr(self, "system_"):
            raise AttributeError("PicardReconstructor is not fitted")
        est, diag = picard_reconstruct(self.system_, slim, self.rule, self.n_components,
                                       self.noise_level, self.tau, self.ratio, truth)
        self.diagnostics_ = diag
        return est


def write_spectrum_csv(sys: SingularSystem, diag: PicardDiagnostics | None, path) -> None:
    """One row per singular index: ``mu``, coefficient, ratio, partial sum, retained flag."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "mu", "abs_coefficient", "ratio", "partial_sum", "retained"])
        for n, m in enumerate(sys.mu):
            if diag is None:
                w.writerow([n, f"{m:.17g}", "", "", "", ""])
                continue
            w.writerow([n, f"{m:.17g}", f"{abs(diag.coefficients[n]):.17g}",
                        f"{diag.ratios[n]:.17g}", f"{diag.partial_sums[n]:.17g}",
                        int(n < diag.n_star)])

