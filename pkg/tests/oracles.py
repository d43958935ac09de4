"""Independent reference computations used by the tests.

Everything here is deliberately naive: direct sums, explicit DFT matrices and
scipy quadrature, so that it shares no code path with the package.
"""

import numpy as np
from scipy import integrate


def gaussian_fourier_quad(xi, sigma=1.0):
    """``(2 pi)^(-1/2) int exp(-i x xi) exp(-x^2 / (2 sigma^2)) dx`` by quadrature."""
    out = []
    for k in np.atleast_1d(xi):
        f = lambda x: np.exp(-x * x / (2 * sigma**2))
        if k == 0:
            val, _ = integrate.quad(f, 0, np.inf, epsabs=1e-15)
        else:
            val, _ = integrate.quad(f, 0, 40 * sigma, weight="cos", wvar=abs(k), epsabs=1e-13, limit=200)
        out.append(2 * val / np.sqrt(2 * np.pi))
    return np.array(out)


def free_gaussian(x, t):
    """Free evolution of ``exp(-x^2/2)`` in one dimension."""
    return (1 + 1j * t) ** -0.5 * np.exp(-x * x / (2 * (1 + 1j * t)))


def direct_convolution_1d(v, x, f):
    """``h sum_b v(x_a - x_b) f(x_b)`` with the true (non-periodic) difference."""
    h = x[1] - x[0]
    return h * np.array([np.sum(v(xa - x) * f) for xa in x])


def direct_hartree_1d(v, x, u, j):
    dens = sum(np.abs(u[k]) ** 2 for k in range(len(u)) if k != j)
    return direct_convolution_1d(v, x, dens) * u[j]


def direct_fock_1d(v, x, u, j):
    out = np.zeros_like(u[j])
    for k in range(len(u)):
        if k != j:
            out -= direct_convolution_1d(v, x, u[j] * np.conj(u[k])) * u[k]
    return out


def dft_matrices(x, xi):
    """Unitary-convention forward matrix and its inverse for nodes ``x`` and ``xi``."""
    h = x[1] - x[0]
    dxi = xi[1] - xi[0]
    fwd = h / np.sqrt(2 * np.pi) * np.exp(-1j * np.outer(xi, x))
    inv = dxi / np.sqrt(2 * np.pi) * np.exp(1j * np.outer(x, xi))
    return fwd, inv


def direct_kernel_H_1d(x, xi, phis, j, T, dt):
    """``H_j`` by explicit DFT matrices and a trapezoid in time, ``O(M^2)`` per time."""
    fwd, inv = dft_matrices(x, xi)
    steps = int(round(2 * T / dt))
    acc = np.zeros(xi.size, dtype=complex)
    for i in range(steps + 1):
        t = -T + i * dt
        u = [inv @ (np.exp(-0.5j * t * xi**2) * (fwd @ p)) for p in phis]
        dens = [fwd @ (np.abs(uk) ** 2) for uk in u]
        val = sum(dens) * np.conj(dens[j])
        val = val - sum(np.abs(fwd @ (u[j] * np.conj(uk))) ** 2 for uk in u)
        acc += (0.5 * dt if i in (0, steps) else dt) * val
    return acc


def direct_kernel_H_at_zero(x, phis, j, T, dt):
    """``H_j(0)`` from norms and overlaps of the free flow (direct quadrature)."""
    h = x[1] - x[0]
    xi = np.pi / (x[-1] - x[0] + h) * 2 * np.arange(-x.size // 2, x.size // 2)
    fwd, inv = dft_matrices(x, xi)
    steps = int(round(2 * T / dt))
    acc = 0.0
    for i in range(steps + 1):
        t = -T + i * dt
        u = [inv @ (np.exp(-0.5j * t * xi**2) * (fwd @ p)) for p in phis]
        nrm = [h * np.sum(np.abs(uk) ** 2) for uk in u]
        val = sum(nrm) * nrm[j] / (2 * np.pi)
        val -= sum(abs(h * np.sum(u[j] * np.conj(uk))) ** 2 for uk in u) / (2 * np.pi)
        acc += (0.5 * dt if i in (0, steps) else dt) * val
    return acc


def hilbert_derivative_quad(f, df, xs):
    """``I^{-1} f = H f' = -(1/pi) PV int f'(y) / (y - x) dy`` by Cauchy-weight quadrature."""
    out = []
    for x0 in xs:
        lo, hi = x0 - 40.0, x0 + 40.0
        val, _ = integrate.quad(df, lo, hi, weight="cauchy", wvar=x0, limit=400, epsabs=1e-13)
        out.append(-val / np.pi)
    return np.array(out)


def gaussian_xray_quad(amplitude, sigma, center, point, theta):
    """Line integral of a gaussian along ``point + s theta`` by adaptive quadrature."""
    c = np.asarray(center, float)
    p = np.asarray(point, float)
    th = np.asarray(theta, float)

    def f(s):
        d = p + s * th - c
        return amplitude * np.exp(-d @ d / (2 * sigma**2))

    val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-13)
    return val
