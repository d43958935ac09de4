import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from hfscatter.interaction import (DEFAULT_LAMBDAS, PicardReconstructor, RankZeroError, assemble_T,
                                   collect_slim, picard_reconstruct, singular_system,
                                   vint_from_vhat, write_spectrum_csv)
from hfscatter.potentials import analytic_fourier, gaussian, sample_potential
from hfscatter.probe import ProbeConfig, kernel_H, leading_term, vhat_field
from hfscatter.scattering import ScatterConfig
from hfscatter.spectral import FREQUENCY, ComplexField, GridSpec, make_grid, s0_state

V_INT = gaussian(0.5, 1.0, role="interaction")
V_EXT = gaussian(1.0, 1.0, center=[0.3, 0.4])


def centred(spec, width, norm=0.3, center=(0.0, 0.0)):
    x = make_grid(spec).nodes
    d = x - np.asarray(center)
    u = np.exp(-np.sum(d * d, -1) / (2 * width**2)).astype(complex)
    u *= norm / np.sqrt(spec.weight * np.sum(np.abs(u) ** 2))
    return s0_state(ComplexField(spec, u))


@pytest.fixture(scope="module")
def small_operator():
    spec = GridSpec(2, 64, 12.0)
    phis = [centred(spec, 1.0), centred(spec, 1.6)]
    return phis, assemble_T(phis, 0, DEFAULT_LAMBDAS[::3], T_H=2.0, dt_H=0.1)


# --- operator assembly ------------------------------------------------------------

def test_single_orbital_gives_zero_matrix():
    spec = GridSpec(2, 64, 12.0)
    op = assemble_T([centred(spec, 1.0)], 0, (0.0, 0.5), T_H=1.0, dt_H=0.1)
    assert np.all(op.matrix == 0)


def test_rows_integrate_kernel(small_operator):
    phis, op = small_operator
    grid = op.grid
    for m, lam in enumerate(op.lambda_grid[:2]):
        h = kernel_H(phis, 0, lam, 2.0, 0.1).values
        ref = (2 * np.pi) ** (grid.dim / 2) * grid.freq_weight * h.ravel()[op.xi_index].sum()
        assert op.matrix[m] @ np.ones(op.shape[1]) == pytest.approx(ref, rel=1e-12)


def test_rows_have_hermitian_symmetry(small_operator):
    _, op = small_operator
    nodes = op.xi_nodes
    lookup = {tuple(np.round(p, 9)): i for i, p in enumerate(nodes)}
    pairs = [(i, lookup[tuple(np.round(-p, 9))]) for i, p in enumerate(nodes)
             if tuple(np.round(-p, 9)) in lookup]
    assert len(pairs) > 0.9 * len(nodes)
    i, k = np.array(pairs).T
    scale = np.abs(op.matrix).max()
    np.testing.assert_allclose(op.matrix[:, k], op.matrix[:, i].conj(), atol=1e-12 * scale)


def test_operator_embed_restrict_round_trip(small_operator):
    _, op = small_operator
    v = np.arange(op.shape[1]) + 1j
    assert np.array_equal(op.restrict(op.embed(v)), v)


# --- singular system --------------------------------------------------------------

def test_diagonal_matrix_singular_system():
    sys = singular_system(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(sys.mu, [3.0, 1.0])
    np.testing.assert_allclose(np.abs(sys.phi), np.eye(2), atol=1e-15)
    np.testing.assert_allclose(np.abs(sys.g), np.eye(2), atol=1e-15)


def test_zero_matrix_singular_values():
    sys = singular_system(np.zeros((3, 5)))
    assert np.all(sys.mu == 0)
    assert sys.rank == 0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_random_matrix_multiply_back(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((20, 40)) + 1j * rng.standard_normal((20, 40))
    sys = singular_system(a)
    assert np.max(np.abs(sys.reconstruct() - a)) <= 1e-10
    assert max(sys.residuals.values()) <= 1e-10
    assert np.all(np.diff(sys.mu) <= 0)


def test_singular_system_rejects_bad_input():
    with pytest.raises(ValueError):
        singular_system(np.array([[1.0, np.nan]]))
    with pytest.raises(ValueError):
        singular_system(np.ones(3))


# --- Picard reconstruction ----------------------------------------------------------

def test_zero_data_zero_estimate(small_operator):
    _, op = small_operator
    sys = singular_system(op)
    est, _ = picard_reconstruct(sys, np.zeros(op.shape[0]), rule="ratio", ratio=1e-8)
    assert np.all(est == 0)


def test_noiseless_in_range_recovery(small_operator):
    _, op = small_operator
    sys = singular_system(op)
    k = int(np.sum(sys.mu / sys.mu[0] > 1e-6))
    rng = np.random.default_rng(1)
    truth = sys.phi[:, :k] @ (rng.standard_normal(k) + 1j * rng.standard_normal(k))
    est, diag = picard_reconstruct(sys, op.matrix @ truth, rule="fixed", n_star=k, truth=truth)
    assert np.linalg.norm(est - truth) <= 1e-8 * np.linalg.norm(truth)
    assert diag.projection_residual <= 1e-8 * np.linalg.norm(truth)
    assert np.all(np.diff(diag.partial_sums) >= 0)
    assert np.isfinite(diag.partial_sums[-1])


@settings(max_examples=10, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_reconstruction_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((8, 12))
    sys = singular_system(mat)
    s1, s2 = rng.standard_normal(8), rng.standard_normal(8)
    r = lambda s: picard_reconstruct(sys, s, rule="fixed", n_star=5)[0]
    np.testing.assert_allclose(r(a * s1 + b * s2), a * r(s1) + b * r(s2), atol=1e-10)


def test_discrepancy_rule_stops_at_noise_level():
    mat = np.diag([1.0, 1e-1, 1e-2, 1e-3, 1e-4])
    sys = singular_system(mat)
    truth = np.ones(5)
    noise = 1e-3 * np.array([0.3, -0.5, 0.2, 0.4, 0.6])
    est, diag = picard_reconstruct(sys, mat @ truth + noise, rule="discrepancy",
                                   delta=np.linalg.norm(noise), tau=1.5)
    k = diag.n_star
    bound = 1.5 * np.linalg.norm(noise)
    assert 0 < k < 5
    assert diag.residual_norms[k] <= bound < diag.residual_norms[k - 1]
    np.testing.assert_allclose(est[:k], (mat @ truth + noise)[:k] / np.diag(mat)[:k])


def test_rank_zero_and_rule_errors():
    with pytest.raises(RankZeroError, match="rank-0"):
        picard_reconstruct(singular_system(np.zeros((3, 4))), np.ones(3), rule="ratio")
    sys = singular_system(np.eye(3))
    with pytest.raises(ValueError):
        picard_reconstruct(sys, np.ones(3), rule="fixed")
    with pytest.raises(ValueError):
        picard_reconstruct(sys, np.ones(3), rule="discrepancy")
    with pytest.raises(ValueError):
        picard_reconstruct(sys, np.ones(3), rule="magic")
    with pytest.raises(ValueError):
        picard_reconstruct(sys, np.ones(4), rule="ratio")


def test_estimator_api(small_operator):
    _, op = small_operator
    est = PicardReconstructor(rule="ratio", ratio=1e-6)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(AttributeError):
        est.predict(np.zeros(op.shape[0]))
    truth = op.restrict(vhat_field(V_INT, op.grid))
    out = est.fit(op).predict(op.matrix @ truth, truth=truth)
    assert out.shape == (op.shape[1],)
    assert est.singular_values_.shape == (min(op.shape),)
    assert est.diagnostics_.n_star > 0


def test_noisy_recovery_on_retained_band():
    spec = GridSpec(2, 64, 12.0)
    phis = [centred(spec, 1.0), centred(spec, 1.6)]
    op = assemble_T(phis, 0, DEFAULT_LAMBDAS, T_H=4.0, dt_H=0.05)
    truth = op.restrict(vhat_field(V_INT, spec))
    clean = op.matrix @ truth
    est = PicardReconstructor(tau=1.5).fit(op)
    rng = np.random.default_rng(7)
    errors = []
    for _ in range(5):
        noise = rng.standard_normal(clean.size) + 1j * rng.standard_normal(clean.size)
        noise *= 0.01 * np.linalg.norm(clean) / np.linalg.norm(noise)
        est.noise_level = np.linalg.norm(noise)
        out = est.predict(clean + noise)
        k = est.diagnostics_.n_star
        basis = est.system_.phi[:, :k]
        target = basis @ (basis.conj().T @ truth)
        errors.append(np.linalg.norm(out - target) / np.linalg.norm(target))
    assert np.mean(errors) <= 0.10


def test_spectrum_csv(tmp_path, small_operator):
    _, op = small_operator
    est = PicardReconstructor(rule="ratio").fit(op)
    est.predict(op.matrix @ np.ones(op.shape[1]))
    path = tmp_path / "spectrum.csv"
    write_spectrum_csv(est.system_, est.diagnostics_, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["n", "mu", "abs_coefficient", "ratio", "partial_sum", "retained"]
    assert len(rows) == 1 + min(op.shape)


# --- position-space potential -------------------------------------------------------

def test_vint_from_vhat_zero_and_gaussian():
    spec = GridSpec(2, 64, 12.0)
    v, imag = vint_from_vhat(ComplexField(spec, np.zeros(spec.shape), FREQUENCY))
    assert np.all(v.values == 0) and imag == 0
    v, imag = vint_from_vhat(analytic_fourier(V_INT, spec))
    assert np.max(np.abs(v.values - sample_potential(V_INT, spec))) <= 1e-6
    assert imag <= 1e-10
    with pytest.raises(ValueError):
        vint_from_vhat(ComplexField(spec, np.zeros(spec.shape)))


def test_band_truncation_error_bounded_by_tail_mass():
    spec = GridSpec(2, 64, 12.0)
    full = analytic_fourier(gaussian(1.0, 0.6, role="interaction"), spec)
    g = make_grid(spec)
    band = g.freq_radius <= 3.0
    cut = ComplexField(spec, np.where(band, full.values, 0), FREQUENCY)
    v, _ = vint_from_vhat(cut)
    ref = sample_potential(gaussian(1.0, 0.6, role="interaction"), spec)
    err = np.sqrt(spec.weight * np.sum((v.values - ref) ** 2))
    tail = np.sqrt(spec.freq_weight * np.sum(np.abs(full.values[~band]) ** 2))
    assert tail > 1e-3
    assert err <= tail * (1 + 1e-6)


# --- data collection ------------------------------------------------------------------

def _plan(speed):
    return ScatterConfig(4.0, 1.0 / (10 * speed))


def test_slim_vanishes_without_interaction():
    spec = GridSpec(2, 64, 12.0)
    cfg = ProbeConfig([centred(spec, 1.0, center=(0.0, -1.0))], [1.0, 0.0], [8.0, 16.0, 32.0])
    data = collect_slim(cfg, 0, None, V_EXT, _plan, lambdas=(0.0,))
    raw_scale = np.abs(data.raw).max()
    assert np.all(np.abs(data.values) <= 0.02 * raw_scale)


def test_slim_vanishes_for_identical_orbitals():
    spec = GridSpec(2, 64, 12.0)
    one = centred(spec, 1.0)
    cfg = ProbeConfig([one, one], [1.0, 0.0], [8.0, 16.0, 32.0])
    data = collect_slim(cfg, 0, V_INT, None, ScatterConfig(2.0, 0.05), lambdas=(0.0, 0.5))
    assert np.max(np.abs(data.values)) <= 1e-10


@pytest.fixture(scope="module")
def slim_pair():
    spec = GridSpec(2, 64, 12.0)
    phis = [centred(spec, 1.0), centred(spec, 1.6)]
    cfg = ProbeConfig(phis, [1.0, 0.0], [8.0, 16.0, 32.0])
    sc = ScatterConfig(4.0, 0.05)
    lams = (0.0, 0.5, 1.0)
    a = collect_slim(cfg, 0, V_INT, None, sc, lambdas=lams)
    b = collect_slim(cfg, 0, gaussian(0.5, 1.3, role="interaction"), None, sc, lambdas=lams)
    return phis, lams, a, b


def test_slim_matches_kernel_quadrature(slim_pair):
    phis, lams, a, _ = slim_pair
    spec = phis[0].field.grid
    for m, lam in enumerate(lams):
        ref = leading_term(kernel_H(phis, 0, lam, 4.0, 0.05), vhat_field(V_INT, spec))
        assert abs(a.values[m] - ref) <= 0.05 * abs(ref)


def test_distinct_phantoms_are_distinguished(slim_pair):
    _, _, a, b = slim_pair
    tol = 1e-3 * np.abs(a.values).max()
    assert np.linalg.norm(a.values - b.values) >= 10 * tol
    assert not a.flagged.any()


def test_slim_needs_three_speeds():
    spec = GridSpec(2, 64, 12.0)
    cfg = ProbeConfig([centred(spec, 1.0)], [1.0, 0.0], [8.0, 16.0])
    with pytest.raises(ValueError):
        collect_slim(cfg, 0, V_INT, None, ScatterConfig(1.0, 0.05))
