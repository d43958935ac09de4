import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hfscatter.dynamics import OrbitalSet
from hfscatter.potentials import gaussian, xray_analytic
from hfscatter.probe import (KernelWindowError, ProbeConfig, ProbeWrapError, compute_I, dilate,
                             expansion_check, kernel_H, kernel_H_tail, leading_term, make_probe,
                             second_order_extract, second_term, vhat_field, write_probe_csv)
from hfscatter.scattering import ScatterConfig
from hfscatter.spectral import ComplexField, GridSpec, fourier, l2_norm, make_grid, s0_state

from oracles import direct_kernel_H_1d, direct_kernel_H_at_zero

V_INT = gaussian(0.5, 1.0, role="interaction")
V_EXT = gaussian(1.0, 1.0, center=[0.3, 0.4])
SPEC = GridSpec(2, 64, 12.0)


def raw_bump(spec, center, width, norm=0.3, poly=None):
    x = make_grid(spec).nodes
    d = x - np.asarray(center, float)
    u = np.exp(-np.sum(d * d, -1) / (2 * width**2)).astype(complex)
    if poly is not None:
        u = u * poly(d)
    u *= norm / np.sqrt(spec.weight * np.sum(np.abs(u) ** 2))
    return ComplexField(spec, u)


def bump(spec, center, width, norm=0.3, poly=None):
    return s0_state(raw_bump(spec, center, width, norm, poly))


def two_states(spec=SPEC):
    return [bump(spec, (0.0, -1.0), 1.0), bump(spec, (0.5, 1.0), 1.3)]


def plan(speed):
    return ScatterConfig(4.0, 1.0 / (10 * speed))


# --- probe construction ------------------------------------------------------------

def test_probe_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig(two_states(), [1.0, 0.0], [8, 4])
    with pytest.raises(ValueError):
        ProbeConfig(two_states(), [1.0, 0.0], [4, 8], lam=-1.0)
    with pytest.raises(ValueError):
        ProbeConfig(two_states(), [0.0, 0.0], [4, 8])
    cfg = ProbeConfig(two_states(), [3.0, 4.0], [4, 8])
    np.testing.assert_allclose(cfg.direction, [0.6, 0.8])


def test_probe_identity_at_rest():
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [0.0, 1.0])
    probes = make_probe(cfg, 0.0)
    for p, s in zip(probes, cfg.base_states):
        np.testing.assert_array_equal(p.field.values, s.field.values)


def test_probe_modulation_theorem():
    spec = GridSpec(1, 128, 16.0)
    st0 = bump(spec, (0.0,), 1.0)
    k = 12
    v = k * spec.freq_step
    cfg = ProbeConfig([st0], [1.0], [v])
    ph = fourier(make_probe(cfg, v)[0].field).values
    base = fourier(st0.field).values
    np.testing.assert_allclose(ph[k:], base[:-k], atol=1e-10)


@pytest.mark.parametrize("dim", [1, 2])
def test_dilation_scales_norm(dim):
    spec = GridSpec(dim, 128, 24.0)
    st0 = bump(spec, (0.0,) * dim, 2.5)
    cfg = ProbeConfig([st0], [1.0] + [0.0] * (dim - 1), [1.0], lam=1.0)
    out = make_probe(cfg, 0.0)[0].field
    assert l2_norm(out) == pytest.approx(l2_norm(st0.field) * 2 ** (-dim / 2), rel=1e-10)


def test_dilate_matches_direct_evaluation():
    spec = GridSpec(1, 64, 12.0)
    x = make_grid(spec).nodes[:, 0]
    f = np.exp(-(x - 0.5) ** 2 / 2)
    out = dilate(f, spec, 0.7)
    np.testing.assert_allclose(out, np.exp(-(1.7 * x - 0.5) ** 2 / 2), atol=1e-12)


def test_wrap_error_names_speed():
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [1.0, 40.0])
    with pytest.raises(ProbeWrapError, match="speed 40"):
        make_probe(cfg, 40.0)


# --- the kernel H_j ----------------------------------------------------------------

def test_kernel_single_and_identical_orbitals_vanish():
    st0 = bump(SPEC, (0.0, 0.0), 1.0)
    assert np.max(np.abs(kernel_H([st0], 0, T_H=2.0, dt_H=0.1).values)) <= 1e-14
    assert np.max(np.abs(kernel_H([st0, st0, st0], 1, T_H=2.0, dt_H=0.1).values)) <= 1e-14


@pytest.mark.parametrize("m", [8, 16])
def test_kernel_matches_direct_time_frequency_quadrature(m):
    spec = GridSpec(1, m, 8.0)
    phis = [raw_bump(spec, (-0.5,), 1.0), raw_bump(spec, (0.8,), 1.2, poly=lambda d: 1 + 0.5j * d[..., 0])]
    g = make_grid(spec)
    x, xi = g.nodes[:, 0], g.freq_nodes[:, 0]
    for j in range(2):
        h = kernel_H(phis, j, T_H=1.0, dt_H=0.05).values
        ref = direct_kernel_H_1d(x, xi, [p.values for p in phis], j, 1.0, 0.05)
        assert np.max(np.abs(h - ref)) <= 1e-8


def test_kernel_at_origin_orthogonal_bumps():
    spec = GridSpec(1, 16, 8.0)
    phis = [raw_bump(spec, (0.0,), 1.0), raw_bump(spec, (0.0,), 1.0, poly=lambda d: d[..., 0])]
    assert abs(np.vdot(phis[0].values, phis[1].values)) <= 1e-14
    x = make_grid(spec).nodes[:, 0]
    h0 = kernel_H(phis, 0, T_H=1.0, dt_H=0.05).values[spec.points_per_axis // 2]
    ref = direct_kernel_H_at_zero(x, [p.values for p in phis], 0, 1.0, 0.05)
    assert abs(h0 - ref) <= 1e-8


@settings(max_examples=10, deadline=None)
@given(st.floats(0, 2 * np.pi))
def test_kernel_symmetries(alpha):
    spec = GridSpec(2, 32, 8.0)
    # real orbitals: the symmetric window pairs t with -t, making the exchange sum
    # symmetric as well; for complex orbitals only the direct part has this symmetry
    phis = [raw_bump(spec, (0.0, -1.0), 1.0), raw_bump(spec, (0.5, 1.0), 1.3)]
    h = kernel_H(phis, 0, T_H=1.0, dt_H=0.1).values
    # H(-xi) = conj H(xi) on the centred grid (drop the unpaired Nyquist row/column)
    inner = h[1:, 1:]
    np.testing.assert_allclose(inner[::-1, ::-1], inner.conj(), atol=1e-12 * np.abs(h).max())
    rot = [ComplexField(spec, np.exp(1j * alpha) * p.values) for p in phis]
    np.testing.assert_allclose(kernel_H(rot, 0, T_H=1.0, dt_H=0.1).values, h,
                               atol=1e-12 * np.abs(h).max())
    lead = leading_term(ComplexField(spec, h, "frequency"), vhat_field(V_INT, spec))
    assert abs(lead.imag) <= 1e-10 * abs(lead.real)


def test_kernel_window_error_reports_required_window():
    spec = GridSpec(2, 32, 10.0)
    phis = [raw_bump(spec, (0.0, -1.0), 1.0), raw_bump(spec, (0.5, 1.0), 1.3)]
    with pytest.raises(KernelWindowError) as exc:
        kernel_H(phis, 0, T_H=1.0, dt_H=0.1, tol=1e-6)
    assert exc.value.required_T > 1.0
    assert kernel_H_tail(1.0, 2.0, 1) == np.inf
    assert kernel_H_tail(0.0, 2.0, 1) == 0.0


# --- I_j(v) and the expansion ------------------------------------------------------

def test_I_vanishes_without_potentials():
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [8.0])
    assert np.max(np.abs(compute_I(cfg, 8.0, None, None, ScatterConfig(2.0, 0.05)))) <= 1e-10


def test_I_vanishes_for_identical_orbitals_without_external():
    st0 = bump(SPEC, (0.0, 0.0), 1.0)
    cfg = ProbeConfig([st0, st0], [1.0, 0.0], [8.0])
    assert np.max(np.abs(compute_I(cfg, 8.0, V_INT, None, ScatterConfig(2.0, 0.05)))) <= 1e-10


def test_I_interaction_only_against_leading_term():
    """Without ``V_ext`` the boost drops out: ``I_j`` is speed independent and close to
    the leading term, the gap being the second-order interaction response."""
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [10.0, 20.0])
    sc = ScatterConfig(4.0, 0.05)
    i10 = compute_I(cfg, 10.0, V_INT, None, sc)
    i20 = compute_I(cfg, 20.0, V_INT, None, sc)
    np.testing.assert_allclose(i20, i10, rtol=1e-12)
    phis = list(cfg.base_states)
    lead = np.array([leading_term(kernel_H(phis, j, T_H=4.0, dt_H=0.05), vhat_field(V_INT, SPEC))
                     for j in range(2)])
    gap = np.abs(i20 - lead) / np.abs(lead)
    assert np.all(gap <= 0.05)


def test_expansion_zero_potentials():
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [8.0, 16.0])
    res = expansion_check(cfg, None, None, ScatterConfig(1.0, 0.05))
    for arr in (res.I, res.leading, res.second):
        assert np.max(np.abs(arr)) <= 1e-10


def test_expansion_needs_an_octave():
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [8.0, 12.0])
    with pytest.raises(ValueError, match="octave"):
        expansion_check(cfg, V_INT, None, ScatterConfig(1.0, 0.05))


def test_interaction_only_second_term_is_zero():
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [8.0, 16.0])
    res = expansion_check(cfg, V_INT, None, ScatterConfig(2.0, 0.05))
    assert np.all(res.second == 0)


@pytest.mark.xfail(strict=True, reason="with V_ext = 0 the functional is exactly speed "
                   "independent (Galilean invariance), so the remainder cannot decay")
def test_interaction_only_remainder_slope():
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [8.0, 16.0, 32.0])
    with pytest.warns(RuntimeWarning):
        res = expansion_check(cfg, V_INT, None, ScatterConfig(4.0, 0.05))
    assert np.all(res.slopes <= -1.5)


def test_external_only_high_speed_limit():
    phis = [bump(SPEC, (0.0, -1.0), 1.0)]
    cfg = ProbeConfig(phis, [1.0, 0.0], [8.0, 16.0, 32.0])
    res = expansion_check(cfg, None, V_EXT, plan)
    target = res.second[-1, 0] * 32.0
    assert abs(32.0 * res.I[-1, 0] - target) <= 0.10 * abs(target)
    assert np.all(res.slopes <= -1.5)


def test_second_term_matches_direct_sum():
    phis = [bump(SPEC, (0.0, -1.0), 1.0)]
    x = make_grid(SPEC).nodes
    xr = xray_analytic(V_EXT, x, [1.0, 0.0])
    ref = SPEC.weight * np.sum(xr * np.abs(phis[0].field.values) ** 2) / 8.0
    assert second_term(phis, V_EXT, [1.0, 0.0], 8.0)[0] == pytest.approx(ref, rel=1e-13)


def test_probe_csv_layout(tmp_path):
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [8.0, 16.0])
    res = expansion_check(cfg, None, None, ScatterConfig(1.0, 0.05))
    path = tmp_path / "probe.csv"
    write_probe_csv(res, path)
    rows = list(csv.reader(open(path)))
    assert rows[0][:4] == ["j", "speed", "direction", "lambda"]
    assert len(rows) == 1 + 4 + 2
    assert rows[-1][0] == "slope"


# --- second-order extraction -------------------------------------------------------

def test_extract_vanishes_without_potentials():
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [8.0])
    w = second_order_extract(cfg, 8.0, None, None, ScatterConfig(1.0, 0.05))
    assert np.max(np.abs(w)) <= 1e-10


@pytest.mark.xfail(strict=True, reason="with V_ext = 0 the bracket is speed independent, so "
                   "the |v| prefactor makes w_v grow linearly")
def test_extract_interaction_only_decays():
    cfg = ProbeConfig(two_states(), [1.0, 0.0], [8.0, 16.0, 32.0])
    sc = ScatterConfig(2.0, 0.05)
    sizes = [np.linalg.norm(second_order_extract(cfg, v, V_INT, None, sc)) for v in cfg.speeds]
    slope = np.polyfit(np.log(cfg.speeds), np.log(sizes), 1)[0]
    assert slope <= -0.8


def test_extract_external_only_pairing():
    phis = [bump(SPEC, (0.0, -1.0), 1.0)]
    cfg = ProbeConfig(phis, [1.0, 0.0], [32.0])
    w = second_order_extract(cfg, 32.0, None, V_EXT, plan)[0]
    phi = phis[0].field.values
    pair = SPEC.weight * np.vdot(phi, w)
    x = make_grid(SPEC).nodes
    ref = SPEC.weight * np.sum(xray_analytic(V_EXT, x, [1.0, 0.0]) * np.abs(phi) ** 2)
    assert abs(pair - ref) <= 0.10 * abs(ref)
