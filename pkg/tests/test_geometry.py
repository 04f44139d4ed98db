import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from thermofsi.geometry import (CartesianGrid, DegeneracyError, Label, ShapeSpec, Status, TubularChart,
                                build_masks, build_reference, cutoff_value, deform_interface, degeneracy_check,
                                eval_tilde_phi, segments_self_intersect)


def winding_number(points, poly):
    """Oracle: total turning angle of the polygon seen from each point."""
    d = poly[None, :, :] - points[:, None, :]
    ang = np.arctan2(d[..., 1], d[..., 0])
    dang = np.diff(np.concatenate([ang, ang[:, :1]], axis=1), axis=1)
    dang = (dang + np.pi) % (2 * np.pi) - np.pi
    return np.rint(dang.sum(axis=1) / (2 * np.pi)).astype(int)


def test_unit_circle_reference(unit_circle64):
    ref = unit_circle64
    x = ref.grid.params[:, 0]
    assert np.allclose(np.linalg.norm(ref.a[:, 0, :], axis=1), 1.0, atol=1e-14)
    assert np.allclose(ref.nu, np.stack([np.cos(x), np.sin(x)], axis=1), atol=1e-14)
    assert np.allclose(np.einsum("nd,nd->n", ref.a[:, 0, :], ref.nu), 0.0, atol=1e-14)


def test_circle_radius_two_metric():
    ref = build_reference(ShapeSpec.circle(2.0), 32)
    assert np.allclose(ref.metric[:, 0, 0], 4.0, atol=1e-13)


def test_ellipse_metric_matches_symbolic():
    ref = build_reference(ShapeSpec.ellipse(2.0, 1.0), 128)
    t = sp.Symbol("t")
    phi = sp.Matrix([2 * sp.cos(t), sp.sin(t)])
    a11 = sp.lambdify(t, sp.simplify(phi.diff(t).dot(phi.diff(t))), "numpy")
    x = ref.grid.params[:, 0]
    assert np.allclose(ref.metric[:, 0, 0], a11(x), atol=1e-12)
    assert np.allclose(ref.metric[:, 0, 0], 4 * np.sin(x) ** 2 + np.cos(x) ** 2, atol=1e-12)


@pytest.mark.parametrize("spec,n", [(ShapeSpec.ellipse(2.0, 1.0), 32), (ShapeSpec.torus(2.0, 1.0), 8)])
def test_reference_invariants(spec, n):
    ref = build_reference(spec, n)
    assert np.allclose(np.linalg.norm(ref.nu, axis=1), 1.0, atol=1e-12)
    for i in range(ref.m):
        assert np.allclose(np.einsum("nd,nd->n", ref.nu, ref.a[:, i, :]), 0.0, atol=1e-12)
    eye = np.broadcast_to(np.eye(ref.m), ref.metric.shape)
    assert np.allclose(ref.metric @ ref.inv_metric, eye, atol=1e-12)


def test_reference_rejects_coarse_grid():
    with pytest.raises(ValueError):
        build_reference(ShapeSpec.circle(1.0), 6)


def test_deform_zero_reproduces_reference_bitwise(unit_circle64):
    curve = deform_interface(unit_circle64, np.zeros(64))
    assert np.array_equal(curve.points, unit_circle64.phi)
    assert curve.injective


def test_radial_dilation(unit_circle64):
    curve = deform_interface(unit_circle64, np.full(64, 0.5))
    assert np.allclose(np.linalg.norm(curve.points, axis=1), 1.5, atol=1e-14)
    assert np.allclose(np.linalg.norm(curve.normal, axis=1), 1.5, atol=1e-13)
    # orientation: deformed normal points outward like the reference normal
    assert np.all(np.einsum("nd,nd->n", curve.normal, unit_circle64.nu) > 0)


def test_collapsed_curve_is_not_injective(unit_circle64):
    x = unit_circle64.grid.params[:, 0]
    curve = deform_interface(unit_circle64, -1.0 + 0.01 * np.cos(x))
    assert not curve.injective


def test_segment_intersection_figure_eight():
    t = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    assert segments_self_intersect(np.stack([np.sin(t), np.sin(2 * t)], axis=1))
    assert not segments_self_intersect(np.stack([np.cos(t), np.sin(t)], axis=1))


@pytest.fixture(scope="module")
def chart(unit_circle64):
    return TubularChart(unit_circle64, -0.5, 0.5, (-2, 2, -2, 2))


def test_cutoff_plateau_support_and_transition(chart):
    a, m2, m1, mlo, Mhi, M1, M2, b = chart.bounds
    assert a < m2 < m1 < mlo < Mhi < M1 < M2 < b
    assert cutoff_value((m1 + M1) / 2, chart) == 1.0
    assert cutoff_value(m2 - 0.1, chart) == 0.0
    assert cutoff_value(M2 + 0.01, chart) == 0.0
    mid = float(cutoff_value((m2 + m1) / 2, chart))
    assert 0.0 < mid < 1.0
    d = np.linspace(m2, m1, 50)
    assert np.all(np.diff(cutoff_value(d, chart)) >= 0)
    d = np.linspace(M1, M2, 50)
    assert np.all(np.diff(cutoff_value(d, chart)) <= 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-3, max_value=3))
def test_cutoff_range(d):
    chart_ = TubularChart(build_reference(ShapeSpec.circle(1.0), 16), -0.5, 0.5)
    v = float(cutoff_value(d, chart_))
    assert 0.0 <= v <= 1.0


def test_collar_must_avoid_wall(unit_circle64):
    with pytest.raises(ValueError):
        TubularChart(unit_circle64, -0.5, 1.5, (-2, 2, -2, 2))


def test_tilde_phi_identity_branches(chart, unit_circle64):
    eta = 0.1 * np.cos(unit_circle64.grid.params[:, 0])
    far = np.array([1.9, 1.9])
    assert np.array_equal(eval_tilde_phi(far, eta, chart), far)
    p = np.array([0.3, -1.1])
    assert np.allclose(eval_tilde_phi(p, np.zeros(64), chart), p, atol=1e-14)


def test_tilde_phi_constant_displacement(chart):
    out = eval_tilde_phi(np.array([1.0, 0.0]), np.full(64, 0.2), chart)
    assert np.allclose(out, [1.2, 0.0], atol=1e-13)


def test_tilde_phi_matches_deformed_interface_on_nodes(chart, unit_circle64):
    rng = np.random.default_rng(3)
    x = unit_circle64.grid.params[:, 0]
    eta = 0.1 * np.cos(2 * x) + 0.05 * rng.normal() * np.sin(3 * x)
    curve = deform_interface(unit_circle64, eta)
    for j in range(0, 64, 7):
        assert np.allclose(eval_tilde_phi(unit_circle64.phi[j], eta, chart), curve.points[j], atol=1e-12)


def test_masks_radius_one_and_a_half():
    ref = build_reference(ShapeSpec.circle(1.0), 64)
    grid = CartesianGrid(-3, 3, -3, 3, 0.25)
    mask = build_masks(deform_interface(ref, np.full(64, 0.5)), grid)
    assert mask.label_at((0.0, 0.0)) == Label.FLUID2
    assert mask.label_at((2.9, 2.9)) == Label.FLUID1
    wind = winding_number(grid.centers, mask.markers) != 0
    assert np.array_equal(mask.flat_labels() == Label.FLUID2, wind)
    assert mask.labels[0, 0] == Label.WALL and mask.labels.shape == (26, 26)
    assert mask.marker_weights.shape == (64, 4)


def test_mask_area_of_unit_circle():
    ref = build_reference(ShapeSpec.circle(1.0), 64)
    grid = CartesianGrid(-3, 3, -3, 3, 0.25)
    mask = build_masks(deform_interface(ref, np.zeros(64)), grid)
    area = mask.count(Label.FLUID2) * grid.dx**2
    assert abs(area - np.pi) <= 2 * grid.dx * 2 * np.pi
    text = mask.to_text().splitlines()
    assert len(text) == 26 and set("".join(text)) == {"#", ".", "o"}


def test_mask_rejects_interface_outside_box():
    ref = build_reference(ShapeSpec.circle(1.0), 32)
    grid = CartesianGrid(-1.5, 1.5, -1.5, 1.5, 0.25)
    with pytest.raises(DegeneracyError):
        build_masks(deform_interface(ref, np.full(32, 0.8)), grid)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(min_value=-0.3, max_value=0.3), min_size=4, max_size=4))
def test_masks_agree_with_winding_oracle(coefs):
    ref = build_reference(ShapeSpec.circle(1.0), 32)
    grid = CartesianGrid(-2, 2, -2, 2, 0.25)
    x = ref.grid.params[:, 0]
    eta = sum(c * np.cos((k + 1) * x + k) for k, c in enumerate(coefs)) / 2
    curve = deform_interface(ref, eta)
    if not curve.injective:
        return
    mask = build_masks(curve, grid)
    wind = winding_number(grid.centers, curve.points) != 0
    assert np.array_equal(mask.flat_labels() == Label.FLUID2, wind)


def test_degeneracy_statuses(unit_circle64, chart):
    ok = degeneracy_check(np.zeros(64), unit_circle64, chart)
    assert ok.status == Status.OK and ok.gamma_min == pytest.approx(1.0)
    eps = 1e-3
    g = degeneracy_check(np.full(64, -1 + eps / 2), unit_circle64, chart, eps_gamma=eps)
    assert g.status == Status.GAMMA_DEGENERATE
    x = unit_circle64.grid.params[:, 0]
    eta = 0.5 * np.maximum(np.cos(x), 0) ** 4
    eta = eta * chart.b / eta.max()
    assert degeneracy_check(eta, unit_circle64, chart).status == Status.COLLAR_HIT
    near = degeneracy_check(0.9 * eta, unit_circle64, chart, near_margin=0.1)
    assert near.status == Status.NEAR_COLLAR
    assert degeneracy_check(0.9 * eta, unit_circle64, chart).status == Status.OK


def test_self_intersection_takes_precedence(unit_circle64, chart):
    x = unit_circle64.grid.params[:, 0]
    rep = degeneracy_check(-1.0 + 0.01 * np.cos(x), unit_circle64, chart)
    assert rep.status == Status.SELF_INTERSECT


def test_coercivity_monitor_closed_form(unit_circle64, chart):
    # eta = c cos 2x: gamma_bar = 1 + eta, |eta''|^2 = 16 c^2 cos^2 2x
    x = unit_circle64.grid.params[:, 0]
    c = 0.1
    eta = c * np.cos(2 * x)
    rep = degeneracy_check(eta, unit_circle64, chart)
    s = sp.Symbol("s")
    exact = float(sp.integrate((1 + c * sp.cos(2 * s)) ** 2 * 16 * c**2 * sp.cos(2 * s) ** 2, (s, 0, 2 * sp.pi)))
    assert rep.coercivity == pytest.approx(exact, rel=1e-12)
