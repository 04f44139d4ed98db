import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermofsi.geometry import CartesianGrid, DegeneracyError
from thermofsi.gridops import (centered_derivatives, divergence, face_laplacian, interp_matrix, laplacian5,
                               same_label_faces, velocity_gradient)
from thermofsi.transport import (StepSizeError, compose_field, compose_flow, identity_flow, invert_flow,
                                 make_step_map, window_pullback)

GRID = CartesianGrid(-2, 2, -2, 2, 0.25)


def interior(grid, margin):
    c = grid.centers
    return (np.abs(c[:, 0]) < 2 - margin) & (np.abs(c[:, 1]) < 2 - margin)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.4, 1.4), st.floats(-1.4, 1.4), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_interp_reproduces_affine(x, y, a, b, c):
    f = a + b * GRID.centers[:, 0] + c * GRID.centers[:, 1]
    val = interp_matrix(GRID, [[x, y]]) @ f
    assert val[0] == pytest.approx(a + b * x + c * y, abs=1e-12)


def test_interp_allowed_renormalizes_and_clamps():
    allowed = GRID.centers[:, 0] > 0
    pts = np.array([[0.0, 0.3], [-1.5, 0.2], [1.0, 1.0]])
    P, clamped = interp_matrix(GRID, pts, allowed=allowed, return_clamped=True)
    assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0)
    assert list(clamped) == [False, True, False]
    used = P[1].indices
    assert used.size == 1 and np.isclose(GRID.centers[used[0], 0], 0.125)


def test_difference_operators_on_polynomials():
    Dx, Dy = centered_derivatives(GRID)
    x, y = GRID.centers.T
    m = interior(GRID, 0.3)
    assert np.allclose((Dx @ (x**2 + 3 * y))[m], 2 * x[m])
    assert np.allclose((Dy @ (x * y))[m], x[m])
    assert np.allclose((laplacian5(GRID) @ (x**2 + y**2))[m], 4.0)
    div = divergence(GRID) @ np.concatenate([-y, x])
    assert np.allclose(div[m], 0.0, atol=1e-12)


def test_face_laplacian_is_graph_laplacian():
    labels = (GRID.centers[:, 0] > 0).astype(int)
    faces = same_label_faces(GRID, labels)
    assert np.all(labels[faces[:, 0]] == labels[faces[:, 1]])
    assert len(faces) == 2 * (8 * 15 + 16 * 7)  # per half: 8x16 cells
    L = face_laplacian(GRID.n_cells, faces)
    rng = np.random.default_rng(0)
    t = rng.normal(size=GRID.n_cells)
    assert t @ (L @ t) == pytest.approx(np.sum((t[faces[:, 0]] - t[faces[:, 1]]) ** 2))
    assert np.allclose(L @ labels, 0.0)


def test_zero_velocity_gives_identity():
    st_ = make_step_map(np.zeros((GRID.n_cells, 2)), GRID, 0.1)
    assert np.array_equal(st_.positions, GRID.centers) and np.array_equal(st_.det, np.ones(GRID.n_cells))
    fl = compose_flow(identity_flow(GRID, np.zeros(GRID.n_cells, int)), st_)
    assert np.allclose(fl.positions, GRID.centers) and np.allclose(fl.det, 1.0)
    assert fl.k == 1


def test_affine_velocity_jacobian():
    A = np.array([[0.3, -0.5], [0.2, -0.1]])
    u = GRID.centers @ A.T
    tau = 0.2
    st_ = make_step_map(u, GRID, tau)
    m = interior(GRID, 0.3)
    assert np.allclose(st_.det[m], np.linalg.det(np.eye(2) + tau * A))
    g = velocity_gradient(GRID, u[:, 0], u[:, 1])
    assert np.allclose(g[m], A)


def test_two_steps_compose():
    c = np.array([0.3, -0.2])
    u = np.tile(c, (GRID.n_cells, 1))
    fl = identity_flow(GRID, np.zeros(GRID.n_cells, int))
    st_ = make_step_map(u, GRID, 0.1)
    fl = compose_flow(compose_flow(fl, st_), st_)
    m = interior(GRID, 0.8)
    assert np.allclose(fl.positions[m], GRID.centers[m] + 0.2 * c)
    assert np.allclose(fl.det[m], 1.0)


def test_fold_and_exit_are_reported():
    u = -GRID.centers * 10.0
    with pytest.raises(StepSizeError):
        make_step_map(u, GRID, 1.0)
    out = np.tile([3.0, 0.0], (GRID.n_cells, 1))  # cells by the wall are pushed out
    with pytest.raises(DegeneracyError):
        compose_flow(identity_flow(GRID, np.zeros(GRID.n_cells, int)), make_step_map(out, GRID, 0.1))


def test_compose_field_samples_and_counts_clamps():
    f = GRID.centers[:, 0] + 2 * GRID.centers[:, 1]
    vals, n = compose_field(f, GRID, np.array([[0.1, 0.2]]))
    assert vals[0] == pytest.approx(0.5) and n == 0


def test_invert_flow_round_trip():
    x, y = GRID.centers.T
    bump = np.exp(-4 * (x**2 + y**2))
    u = np.stack([-y * bump, x * bump], axis=1)
    fl = identity_flow(GRID, np.zeros(GRID.n_cells, int))
    for _ in range(3):
        fl = compose_flow(fl, make_step_map(u, GRID, 0.1))
    pre = invert_flow(fl, fl.positions[:10])
    assert np.allclose(pre, GRID.centers[:10], atol=1e-10)


def test_pullback_without_motion_is_identity():
    rng = np.random.default_rng(3)
    fl = identity_flow(GRID, np.zeros(GRID.n_cells, int))
    us = [rng.normal(size=(GRID.n_cells, 2)) for _ in range(3)]
    out = window_pullback(us, [fl] * 3, fl)
    for a, b in zip(out, us):
        assert np.allclose(a, b, atol=1e-12)
