import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sps

from conftest import capture_step_problems, small_setup
from oracles import dense_temperature_oracle, dense_velocity_oracle
from thermofsi.varstep import (el_residual_temperature, el_residual_velocity, independent_rows, sampled_totals,
                               solve_temperature_step, solve_velocity_step, temperature_functional,
                               velocity_blocks, velocity_gradient_vec, velocity_hessian, velocity_objective)


@pytest.fixture(scope="module")
def step_problems():
    return [capture_step_problems(*small_setup(seed)) for seed in range(3)]


def test_independent_rows_drops_dependent():
    C = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 1.0, 0], [0, 0, 0], [0, 0, 2.0]])
    rows = independent_rows(sps.csr_matrix(C))
    assert len(rows) == 3 and 3 not in rows
    assert np.linalg.matrix_rank(C[rows]) == 3


def test_velocity_matches_dense_oracle(step_problems):
    for vp, vs, _, _ in step_problems:
        zo = dense_velocity_oracle(vp)
        assert np.linalg.norm(vs.x - zo) <= 1e-8 * np.linalg.norm(zo)
        assert np.abs(vs.x).max() > 1e-2  # the instance actually moves


def test_temperature_matches_dense_oracle(step_problems):
    for _, _, tp, ts in step_problems:
        to = dense_temperature_oracle(tp)
        assert np.linalg.norm(ts.x - to) <= 1e-8 * np.linalg.norm(to)


def test_velocity_gradient_and_hessian_fd(step_problems):
    vp, vs, _, _ = step_problems[0]
    rng = np.random.default_rng(1)
    z = vs.x + 0.01 * rng.normal(size=vp.size)
    d = rng.normal(size=vp.size)
    eps = 1e-6
    fd = (velocity_objective(vp, z + eps * d) - velocity_objective(vp, z - eps * d)) / (2 * eps)
    g = velocity_gradient_vec(vp, z)
    assert g @ d == pytest.approx(fd, rel=1e-6)
    fdg = (velocity_gradient_vec(vp, z + eps * d) - velocity_gradient_vec(vp, z - eps * d)) / (2 * eps)
    Hd = velocity_hessian(vp, z) @ d
    assert np.linalg.norm(Hd - fdg) <= 1e-5 * np.linalg.norm(fdg)


def test_velocity_solution_is_stationary_on_admissible_directions(step_problems):
    vp, vs, _, _ = step_problems[1]
    assert np.abs(vp.C @ vs.x).max() <= 1e-12
    assert vs.residual <= 1e-9 * np.linalg.norm(vp.lin_u)
    Z = sla.null_space(vp.C.toarray())
    rng = np.random.default_rng(2)
    g = velocity_gradient_vec(vp, vs.x)
    F = velocity_objective(vp, vs.x)
    for _ in range(5):
        xi = Z @ rng.normal(size=Z.shape[1])
        assert abs(g @ xi) <= 1e-9 * np.linalg.norm(g) * np.linalg.norm(xi)
        assert velocity_objective(vp, vs.x + 1e-3 * xi) >= F  # a local minimum
    # KKT: gradient = -C' (multipliers)
    assert np.linalg.norm(g + vp.C.T @ vs.multipliers) <= 1e-9 * np.linalg.norm(g)
    assert el_residual_velocity(vp, vs.x) <= 1e-9


def test_zero_data_gives_zero_step():
    setup, window = small_setup(0, amp=0.0)
    window.beta[:] = 0.0
    window.w[:] = 0.0
    vp, vs, tp, ts = capture_step_problems(setup, window)
    assert np.abs(vs.x).max() == 0.0
    assert set(velocity_blocks(vp, vs.x).values()) == {0.0}


def test_uniform_temperature_without_sources_stays():
    setup, window = small_setup(0, amp=0.0, theta_spread=0.0)
    window.beta[:] = 0.0
    window.w[:] = 0.0
    window.theta0[:] = 1.3
    _, _, tp, ts = capture_step_problems(setup, window)
    assert np.allclose(ts.x, 1.3, atol=1e-12)


def test_temperature_is_minimizer_and_balances(step_problems):
    _, _, tp, ts = step_problems[2]
    assert el_residual_temperature(tp, ts.x) <= 1e-10
    rng = np.random.default_rng(3)
    T = temperature_functional(tp, ts.x)
    for _ in range(5):
        pert = tp.E @ rng.normal(size=tp.E.shape[1])
        assert temperature_functional(tp, ts.x + 1e-3 * pert) >= T
    # sampled heat change equals tau (sources) minus interface outflow, summed over fluids
    tot = sampled_totals(tp, ts.x)
    change = sum(new - old for new, old in tot.values())
    assert change == pytest.approx(tp.params.tau * sum(tp.sources.values()), rel=1e-9)


@pytest.mark.parametrize("seed", range(50))
def test_random_trials_stay_above_floor_without_clamping(seed):
    setup, window = small_setup(100 + seed, amp=0.08, lam=[0.0, 1.0, np.inf][seed % 3], theta_spread=0.5)
    window.theta0[:] = np.maximum(window.theta0 - 0.6, setup.params.cap.floor)
    _, _, tp, ts = capture_step_problems(setup, window)
    assert ts.info["clamped_floor"] == 0
    assert ts.x.min() >= setup.params.cap.floor - 1e-12


def test_floor_is_enforced_when_active():
    """Forcing an infeasible unconstrained minimum engages the active set."""
    _, _, tp, _ = capture_step_problems(*small_setup(4))
    tp.b = tp.b - 5.0 * tp.A @ np.ones(tp.A.shape[0])  # shifts the free minimizer down by 5
    sol = solve_temperature_step(tp)
    assert sol.info["clamped_floor"] > 0
    assert sol.x.min() >= tp.params.cap.floor - 1e-12
    to = dense_temperature_oracle(tp)
    assert np.linalg.norm(sol.x - to) <= 1e-8 * np.linalg.norm(to)
