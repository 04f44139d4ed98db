import functools

import numpy as np
import pytest

from thermofsi.config import build_setup, preset_config
from thermofsi.geometry import CartesianGrid, ShapeSpec, TubularChart, build_reference
from thermofsi.koiter import KoiterParams
from thermofsi.materials import FluidMaterial, Transmission, ViscosityCap
from thermofsi.timeloop import run_simulation
from thermofsi.varstep import StepParams


@functools.lru_cache(maxsize=None)
def _run_preset(name, overrides):
    cfg = preset_config(name, dict(overrides))
    setup, window = build_setup(cfg)
    trajs, term = run_simulation(setup, window)
    return cfg, setup, window, trajs, term


@pytest.fixture(scope="session")
def run_preset():
    """Cached preset runs shared across test modules."""

    def runner(name, **overrides):
        return _run_preset(name, tuple(sorted(overrides.items())))

    return runner


@pytest.fixture(scope="session")
def unit_circle64():
    return build_reference(ShapeSpec.circle(1.0), 64)


def small_instance(n_gamma=8, dx=0.5, tau=0.025, h=0.1, lam=1.0):
    """Circle in [-2, 2]^2: the 8-node / 8x8 instance by default."""
    ref = build_reference(ShapeSpec.circle(1.0), n_gamma)
    grid = CartesianGrid(-2, 2, -2, 2, dx)
    chart = TubularChart(ref, -0.5, 0.5, grid.box)
    shell = KoiterParams(1.0, 1.0, 0.1, 1e-3, 4)
    fluids = (FluidMaterial(0.1, 0.1, 0.1, 1.0, 0.1), FluidMaterial(0.2, 0.1, 0.1, 2.0, 0.3))
    prm = StepParams(tau, h, shell, fluids, ViscosityCap(1e6, 0.5), Transmission(lam))
    return ref, grid, chart, prm


def smooth_random(rng, s, amp=0.1, modes=4):
    out = np.zeros_like(s)
    for k in range(1, modes + 1):
        a, b = rng.normal(size=2) / k**2
        out += a * np.cos(k * s) + b * np.sin(k * s)
    return amp * out / max(np.max(np.abs(out)), 1e-300)


def small_setup(seed=0, amp=0.05, lam=1.0, tau=0.025, h=0.1, theta_spread=0.3):
    """Setup and first window on the small instance with seeded random data."""
    from thermofsi.geometry import Label, build_masks, deform_interface
    from thermofsi.timeloop import Setup, initial_window

    ref, grid, chart, prm = small_instance(tau=tau, h=h, lam=lam)
    setup = Setup(ref, grid, chart, prm, t_end=h)
    rng = np.random.default_rng(seed)
    s = ref.grid.params[:, 0]
    eta0 = smooth_random(rng, s, amp, modes=2)
    eta1 = smooth_random(rng, s, 0.5, modes=3)
    x, y = grid.centers.T
    bump = np.exp(-(x**2 + y**2))
    u0 = np.stack([(rng.normal() - y) * bump, (rng.normal() + x) * bump], axis=1) * 0.3
    labels = build_masks(deform_interface(ref, eta0), grid).flat_labels()
    theta0 = np.where(labels == Label.FLUID1, 1.2, 1.0) + theta_spread * rng.random(grid.n_cells)
    return setup, initial_window(setup, eta0, eta1, theta0, u0)


def capture_step_problems(setup, window):
    """Run the first step of a window and return the assembled (velocity,
    temperature) problems and their solutions."""
    from unittest import mock

    import thermofsi.timeloop as tl

    seen = {}

    def vwrap(pb, *a, **k):
        seen.setdefault("vprob", pb)
        sol = orig_v(pb, *a, **k)
        seen.setdefault("vsol", sol)
        return sol

    def twrap(pb, *a, **k):
        seen.setdefault("tprob", pb)
        sol = orig_t(pb, *a, **k)
        seen.setdefault("tsol", sol)
        return sol

    orig_v, orig_t = tl.solve_velocity_step, tl.solve_temperature_step
    with mock.patch.object(tl, "solve_velocity_step", vwrap), mock.patch.object(tl, "solve_temperature_step", twrap):
        tl.run_tau_window(window, setup)
    return seen["vprob"], seen["vsol"], seen["tprob"], seen["tsol"]


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
