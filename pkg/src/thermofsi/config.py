"""Run configuration: INI-style file, validation, presets and the builders
that turn a config into solver objects."""
import configparser
import io
import math
import re
from dataclasses import field, make_dataclass

import numpy as np
import sympy as sp

# (section, key, type, default); every field of RunConfig appears once
SCHEMA = [
    ("geometry", "shape", str, "circle"),
    ("geometry", "radius", float, 1.0),
    ("geometry", "semi_a", float, 2.0),
    ("geometry", "semi_b", float, 1.0),
    ("geometry", "collar_a", float, -0.5),
    ("geometry", "collar_b", float, 0.5),
    ("grid", "n_gamma", int, 32),
    ("grid", "dx", float, 0.25),
    ("grid", "x0", float, -2.0),
    ("grid", "x1", float, 2.0),
    ("grid", "y0", float, -2.0),
    ("grid", "y1", float, 2.0),
    ("time", "tau", float, 0.00625),
    ("time", "h", float, 0.1),
    ("time", "t_end", float, 0.1),
    ("shell", "lam", float, 1.0),
    ("shell", "mu", float, 1.0),
    ("shell", "thickness", float, 0.1),
    ("shell", "kappa", float, 1e-3),
    ("shell", "k0", int, 4),
    ("shell", "k0_fluid", int, 2),
    ("fluid1", "mu0", float, 0.1),
    ("fluid1", "beta", float, 0.1),
    ("fluid1", "gamma", float, 0.1),
    ("fluid1", "c", float, 1.0),
    ("fluid1", "k", float, 0.1),
    ("fluid2", "mu0", float, 0.1),
    ("fluid2", "beta", float, 0.1),
    ("fluid2", "gamma", float, 0.1),
    ("fluid2", "c", float, 1.0),
    ("fluid2", "k", float, 0.1),
    ("thermal", "transmission", str, "1.0"),
    ("thermal", "cap_M", float, 1e6),
    ("thermal", "floor", float, 0.5),
    ("initial", "eta0", str, "0"),
    ("initial", "eta1", str, "0"),
    ("initial", "stream", str, "0"),
    ("initial", "theta1", str, "1"),
    ("initial", "theta2", str, "1"),
    ("initial", "noise", float, 0.0),
    ("solver", "tol_newton", float, 1e-10),
    ("solver", "max_newton", int, 50),
    ("solver", "tol_cg", float, 1e-12),
    ("solver", "eps_gamma", float, 1e-3),
    ("solver", "eps_collar", float, 0.0),
    ("solver", "near_margin", float, 0.0),
    ("solver", "freeze_velocity", bool, False),
    ("solver", "entropy_beta", float, -0.5),
    ("output", "snapshot_every", int, 0),
    ("run", "seed", int, 0),
    ("run", "threads", int, 1),
]


def _field_name(section, key):
    return f"{section}_{key}"


# flat run configuration; attribute names are <section>_<key>
RunConfig = make_dataclass("RunConfig", [(_field_name(s, k), t, field(default=d)) for s, k, t, d in SCHEMA])


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _convert(typ, raw):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def _line_numbers(text):
    """Map (section, key) -> line number in the file text."""
    out, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"\s*([A-Za-z0-9_]+)\s*[=:]", line)
        if m and section:
            out[(section, m.group(1))] = no
    return out


def parse_config_text(text, overrides=None, base=None):
    """Parse INI text into a validated RunConfig (all violations collected).

    Precedence: schema defaults < base (e.g. a preset) < file < overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    problems = []
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"parse error: {exc}"]) from None
    lines = _line_numbers(text)
    known = {(s, k) for s, k, _, _ in SCHEMA}
    for sec in cp.sections():
        for key in cp[sec]:
            if (sec, key) not in known:
                problems.append(f"line {lines.get((sec, key), '?')}: unknown key [{sec}] {key}")
    values = {}
    base = base or {}
    for s, k, t, d in SCHEMA:
        name = _field_name(s, k)
        d = base.get(name, d)
        if cp.has_option(s, k):
            try:
                values[name] = _convert(t, cp.get(s, k))
            except ValueError as exc:
                problems.append(f"line {lines.get((s, k), '?')}: [{s}] {k}: {exc}")
                values[name] = d
        else:
            values[name] = d
    for name, val in (overrides or {}).items():
        values[name] = val
    cfg = RunConfig(**values)
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config(path, overrides=None, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), overrides, base)


def serialize(cfg):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for s, k, t, _ in SCHEMA:
        if not cp.has_section(s):
            cp.add_section(s)
        val = getattr(cfg, _field_name(s, k))
        cp.set(s, k, repr(val) if t is float else str(val))
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# initial-data expressions

_S = sp.Symbol("s")
_X, _Y = sp.symbols("x y")


def _expr(text, allowed):
    try:
        e = sp.sympify(text, locals={"s": _S, "x": _X, "y": _Y, "pi": sp.pi})
    except (sp.SympifyError, TypeError, SyntaxError) as exc:
        raise ValueError(f"cannot parse {text!r}: {exc}") from None
    extra = e.free_symbols - set(allowed)
    if extra:
        raise ValueError(f"expression {text!r} uses unknown symbols {sorted(map(str, extra))}")
    return e


def curve_function(text):
    """eta(s) on the reference parameter s in [0, 2 pi)."""
    e = _expr(text, [_S])
    f = sp.lambdify(_S, e, "numpy")
    return lambda s: np.broadcast_to(np.asarray(f(s), dtype=float), np.shape(s)).copy()


def field_function(text):
    e = _expr(text, [_X, _Y])
    f = sp.lambdify((_X, _Y), e, "numpy")
    return lambda x, y: np.broadcast_to(np.asarray(f(x, y), dtype=float), np.shape(x)).copy()


# ---------------------------------------------------------------------------
# validation


def validate(cfg):
    problems = []
    pos = ["grid_dx", "time_tau", "time_h", "time_t_end", "shell_thickness", "thermal_cap_M", "thermal_floor",
           "solver_tol_newton", "solver_tol_cg"]
    for f in pos:
        if not getattr(cfg, f) > 0:
            problems.append(f"{f} must be positive")
    if cfg.time_tau > 0 and cfg.time_h > 0:
        ratio = cfg.time_h / cfg.time_tau
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            problems.append(f"window not divisible: h/tau = {ratio:g} is not a positive integer")
    if cfg.geometry_shape not in ("circle", "ellipse"):
        problems.append(f"shape must be circle or ellipse (got {cfg.geometry_shape!r})")
    if cfg.grid_n_gamma < 8:
        problems.append("n_gamma must be at least 8")
    if cfg.shell_k0_fluid not in (1, 2):
        problems.append("k0_fluid must be 1 or 2")
    if cfg.shell_k0 < 1:
        problems.append("k0 must be at least 1")
    if not cfg.shell_kappa > 0:
        problems.append("kappa must be positive")
    if not (cfg.shell_mu > 0 and cfg.shell_lam >= 0):
        problems.append("Lame constants need mu > 0 and lam >= 0")
    for i in (1, 2):
        for k in ("mu0", "beta", "gamma", "c", "k"):
            if not getattr(cfg, f"fluid{i}_{k}") > 0:
                problems.append(f"fluid{i} {k} must be positive")
    try:
        from .materials import Transmission
        Transmission.parse(cfg.thermal_transmission)
    except ValueError as exc:
        problems.append(f"transmission: {exc}")
    gmax = max(cfg.fluid1_gamma, cfg.fluid2_gamma)
    if not cfg.thermal_floor > gmax:
        problems.append(f"floor ordering violated: floor {cfg.thermal_floor} must exceed every VFT gamma "
                        f"(max {gmax})")
    if not cfg.geometry_collar_a < 0 < cfg.geometry_collar_b:
        problems.append("collar bounds must satisfy a < 0 < b")
    if cfg.run_threads < 1:
        problems.append("threads must be at least 1")
    if cfg.output_snapshot_every < 0:
        problems.append("snapshot_every must be non-negative")
    # initial data
    s = np.linspace(0.0, 2 * np.pi, max(cfg.grid_n_gamma, 8), endpoint=False)
    try:
        eta0 = curve_function(cfg.initial_eta0)(s)
        lo, hi = float(eta0.min()) - abs(cfg.initial_noise), float(eta0.max()) + abs(cfg.initial_noise)
        if not (cfg.geometry_collar_a < lo and hi < cfg.geometry_collar_b):
            problems.append(f"initial eta range [{lo:g}, {hi:g}] must lie inside the collar "
                            f"({cfg.geometry_collar_a:g}, {cfg.geometry_collar_b:g})")
    except ValueError as exc:
        problems.append(f"eta0: {exc}")
    for key in ("eta1",):
        try:
            curve_function(getattr(cfg, f"initial_{key}"))(s)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    try:
        field_function(cfg.initial_stream)
    except ValueError as exc:
        problems.append(f"stream: {exc}")
    for i in (1, 2):
        try:
            f = field_function(getattr(cfg, f"initial_theta{i}"))
            if cfg.grid_dx > 0 and cfg.grid_x1 > cfg.grid_x0 and cfg.grid_y1 > cfg.grid_y0:
                xs = np.arange(cfg.grid_x0 + cfg.grid_dx / 2, cfg.grid_x1, cfg.grid_dx)
                ys = np.arange(cfg.grid_y0 + cfg.grid_dx / 2, cfg.grid_y1, cfg.grid_dx)
                X, Y = np.meshgrid(xs, ys, indexing="ij")
                tmin = float(np.min(f(X, Y)))
                if tmin < cfg.thermal_floor:
                    problems.append(f"initial theta{i} minimum {tmin:g} is below the floor {cfg.thermal_floor:g}")
        except ValueError as exc:
            problems.append(f"theta{i}: {exc}")
    return problems


# ---------------------------------------------------------------------------
# presets

PRESETS = {
    "rest": {"time_t_end": 1.0},
    "conduction": {
        "solver_freeze_velocity": True, "initial_theta1": "1.5", "initial_theta2": "1.0",
        "thermal_transmission": "1.0", "time_t_end": 0.4,
    },
    "shear-heating": {
        "initial_eta0": "0.01*cos(2*s)", "initial_eta1": "0.3*cos(2*s)",
        "initial_stream": "0.5*(1 - x**2 - y**2)**2*(1 - x**2/4)**2*(1 - y**2/4)**2",
        "shell_lam": 10.0, "shell_mu": 10.0, "fluid1_k": 50.0, "fluid2_k": 50.0, "time_t_end": 0.1,
    },
    "breathing-mode": {
        "initial_eta0": "0.02*cos(2*s)", "initial_eta1": "0.5*cos(2*s)", "time_t_end": 0.2,
    },
    "collar-hit": {
        "initial_eta0": "0.3*cos(2*s)", "initial_eta1": "2*cos(2*s)", "shell_lam": 0.05, "shell_mu": 0.05,
        "time_t_end": 1.0,
    },
    "gamma-degenerate": {
        "geometry_collar_a": -0.9, "geometry_collar_b": 0.9, "solver_eps_gamma": 0.25,
        "initial_eta0": "-0.6*cos(2*s)", "initial_eta1": "-2*cos(2*s)", "shell_lam": 0.05, "shell_mu": 0.05,
        "time_t_end": 1.0,
    },
}


def preset_config(name, overrides=None):
    if name not in PRESETS:
        raise ConfigError([f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}"])
    values = {_field_name(s, k): d for s, k, _, d in SCHEMA}
    values.update(PRESETS[name])
    values.update(overrides or {})
    cfg = RunConfig(**values)
    problems = validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


# ---------------------------------------------------------------------------
# builders


def build_setup(cfg):
    """Solver objects and the first window from a validated config."""
    from .geometry import CartesianGrid, ShapeSpec, TubularChart, build_reference
    from .gridops import centered_derivatives
    from .koiter import KoiterParams
    from .materials import FluidMaterial, Transmission, ViscosityCap
    from .timeloop import Setup, initial_window
    from .varstep import StepParams

    spec = ShapeSpec.circle(cfg.geometry_radius) if cfg.geometry_shape == "circle" else ShapeSpec.ellipse(
        cfg.geometry_semi_a, cfg.geometry_semi_b)
    ref = build_reference(spec, cfg.grid_n_gamma)
    grid = CartesianGrid(cfg.grid_x0, cfg.grid_x1, cfg.grid_y0, cfg.grid_y1, cfg.grid_dx)
    chart = TubularChart(ref, cfg.geometry_collar_a, cfg.geometry_collar_b, grid.box)
    shell = KoiterParams(cfg.shell_lam, cfg.shell_mu, cfg.shell_thickness, cfg.shell_kappa, cfg.shell_k0)
    fluids = tuple(FluidMaterial(*(getattr(cfg, f"fluid{i}_{k}") for k in ("mu0", "beta", "gamma", "c", "k")))
                   for i in (1, 2))
    cap = ViscosityCap(cfg.thermal_cap_M, cfg.thermal_floor)
    prm = StepParams(cfg.time_tau, cfg.time_h, shell, fluids, cap, Transmission.parse(cfg.thermal_transmission),
                     k0_fluid=cfg.shell_k0_fluid, tol_newton=cfg.solver_tol_newton,
                     max_newton=cfg.solver_max_newton, tol_cg=cfg.solver_tol_cg)
    setup = Setup(ref, grid, chart, prm, t_end=cfg.time_t_end,
                  eps_c=cfg.solver_eps_collar if cfg.solver_eps_collar > 0 else None,
                  eps_gamma=cfg.solver_eps_gamma, near_margin=cfg.solver_near_margin,
                  freeze_velocity=cfg.solver_freeze_velocity, beta_p=cfg.solver_entropy_beta)
    s = ref.grid.params if ref.grid.params.ndim == 1 else ref.grid.params[:, 0]
    eta0 = curve_function(cfg.initial_eta0)(s)
    if cfg.initial_noise:
        # smooth seeded perturbation: low modes scaled to sup norm <= noise
        rng = np.random.default_rng(cfg.run_seed)
        modes = np.arange(1, 5)
        coef = rng.uniform(-1, 1, (2, modes.size)) / (2 * modes.size)
        eta0 = eta0 + cfg.initial_noise * (coef[0] @ np.cos(np.outer(modes, s)) + coef[1] @ np.sin(np.outer(modes, s)))
    eta1 = curve_function(cfg.initial_eta1)(s)
    X, Y = grid.centers[:, 0], grid.centers[:, 1]
    psi = field_function(cfg.initial_stream)(X, Y)
    Dx, Dy = centered_derivatives(grid)
    # discrete stream function: exactly divergence free for the centred stencil
    u0 = np.stack([Dy @ psi, -(Dx @ psi)], axis=1)
    if cfg.solver_freeze_velocity:
        eta1 = np.zeros_like(eta1)
        u0 = np.zeros_like(u0)
    th1 = field_function(cfg.initial_theta1)(X, Y)
    th2 = field_function(cfg.initial_theta2)(X, Y)
    from .geometry import build_masks, deform_interface
    labels = build_masks(deform_interface(ref, eta0), grid).flat_labels()
    theta0 = np.where(labels == 2, th2, th1)
    window = initial_window(setup, eta0, eta1, theta0, u0)
    return setup, window
