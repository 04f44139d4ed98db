"""Two-time-scale driver: tau-steps inside a window of length h, then the
handoff of shell velocity and pulled-back fluid velocity to the next window."""
from dataclasses import dataclass, field
import math

import numpy as np

from .diagnostics import energy_ledger_row, entropy_row
from .geometry import (DegeneracyError, Status, build_masks, degeneracy_check, deform_interface)
from .transport import StepSizeError, compose_flow, identity_flow, make_step_map, window_pullback
from .varstep import (StepFailure, assemble_temperature_step, assemble_velocity_step, coupling_multipliers,
                      solve_temperature_step, solve_velocity_step)


@dataclass
class Setup:
    ref: object
    grid: object
    chart: object
    params: object  # StepParams
    t_end: float
    eps_c: float = None
    eps_gamma: float = 1e-3
    near_margin: float = 0.0
    freeze_velocity: bool = False
    entropy_families: tuple = ("log", "power")
    beta_p: float = -0.5

    @property
    def n_slots(self):
        ratio = self.params.h / self.params.tau
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
            raise ValueError("window not divisible: h/tau must be a positive integer")
        return n

    def check(self, eta):
        return degeneracy_check(eta, self.ref, self.chart, eps_c=self.eps_c, eps_gamma=self.eps_gamma,
                                near_margin=self.near_margin)


@dataclass
class WindowData:
    index: int
    t0: float
    eta0: np.ndarray
    theta0: np.ndarray  # per interior cell, temperature of that cell's fluid
    mask0: object
    beta: np.ndarray  # (N, nG) slot values of the previous shell velocity
    w: np.ndarray  # (N, n, 2) slot values of the previous fluid velocity

    def old_slot_kinetic(self, setup):
        """tau/(2h) [|beta_k|^2 + |w_k|^2] per slot (reference quadrature)."""
        prm = setup.params
        wG = setup.ref.grid.weight
        dx2 = setup.grid.dx**2
        sh = wG * np.sum(self.beta**2, axis=1)
        fl = dx2 * np.sum(self.w**2, axis=(1, 2))
        return prm.tau / (2 * prm.h) * (sh + fl)


@dataclass
class StepRecord:
    window: int
    k: int
    t: float
    tau: float
    eta_prev: np.ndarray
    eta: np.ndarray
    velocity: np.ndarray
    theta: np.ndarray
    labels: np.ndarray
    traction: np.ndarray
    force: np.ndarray
    ledger: dict
    entropy: dict
    det_psi: np.ndarray
    det_phi: np.ndarray
    vsol: object = None
    tsol: object = None


@dataclass
class Trajectory:
    window: WindowData
    records: list = field(default_factory=list)
    status: Status = Status.OK
    stop_time: float = None
    stop_reason: str = ""
    flows: list = field(default_factory=list)  # flow at each slot start
    final_flow: object = None
    final_mask: object = None
    failure: str = ""

    @property
    def complete(self):
        return self.status == Status.OK and not self.failure and self.final_flow is not None

    # interpolant views ------------------------------------------------
    def _slot(self, t):
        tau = self.records[0].tau
        s = (t - self.window.t0) / tau
        return s, tau

    def eta_const(self, t):
        """Piecewise constant, right-continuous: eta_{k+1} on (k tau, (k+1) tau]."""
        s, _ = self._slot(t)
        if s <= 0:
            return self.window.eta0.copy()
        k = min(int(math.ceil(s - 1e-12)) - 1, len(self.records) - 1)
        return self.records[k].eta.copy()

    def eta_const_shift(self, t):
        """The shifted version eta_k on [k tau, (k+1) tau)."""
        s, _ = self._slot(t)
        k = min(int(math.floor(s + 1e-12)), len(self.records))
        return self.window.eta0.copy() if k == 0 else self.records[k - 1].eta.copy()

    def eta_affine(self, t):
        s, _ = self._slot(t)
        k = min(int(math.floor(s)), len(self.records) - 1)
        frac = s - k
        a = self.window.eta0 if k == 0 else self.records[k - 1].eta
        b = self.records[k].eta
        return (1 - frac) * a + frac * b

    def velocity_const(self, t):
        s, _ = self._slot(t)
        k = min(max(int(math.ceil(s - 1e-12)) - 1, 0), len(self.records) - 1)
        return self.records[k].velocity.copy()

    def theta_const(self, t):
        s, _ = self._slot(t)
        if s <= 0:
            return self.window.theta0.copy()
        k = min(int(math.ceil(s - 1e-12)) - 1, len(self.records) - 1)
        return self.records[k].theta.copy()

    def theta_affine(self, t):
        s, _ = self._slot(t)
        k = min(int(math.floor(s)), len(self.records) - 1)
        frac = s - k
        a = self.window.theta0 if k == 0 else self.records[k - 1].theta
        return (1 - frac) * a + frac * self.records[k].theta


def _markers_ds(setup, eta):
    ref = setup.ref
    curve = deform_interface(ref, eta)
    speed = np.linalg.norm(curve.normal, axis=1)  # |d phi_eta / dx| for m = 1
    return curve, speed * ref.grid.weight


def _one_step(setup, window, k, state, tau, slot_old_rest, thermal_prev, K_prev):
    """Advance (eta, theta, mask, flow) by one step of size tau using the data
    of slot k.  Returns (record, new_state) or raises."""
    from dataclasses import replace

    prm = replace(setup.params, tau=tau)
    ref, grid = setup.ref, setup.grid
    eta_k, theta_k, mask_k, flow = state
    n, nG = grid.n_cells, ref.size
    beta, w = window.beta[k], window.w[k]
    if setup.freeze_velocity:
        vprob = assemble_velocity_step(ref, grid, eta_k, beta, w, flow, mask_k, theta_k, prm)
        from .varstep import StepSolution
        vsol = StepSolution(np.zeros(vprob.size), np.zeros(vprob.C.shape[0]), 0.0, 0, {"frozen": True})
    else:
        vprob = assemble_velocity_step(ref, grid, eta_k, beta, w, flow, mask_k, theta_k, prm)
        vsol = solve_velocity_step(vprob)
    u, v, d = vprob.split(vsol.x)
    vel = np.stack([u, v], axis=1)
    eta_next = eta_k + d
    report = setup.check(eta_next)
    if report.status != Status.OK:
        return None, report, (eta_next, vel)
    try:
        curve, ds = _markers_ds(setup, eta_next)
        mask_next = build_masks(curve, grid)
        step = make_step_map(vel, grid, tau)
        flow_next = compose_flow(flow, step)
    except DegeneracyError as exc:
        report.status = Status.COLLAR_HIT
        report.detail["wall"] = str(exc)
        return None, report, (eta_next, vel)
    # heat sources
    dx2 = grid.dx**2
    kappa = prm.kappa
    P = vprob.flow_interp
    Pu = np.stack([P @ u, P @ v], axis=1)
    ux, uy, vx, vy = vprob.Dx @ u, vprob.Dy @ u, vprob.Dx @ v, vprob.Dy @ v
    strain = ux**2 + vy**2 + 0.5 * (uy + vx) ** 2
    reg_cell = sum((op @ u) ** 2 + (op @ v) ** 2 for op in vprob.reg_ops)
    visc_density = vprob.mu * strain
    reg_density = kappa * np.minimum(reg_cell, 1.0 / tau)
    kin_density = np.sum((Pu - w) ** 2, axis=1) / (2 * prm.h) / flow.det
    A = d / tau
    top = ref.grid.derivative_fft(A, prm.shell.k0 + 1)
    shell_density = (A - beta) ** 2 / (2 * prm.h) + kappa * np.minimum(top**2, 1.0 / tau)
    tprob = assemble_temperature_step(grid, mask_k.flat_labels(), mask_next.flat_labels(), theta_k,
                                      step.positions, flow.ref_labels, flow_next.positions, curve.points, ds,
                                      ref.grid.weight, prm, visc_density, reg_density, kin_density,
                                      shell_density)
    tsol = solve_temperature_step(tprob)
    theta_next = tsol.x
    trac = coupling_multipliers(vprob, vsol)
    G = np.einsum("nd,nd->n", trac, ref.nu) / (tau * ref.grid.weight)
    ledger = energy_ledger_row(vprob, vsol, tprob, tsol, step, flow_next,
                               extra={"slot_old_rest": slot_old_rest, "thermal_prev": thermal_prev,
                                      "K_prev": K_prev})
    ent = {fam: entropy_row(tprob, tsol, theta_k, mask_k.flat_labels(), fam, setup.beta_p,
                             energy_scale=ledger["scale"])
           for fam in setup.entropy_families}
    ledger["gamma_min"] = report.gamma_min
    ledger["coercivity"] = report.coercivity
    ledger["eta_min"] = report.eta_min
    ledger["eta_max"] = report.eta_max
    rec = StepRecord(window.index, k, 0.0, tau, eta_k.copy(), eta_next, vel, theta_next,
                     mask_next.flat_labels().copy(), trac, G[:, None] * ref.nu, ledger, ent, step.det,
                     flow_next.det, vsol, tsol)
    return rec, report, (eta_next, theta_next, mask_next, flow_next)


def run_tau_window(window, setup, on_step=None):
    """All tau-steps of one window (stops early on degeneracy)."""
    prm = setup.params
    N = setup.n_slots
    tau = prm.tau
    traj = Trajectory(window)
    flow = identity_flow(setup.grid, window.mask0.flat_labels())
    state = (window.eta0.copy(), window.theta0.copy(), window.mask0, flow)
    old = window.old_slot_kinetic(setup)
    from .diagnostics import thermal_totals
    from .koiter import kappa_energy
    thermal_prev = thermal_totals(setup.grid, window.theta0, window.mask0.flat_labels(), prm.fluids)
    K_prev = float(kappa_energy(setup.ref, window.eta0, prm.shell))
    new_acc = 0.0
    pre = setup.check(window.eta0)
    if pre.status != Status.OK:
        traj.status = pre.status
        traj.stop_time = window.t0
        traj.stop_reason = pre.status.value
        return traj
    for k in range(N):
        traj.flows.append(state[3])
        rest = float(np.sum(old[k + 1:]))
        try:
            try:
                rec, report, new = _one_step(setup, window, k, state, tau, rest, thermal_prev, K_prev)
                subs = [rec]
            except (StepFailure, StepSizeError):
                # one retry as two half steps with the same slot data
                rec1, report, new = _one_step(setup, window, k, state, tau / 2, rest, thermal_prev, K_prev)
                subs = [rec1]
                if rec1 is not None:
                    rec2, report, new = _one_step(setup, window, k, new, tau / 2, rest,
                                                  rec1.ledger["thermal_total"], rec1.ledger["K_next"])
                    subs.append(rec2)
        except (StepFailure, StepSizeError) as exc:
            traj.failure = f"step {k} of window {window.index}: {exc}"
            traj.stop_time = window.t0 + k * tau
            return traj
        if any(r is None for r in subs):
            traj.status = report.status
            traj.stop_time = window.t0 + (k + 1) * tau
            traj.stop_reason = report.status.value
            traj.stop_report = report
            return traj
        for j, r in enumerate(subs):
            r.t = window.t0 + k * tau + (j + 1) * r.tau if len(subs) > 1 else window.t0 + (k + 1) * tau
            new_acc += r.ledger["slot_new"]
            r.ledger["E_tot"] = r.ledger["thermal_total"] + r.ledger["K_next"] + new_acc + rest
            if len(subs) > 1 and j == 0:
                r.ledger["E_tot"] += 0.5 * old[k]
            traj.records.append(r)
            if on_step is not None:
                on_step(r)
        thermal_prev = subs[-1].ledger["thermal_total"]
        K_prev = subs[-1].ledger["K_next"]
        state = new
    traj.final_flow = state[3]
    traj.final_mask = state[2]
    return traj


def initial_window(setup, eta0, eta1, theta0, u0):
    """First window: previous shell and fluid velocities held at the initial
    data over [0, h]."""
    N = setup.n_slots
    curve = deform_interface(setup.ref, eta0)
    mask = build_masks(curve, setup.grid)
    beta = np.repeat(np.asarray(eta1, dtype=float)[None, :], N, axis=0)
    w = np.repeat(np.asarray(u0, dtype=float)[None, :, :], N, axis=0)
    return WindowData(0, 0.0, np.asarray(eta0, dtype=float).copy(), np.asarray(theta0, dtype=float).copy(),
                      mask, beta, w)


def advance_window(prev, setup):
    """Hand the window-end state and the window's velocities to the next window."""
    if not prev.complete:
        raise ValueError("previous window did not finish")
    recs = prev.records
    N = setup.n_slots
    tau = setup.params.tau
    if len(recs) == N:
        beta = np.stack([(r.eta - r.eta_prev) / r.tau for r in recs])
        vels = [r.velocity for r in recs]
        flows = prev.flows
    else:
        # a slot was split in two; rebuild slot values from slot endpoints
        beta, vels, flows = [], [], []
        t0 = prev.window.t0
        eta_start = prev.window.eta0
        for k in range(N):
            end = t0 + (k + 1) * tau
            last = [r for r in recs if abs(r.t - end) < 1e-9 * max(1.0, end)][-1]
            beta.append((last.eta - eta_start) / tau)
            eta_start = last.eta
            vels.append(last.velocity)
            flows.append(prev.flows[k])
        beta = np.stack(beta)
    w = window_pullback(vels, flows, prev.final_flow)
    last = recs[-1]
    return WindowData(prev.window.index + 1, prev.window.t0 + setup.params.h, last.eta.copy(),
                      last.theta.copy(), prev.final_mask, beta, np.stack(w))


@dataclass
class Termination:
    reason: str  # "time reached", a degeneracy status, or "solver failure"
    time: float
    window: int
    step: int
    detail: str = ""
    monitor_sup: float = 0.0

    @property
    def exit_code(self):
        if self.reason == "time reached":
            return 0
        if self.reason == "solver failure":
            return 3
        return 2


def run_simulation(setup, window0, on_step=None, on_window=None):
    """Iterate windows until t_end or a degeneracy / failure."""
    trajs = []
    win = window0
    h = setup.params.h
    monitor = 0.0
    while True:
        traj = run_tau_window(win, setup, on_step=on_step)
        trajs.append(traj)
        for r in traj.records:
            monitor = max(monitor, r.ledger.get("coercivity", 0.0))
        if on_window is not None:
            on_window(traj)
        if traj.failure:
            return trajs, Termination("solver failure", traj.stop_time, win.index, len(traj.records),
                                      traj.failure, monitor)
        if traj.status != Status.OK:
            rep = getattr(traj, "stop_report", None)
            if rep is not None:
                monitor = max(monitor, rep.coercivity)
            return trajs, Termination(traj.status.value, traj.stop_time, win.index, len(traj.records),
                                      "", monitor)
        t_next = win.t0 + h
        if t_next >= setup.t_end - 1e-9 * h:
            return trajs, Termination("time reached", t_next, win.index, len(traj.records), "", monitor)
        try:
            win = advance_window(traj, setup)
        except DegeneracyError as exc:
            return trajs, Termination("COLLAR_HIT", t_next, win.index, len(traj.records), str(exc), monitor)


def window_start_energy(setup, window):
    """E_tot at the window start: thermal + K_kappa + the old-slot kinetic sum."""
    from .diagnostics import thermal_totals
    from .koiter import kappa_energy

    prm = setup.params
    thermal = thermal_totals(setup.grid, window.theta0, window.mask0.flat_labels(), prm.fluids)
    return thermal + float(kappa_energy(setup.ref, window.eta0, prm.shell)) + float(
        np.sum(window.old_slot_kinetic(setup)))
