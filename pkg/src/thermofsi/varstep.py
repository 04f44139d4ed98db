"""The two per-step minimization problems.

Velocity step: minimize over (u, delta_eta) the sum of the regularized shell
energy, the time-delayed inertia quotients, viscous and regularizing
dissipation, subject to discrete incompressibility and the kinematic
coupling u(marker_j) = (delta_eta_j / tau) nu_j.  Solved by damped Newton on
the KKT system.

Temperature step: a convex quadratic in the temperatures on the new masks,
solved by preconditioned CG with an active-set floor.
"""
from dataclasses import dataclass, field
import math

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import Label
from .gridops import (centered_derivatives, divergence, face_laplacian, forward_gradient,
                      interp_matrix, laplacian5, same_label_faces)
from .koiter import kappa_energy, kappa_gradient_density, koiter_hessian_matrix
from .materials import capped_viscosity


class StepFailure(RuntimeError):
    pass


@dataclass
class StepParams:
    tau: float
    h: float
    shell: object  # KoiterParams (kappa is shared with the fluid regularizer)
    fluids: tuple  # (FluidMaterial, FluidMaterial)
    cap: object  # ViscosityCap
    transmission: object  # Transmission
    k0_fluid: int = 2
    tol_newton: float = 1e-10
    max_newton: int = 50
    tol_cg: float = 1e-12
    eps_theta: float = 1e-12
    max_active_rounds: int = 5

    @property
    def kappa(self):
        return self.shell.kappa


@dataclass
class StepSolution:
    x: np.ndarray
    multipliers: np.ndarray
    residual: float
    iterations: int
    info: dict = field(default_factory=dict)


def independent_rows(C, tol=1e-10):
    """Indices of a maximal linearly independent subset of rows of C
    (pivoted QR of the row-normalized transpose)."""
    Cd = C.toarray() if sps.issparse(C) else np.asarray(C)
    if Cd.shape[0] == 0:
        return np.arange(0)
    norms = np.linalg.norm(Cd, axis=1)
    nz = np.flatnonzero(norms > 0)
    Cn = Cd[nz] / norms[nz, None]
    _, R, piv = sla.qr(Cn.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0:
        return np.arange(0)
    rank = int(np.sum(diag > tol * diag[0]))
    return np.sort(nz[piv[:rank]])


# ---------------------------------------------------------------------------
# velocity step


@dataclass
class VelocityStepProblem:
    ref: object
    grid: object
    eta_k: np.ndarray
    beta: np.ndarray
    w: np.ndarray  # (n, 2) previous-window fluid data on reference cells
    params: StepParams
    mask: object
    theta_k: np.ndarray
    flow_interp: object  # P: reference positions <- cell values
    quad: np.ndarray  # reference-cell quadrature weights dx^2 / det grad Phi
    mu: np.ndarray  # capped viscosity per cell
    normals: np.ndarray  # reference normals at nodes (nG, 2)
    C: object  # full constraint matrix
    rows: np.ndarray  # independent constraint rows
    H_u: object  # constant Hessian of the fluid blocks
    lin_u: np.ndarray  # linear coefficient of the fluid blocks
    reg_ops: list
    Dx: object
    Dy: object
    shell_load: np.ndarray = None

    @property
    def n(self):
        return self.grid.n_cells

    @property
    def n_gamma(self):
        return self.ref.size

    @property
    def size(self):
        return 2 * self.n + self.n_gamma

    def split(self, z):
        n = self.n
        return z[:n], z[n:2 * n], z[2 * n:]


def fluid_regularizer_ops(grid, order):
    if order == 1:
        return list(forward_gradient(grid))
    if order == 2:
        return [laplacian5(grid)]
    raise ValueError("fluid regularizer order must be 1 or 2")


def cell_viscosity(theta, labels_flat, fluids, cap):
    mu = np.empty(theta.shape)
    for i, mat in enumerate(fluids, start=1):
        sel = labels_flat == i
        mu[sel] = capped_viscosity(theta[sel], mat, cap)
    return mu


def assemble_velocity_step(ref, grid, eta_k, beta, w, flow, mask, theta_k, params, shell_load=None):
    """Build the velocity/displacement problem for one tau-step."""
    labels = mask.flat_labels()
    if not (np.any(labels == Label.FLUID1) and np.any(labels == Label.FLUID2)):
        raise ValueError("degenerate mask: a fluid phase is empty")
    tau, h = params.tau, params.h
    kappa = params.kappa
    n = grid.n_cells
    dx2 = grid.dx**2
    P = flow.interp()
    quad = dx2 / flow.det
    mu = cell_viscosity(np.asarray(theta_k, dtype=float), labels, params.fluids, params.cap)
    Dx, Dy = centered_derivatives(grid)
    M = sps.diags(mu)
    Q = sps.diags(quad)
    ops = fluid_regularizer_ops(grid, params.k0_fluid)
    mass = (tau / h) * (P.T @ Q @ P)
    reg = sum((op.T @ op for op in ops), sps.csr_matrix((n, n))) * (tau * kappa * dx2)
    visc_uu = tau * dx2 * (Dx.T @ M @ Dx + 0.5 * Dy.T @ M @ Dy)
    visc_vv = tau * dx2 * (Dy.T @ M @ Dy + 0.5 * Dx.T @ M @ Dx)
    visc_uv = tau * dx2 * 0.5 * (Dy.T @ M @ Dx)
    H_u = sps.bmat([[mass + reg + visc_uu, visc_uv], [visc_uv.T, mass + reg + visc_vv]]).tocsr()
    w = np.asarray(w, dtype=float).reshape(n, 2)
    lin_u = -(tau / h) * np.concatenate([P.T @ (quad * w[:, 0]), P.T @ (quad * w[:, 1])])

    nG = ref.size
    normals = ref.nu
    Pm = interp_matrix(grid, mask.markers)
    div = divergence(grid)
    zeros_g = sps.csr_matrix((n, nG))
    c_div = sps.hstack([div, zeros_g])
    c_x = sps.hstack([Pm, sps.csr_matrix((nG, n)), sps.diags(-normals[:, 0] / tau)])
    c_y = sps.hstack([sps.csr_matrix((nG, n)), Pm, sps.diags(-normals[:, 1] / tau)])
    C = sps.vstack([c_div, c_x, c_y]).tocsr()
    rows = independent_rows(C)
    return VelocityStepProblem(ref, grid, np.asarray(eta_k, dtype=float), np.asarray(beta, dtype=float), w,
                               params, mask, np.asarray(theta_k, dtype=float), P, quad, mu, normals, C,
                               rows, H_u, lin_u, ops, Dx, Dy,
                               None if shell_load is None else np.asarray(shell_load, dtype=float))


def velocity_blocks(problem, z):
    """The objective split into its named blocks at z = (u, v, delta_eta)."""
    pb = problem
    prm = pb.params
    tau, h, kappa = prm.tau, prm.h, prm.kappa
    u, v, d = pb.split(np.asarray(z, dtype=float))
    wG = pb.ref.grid.weight
    dx2 = pb.grid.dx**2
    eta = pb.eta_k + d
    A = d / tau
    Pu = pb.flow_interp @ u
    Pv = pb.flow_interp @ v
    ux, uy, vx, vy = pb.Dx @ u, pb.Dy @ u, pb.Dx @ v, pb.Dy @ v
    strain = ux**2 + vy**2 + 0.5 * (uy + vx) ** 2
    reg_cell = sum((op @ u) ** 2 + (op @ v) ** 2 for op in pb.reg_ops)
    Sd = pb.ref.grid.apply_smoothing(A, prm.shell.k0 + 1)
    out = {
        "elastic": float(kappa_energy(pb.ref, eta, prm.shell)),
        "shell_inertia": tau / (2 * h) * wG * float(np.sum((A - pb.beta) ** 2)),
        "fluid_inertia": tau / (2 * h) * float(np.sum(pb.quad * ((Pu - pb.w[:, 0]) ** 2 + (Pv - pb.w[:, 1]) ** 2))),
        "fluid_regularizer": 0.5 * tau * kappa * dx2 * float(np.sum(reg_cell)),
        "viscous": 0.5 * tau * dx2 * float(np.sum(pb.mu * strain)),
        "shell_regularizer": 0.5 * tau * kappa * wG * float(A @ Sd),
    }
    if pb.shell_load is not None:
        out["load"] = -wG * float(pb.shell_load @ d)
    return out


def velocity_objective(problem, z):
    return sum(velocity_blocks(problem, z).values())


def _shell_grad(pb, d):
    prm = pb.params
    tau, h, kappa = prm.tau, prm.h, prm.kappa
    wG = pb.ref.grid.weight
    eta = pb.eta_k + d
    g = kappa_gradient_density(pb.ref, eta, prm.shell)
    g = g + (d / tau - pb.beta) / h
    g = g + kappa * pb.ref.grid.apply_smoothing(d / tau, prm.shell.k0 + 1)
    if pb.shell_load is not None:
        g = g - pb.shell_load
    return wG * g


def velocity_gradient_vec(problem, z):
    pb = problem
    n2 = 2 * pb.n
    g_u = pb.H_u @ z[:n2] + pb.lin_u
    return np.concatenate([g_u, _shell_grad(pb, z[n2:])])


def velocity_hessian(problem, z):
    pb = problem
    prm = pb.params
    tau, h, kappa = prm.tau, prm.h, prm.kappa
    wG = pb.ref.grid.weight
    d = z[2 * pb.n:]
    Hk = koiter_hessian_matrix(pb.ref, pb.eta_k + d, prm.shell)
    S = pb.ref.grid.smoothing_matrix(prm.shell.k0 + 1)
    He = wG * (Hk + np.eye(d.size) / (h * tau) + (kappa / tau) * S)
    He = 0.5 * (He + He.T)
    return sps.bmat([[pb.H_u, None], [None, sps.csr_matrix(He)]]).tocsr()


class _Projector:
    """Orthogonal projection onto the null space of the kept constraints and
    least-squares multipliers."""

    def __init__(self, Cr):
        m, N = Cr.shape
        self.N = N
        K = sps.bmat([[sps.identity(N), Cr.T], [Cr, None]]).tocsc()
        self.lu = spla.splu(K)

    def __call__(self, g):
        sol = self.lu.solve(np.concatenate([g, np.zeros(self.lu.shape[0] - self.N)]))
        return sol[:self.N], sol[self.N:]

    def feasible(self, z, Cr, rounds=2):
        """Minimal-norm correction of z onto C z = 0 (removes KKT round-off)."""
        for _ in range(rounds):
            sol = self.lu.solve(np.concatenate([np.zeros(self.N), -(Cr @ z)]))
            z = z + sol[:self.N]
        return z


def _expand_multipliers(pb, lam_r):
    full = np.zeros(pb.C.shape[0])
    full[pb.rows] = lam_r
    return full


def el_residual_velocity(problem, z, projector=None):
    """Norm of the projected Lagrangian gradient plus constraint violation."""
    pb = problem
    Cr = pb.C[pb.rows]
    proj = projector or _Projector(Cr)
    g = velocity_gradient_vec(pb, z)
    r, _ = proj(g)
    return float(np.linalg.norm(r) + np.linalg.norm(pb.C @ z))


def solve_velocity_step(problem, z0=None):
    """Damped Newton on the KKT system from the feasible point z = 0."""
    pb = problem
    prm = pb.params
    Cr = pb.C[pb.rows]
    mrows = Cr.shape[0]
    proj = _Projector(Cr)
    z = np.zeros(pb.size) if z0 is None else np.asarray(z0, dtype=float).copy()
    g = velocity_gradient_vec(pb, z)
    r, lam = proj(g)
    scale0 = np.linalg.norm(g)
    F = velocity_objective(pb, z)
    rho_total = 0.0
    it = 0
    res = np.linalg.norm(r)
    while True:
        scale = max(scale0, np.linalg.norm(g))
        if res <= prm.tol_newton * scale or scale == 0.0:
            break
        if it >= prm.max_newton:
            raise StepFailure(f"Newton did not converge (residual {res:.3e}, scale {scale:.3e})")
        it += 1
        H = velocity_hessian(pb, z)
        rho = 0.0
        hnorm = spla.norm(H, 1)
        accepted = False
        for _attempt in range(12):
            Hr = H + rho * sps.identity(pb.size) if rho > 0 else H
            K = sps.bmat([[Hr, Cr.T], [Cr, None]]).tocsc()
            try:
                sol = spla.splu(K).solve(np.concatenate([-g, np.zeros(mrows)]))
            except RuntimeError:
                sol = None
            if sol is not None and np.all(np.isfinite(sol)):
                dz = sol[:pb.size]
                slope = float(g @ dz)
                if slope < 0:
                    alpha = 1.0
                    while alpha > 1e-10:
                        zt = z + alpha * dz
                        Ft = velocity_objective(pb, zt)
                        gt = velocity_gradient_vec(pb, zt)
                        rt, lamt = proj(gt)
                        armijo = Ft <= F + 1e-4 * alpha * slope
                        # near the solution rounding hides the decrease in F;
                        # fall back to the stationarity measure
                        if armijo or np.linalg.norm(rt) < 0.5 * res:
                            z, F, g, r, lam = zt, Ft, gt, rt, lamt
                            res = np.linalg.norm(r)
                            accepted = True
                            break
                        alpha *= 0.5
                if accepted:
                    break
            rho = 1e-8 * hnorm if rho == 0 else rho * 10.0
            rho_total = max(rho_total, rho)
        if not accepted:
            raise StepFailure("line search stalled after inertia correction")
    if it > 0:
        z = proj.feasible(z, Cr)
        g = velocity_gradient_vec(pb, z)
        r, lam = proj(g)
        res = np.linalg.norm(r)
    mult = _expand_multipliers(pb, -lam)
    info = {"rank": int(mrows), "rows": int(pb.C.shape[0]), "rho": rho_total,
            "constraint": float(np.max(np.abs(pb.C @ z))) if z.size else 0.0}
    return StepSolution(z, mult, float(res), it, info)


def coupling_multipliers(problem, solution):
    """Per-marker 2-vectors of the coupling-constraint multipliers."""
    n, nG = problem.n, problem.n_gamma
    lam = solution.multipliers
    return np.stack([lam[n:n + nG], lam[n + nG:n + 2 * nG]], axis=1)


# ---------------------------------------------------------------------------
# temperature step


@dataclass
class TemperatureStepProblem:
    grid: object
    labels_k: np.ndarray
    labels_next: np.ndarray
    theta_k: np.ndarray
    params: StepParams
    A: object  # sparse SPD matrix in reduced variables
    b: np.ndarray
    const: float
    E: object  # reduction theta = E phi (identity unless lambda = inf)
    x0: np.ndarray
    P: dict  # per fluid: (rows, matrix) pushforward sampling
    Q: dict  # per fluid: (rows, matrix) reference sampling at Phi_{k+1}
    pairs: np.ndarray  # (nG, 2) nearest fluid-1 / fluid-2 cells per marker
    ds: np.ndarray  # interface arc-length weights
    faces: dict  # per fluid same-label faces
    sources: dict  # per fluid heat source totals (test function 1)
    source_vec: np.ndarray
    counts: dict
    orphans: dict = field(default_factory=dict)


def marker_traces(grid, labels_flat, markers):
    """Nearest cell of each fluid to every marker (one-sided traces)."""
    out = []
    for lab in (Label.FLUID1, Label.FLUID2):
        idx = np.flatnonzero(labels_flat == lab)
        tree = cKDTree(grid.centers[idx])
        _, near = tree.query(markers)
        out.append(idx[np.atleast_1d(near)])
    return np.stack(out, axis=1)


def assemble_temperature_step(grid, labels_k, labels_next, theta_k, step_positions, ref_labels,
                              flow_positions, markers_next, ds, wG, params, visc_density,
                              reg_density, kinetic_density, shell_density):
    """Quadratic model of the temperature step.

    visc_density, reg_density: per cell of the old mask (already capped);
    kinetic_density: per reference cell; shell_density: per marker (fluid 1)."""
    tau = params.tau
    n = grid.n_cells
    dx2 = grid.dx**2
    lam = params.transmission.value
    labels_k = np.asarray(labels_k)
    labels_next = np.asarray(labels_next)
    theta_k = np.asarray(theta_k, dtype=float)
    A = sps.csr_matrix((n, n))
    b = np.zeros(n)
    const = 0.0
    P, Q, faces, sources, orphans = {}, {}, {}, {}, {}
    src_vec = np.zeros(n)
    counts = {"clamped": 0, "orphans": 0}
    for i, mat in enumerate(params.fluids, start=1):
        allowed = labels_next == i
        rows = np.flatnonzero(labels_k == i)
        Pi, cl = interp_matrix(grid, step_positions[rows], allowed=allowed, return_clamped=True)
        counts["clamped"] += int(cl.sum())
        P[i] = (rows, Pi)
        m = mat.c * dx2 / tau
        A = A + m * (Pi.T @ Pi)
        b += m * (Pi.T @ theta_k[rows])
        const += 0.5 * m * float(theta_k[rows] @ theta_k[rows])
        # cells of the new mask that receive no sample inherit the nearest
        # old value of the same fluid
        colsum = np.asarray(abs(Pi).sum(axis=0)).ravel()
        orphan = np.flatnonzero(allowed & (colsum <= 1e-14))
        orphans[i] = (orphan, np.zeros(0))
        if orphan.size:
            counts["orphans"] += int(orphan.size)
            tree = cKDTree(grid.centers[rows])
            _, near = tree.query(grid.centers[orphan])
            old = theta_k[rows[np.atleast_1d(near)]]
            orphans[i] = (orphan, old)
            A = A + sps.csr_matrix((np.full(orphan.size, m), (orphan, orphan)), shape=(n, n))
            b[orphan] += m * old
            const += 0.5 * m * float(old @ old)
        f = same_label_faces(grid, labels_next)
        f = f[labels_next[f[:, 0]] == i]
        faces[i] = f
        A = A + mat.k * face_laplacian(n, f)
        qrows = np.flatnonzero(np.asarray(ref_labels) == i)
        Qi, cl2 = interp_matrix(grid, flow_positions[qrows], allowed=allowed, return_clamped=True)
        counts["clamped"] += int(cl2.sum())
        Q[i] = (qrows, Qi)
        s_cell = dx2 * (visc_density[rows] + reg_density[rows])
        s_ref = dx2 * kinetic_density[qrows]
        vec = Pi.T @ s_cell + Qi.T @ s_ref
        sources[i] = float(s_cell.sum() + s_ref.sum())
        src_vec += vec
    pairs = marker_traces(grid, labels_next, markers_next)
    s_shell = wG * np.asarray(shell_density, dtype=float)
    src_vec += np.bincount(pairs[:, 0], weights=s_shell, minlength=n)
    sources[1] += float(s_shell.sum())
    b += src_vec
    if math.isinf(lam):
        ncomp, comp = connected_components(
            sps.csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)), directed=False)
        E = sps.csr_matrix((np.ones(n), (np.arange(n), comp)), shape=(n, ncomp))
    else:
        if lam > 0:
            A = A + lam * face_laplacian(n, pairs, ds)
        E = sps.identity(n, format="csr")
    Ar = (E.T @ A @ E).tocsr()
    br = E.T @ b
    # initial guess: old value where the label is unchanged, else fluid mean
    guess = np.empty(n)
    for i in (1, 2):
        sel = labels_next == i
        old = theta_k[labels_k == i]
        mean = float(old.mean()) if old.size else float(theta_k.mean())
        keep = sel & (labels_k == i)
        guess[sel] = mean
        guess[keep] = theta_k[keep]
    cnt = np.asarray(E.sum(axis=0)).ravel()
    x0 = (E.T @ guess) / cnt
    return TemperatureStepProblem(grid, labels_k, labels_next, theta_k, params, Ar, br, const, E, x0, P, Q,
                                  pairs, np.asarray(ds, dtype=float), faces, sources, src_vec, counts, orphans)


def sampled_totals(problem, theta):
    """Per fluid (sampled new total, old total) as seen by the time term:
    c_i dx^2 [sum (theta o Psi) + orphan values] and the matching old sums.
    Their difference equals tau times (sources - interface outflow)."""
    pb = problem
    dx2 = pb.grid.dx**2
    out = {}
    for i, mat in enumerate(pb.params.fluids, start=1):
        rows, Pi = pb.P[i]
        orphan, old = pb.orphans.get(i, (np.zeros(0, int), np.zeros(0)))
        new = float(np.sum(Pi @ theta) + np.sum(theta[orphan]))
        prev = float(np.sum(pb.theta_k[rows]) + np.sum(old))
        out[i] = (mat.c * dx2 * new, mat.c * dx2 * prev)
    return out


def temperature_functional(problem, theta):
    """T_k at full temperatures theta (requires theta in the range of E)."""
    pb = problem
    phi = _reduce(pb, theta)
    return 0.5 * float(phi @ (pb.A @ phi)) - float(pb.b @ phi) + pb.const


def _reduce(pb, theta):
    cnt = np.asarray(pb.E.sum(axis=0)).ravel()
    return (pb.E.T @ np.asarray(theta, dtype=float)) / cnt


def _cg(A, b, x0, tol):
    diag = A.diagonal()
    M = sps.diags(1.0 / diag)
    count = [0]

    def cb(_):
        count[0] += 1

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    if np.linalg.norm(b - A @ x0) <= tol * bnorm:
        return x0.copy(), 0
    x, info = spla.cg(A, b, x0=x0, rtol=tol, atol=0.0, M=M, maxiter=20 * len(b), callback=cb)
    if info != 0:
        raise StepFailure("CG did not converge (matrix not SPD?)")
    return x, count[0]


def solve_temperature_step(problem):
    """CG solve, then clamp-and-resolve rounds enforcing the floor."""
    pb = problem
    prm = pb.params
    floor = prm.cap.floor
    A, b = pb.A, pb.b
    N = len(b)
    phi, iters = _cg(A, b, pb.x0, prm.tol_cg)
    fixed = np.zeros(N, dtype=bool)
    rounds = 0
    while np.any(phi[~fixed] < floor - prm.eps_theta):
        if rounds >= prm.max_active_rounds:
            raise StepFailure("active set did not settle")
        rounds += 1
        fixed |= phi < floor - prm.eps_theta
        free = np.flatnonzero(~fixed)
        fx = np.flatnonzero(fixed)
        phi = phi.copy()
        phi[fx] = floor
        Aff = A[free][:, free].tocsr()
        rhs = b[free] - A[free][:, fx] @ phi[fx]
        sol, k = _cg(Aff, rhs, np.maximum(phi[free], floor), prm.tol_cg)
        iters += k
        phi[free] = sol
    theta = pb.E @ phi
    res = el_residual_temperature(pb, theta, fixed)
    info = {"cg_iters": iters, "active_rounds": rounds, "clamped_floor": int(fixed.sum())}
    return StepSolution(theta, phi, res, iters, info)


def el_residual_temperature(problem, theta, fixed=None):
    """Relative norm of the stationarity residual on the free variables."""
    pb = problem
    phi = _reduce(pb, theta)
    r = pb.A @ phi - pb.b
    if fixed is not None:
        r = r[~fixed]
    scale = max(np.linalg.norm(pb.b), 1e-300)
    return float(np.linalg.norm(r) / scale)
