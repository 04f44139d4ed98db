"""Invariant ledger: the per-step energy identity, total energy, entropy
inequality, transmission checks, interface force and the minimal principle."""
import math

import numpy as np

from .koiter import kappa_energy, kappa_gradient_density
from .materials import entropy_test_function
from .varstep import sampled_totals

# columns of the energy identity (energy units, i.e. already multiplied by tau)
IDENTITY_TERMS = ("dK", "remainder", "kin_shell_new", "kin_shell_old", "defect_shell", "kin_fluid_new",
                  "kin_fluid_old", "defect_fluid", "diss_visc", "diss_reg_fluid", "diss_reg_shell", "load_work")
# sign with which each column enters the identity sum (= 0)
IDENTITY_SIGNS = {"dK": 1, "remainder": 1, "kin_shell_new": 1, "kin_shell_old": -1, "defect_shell": 1,
                  "kin_fluid_new": 1, "kin_fluid_old": -1, "defect_fluid": 1, "diss_visc": 1,
                  "diss_reg_fluid": 1, "diss_reg_shell": 1, "load_work": -1}


def thermal_by_fluid(grid, theta, labels_flat, fluids):
    dx2 = grid.dx**2
    theta = np.asarray(theta, dtype=float)
    labels_flat = np.asarray(labels_flat)
    return {i: mat.c * dx2 * float(theta[labels_flat == i].sum()) for i, mat in enumerate(fluids, start=1)}


def thermal_totals(grid, theta, labels_flat, fluids):
    return sum(thermal_by_fluid(grid, theta, labels_flat, fluids).values())


def identity_residual(row):
    """(absolute residual, scale) of the step energy identity."""
    total = sum(IDENTITY_SIGNS[k] * row[k] for k in IDENTITY_TERMS)
    scale = sum(abs(row[k]) for k in IDENTITY_TERMS)
    return abs(total), scale


def mechanical_terms(vprob, z, K_prev=None):
    """All velocity-step columns of the energy identity at z."""
    pb = vprob
    prm = pb.params
    tau, h, kappa = prm.tau, prm.h, prm.kappa
    u, v, d = pb.split(np.asarray(z, dtype=float))
    wG = pb.ref.grid.weight
    dx2 = pb.grid.dx**2
    eta = pb.eta_k + d
    A = d / tau
    if K_prev is None:
        K_prev = float(kappa_energy(pb.ref, pb.eta_k, prm.shell))
    K_next = float(kappa_energy(pb.ref, eta, prm.shell))
    dk_pair = wG * float(kappa_gradient_density(pb.ref, eta, prm.shell) @ d)
    Pu, Pv = pb.flow_interp @ u, pb.flow_interp @ v
    w = pb.w
    ux, uy, vx, vy = pb.Dx @ u, pb.Dy @ u, pb.Dx @ v, pb.Dy @ v
    strain = ux**2 + vy**2 + 0.5 * (uy + vx) ** 2
    reg_cell = sum((op @ u) ** 2 + (op @ v) ** 2 for op in pb.reg_ops)
    c = tau / (2 * h)
    row = {
        "K_prev": K_prev,
        "K_next": K_next,
        "dK": K_next - K_prev,
        "remainder": dk_pair - (K_next - K_prev),
        "kin_shell_new": c * wG * float(A @ A),
        "kin_shell_old": c * wG * float(pb.beta @ pb.beta),
        "defect_shell": c * wG * float(np.sum((A - pb.beta) ** 2)),
        "kin_fluid_new": c * float(np.sum(pb.quad * (Pu**2 + Pv**2))),
        "kin_fluid_old": c * float(np.sum(pb.quad * (w[:, 0] ** 2 + w[:, 1] ** 2))),
        "defect_fluid": c * float(np.sum(pb.quad * ((Pu - w[:, 0]) ** 2 + (Pv - w[:, 1]) ** 2))),
        "diss_visc": tau * dx2 * float(np.sum(pb.mu * strain)),
        "diss_reg_fluid": tau * kappa * dx2 * float(np.sum(reg_cell)),
        "diss_reg_shell": tau * kappa * wG * float(A @ pb.ref.grid.apply_smoothing(A, prm.shell.k0 + 1)),
        "load_work": 0.0 if pb.shell_load is None else wG * float(pb.shell_load @ d),
    }
    # kinetic content of the slot as it enters E_tot
    row["slot_new"] = row["kin_shell_new"] + row["kin_fluid_new"]
    return row


def interface_force(vprob, vsol):
    """Per-marker normal force density G_j nu_j rebuilt from the coupling
    multipliers (the discrete tractions)."""
    from .varstep import coupling_multipliers

    trac = coupling_multipliers(vprob, vsol)
    tau = vprob.params.tau
    wG = vprob.ref.grid.weight
    G = np.einsum("nd,nd->n", trac, vprob.normals) / (tau * wG)
    return G, trac


def power_balance(vprob, vsol, row):
    """(interface power sum_j G_j delta eta_j / tau, shell power from the ledger)."""
    G, _ = interface_force(vprob, vsol)
    _, _, d = vprob.split(vsol.x)
    tau = vprob.params.tau
    wG = vprob.ref.grid.weight
    p_if = wG * float(G @ (d / tau))
    shell = (row["dK"] + row["remainder"] + row["kin_shell_new"] - row["kin_shell_old"] + row["defect_shell"]
             + row["diss_reg_shell"] - row["load_work"]) / tau
    return p_if, shell


def jump_max(tprob, theta):
    a, b = tprob.pairs[:, 0], tprob.pairs[:, 1]
    return float(np.max(np.abs(theta[a] - theta[b]))) if len(a) else 0.0


def interface_flux(tprob, theta):
    """tau lambda sum ds (theta_1 - theta_2), the heat passed from fluid 1 to 2."""
    lam = tprob.params.transmission.value
    if lam == 0 or math.isinf(lam):
        return 0.0
    a, b = tprob.pairs[:, 0], tprob.pairs[:, 1]
    return tprob.params.tau * lam * float(tprob.ds @ (theta[a] - theta[b]))


def energy_ledger_row(vprob, vsol, tprob, tsol, step, flow_next, extra=None):
    """One ledger row for an accepted tau-step."""
    extra = extra or {}
    prm = vprob.params
    row = mechanical_terms(vprob, vsol.x, extra.get("K_prev"))
    res, scale = identity_residual(row)
    row["residual_abs"] = res
    row["scale"] = scale
    row["residual_energy"] = res / scale if scale > 0 else 0.0
    p_if, p_sh = power_balance(vprob, vsol, row)
    row["power_interface"] = p_if
    row["power_shell"] = p_sh
    theta = tsol.x
    grid = vprob.grid
    by = thermal_by_fluid(grid, theta, tprob.labels_next, prm.fluids)
    row["thermal_1"], row["thermal_2"] = by[1], by[2]
    row["thermal_total"] = by[1] + by[2]
    samp = sampled_totals(tprob, theta)
    flux = interface_flux(tprob, theta)
    row["interface_flux"] = flux
    for i in (1, 2):
        new, prev = samp[i]
        row[f"sampled_new_{i}"] = new
        row[f"sampled_prev_{i}"] = prev
        row[f"source_{i}"] = prm.tau * tprob.sources[i]
        sign = -1.0 if i == 1 else 1.0
        row[f"balance_{i}"] = new - prev - prm.tau * tprob.sources[i] - sign * flux
    row["jump_max"] = jump_max(tprob, theta)
    row["theta_min"] = float(theta.min())
    row["theta_max"] = float(theta.max())
    z = vsol.x
    n, nG = vprob.n, vprob.n_gamma
    cz = vprob.C @ z
    row["div_max"] = float(np.max(np.abs(cz[:n])))
    row["coupling_max"] = float(np.max(np.abs(cz[n:]))) if nG else 0.0
    u, v, _ = vprob.split(z)
    row["u_max"] = float(np.max(np.hypot(u, v)))
    row["det_psi_min"] = float(step.det.min())
    row["det_psi_max"] = float(step.det.max())
    row["det_phi_min"] = float(flow_next.det.min())
    row["det_phi_max"] = float(flow_next.det.max())
    row["clamped"] = tprob.counts["clamped"]
    row["orphans"] = tprob.counts["orphans"]
    row["newton_iters"] = vsol.iterations
    row["newton_residual"] = vsol.residual
    row["cg_iters"] = tsol.info.get("cg_iters", 0)
    row["active_rounds"] = tsol.info.get("active_rounds", 0)
    row["temperature_residual"] = tsol.residual
    row["dissipation"] = (row["diss_visc"] + row["diss_reg_fluid"] + row["diss_reg_shell"] + row["defect_shell"]
                          + row["defect_fluid"])
    for key in ("slot_old_rest",):
        if key in extra:
            row[key] = extra[key]
    return row


def total_energy(grid, theta, labels_flat, fluids, K, kinetic):
    """Thermal content plus K_kappa plus the kinetic part of the energy."""
    return thermal_totals(grid, theta, labels_flat, fluids) + K + kinetic


def total_energy_parts(row):
    return {"thermal": row["thermal_total"], "elastic": row["K_next"],
            "kinetic": row["E_tot"] - row["thermal_total"] - row["K_next"]}


def entropy_terms(tprob, theta_next, theta_k, labels_k, kind, beta_p=-0.5):
    """Entropy totals and the two production terms at the new temperature."""
    prm = tprob.params
    grid = tprob.grid
    dx2 = grid.dx**2
    phi_new, dphi, _ = entropy_test_function(kind, theta_next, beta_p)
    phi_old, _, _ = entropy_test_function(kind, theta_k, beta_p)
    S_new = S_old = 0.0
    G = 0.0
    for i, mat in enumerate(prm.fluids, start=1):
        S_new += mat.c * dx2 * float(phi_new[tprob.labels_next == i].sum())
        S_old += mat.c * dx2 * float(phi_old[np.asarray(labels_k) == i].sum())
        f = tprob.faces[i]
        a, b = f[:, 0], f[:, 1]
        G += mat.k * float(np.sum((theta_next[a] - theta_next[b]) * (dphi[a] - dphi[b])))
    lam = prm.transmission.value
    I = 0.0
    if 0 < lam < math.inf:
        a, b = tprob.pairs[:, 0], tprob.pairs[:, 1]
        I = lam * float(np.sum(tprob.ds * (theta_next[a] - theta_next[b]) * (dphi[a] - dphi[b])))
    return S_old, S_new, G, I


def entropy_row(tprob, tsol, theta_k, labels_k, kind, beta_p=-0.5, energy_scale=0.0):
    S_old, S_new, G, I = entropy_terms(tprob, tsol.x, theta_k, labels_k, kind, beta_p)
    tau = tprob.params.tau
    lhs = (S_new - S_old) + tau * G + tau * I
    tol = 10.0 * energy_scale + 1e-12 * max(abs(S_new), 1.0)
    return {"family": kind, "S_prev": S_old, "S_next": S_new, "production_gradient": G,
            "interface_term": I, "lhs": lhs, "tol": tol, "flag": bool(lhs >= -tol)}


def entropy_flag(row):
    return row["lhs"] >= -row["tol"] and row["interface_term"] <= 0.0


def transmission_check(rows, mode, tol=1e-9):
    """Check the heat transmission condition over ledger rows.

    mode "insulating": per-fluid balance with no cross flux;
    "superconducting": marker jump at solver tolerance;
    "finite": interface flux consistency and (for frozen conduction) decay
    of the marker jump."""
    out = {"mode": mode, "ok": True, "worst": 0.0}
    if mode == "insulating":
        for r in rows:
            for i in (1, 2):
                scale = max(abs(r[f"sampled_prev_{i}"]), 1.0)
                err = abs(r[f"balance_{i}"]) / scale
                out["worst"] = max(out["worst"], err)
        out["ok"] = out["worst"] <= tol
    elif mode == "superconducting":
        out["worst"] = max((r["jump_max"] for r in rows), default=0.0)
        out["ok"] = out["worst"] <= tol
    else:
        for r in rows:
            scale = max(abs(r["sampled_prev_1"]), 1.0)
            out["worst"] = max(out["worst"], abs(r["balance_1"]) / scale, abs(r["balance_2"]) / scale)
        jumps = [r["jump_max"] for r in rows]
        out["jump_decreasing"] = all(b < a for a, b in zip(jumps, jumps[1:]))
        out["ok"] = out["worst"] <= tol
    return out


def minimal_principle_check(thetas, floor, tol=1e-12):
    """True iff every temperature stays at or above the floor."""
    return all(float(np.min(t)) >= floor - tol for t in thetas)
