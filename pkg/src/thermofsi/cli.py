"""Command line: `thermofsi run` and `thermofsi verify`."""
import argparse
import csv
import math
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from .config import PRESETS, ConfigError, build_setup, parse_config, preset_config, serialize
from .diagnostics import IDENTITY_TERMS, identity_residual
from .timeloop import run_simulation, window_start_energy

EXIT_OK, EXIT_DEGENERACY, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4

LEDGER_COLUMNS = [
    "window", "step", "t", "tau",
    "K_prev", "K_next", *IDENTITY_TERMS, "residual_abs", "scale", "residual_energy",
    "power_interface", "power_shell", "thermal_1", "thermal_2", "thermal_total", "interface_flux",
    "sampled_new_1", "sampled_prev_1", "source_1", "balance_1",
    "sampled_new_2", "sampled_prev_2", "source_2", "balance_2",
    "jump_max", "theta_min", "theta_max", "div_max", "coupling_max", "u_max",
    "det_psi_min", "det_psi_max", "det_phi_min", "det_phi_max",
    "dissipation", "cum_dissipation", "E_tot", "E_start", "slot_new", "slot_old_rest",
    "gamma_min", "coercivity", "eta_min", "eta_max",
    "clamped", "orphans", "newton_iters", "newton_residual", "cg_iters", "active_rounds",
    "temperature_residual",
]

LEDGER_SCHEMA = """\
ledger.csv: one row per accepted tau-step; energies are per step (already multiplied by tau)
window, step, t, tau     window index, step index inside the window, time at step end, step size
K_prev, K_next           regularized Koiter energy before and after the step
dK                       K_next - K_prev
remainder                <DK(eta_next), delta eta> - dK (second-order Taylor remainder)
kin_shell_new/old        tau/(2h) |delta eta/tau|^2 and tau/(2h) |beta_k|^2 on the interface
defect_shell             tau/(2h) |delta eta/tau - beta_k|^2
kin_fluid_new/old        tau/(2h) sum |u o Phi|^2 / det and tau/(2h) sum |w_k|^2 / det
defect_fluid             tau/(2h) sum |u o Phi - w_k|^2 / det
diss_visc                tau sum mu |Du|^2
diss_reg_fluid           tau kappa sum |L u|^2
diss_reg_shell           tau kappa |d^(k0+1) delta eta/tau|^2
load_work                work of an optional shell load
residual_abs, scale      |signed identity sum|, sum of |terms|
residual_energy          residual_abs / scale
power_interface          sum_j G_j (delta eta_j / tau) w_Gamma from the coupling multipliers
power_shell              the same power from the shell ledger columns
thermal_i                c_i dx^2 sum theta over fluid-i cells of the new mask
sampled_new/prev_i       thermal content seen by the transport term, after and before
source_i                 tau times the heat source integral of fluid i
balance_i                sampled_new - sampled_prev - source -/+ interface_flux (zero up to CG tolerance)
interface_flux           tau lambda sum ds (theta_1 - theta_2)
jump_max                 max marker temperature jump
theta_min/max            temperature range after the step
div_max, coupling_max    constraint violations
det_psi_*, det_phi_*     Jacobian range of the step map and the window flow map
dissipation              sum of dissipation and defect columns; cum_dissipation its running sum
E_tot                    thermal + K + kinetic (new slots of this window plus old slots not yet reached)
E_start                  E_tot at the start of the window
gamma_min, coercivity    min of gamma_bar and the bending-coercivity monitor
clamped, orphans         transport clamps and orphaned cells
newton_iters, cg_iters   solver statistics
"""

ENTROPY_COLUMNS = ["window", "step", "t", "family", "S_prev", "S_next", "production_gradient", "interface_term",
                   "lhs", "tol", "flag"]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_snapshot(path, rec):
    """Flat little-endian float64 arrays after a one-line text header."""
    fields = [("eta", rec.eta), ("u", rec.velocity[:, 0]), ("v", rec.velocity[:, 1]), ("theta", rec.theta),
              ("labels", rec.labels.astype(float))]
    dims = ",".join(f"{name}:{arr.size}" for name, arr in fields)
    header = f"thermofsi-snapshot dtype=<f8 dims={dims} window={rec.window} step={rec.k} time={rec.t!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for _, arr in fields:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        meta = dict(item.split("=", 1) for item in header[1:])
        data = np.frombuffer(fh.read(), dtype=meta["dtype"])
    out, pos = {}, 0
    for item in meta["dims"].split(","):
        name, size = item.split(":")
        out[name] = data[pos:pos + int(size)].copy()
        pos += int(size)
    out["meta"] = meta
    return out


def run(cfg, out_dir):
    """Run a configuration and write all outputs; returns the exit code."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(serialize(cfg))
    with open(os.path.join(out_dir, "ledger_schema.txt"), "w", encoding="utf-8") as fh:
        fh.write(LEDGER_SCHEMA)
    snap_dir = os.path.join(out_dir, "snapshots")
    if cfg.output_snapshot_every > 0:
        os.makedirs(snap_dir, exist_ok=True)
    with threadpool_limits(limits=cfg.run_threads):
        setup, window = build_setup(cfg)
        state = {"cum": 0.0, "count": 0, "E_start": window_start_energy(setup, window)}
        lf = open(os.path.join(out_dir, "ledger.csv"), "w", newline="", encoding="utf-8")
        ef = open(os.path.join(out_dir, "entropy.csv"), "w", newline="", encoding="utf-8")
        try:
            lw, ew = csv.writer(lf), csv.writer(ef)
            lw.writerow(LEDGER_COLUMNS)
            ew.writerow(ENTROPY_COLUMNS)

            def on_step(rec):
                L = rec.ledger
                state["cum"] += L["dissipation"]
                L["cum_dissipation"] = state["cum"]
                L["E_start"] = state["E_start"]
                base = {"window": rec.window, "step": rec.k, "t": rec.t, "tau": rec.tau}
                lw.writerow([_fmt(base[c] if c in base else L.get(c, 0.0)) for c in LEDGER_COLUMNS])
                for fam, row in rec.entropy.items():
                    ew.writerow([_fmt({**base, **row}.get(c)) for c in ENTROPY_COLUMNS])
                state["count"] += 1
                if cfg.output_snapshot_every > 0 and state["count"] % cfg.output_snapshot_every == 0:
                    write_snapshot(os.path.join(snap_dir, f"snap_{state['count']:06d}.bin"), rec)

            def on_window(traj):
                if traj.complete:
                    state["E_start"] = traj.records[-1].ledger["E_tot"]

            try:
                _, term = run_simulation(setup, window, on_step=on_step, on_window=on_window)
            except Exception as exc:  # solver breakdown outside the retry path
                from .timeloop import Termination
                term = Termination("solver failure", float("nan"), -1, -1, f"{type(exc).__name__}: {exc}")
        finally:
            lf.close()
            ef.close()
    with open(os.path.join(out_dir, "termination.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"reason: {term.reason}\n")
        fh.write(f"time: {term.time!r}\n")
        fh.write(f"window: {term.window}\n")
        fh.write(f"step: {term.step}\n")
        fh.write(f"steps_total: {state['count']}\n")
        fh.write(f"monitor_sup: {term.monitor_sup!r}\n")
        fh.write(f"exit_code: {term.exit_code}\n")
        if term.detail:
            fh.write(f"detail: {term.detail}\n")
    return term.exit_code


# ---------------------------------------------------------------------------
# verify


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _num(row, key):
    return float(row[key])


def verify(out_dir, energy_tol=1e-9, power_tol=1e-8):
    """Re-assert every ledger flag; returns (all_ok, list of (name, ok, detail))."""
    ledger_path = os.path.join(out_dir, "ledger.csv")
    if not os.path.isfile(ledger_path):
        raise FileNotFoundError(f"no run found in {out_dir}")
    from .config import parse_config_text

    with open(os.path.join(out_dir, "config.ini"), encoding="utf-8") as fh:
        cfg = parse_config_text(fh.read())
    rows = _read_csv(ledger_path)
    ent = _read_csv(os.path.join(out_dir, "entropy.csv"))
    results = []

    def add(name, ok, detail):
        results.append((name, bool(ok), detail))

    worst = 0.0
    for r in rows:
        vals = {k: _num(r, k) for k in IDENTITY_TERMS}
        res, scale = identity_residual(vals)
        worst = max(worst, res / scale if scale > 0 else 0.0)
    add("energy identity", worst <= energy_tol, f"max relative residual {worst:.3e}")
    worst = 0.0
    for r in rows:
        p_if, p_sh = _num(r, "power_interface"), _num(r, "power_shell")
        scale = _num(r, "scale") / _num(r, "tau") + abs(p_sh)
        worst = max(worst, abs(p_if - p_sh) / scale if scale > 0 else 0.0)
    add("interface power balance", worst <= power_tol, f"max relative mismatch {worst:.3e}")
    cmax = max((_num(r, "coupling_max") for r in rows), default=0.0)
    add("coupling constraint", cmax <= 1e-12, f"max {cmax:.3e}")
    dworst = max((_num(r, "div_max") / max(_num(r, "u_max"), 1e-300) for r in rows), default=0.0)
    add("discrete divergence", dworst <= 1e-12, f"max relative {dworst:.3e}")
    tmin = min((_num(r, "theta_min") for r in rows), default=math.inf)
    add("minimal principle", tmin >= cfg.thermal_floor - 1e-12, f"min theta {tmin:.12g} (floor {cfg.thermal_floor})")
    diss = [_num(r, "cum_dissipation") for r in rows]
    add("cumulative dissipation monotone", all(b >= a for a, b in zip(diss, diss[1:])), "")
    bad = [r for r in ent if not (float(r["lhs"]) >= -float(r["tol"]))]
    add("entropy inequality", not bad, f"{len(bad)} failing rows of {len(ent)}")
    bad_i = [r for r in ent if float(r["interface_term"]) > 0.0]
    add("interface entropy sign", not bad_i, f"{len(bad_i)} positive rows")
    lam = cfg.thermal_transmission.strip().lower()
    if lam in ("inf", "infinity"):
        jm = max((_num(r, "jump_max") for r in rows), default=0.0)
        add("superconducting jump", jm <= 1e-10, f"max jump {jm:.3e}")
    else:
        bw = max((max(abs(_num(r, "balance_1")), abs(_num(r, "balance_2"))) / max(_num(r, "sampled_prev_1"), 1.0)
                  for r in rows), default=0.0)
        add("per-fluid heat balance", bw <= 1e-9, f"max relative {bw:.3e}")
    finite = all(math.isfinite(float(v)) for r in rows for k, v in r.items() if k not in ("window", "step"))
    add("finite ledger", finite, "")
    term_path = os.path.join(out_dir, "termination.txt")
    if os.path.isfile(term_path):
        with open(term_path, encoding="utf-8") as fh:
            info = dict(line.split(": ", 1) for line in fh.read().splitlines() if ": " in line)
        add("termination report", "reason" in info, info.get("reason", "missing"))
    else:
        add("termination report", False, "missing")
    return all(ok for _, ok, _ in results), results


# ---------------------------------------------------------------------------


def _overrides(args):
    out = {}
    if args.tau is not None:
        out["time_tau"] = args.tau
    if args.h is not None:
        out["time_h"] = args.h
    if args.kappa is not None:
        out["shell_kappa"] = args.kappa
    if args.lam is not None:
        out["thermal_transmission"] = args.lam
    if args.until is not None:
        out["time_t_end"] = args.until
    if args.seed is not None:
        out["run_seed"] = args.seed
    if args.threads is not None:
        out["run_threads"] = args.threads
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="thermofsi", description="Thermally coupled shell-fluid time stepping")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a configuration or preset")
    r.add_argument("--config", help="INI configuration file")
    r.add_argument("--preset", choices=sorted(PRESETS), help="start from a named scenario")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--tau", type=float)
    r.add_argument("--h", type=float)
    r.add_argument("--kappa", type=float)
    r.add_argument("--lambda", dest="lam", help='transmission coefficient, a number or "inf"')
    r.add_argument("--until", type=float, help="final time")
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int)
    v = sub.add_parser("verify", help="re-check the ledgers of a finished run")
    v.add_argument("out", help="run directory")
    sub.add_parser("presets", help="list the shipped scenarios")
    return p


def load_config(args):
    """Preset values, then file values, then command-line flags."""
    from .config import PRESETS as _P

    over = _overrides(args)
    if args.config:
        base = dict(_P[args.preset]) if args.preset else None
        return parse_config(args.config, overrides=over, base=base)
    return preset_config(args.preset or "rest", over)


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        for name in sorted(PRESETS):
            print(name)
        return EXIT_OK
    if args.command == "verify":
        try:
            ok, results = verify(args.out)
        except FileNotFoundError as exc:
            print(str(exc))
            return 1
        except ConfigError as exc:
            print(f"corrupt config: {exc}")
            return 1
        for name, passed, detail in results:
            print(f"{'PASS' if passed else 'FAIL'}  {name:32s} {detail}")
        return 0 if ok else 1
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        for prob in exc.problems:
            print(f"config error: {prob}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code = run(cfg, args.out)
    with open(os.path.join(args.out, "termination.txt"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return code


if __name__ == "__main__":
    sys.exit(main())
