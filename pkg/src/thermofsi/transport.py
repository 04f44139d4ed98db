"""Step maps x + tau u, composed flow maps with Jacobians, and sampling of
cell fields along them."""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DegeneracyError
from .gridops import interp_matrix, velocity_gradient


class StepSizeError(RuntimeError):
    pass


@dataclass
class StepMap:
    grid: object
    velocity: np.ndarray  # (n, 2)
    tau: float
    positions: np.ndarray  # (n, 2)
    det: np.ndarray  # (n,)


def make_step_map(velocity, grid, tau):
    """Psi = Id + tau u at cell centres with central-difference Jacobian."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    u = np.asarray(velocity, dtype=float).reshape(grid.n_cells, 2)
    g = velocity_gradient(grid, u[:, 0], u[:, 1])
    det = (1.0 + tau * g[:, 0, 0]) * (1.0 + tau * g[:, 1, 1]) - tau**2 * g[:, 0, 1] * g[:, 1, 0]
    if np.any(det <= 0):
        raise StepSizeError("step map folds: det grad Psi <= 0")
    return StepMap(grid, u, float(tau), grid.centers + tau * u, det)


@dataclass
class FlowMap:
    grid: object
    ref_labels: np.ndarray  # labels of the reference cells (window start)
    positions: np.ndarray  # (n, 2)
    det: np.ndarray
    k: int = 0
    _interp: object = field(default=None, repr=False)

    @property
    def ref_points(self):
        return self.grid.centers

    def interp(self):
        """Bilinear interpolation matrix at the current positions."""
        if self._interp is None:
            self._interp = interp_matrix(self.grid, self.positions)
        return self._interp


def identity_flow(grid, ref_labels):
    return FlowMap(grid, np.asarray(ref_labels).copy(), grid.centers.copy(), np.ones(grid.n_cells), 0)


def compose_flow(flow, step):
    """Phi_{k+1}(y) = Psi(Phi_k(y)); det grad Phi multiplies by the
    interpolated det grad Psi."""
    P = flow.interp()
    disp = step.tau * (P @ step.velocity)
    pos = flow.positions + disp
    # ghost cells carry det = 1, i.e. interpolate det - 1 with zero ghosts
    det_here = 1.0 + P @ (step.det - 1.0)
    det = flow.det * det_here
    if not np.all(flow.grid.inside(pos)):
        raise DegeneracyError("FLOW_EXIT", "flow position left the fluid box")
    return FlowMap(flow.grid, flow.ref_labels, pos, det, flow.k + 1)


def compose_field(values, grid, points, allowed=None):
    """Sample a cell field at points (e.g. Psi(x)); returns (values, n_clamped)."""
    P, clamped = interp_matrix(grid, points, allowed=allowed, return_clamped=True)
    return P @ np.asarray(values, dtype=float), int(clamped.sum())


def _bilinear_jacobian(grid, field2, pts, h=1e-7):
    """d/dy of a bilinear vector field (n,2) at pts by centred differences."""
    J = np.empty((len(pts), 2, 2))
    for c in range(2):
        e = np.zeros(2)
        e[c] = h
        fp = interp_matrix(grid, pts + e) @ field2
        fm = interp_matrix(grid, pts - e) @ field2
        J[:, :, c] = (fp - fm) / (2 * h)
    return J


def invert_flow(flow, targets, tol=1e-12, maxit=30):
    """Preimages y' with Phi(y') = target, Phi extended bilinearly."""
    grid = flow.grid
    disp = flow.positions - grid.centers
    tree = cKDTree(flow.positions)
    _, idx = tree.query(targets)
    y = grid.centers[idx].copy()
    scale = grid.dx
    for _ in range(maxit):
        r = y + interp_matrix(grid, y) @ disp - targets
        err = np.max(np.abs(r)) if len(r) else 0.0
        if err < tol * scale:
            return y
        J = _bilinear_jacobian(grid, disp, y) + np.eye(2)[None]
        y = y - np.linalg.solve(J, r[..., None])[..., 0]
    r = y + interp_matrix(grid, y) @ disp - targets
    if np.max(np.abs(r)) > 1e-8 * scale:
        raise DegeneracyError("PULLBACK", "flow inversion failed")
    return y


def window_pullback(velocities, flows, final_flow, targets=None):
    """Data w_k(y) = u_{k+1}(Phi_k(Phi_N^{-1}(y))) for the next window.

    velocities[k] is the slot-k velocity (n, 2), flows[k] the flow at the
    start of slot k, final_flow the flow at the window end."""
    grid = final_flow.grid
    targets = grid.centers if targets is None else np.asarray(targets)
    pre = invert_flow(final_flow, targets)
    Pp = interp_matrix(grid, pre)
    out = []
    for u, fl in zip(velocities, flows):
        pos = pre + Pp @ (fl.positions - grid.centers)
        out.append(interp_matrix(grid, pos) @ np.asarray(u))
    return out
