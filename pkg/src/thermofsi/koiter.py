"""Nonlinear Koiter shell energy for normal displacements of a reference
surface (curve for m=1), its nodal gradient and Hessian action.

All node-wise formulas accept a leading batch axis and complex input, which
is how the Hessian is obtained (complex-step differentiation of the
gradient, exact to rounding because the gradient is polynomial in the
displacement data).
"""
from dataclasses import dataclass

import numpy as np

from .geometry import rot

CS_STEP = 1e-30


@dataclass(frozen=True)
class KoiterParams:
    lam: float = 1.0  # Lame lambda of the shell
    mu: float = 1.0  # Lame mu of the shell
    thickness: float = 1.0
    kappa: float = 0.0
    k0: int = 4

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0 and self.thickness > 0):
            raise ValueError("Lame constants and thickness must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if int(self.k0) < 1:
            raise ValueError("k0 must be a positive integer")

    @property
    def below_analysis_order(self):
        """True when k0 <= 3, i.e. weaker than the regularity the existence
        theory asks for."""
        return self.k0 <= 3


class ShellDisplacement:
    """Displacement node values with cached spectral derivatives."""

    def __init__(self, ref, eta, k0=4):
        self.ref = ref
        self.eta = np.asarray(eta)
        self.k0 = k0
        grid = ref.grid
        self.coeffs = np.fft.fftn(self.eta.real.reshape((grid.n,) * grid.m)) / grid.size
        self.grad, self.hess = node_derivatives(ref, self.eta)
        self.top = _top_derivatives(ref, self.eta, k0 + 1)


def _top_derivatives(ref, eta, order):
    grid = ref.grid
    if grid.m == 1:
        return (grid.partial((order,)) @ eta)[:, None]
    return np.stack([grid.partial((a, order - a)) @ eta for a in range(order + 1)], axis=1)


def node_derivatives(ref, eta):
    """Spectral first and second derivatives; eta shape (..., N)."""
    grid = ref.grid
    m = grid.m
    eta = np.asarray(eta)
    grad = np.stack([eta @ grid.first(i).T for i in range(m)], axis=-1)
    hess = np.stack([np.stack([eta @ grid.second(i, j).T for j in range(m)], axis=-1) for i in range(m)], axis=-2)
    return grad, hess


def _as_eta(ref, eta):
    if isinstance(eta, ShellDisplacement):
        return eta.eta
    return np.asarray(eta)


def _normal(ref, v):
    """Unnormalized normal from deformed tangents v (..., N, m, d)."""
    if ref.m == 1:
        return rot(v[..., 0, :])
    return np.cross(v[..., 0, :], v[..., 1, :])


def deformed_tangents(ref, eta, grad):
    return ref.a + grad[..., :, :, None] * ref.nu[:, None, :] + eta[..., :, None, None] * ref.dnu


def metric_change(ref, eta, grad):
    """Change of metric G_ij for node arrays eta (..., N), grad (..., N, m)."""
    eta = np.asarray(eta)
    grad = np.asarray(grad)
    anu = np.einsum("nid,njd->nij", ref.a, ref.dnu)
    nunu = np.einsum("nid,njd->nij", ref.dnu, ref.dnu)
    return (grad[..., :, :, None] * grad[..., :, None, :]
            + eta[..., None, None] * (anu + np.swapaxes(anu, -1, -2))
            + (eta**2)[..., None, None] * nunu)


def _second_vectors(ref, eta, grad, hess):
    """X_ij = second partials of the deformed parametrization."""
    return (ref.d2phi
            + hess[..., None] * ref.nu[:, None, None, :]
            + grad[..., :, None, :, None] * ref.dnu[:, :, None, :]
            + grad[..., :, :, None, None] * ref.dnu[:, None, :, :]
            + eta[..., :, None, None, None] * ref.d2nu)


def gamma_bar_nodes(ref, eta):
    """Coefficient of the second derivatives of eta in the curvature change."""
    eta = np.asarray(eta)
    nu, S = ref.nu, ref.area
    if ref.m == 1:
        c1 = np.einsum("nd,nd->n", nu, rot(ref.dnu[:, 0, :]))
        return (S + eta * c1) / S
    a1, a2 = ref.a[:, 0, :], ref.a[:, 1, :]
    n1, n2 = ref.dnu[:, 0, :], ref.dnu[:, 1, :]
    c1 = np.einsum("nd,nd->n", nu, np.cross(a1, n2) + np.cross(n1, a2))
    c2 = np.einsum("nd,nd->n", nu, np.cross(n1, n2))
    return (S + eta * c1 + eta**2 * c2) / S


def gamma_bar(ref, eta):
    return gamma_bar_nodes(ref, eta)


def curvature_change(ref, eta, grad, hess):
    """Change of curvature by the direct formula, plus its split
    R = gamma_bar * hess + P0 where P0 collects everything else.

    Returns (R, gamma_bar, P0)."""
    eta, grad, hess = np.asarray(eta), np.asarray(grad), np.asarray(hess)
    v = deformed_tangents(ref, eta, grad)
    N = _normal(ref, v)
    X = _second_vectors(ref, eta, grad, hess)
    S = ref.area[:, None, None]
    base = np.einsum("nijd,nd->nij", ref.d2phi, ref.nu)
    R = np.einsum("...nijd,...nd->...nij", X, N) / S - base
    # P0 is R with the second derivatives switched off (R is affine in them)
    X0 = _second_vectors(ref, eta, grad, np.zeros_like(hess))
    P0 = np.einsum("...nijd,...nd->...nij", X0, N) / S - base
    gb = gamma_bar_nodes(ref, eta)
    return R, gb, P0


def elasticity_apply(inv_metric, E, lam, mu):
    """Shell elasticity tensor acting on symmetric E (..., m, m)."""
    A = np.asarray(inv_metric)
    E = np.asarray(E)
    c1 = 4.0 * lam * mu / (lam + 2.0 * mu)
    tr = np.einsum("...ij,...ji->...", A, E)
    return c1 * tr[..., None, None] * A + 4.0 * mu * (A @ E @ A)


def _contract(A, B):
    return np.einsum("...ij,...ij->...", A, B)


def energy_density(ref, eta, params):
    eta = _as_eta(ref, eta)
    grad, hess = node_derivatives(ref, eta)
    G = metric_change(ref, eta, grad)
    R, _, _ = curvature_change(ref, eta, grad, hess)
    t = params.thickness
    eG = 0.25 * t * _contract(elasticity_apply(ref.inv_metric, G, params.lam, params.mu), G)
    eR = t**3 / 48.0 * _contract(elasticity_apply(ref.inv_metric, R, params.lam, params.mu), R)
    return eG, eR


def koiter_energy(ref, eta, params):
    """Membrane plus bending energy by periodic trapezoid quadrature."""
    eG, eR = energy_density(ref, eta, params)
    return ref.grid.weight * np.sum(eG + eR, axis=-1)


def regularizer_energy(ref, eta, params):
    eta = _as_eta(ref, eta)
    Seta = ref.grid.apply_smoothing(eta, params.k0 + 1)
    return 0.5 * params.kappa * ref.grid.weight * np.einsum("...n,...n->...", eta, Seta)


@dataclass
class ShellGradient:
    """Nodal density of the energy gradient against the Gamma quadrature."""

    membrane: np.ndarray
    bending: np.ndarray
    regularizer: np.ndarray

    @property
    def total(self):
        return self.membrane + self.bending + self.regularizer

    def pair(self, ref, b):
        return ref.grid.weight * np.sum(self.total * b, axis=-1)


def _local_partials(ref, eta, grad, hess, params):
    """Partials of the membrane and bending densities w.r.t. the local data
    (eta, grad, hess).  Each returned tuple is (d/deta, d/dgrad, d/dhess)."""
    m = ref.m
    t = params.thickness
    nu = ref.nu
    G = metric_change(ref, eta, grad)
    AG = elasticity_apply(ref.inv_metric, G, params.lam, params.mu)
    v = deformed_tangents(ref, eta, grad)
    N = _normal(ref, v)
    X = _second_vectors(ref, eta, grad, hess)
    S = ref.area
    base = np.einsum("nijd,nd->nij", ref.d2phi, nu)
    R = np.einsum("...nijd,...nd->...nij", X, N) / S[:, None, None] - base
    AR = elasticity_apply(ref.inv_metric, R, params.lam, params.mu)
    wG = 0.5 * t * AG  # d eG / dG
    wR = t**3 / 24.0 * AR  # d eR / dR

    # membrane
    anu = np.einsum("nid,njd->nij", ref.a, ref.dnu)
    nunu = np.einsum("nid,njd->nij", ref.dnu, ref.dnu)
    dG_deta = anu + np.swapaxes(anu, -1, -2) + 2.0 * eta[..., None, None] * nunu
    mem_eta = _contract(wG, dG_deta)
    # dG_ij/dg_k = delta_ik g_j + delta_jk g_i  ->  sum_ij wG_ij (...) = 2 (wG g)_k
    mem_grad = 2.0 * np.einsum("...nkj,...nj->...nk", wG, grad)

    # bending
    if m == 1:
        dN_deta = rot(ref.dnu[:, 0, :])
        dN_dg = [rot(nu)]
    else:
        dN_deta = np.cross(ref.dnu[:, 0, :], v[..., 1, :]) + np.cross(v[..., 0, :], ref.dnu[:, 1, :])
        dN_dg = [np.cross(nu, v[..., 1, :]), np.cross(v[..., 0, :], nu)]
    dR_deta = (np.einsum("nijd,...nd->...nij", ref.d2nu, N)
               + np.einsum("...nijd,...nd->...nij", X, dN_deta)) / S[:, None, None]
    ben_eta = _contract(wR, dR_deta)
    dnuN = np.einsum("nid,...nd->...ni", ref.dnu, N)  # (d_i nu) . N
    ben_grad = []
    for k in range(m):
        term = np.einsum("...nijd,...nd->...nij", X, dN_dg[k])
        # (delta_jk d_i nu + delta_ik d_j nu) . N
        extra = np.zeros_like(term)
        extra[..., :, k] += dnuN
        extra[..., k, :] += dnuN
        ben_grad.append(_contract(wR, (term + extra) / S[:, None, None]))
    ben_grad = np.stack(ben_grad, axis=-1)
    gb = np.einsum("nd,...nd->...n", nu, N) / S
    ben_hess = wR * gb[..., None, None]
    return (mem_eta, mem_grad), (ben_eta, ben_grad, ben_hess)


def _assemble(ref, local_eta, local_grad, local_hess=None):
    """Strong-form density: sum over derivative operators of D^T applied to
    the local partials."""
    grid = ref.grid
    out = local_eta.copy()
    for k in range(ref.m):
        out = out + local_grad[..., k] @ grid.first(k)
    if local_hess is not None:
        for i in range(ref.m):
            for j in range(ref.m):
                out = out + local_hess[..., i, j] @ grid.second(i, j)
    return out


def koiter_gradient(ref, eta, params, include_regularizer=False):
    eta = _as_eta(ref, eta)
    grad, hess = node_derivatives(ref, eta)
    (me, mg), (be, bg, bh) = _local_partials(ref, eta, grad, hess, params)
    membrane = _assemble(ref, me, mg)
    bending = _assemble(ref, be, bg, bh)
    if include_regularizer and params.kappa > 0:
        reg = params.kappa * ref.grid.apply_smoothing(eta, params.k0 + 1)
    else:
        reg = np.zeros_like(membrane)
    return ShellGradient(membrane, bending, reg)


def koiter_kappa(ref, eta, params):
    """Regularized energy and its gradient density."""
    energy = koiter_energy(ref, eta, params) + regularizer_energy(ref, eta, params)
    return energy, koiter_gradient(ref, eta, params, include_regularizer=True)


def kappa_energy(ref, eta, params):
    return koiter_energy(ref, eta, params) + regularizer_energy(ref, eta, params)


def kappa_gradient_density(ref, eta, params):
    return koiter_gradient(ref, eta, params, include_regularizer=True).total


def koiter_hessian_apply(ref, eta, b, params):
    """Density of D^2 K_kappa(eta) b (complex-step derivative of the
    gradient density along b)."""
    eta = np.asarray(_as_eta(ref, eta), dtype=float)
    b = np.asarray(b, dtype=float)
    z = eta + 1j * CS_STEP * b
    return kappa_gradient_density(ref, z, params).imag / CS_STEP


def koiter_hessian_matrix(ref, eta, params):
    """Dense matrix H with H @ b = density of D^2 K_kappa(eta) b.

    Multiply by the quadrature weight to get the Hessian of the energy."""
    eta = np.asarray(_as_eta(ref, eta), dtype=float)
    n = eta.size
    z = eta[None, :] + 1j * CS_STEP * np.eye(n)
    cols = kappa_gradient_density(ref, z, params).imag / CS_STEP  # row j = H e_j
    return cols.T


def membrane_form(ref, eta, b, params):
    """a_G(eta, b): membrane part of the derivative paired with b."""
    g = koiter_gradient(ref, eta, params)
    return ref.grid.weight * np.sum(g.membrane * b, axis=-1)


def bending_form(ref, eta, b, params):
    g = koiter_gradient(ref, eta, params)
    return ref.grid.weight * np.sum(g.bending * b, axis=-1)
