"""Reference interface, deformed interface, collar chart, masks, degeneracy.

Reference shapes are given analytically; all derivative samples come from
symbolic differentiation (sympy), never from differencing node data.
"""
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import lru_cache

import numpy as np
import sympy as sp

from .spectral import PeriodicGrid, trig_interpolate


def rot(v):
    """Clockwise quarter turn (v1, v2) -> (v2, -v1), last axis."""
    v = np.asarray(v)
    return np.stack([v[..., 1], -v[..., 0]], axis=-1)


# ---------------------------------------------------------------------------
# analytic shapes


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    params: tuple

    @staticmethod
    def circle(radius=1.0):
        return ShapeSpec("circle", (float(radius),))

    @staticmethod
    def ellipse(a=2.0, b=1.0):
        return ShapeSpec("ellipse", (float(a), float(b)))

    @staticmethod
    def torus(major=2.0, minor=1.0):
        return ShapeSpec("torus", (float(major), float(minor)))

    @property
    def m(self):
        return 2 if self.kind == "torus" else 1

    def validate(self):
        if self.kind == "circle":
            if not self.params[0] > 0:
                raise ValueError("circle radius must be positive")
        elif self.kind == "ellipse":
            if not (self.params[0] > 0 and self.params[1] > 0):
                raise ValueError("ellipse semi-axes must be positive")
        elif self.kind == "torus":
            big, small = self.params
            if not (small > 0 and big > small):
                raise ValueError("torus needs 0 < minor < major (else not injective)")
        else:
            raise ValueError(f"unknown shape {self.kind!r}")


def _norm(v):
    return sp.sqrt(sum(c**2 for c in v))


@lru_cache(maxsize=None)
def _symbolic_fields(spec):
    """Lambdified phi, d phi, d2 phi, nu, d nu, d2 nu for a shape."""
    if spec.m == 1:
        x = sp.symbols("x", real=True)
        xs = (x,)
        if spec.kind == "circle":
            (r,) = spec.params
            phi = sp.Matrix([r * sp.cos(x), r * sp.sin(x)])
        else:
            a, b = spec.params
            phi = sp.Matrix([a * sp.cos(x), b * sp.sin(x)])
        a1 = phi.diff(x)
        nu = sp.Matrix([a1[1], -a1[0]]) / _norm(a1)
    else:
        x1, x2 = sp.symbols("x1 x2", real=True)
        xs = (x1, x2)
        big, small = spec.params
        rad = big + small * sp.cos(x2)
        phi = sp.Matrix([rad * sp.cos(x1), rad * sp.sin(x1), small * sp.sin(x2)])
        cr = phi.diff(x1).cross(phi.diff(x2))
        nu = cr / _norm(cr)
    m = len(xs)
    d = phi.shape[0]

    def lam(expr_list):
        return sp.lambdify(xs, expr_list, "numpy")

    out = {"phi": lam(list(phi)), "nu": lam(list(nu))}
    out["dphi"] = [lam(list(phi.diff(xs[i]))) for i in range(m)]
    out["dnu"] = [lam(list(nu.diff(xs[i]))) for i in range(m)]
    out["d2phi"] = [[lam(list(phi.diff(xs[i], xs[j]))) for j in range(m)] for i in range(m)]
    out["d2nu"] = [[lam(list(nu.diff(xs[i], xs[j]))) for j in range(m)] for i in range(m)]
    out["d"] = d
    return out


def _eval_vec(fn, params):
    """Evaluate a lambdified vector expression at parameter rows -> (N, d)."""
    cols = fn(*[params[:, i] for i in range(params.shape[1])])
    n = params.shape[0]
    return np.stack([np.broadcast_to(np.asarray(c, dtype=float), (n,)) for c in cols], axis=1)


class AnalyticShape:
    """Pointwise analytic evaluation of a reference shape."""

    def __init__(self, spec):
        spec.validate()
        self.spec = spec
        self.m = spec.m
        self._f = _symbolic_fields(spec)
        self.dim = self._f["d"]

    def _p(self, t):
        t = np.asarray(t, dtype=float)
        if self.m == 1:
            return t.reshape(-1, 1)
        return t.reshape(-1, 2)

    def phi(self, t):
        return _eval_vec(self._f["phi"], self._p(t))

    def nu(self, t):
        return _eval_vec(self._f["nu"], self._p(t))

    def dphi(self, t, i=0):
        return _eval_vec(self._f["dphi"][i], self._p(t))

    def d2phi(self, t, i=0, j=0):
        return _eval_vec(self._f["d2phi"][i][j], self._p(t))

    def dnu(self, t, i=0):
        return _eval_vec(self._f["dnu"][i], self._p(t))

    def d2nu(self, t, i=0, j=0):
        return _eval_vec(self._f["d2nu"][i][j], self._p(t))


@dataclass
class ReferenceSurface:
    """Node samples of the reference interface on the periodic grid."""

    shape: AnalyticShape
    grid: PeriodicGrid
    phi: np.ndarray  # (N, d)
    nu: np.ndarray  # (N, d)
    a: np.ndarray  # (N, m, d) tangents
    dnu: np.ndarray  # (N, m, d)
    d2phi: np.ndarray  # (N, m, m, d)
    d2nu: np.ndarray  # (N, m, m, d)
    metric: np.ndarray  # (N, m, m)
    inv_metric: np.ndarray  # (N, m, m)
    area: np.ndarray  # (N,)

    @property
    def m(self):
        return self.grid.m

    @property
    def n(self):
        return self.grid.n

    @property
    def size(self):
        return self.grid.size


def build_reference(spec, n_gamma):
    """Sample an analytic shape on a uniform periodic grid with n_gamma nodes
    per direction."""
    if n_gamma < 8:
        raise ValueError("n_gamma must be at least 8")
    shape = AnalyticShape(spec)
    m = shape.m
    grid = PeriodicGrid(n_gamma, m)
    t = grid.params
    phi = shape.phi(t)
    nu = shape.nu(t)
    a = np.stack([shape.dphi(t, i) for i in range(m)], axis=1)
    dnu = np.stack([shape.dnu(t, i) for i in range(m)], axis=1)
    d2phi = np.stack([np.stack([shape.d2phi(t, i, j) for j in range(m)], axis=1) for i in range(m)], axis=1)
    d2nu = np.stack([np.stack([shape.d2nu(t, i, j) for j in range(m)], axis=1) for i in range(m)], axis=1)
    metric = np.einsum("nid,njd->nij", a, a)
    inv_metric = np.linalg.inv(metric)
    if m == 1:
        area = np.linalg.norm(a[:, 0, :], axis=1)
    else:
        area = np.linalg.norm(np.cross(a[:, 0, :], a[:, 1, :]), axis=1)
    return ReferenceSurface(shape, grid, phi, nu, a, dnu, d2phi, d2nu, metric, inv_metric, area)


# ---------------------------------------------------------------------------
# deformed interface


@dataclass
class InterfaceCurve:
    points: np.ndarray  # (N, d)
    normal: np.ndarray  # unnormalized deformed normal (N, d)
    injective: bool
    min_segment: float


def segments_self_intersect(points):
    """True if two non-adjacent edges of the closed polyline intersect."""
    p = np.asarray(points, dtype=float)
    n = len(p)
    q = np.roll(p, -1, axis=0)

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    A, B = p[:, None, :], q[:, None, :]
    C, D = p[None, :, :], q[None, :, :]
    o1 = orient(A, B, C)
    o2 = orient(A, B, D)
    o3 = orient(C, D, A)
    o4 = orient(C, D, B)
    hit = (o1 * o2 <= 0) & (o3 * o4 <= 0)
    idx = np.arange(n)
    gap = (idx[None, :] - idx[:, None]) % n
    nonadjacent = (gap > 1) & (gap < n - 1)
    return bool(np.any(hit & nonadjacent))


def deform_interface(ref, eta):
    """Deformed points phi + eta nu and the unnormalized deformed normal."""
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("eta must be finite")
    points = ref.phi + eta[:, None] * ref.nu
    grid = ref.grid
    tangents = []
    for i in range(ref.m):
        g = grid.first(i) @ eta
        tangents.append(ref.a[:, i, :] + g[:, None] * ref.nu + eta[:, None] * ref.dnu[:, i, :])
    if ref.m == 1:
        normal = rot(tangents[0])
        seg = np.linalg.norm(np.roll(points, -1, axis=0) - points, axis=1)
        injective = not segments_self_intersect(points)
        min_seg = float(seg.min())
    else:
        normal = np.cross(tangents[0], tangents[1])
        injective = True
        min_seg = float("nan")
    return InterfaceCurve(points, normal, injective, min_seg)


# ---------------------------------------------------------------------------
# collar chart


def _smooth_step(t):
    """C-infinity step: 0 for t<=0, 1 for t>=1."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        g0 = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        s = 1.0 - t
        g1 = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
    return g0 / (g0 + g1)


class TubularChart:
    """Collar {phi(x) + z nu(x): a < z < b} with cutoff and signed distance.

    The inner plateau boundaries split the collar into ninths: the
    transition zones occupy one ninth each, the plateau the middle third.
    """

    def __init__(self, ref, a, b, box=None):
        if not a < b:
            raise ValueError("collar needs a < b")
        self.ref = ref
        self.shape = ref.shape
        self.a, self.b = float(a), float(b)
        step = (self.b - self.a) / 9.0
        self.m2 = self.a + step  # outer edge of the lower transition
        self.m1 = self.a + 2 * step  # start of plateau
        self.m_low = self.a + 3 * step
        self.M_high = self.b - 3 * step
        self.M1 = self.b - 2 * step
        self.M2 = self.b - step
        self.box = box
        if box is not None:
            self._check_inside(box)

    def _check_inside(self, box):
        x0, x1, y0, y1 = box
        t = np.linspace(0, 2 * np.pi, 8 * max(self.ref.n, 16), endpoint=False)
        p = self.shape.phi(t)
        nu = self.shape.nu(t)
        for z in (self.a, self.b):
            q = p + z * nu
            ok = (q[:, 0] > x0) & (q[:,0] < x1) & (q[:, 1] > y0) & (q[:, 1] < y1)
            if not np.all(ok):
                raise ValueError("collar meets the outer wall")

    @property
    def bounds(self):
        return (self.a, self.m2, self.m1, self.m_low, self.M_high, self.M1, self.M2, self.b)

    def cutoff(self, d):
        d = np.asarray(d, dtype=float)
        up = _smooth_step((d - self.m2) / (self.m1 - self.m2))
        down = _smooth_step((self.M2 - d) / (self.M2 - self.M1))
        return np.minimum(up, down)

    def project(self, point, tol=1e-14, maxit=50):
        """Parameter s of the nearest reference point and signed distance d.

        Newton on (phi(s) - p) . phi'(s) = 0 seeded at the nearest node.
        Returns (s, d, converged)."""
        p = np.asarray(point, dtype=float)
        shape = self.shape
        nodes = self.ref.grid.params[:, 0]
        j = int(np.argmin(np.sum((self.ref.phi - p) ** 2, axis=1)))
        s = float(nodes[j])
        ok = False
        for _ in range(maxit):
            ph = shape.phi(s)[0]
            d1 = shape.dphi(s)[0]
            d2 = shape.d2phi(s)[0]
            g = (ph - p) @ d1
            dg = d1 @ d1 + (ph - p) @ d2
            if dg <= 0:
                break
            ds = g / dg
            s -= ds
            if abs(ds) < tol:
                ok = True
                break
        s = s % (2 * np.pi)
        d = float((p - shape.phi(s)[0]) @ shape.nu(s)[0])
        resid = np.linalg.norm(p - shape.phi(s)[0] - d * shape.nu(s)[0])
        ok = ok or resid < 1e-10 * (1 + np.linalg.norm(p))
        return s, d, ok

    def signed_distance(self, point):
        return self.project(point)[1]


def cutoff_value(d, chart):
    return chart.cutoff(d)


def eval_tilde_phi(point, eta, chart, ref=None):
    """Extension of the interface motion into the collar:
    (1 - f) p + f (pi(p) + (d + eta(pi(p))) nu) with f the cutoff of d."""
    ref = chart.ref if ref is None else ref
    p = np.asarray(point, dtype=float)
    s, d, ok = chart.project(p)
    f = float(chart.cutoff(d))
    if f == 0.0:
        return p.copy()
    if not ok or not (chart.a < d < chart.b):
        raise RuntimeError("projection undefined inside the cutoff support")
    e = float(trig_interpolate(eta, s)[0])
    base = ref.shape.phi(s)[0]
    nu = ref.shape.nu(s)[0]
    return (1.0 - f) * p + f * (base + (d + e) * nu)


# ---------------------------------------------------------------------------
# Cartesian grid and masks


class Label(IntEnum):
    FLUID1 = 1
    FLUID2 = 2
    WALL = 0


class CartesianGrid:
    """Cell-centred grid over a box with a ring of wall ghost cells.

    Interior cell (i, j) has centre (x0 + (i+1/2) dx, y0 + (j+1/2) dx);
    extended index e = i + 1 includes the ghost ring.
    """

    def __init__(self, x0, x1, y0, y1, dx):
        self.x0, self.x1, self.y0, self.y1 = map(float, (x0, x1, y0, y1))
        self.dx = float(dx)
        nx = (self.x1 - self.x0) / self.dx
        ny = (self.y1 - self.y0) / self.dx
        self.nx, self.ny = int(round(nx)), int(round(ny))
        if abs(nx - self.nx) > 1e-9 or abs(ny - self.ny) > 1e-9 or self.nx < 2 or self.ny < 2:
            raise ValueError("box extents must be integer multiples of dx")
        self.n_cells = self.nx * self.ny
        xc = self.x0 + (np.arange(self.nx) + 0.5) * self.dx
        yc = self.y0 + (np.arange(self.ny) + 0.5) * self.dx
        X, Y = np.meshgrid(xc, yc, indexing="ij")
        self.centers = np.stack([X.ravel(), Y.ravel()], axis=1)  # flat index i*ny + j

    @property
    def box(self):
        return (self.x0, self.x1, self.y0, self.y1)

    @property
    def shape(self):
        return (self.nx, self.ny)

    def inside(self, pts):
        pts = np.atleast_2d(pts)
        return (pts[:, 0] > self.x0) & (pts[:, 0] < self.x1) & (pts[:, 1] > self.y0) & (pts[:, 1] < self.y1)

    def nearest_cell(self, pt):
        i = int(np.clip(np.floor((pt[0] - self.x0) / self.dx), 0, self.nx - 1))
        j = int(np.clip(np.floor((pt[1] - self.y0) / self.dx), 0, self.ny - 1))
        return i, j

    def __eq__(self, other):
        return isinstance(other, CartesianGrid) and self.box == other.box and self.dx == other.dx

    def __hash__(self):
        return hash((self.box, self.dx))


def points_in_polygon(pts, poly):
    """Even-odd ray casting; pts (K,2), poly (N,2) closed implicitly."""
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    xa, ya = poly[:, 0][None, :], poly[:, 1][None, :]
    xb, yb = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    crosses = (ya > y) != (yb > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = xa + (y - ya) * (xb - xa) / (yb - ya)
    return (np.sum(crosses & (x < xint), axis=1) % 2) == 1


class DegeneracyError(RuntimeError):
    def __init__(self, status, message=""):
        super().__init__(message or str(status))
        self.status = status


@dataclass
class DomainMask:
    grid: CartesianGrid
    labels: np.ndarray  # (nx+2, ny+2) with WALL ring
    markers: np.ndarray  # (N, 2) marker positions
    marker_cells: np.ndarray  # (N, 2) extended lower-left stencil index
    marker_weights: np.ndarray  # (N, 4) bilinear weights (ll, lr, ul, ur)

    @property
    def interior(self):
        return self.labels[1:-1, 1:-1]

    def flat_labels(self):
        return self.interior.ravel()

    def label_at(self, pt):
        i, j = self.grid.nearest_cell(pt)
        return Label(int(self.interior[i, j]))

    def count(self, label):
        return int(np.sum(self.interior == label))

    def to_text(self):
        ch = {Label.WALL: "#", Label.FLUID1: ".", Label.FLUID2: "o"}
        rows = []
        for j in reversed(range(self.labels.shape[1])):
            rows.append("".join(ch[Label(int(v))] for v in self.labels[:, j]))
        return "\n".join(rows)


def bilinear_stencil(grid, pts):
    """Extended-grid lower-left indices and bilinear weights for points.

    Points are clamped to the extended grid (ghost centres included)."""
    pts = np.atleast_2d(pts)
    ex = (pts[:, 0] - grid.x0) / grid.dx + 0.5
    ey = (pts[:, 1] - grid.y0) / grid.dx + 0.5
    ex = np.clip(ex, 0.0, grid.nx + 1.0)
    ey = np.clip(ey, 0.0, grid.ny + 1.0)
    i0 = np.minimum(np.floor(ex).astype(int), grid.nx)
    j0 = np.minimum(np.floor(ey).astype(int), grid.ny)
    fx = ex - i0
    fy = ey - j0
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return np.stack([i0, j0], axis=1), w


def build_masks(curve, grid):
    """Label cell centres by the enclosed region of the interface polyline."""
    pts = curve.points if isinstance(curve, InterfaceCurve) else np.asarray(curve)
    if not np.all(grid.inside(pts)):
        raise DegeneracyError("WALL_CONTACT", "interface leaves the fluid box")
    inside = points_in_polygon(grid.centers, pts)
    labels = np.full((grid.nx + 2, grid.ny + 2), int(Label.WALL), dtype=np.int8)
    inner = np.where(inside, int(Label.FLUID2), int(Label.FLUID1)).reshape(grid.nx, grid.ny)
    labels[1:-1, 1:-1] = inner
    cells, w = bilinear_stencil(grid, pts)
    return DomainMask(grid, labels, pts.copy(), cells, w)


# ---------------------------------------------------------------------------
# degeneracy monitoring


class Status(str, Enum):
    OK = "OK"
    NEAR_COLLAR = "NEAR_COLLAR"
    COLLAR_HIT = "COLLAR_HIT"
    GAMMA_DEGENERATE = "GAMMA_DEGENERATE"
    SELF_INTERSECT = "SELF_INTERSECT"


@dataclass
class DegeneracyReport:
    status: Status
    eta_min: float
    eta_max: float
    gamma_min: float
    coercivity: float  # integral of gamma_bar^2 |second derivatives|^2
    detail: dict = field(default_factory=dict)


def degeneracy_check(eta, ref, chart, eps_c=None, eps_gamma=1e-3, near_margin=0.0, eta_dot=None):
    """Classify the interface state.  Precedence: self-intersection, then
    loss of bending coercivity, then collar contact, then early warning."""
    from .koiter import gamma_bar_nodes

    eta = np.asarray(eta, dtype=float)
    if eps_c is None:
        eps_c = 1e-3 * (chart.b - chart.a)
    gb = gamma_bar_nodes(ref, eta)
    grid = ref.grid
    hess2 = np.zeros(ref.size)
    for i in range(ref.m):
        for j in range(ref.m):
            hess2 += (grid.second(i, j) @ eta) ** 2
    monitor = float(grid.weight * np.sum(gb**2 * hess2))
    lo, hi = float(eta.min()), float(eta.max())
    gmin = float(gb.min())
    status = Status.OK
    if ref.m == 1 and not deform_interface(ref, eta).injective:
        status = Status.SELF_INTERSECT
    elif gmin <= eps_gamma:
        status = Status.GAMMA_DEGENERATE
    elif lo <= chart.a + eps_c or hi >= chart.b - eps_c:
        status = Status.COLLAR_HIT
    elif near_margin > 0 and (lo <= chart.a + near_margin or hi >= chart.b - near_margin):
        status = Status.NEAR_COLLAR
    detail = {}
    if eta_dot is not None:
        detail["max_speed"] = float(np.max(np.abs(eta_dot)))
    return DegeneracyReport(status, lo, hi, gmin, monitor, detail)
