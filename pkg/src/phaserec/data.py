"""Synthetic measurement factory and reconstruction metrics.

Ground-truth inclusions are geometric primitives rasterized onto a finer
"truth" mesh; the forward problem is solved there and only the boundary
trace is carried over to the working mesh (different discretizations on
purpose, so the inversion never sees its own forward operator)."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc

from . import fem, forward
from .errors import ValidationError
from .mesh import build_square_mesh, refine, AdaptationMarking

# -- geometric primitives ---------------------------------------------------


def _as_points(p):
    return np.atleast_2d(np.asarray(p, dtype=float))


@dataclass(frozen=True)
class Disc:
    cx: float
    cy: float
    r: float

    def inside(self, points):
        p = _as_points(points)
        return np.hypot(p[:, 0] - self.cx, p[:, 1] - self.cy) <= self.r

    def signed_distance(self, points):
        """Positive inside the disc."""
        p = _as_points(points)
        return self.r - np.hypot(p[:, 0] - self.cx, p[:, 1] - self.cy)

    def boundary_points(self, n=256):
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        return np.column_stack([self.cx + self.r * np.cos(t),
                                self.cy + self.r * np.sin(t)])

    def bbox(self):
        return (self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)

    def area(self):
        return math.pi * self.r ** 2


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float = 0.0

    def _local(self, points):
        p = _as_points(points)
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = p[:, 0] - self.cx, p[:, 1] - self.cy
        return c * dx + s * dy, -s * dx + c * dy

    def inside(self, points):
        x, y = self._local(points)
        return (x / self.a) ** 2 + (y / self.b) ** 2 <= 1.0

    def boundary_points(self, n=256):
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        c, s = math.cos(self.angle), math.sin(self.angle)
        x, y = self.a * np.cos(t), self.b * np.sin(t)
        return np.column_stack([self.cx + c * x - s * y, self.cy + s * x + c * y])

    def signed_distance(self, points):
        return _polyline_signed_distance(self, points)

    def bbox(self):
        c, s = math.cos(self.angle), math.sin(self.angle)
        hx = math.hypot(self.a * c, self.b * s)
        hy = math.hypot(self.a * s, self.b * c)
        return (self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)

    def area(self):
        return math.pi * self.a * self.b


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    w: float
    h: float

    def inside(self, points):
        p = _as_points(points)
        return ((p[:, 0] >= self.x0) & (p[:, 0] <= self.x0 + self.w)
                & (p[:, 1] >= self.y0) & (p[:, 1] <= self.y0 + self.h))

    def signed_distance(self, points):
        p = _as_points(points)
        dx = np.maximum(self.x0 - p[:, 0], p[:, 0] - self.x0 - self.w)
        dy = np.maximum(self.y0 - p[:, 1], p[:, 1] - self.y0 - self.h)
        outside = np.hypot(np.maximum(dx, 0), np.maximum(dy, 0))
        inside = np.minimum(np.maximum(dx, dy), 0)
        return -(outside + inside)

    def boundary_points(self, n=256):
        per_side = max(n // 4, 2)
        xs = np.linspace(self.x0, self.x0 + self.w, per_side, endpoint=False)
        ys = np.linspace(self.y0, self.y0 + self.h, per_side, endpoint=False)
        xs_back = np.linspace(self.x0 + self.w, self.x0, per_side, endpoint=False)
        ys_back = np.linspace(self.y0 + self.h, self.y0, per_side, endpoint=False)
        return np.vstack([
            np.column_stack([xs, np.full_like(xs, self.y0)]),
            np.column_stack([np.full_like(ys, self.x0 + self.w), ys]),
            np.column_stack([xs_back, np.full_like(xs, self.y0 + self.h)]),
            np.column_stack([np.full_like(ys, self.x0), ys_back]),
        ])

    def bbox(self):
        return (self.x0, self.y0, self.x0 + self.w, self.y0 + self.h)

    def area(self):
        return self.w * self.h


@dataclass(frozen=True)
class Polygon:
    pts: tuple  # ((x, y), ...) counterclockwise

    def _arr(self):
        return np.asarray(self.pts, dtype=float)

    def inside(self, points):
        p = _as_points(points)
        poly = self._arr()
        x, y = p[:, 0], p[:, 1]
        inside = np.zeros(len(p), dtype=bool)
        n = len(poly)
        for i in range(n):
            x1, y1 = poly[i]
            x2, y2 = poly[(i + 1) % n]
            crosses = ((y1 > y) != (y2 > y))
            with np.errstate(divide="ignore", invalid="ignore"):
                xin = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (x < np.where(crosses, xin, np.inf))
        return inside

    def signed_distance(self, points):
        return _polyline_signed_distance(self, points)

    def boundary_points(self, n=256):
        poly = self._arr()
        segs = np.roll(poly, -1, axis=0) - poly
        lengths = np.linalg.norm(segs, axis=1)
        total = lengths.sum()
        out = []
        for p0, seg, L in zip(poly, segs, lengths):
            m = max(int(round(n * L / total)), 1)
            t = np.linspace(0, 1, m, endpoint=False)
            out.append(p0 + t[:, None] * seg)
        return np.vstack(out)

    def bbox(self):
        a = self._arr()
        return (a[:, 0].min(), a[:, 1].min(), a[:, 0].max(), a[:, 1].max())

    def area(self):
        a = self._arr()
        x, y = a[:, 0], a[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _polyline_signed_distance(shape, points):
    p = _as_points(points)
    bp = shape.boundary_points(512)
    seg0 = bp
    seg1 = np.roll(bp, -1, axis=0)
    d = seg1 - seg0
    den = np.maximum((d ** 2).sum(axis=1), 1e-30)
    diff = p[:, None, :] - seg0[None, :, :]
    t = np.clip((diff * d[None, :, :]).sum(axis=2) / den[None, :], 0.0, 1.0)
    proj = seg0[None, :, :] + t[:, :, None] * d[None, :, :]
    dist = np.linalg.norm(p[:, None, :] - proj, axis=2).min(axis=1)
    sign = np.where(shape.inside(p), 1.0, -1.0)
    return sign * dist


def parse_shape(spec):
    """Parse a shape descriptor line, e.g. ``disc 0.25 0.25 0.3``."""
    tok = spec.split()
    try:
        kind, args = tok[0].lower(), [float(t) for t in tok[1:]]
        if kind == "disc" and len(args) == 3:
            return Disc(*args)
        if kind == "ellipse" and len(args) in (4, 5):
            return Ellipse(*args)
        if kind == "rect" and len(args) == 4:
            return Rect(*args)
        if kind == "polygon" and len(args) >= 6 and len(args) % 2 == 0:
            return Polygon(tuple(zip(args[::2], args[1::2])))
    except (ValueError, IndexError):
        pass
    raise ValidationError(f"cannot parse shape descriptor {spec!r}")


@dataclass
class Phantom:
    """Ground-truth inclusion: a union of pairwise disjoint primitives kept
    at least d0 away from the measurement boundary."""

    shapes: list
    d0: float = 0.1

    def __post_init__(self):
        for s in self.shapes:
            x0, y0, x1, y1 = s.bbox()
            if min(x0, y0) < -1 + self.d0 or max(x1, y1) > 1 - self.d0:
                raise ValidationError(f"shape {s} violates the boundary collar "
                                      f"(d0={self.d0})")
        for i, a in enumerate(self.shapes):
            for b in self.shapes[i + 1:]:
                if a.inside(b.boundary_points(128)).any() or \
                        b.inside(a.boundary_points(128)).any():
                    raise ValidationError(f"shapes {a} and {b} are not disjoint")

    def inside(self, points):
        p = _as_points(points)
        out = np.zeros(len(p), dtype=bool)
        for s in self.shapes:
            out |= s.inside(p)
        return out

    def signed_distance(self, points):
        if not self.shapes:
            return np.full(len(_as_points(points)), -np.inf)
        return np.max([s.signed_distance(points) for s in self.shapes], axis=0)

    def area(self):
        return sum(s.area() for s in self.shapes)

    @classmethod
    def from_specs(cls, specs, d0=0.1):
        return cls([parse_shape(s) for s in specs], d0=d0)


def rasterize(phantom, mesh):
    """Elementwise indicator (centroid rule) and nodal indicator of a phantom."""
    elem = phantom.inside(mesh.centroids()).astype(float)
    nodal = phantom.inside(mesh.vertices).astype(float)
    return elem, fem.field_on(mesh, nodal)


def smoothed_indicator(mesh, phantom, epsilon):
    """Diffuse version of the phantom indicator: the optimal one-dimensional
    transition profile applied to the signed distance."""
    sd = phantom.signed_distance(mesh.vertices)
    arg = np.clip(sd / epsilon, -0.5 * np.pi, 0.5 * np.pi)
    return fem.field_on(mesh, 0.5 * (1.0 + np.sin(arg)))


# -- sources ------------------------------------------------------------------


def source_function(descriptor):
    """Map a source descriptor to a callable f(x, y)."""
    d = descriptor.strip().lower()
    if d == "x":
        return lambda x, y: x
    if d == "y":
        return lambda x, y: y
    if d in ("one", "1"):
        return lambda x, y: np.ones_like(x)
    if d.startswith("const"):
        c = float(d.split()[1])
        return lambda x, y: np.full_like(x, c)
    raise ValidationError(f"unknown source descriptor {descriptor!r}")


# -- boundary parametrization of the square ----------------------------------


def square_arclength(points, tol=1e-9):
    """Arclength parameter in [0, 8) along the boundary of (-1,1)^2, CCW
    from the corner (-1,-1)."""
    p = _as_points(points)
    x, y = p[:, 0], p[:, 1]
    s = np.full(len(p), np.nan)
    bottom = np.abs(y + 1) <= tol
    right = np.abs(x - 1) <= tol
    top = np.abs(y - 1) <= tol
    left = np.abs(x + 1) <= tol
    s[left] = 6.0 + (1.0 - y[left])
    s[top] = 4.0 + (1.0 - x[top])
    s[right] = 2.0 + (y[right] + 1.0)
    s[bottom] = x[bottom] + 1.0
    if np.isnan(s).any():
        raise ValidationError("point not on the boundary of (-1,1)^2")
    return s % 8.0


def _interp_periodic(s_query, s_data, v_data, period=8.0):
    order = np.argsort(s_data)
    sd = s_data[order]
    vd = v_data[order]
    sd_ext = np.concatenate([sd, [sd[0] + period]])
    vd_ext = np.concatenate([vd, [vd[0]]])
    return np.interp(np.mod(s_query, period), sd_ext, vd_ext)


# -- measurements --------------------------------------------------------------


@dataclass
class Measurement:
    """One source term with its measured boundary datum on a work mesh."""

    source: str
    f: fem.NodalField
    y_meas: np.ndarray           # full-length nodal vector, zero off-boundary
    boundary_s: np.ndarray       # arclength of the boundary samples
    boundary_vals: np.ndarray


@dataclass
class MeasurementSet:
    mesh: object
    items: list
    delta: float = 0.0
    seed: int = 0
    truth_info: dict = field(default_factory=dict)

    def rebind(self, new_mesh) -> "MeasurementSet":
        """Re-express the (fixed) boundary data on another mesh of the square."""
        new_items = []
        for it in self.items:
            f_new = fem.interpolate_nodal(new_mesh, source_function(it.source))
            bv = new_mesh.boundary_vertices()
            s_new = square_arclength(new_mesh.vertices[bv])
            vals = _interp_periodic(s_new, it.boundary_s, it.boundary_vals)
            y_meas = np.zeros(new_mesh.num_vertices)
            y_meas[bv] = vals
            new_items.append(Measurement(it.source, f_new, y_meas, s_new, vals))
        return MeasurementSet(new_mesh, new_items, self.delta, self.seed,
                              self.truth_info)


def build_truth_mesh(work_mesh, phantom, refine_factor=4, boundary_rings=1):
    """Globally finer mesh with an extra refinement ring along the phantom
    boundary (the data mesh must resolve the interface better than the
    working mesh does)."""
    h = work_mesh.h_max / refine_factor
    m = build_square_mesh(h)
    for _ in range(boundary_rings):
        sd = phantom.signed_distance(m.centroids()) if phantom.shapes else None
        if sd is None:
            break
        band = np.abs(sd) <= 1.5 * m.h_max
        marks = np.where(band)[0]
        if marks.size == 0:
            break
        m = refine(m, AdaptationMarking(marks))
    return m


def generate_measurements(phantom, truth_mesh, work_mesh, sources, k,
                          delta=0.0, seed=0, forward_tol=1e-11) -> MeasurementSet:
    """Solve the forward problem on the truth mesh for every source and
    sample the boundary trace at the work-mesh boundary vertices.

    With ``delta > 0``, Gaussian noise is added on the work-mesh boundary
    nodes and rescaled so the relative boundary-L2 perturbation is exactly
    delta.  The clean pipeline is fully deterministic."""
    elem_ind, nodal_ind = rasterize(phantom, truth_mesh)
    coeff = fem.CoefficientPair(1.0 - (1.0 - k) * elem_ind, 1.0 - elem_ind, k)
    bv_truth = truth_mesh.boundary_vertices()
    s_truth = square_arclength(truth_mesh.vertices[bv_truth])
    bv_work = work_mesh.boundary_vertices()
    s_work = square_arclength(work_mesh.vertices[bv_work])

    rng = np.random.default_rng(seed)
    items = []
    for src in sources:
        f_truth = fem.interpolate_nodal(truth_mesh, source_function(src))
        diag = forward.check_source_assumption(truth_mesh, f_truth, nodal_ind)
        if not diag.ok:
            import warnings
            warnings.warn(f"source {src!r}: {diag.message}")
        sol = forward.solve_direct(truth_mesh, nodal_ind, f_truth, k,
                                   tol=forward_tol, coeff=coeff)
        trace = sol.y.values[bv_truth]
        vals = _interp_periodic(s_work, s_truth, trace)
        if delta > 0:
            noise = rng.standard_normal(len(vals))
            clean = np.zeros(work_mesh.num_vertices)
            clean[bv_work] = vals
            pert = np.zeros(work_mesh.num_vertices)
            pert[bv_work] = noise
            scale = delta * fem.boundary_l2_norm(work_mesh, clean) \
                / fem.boundary_l2_norm(work_mesh, pert)
            vals = vals + scale * noise
        y_meas = np.zeros(work_mesh.num_vertices)
        y_meas[bv_work] = vals
        f_work = fem.interpolate_nodal(work_mesh, source_function(src))
        items.append(Measurement(src, f_work, y_meas, s_work, vals))
    info = {"truth_vertices": truth_mesh.num_vertices,
            "truth_triangles": truth_mesh.num_triangles,
            "truth_h_max": truth_mesh.h_max,
            "transfer": "nodal sampling of the truth boundary trace at "
                        "work-mesh boundary vertices (piecewise-linear in "
                        "arclength)"}
    return MeasurementSet(work_mesh, items, delta, seed, info)


# -- metrics --------------------------------------------------------------------


@dataclass
class ReconstructionMetrics:
    sym_diff_ratio: float
    area_true: float
    area_rec: float
    boundary_misfit: float = float("nan")


def threshold_elements(mesh, u, level=0.5):
    values = fem.check_binding(mesh, u)
    return mesh.centroid_values(values) >= level


def reconstruction_error(u_rec, phantom, mesh, measurements=None, k=None,
                         level=0.5) -> ReconstructionMetrics:
    """Symmetric-difference ratio of the thresholded reconstruction against
    the rasterized phantom, measured in element areas."""
    rec = threshold_elements(mesh, u_rec, level)
    true = phantom.inside(mesh.centroids())
    areas = mesh.areas()
    a_true = float(areas[true].sum())
    a_rec = float(areas[rec].sum())
    a_xor = float(areas[rec ^ true].sum())
    ratio = a_xor / a_true if a_true > 0 else a_rec / areas.sum()
    misfit = float("nan")
    if measurements is not None and k is not None:
        from .objective import eval_cost
        misfit = eval_cost(mesh, u_rec, measurements.items, alpha=1.0,
                           epsilon=1.0, k=k).j_pde
    return ReconstructionMetrics(ratio, a_true, a_rec, misfit)


def count_components(mesh, u, level=0.5) -> int:
    """Connected components of the thresholded element set (edge adjacency)."""
    sel = threshold_elements(mesh, u, level)
    ids = np.where(sel)[0]
    if ids.size == 0:
        return 0
    renum = -np.ones(mesh.num_triangles, dtype=np.int64)
    renum[ids] = np.arange(ids.size)
    adj = mesh.element_adjacency()
    keep = sel[adj[:, 0]] & sel[adj[:, 1]]
    rows = renum[adj[keep, 0]]
    cols = renum[adj[keep, 1]]
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(ids.size, ids.size))
    n, _ = _cc(g, directed=False)
    return int(n)
