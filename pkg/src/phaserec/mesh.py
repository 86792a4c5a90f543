"""Triangulations of (-1,1)^2 and of user polygons: construction, red-green
refinement, gradient-driven marking, point location and cross-mesh queries.

Meshes are immutable after construction; every derived quantity (areas, basis
gradients, locator bins, assembly scatter maps) is cached lazily on first use.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

_mesh_counter = itertools.count()

#: default bound on circumradius/inradius accepted by validate()
DEFAULT_REGULARITY_BOUND = 12.0


def square_boundary_distance(points):
    """Distance of point(s) to the boundary of the square (-1,1)^2."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.minimum(1.0 - np.abs(p[:, 0]), 1.0 - np.abs(p[:, 1]))
    return d if d.size > 1 else float(d[0])


@dataclass
class AdaptationMarking:
    """Triangles selected for refinement and candidates for coarsening."""

    refine_set: np.ndarray
    coarsen_set: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.refine_set = np.asarray(self.refine_set, dtype=np.int64)
        self.coarsen_set = np.asarray(self.coarsen_set, dtype=np.int64)
        if np.intersect1d(self.refine_set, self.coarsen_set).size:
            raise ValidationError("refine_set and coarsen_set overlap")


class TriMesh:
    """Conforming triangulation with oriented boundary topology.

    Parameters
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array
        Counterclockwise vertex triples.
    regularity_bound : float
        Maximum circumradius/inradius ratio accepted by :meth:`validate`.
    """

    def __init__(self, vertices, triangles, regularity_bound=DEFAULT_REGULARITY_BOUND,
                 validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValidationError("vertices must be an (nv, 2) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValidationError("triangles must be an (nt, 3) array")
        self.regularity_bound = float(regularity_bound)
        self.mesh_id = f"mesh{next(_mesh_counter)}"
        self._cache = {}
        self.boundary_edges = self._extract_boundary()
        edges = self.vertices[self.triangles] - self.vertices[np.roll(self.triangles, -1, axis=1)]
        self._edge_lengths = np.linalg.norm(edges, axis=2)
        self.h_max = float(self._edge_lengths.max())
        if validate:
            self.validate()

    # -- basic sizes ----------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    def __repr__(self):
        return (f"TriMesh({self.num_vertices} vertices, {self.num_triangles} "
                f"triangles, h_max={self.h_max:.4g})")

    # -- derived geometry (cached) --------------------------------------

    def signed_areas(self):
        if "signed_areas" not in self._cache:
            p = self.vertices[self.triangles]
            d1 = p[:, 1] - p[:, 0]
            d2 = p[:, 2] - p[:, 0]
            self._cache["signed_areas"] = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        return self._cache["signed_areas"]

    def areas(self):
        return self.signed_areas()

    def centroids(self):
        if "centroids" not in self._cache:
            self._cache["centroids"] = self.vertices[self.triangles].mean(axis=1)
        return self._cache["centroids"]

    def basis_gradients(self):
        """Gradients of the three P1 hat functions on each triangle, (nt,3,2)."""
        if "basis_gradients" not in self._cache:
            p = self.vertices[self.triangles]
            g = np.empty((self.num_triangles, 3, 2))
            two_a = 2.0 * self.signed_areas()
            for i in range(3):
                e = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]
                g[:, i, 0] = -e[:, 1] / two_a
                g[:, i, 1] = e[:, 0] / two_a
            self._cache["basis_gradients"] = g
        return self._cache["basis_gradients"]

    def elementwise_gradient(self, values):
        """Constant gradient of the P1 interpolant on each triangle, (nt,2)."""
        v = np.asarray(values, dtype=float)
        return np.einsum("ti,tid->td", v[self.triangles], self.basis_gradients())

    def centroid_values(self, values):
        return np.asarray(values, dtype=float)[self.triangles].mean(axis=1)

    def regularity_ratios(self):
        e = np.sort(self._edge_lengths, axis=1)
        a = self.signed_areas()
        s = 0.5 * e.sum(axis=1)
        circum = e.prod(axis=1) / (4.0 * np.abs(a))
        inrad = np.abs(a) / s
        return circum / inrad

    def boundary_vertices(self):
        if "boundary_vertices" not in self._cache:
            self._cache["boundary_vertices"] = np.unique(self.boundary_edges)
        return self._cache["boundary_vertices"]

    def boundary_normals(self):
        """Outward unit normal per boundary edge."""
        t = self.vertices[self.boundary_edges[:, 1]] - self.vertices[self.boundary_edges[:, 0]]
        n = np.column_stack([t[:, 1], -t[:, 0]])
        return n / np.linalg.norm(n, axis=1)[:, None]

    # -- topology -------------------------------------------------------

    def _edge_table(self):
        """Unique edges and the (nt,3) map triangle -> edge ids."""
        if "edge_table" not in self._cache:
            t = self.triangles
            raw = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            key = np.sort(raw, axis=1)
            edges, inverse = np.unique(key, axis=0, return_inverse=True)
            tri_edges = inverse.reshape(3, -1).T
            self._cache["edge_table"] = (edges, tri_edges)
        return self._cache["edge_table"]

    def _extract_boundary(self):
        t = self.triangles
        raw = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = np.sort(raw, axis=1)
        _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        on_boundary = counts[inverse] == 1
        # keep the orientation the edge has inside its (unique) triangle, so
        # the domain lies to the left and (dy, -dx) points outward
        return np.ascontiguousarray(raw[on_boundary], dtype=np.int32)

    def element_adjacency(self):
        """Pairs of triangle indices sharing an edge, (ne_int, 2)."""
        if "element_adjacency" not in self._cache:
            _, tri_edges = self._edge_table()
            flat_e = tri_edges.T.ravel()
            flat_t = np.tile(np.arange(self.num_triangles), 3)
            order = np.argsort(flat_e, kind="stable")
            fe, ft = flat_e[order], flat_t[order]
            same = fe[1:] == fe[:-1]
            pairs = np.column_stack([ft[:-1][same], ft[1:][same]])
            self._cache["element_adjacency"] = pairs
        return self._cache["element_adjacency"]

    # -- validation -----------------------------------------------------

    def validate(self):
        nv = self.num_vertices
        if self.triangles.min(initial=0) < 0 or self.triangles.max(initial=-1) >= nv:
            raise ValidationError("triangle vertex index out of range")
        if self.boundary_edges.size and (self.boundary_edges.min() < 0 or
                                         self.boundary_edges.max() >= nv):
            raise ValidationError("boundary edge vertex index out of range")
        a = self.signed_areas()
        if not np.all(a > 0):
            raise ValidationError("triangle with non-positive signed area "
                                  f"(min={a.min():.3e})")
        worst = self.regularity_ratios().max()
        if worst > self.regularity_bound:
            raise ValidationError(f"shape regularity violated: ratio {worst:.2f} "
                                  f"> bound {self.regularity_bound}")
        # boundary edges must close up into loops: in/out degree one per vertex
        bsrc, bdst = self.boundary_edges[:, 0], self.boundary_edges[:, 1]
        if (np.unique(bsrc).size != bsrc.size) or (np.unique(bdst).size != bdst.size):
            raise ValidationError("boundary edges do not form closed loops")
        if not np.array_equal(np.sort(bsrc), np.sort(bdst)):
            raise ValidationError("boundary edges do not form closed loops")

    # -- point location -------------------------------------------------

    def _locator(self):
        if "locator" not in self._cache:
            p = self.vertices[self.triangles]
            lo = p.min(axis=1)
            hi = p.max(axis=1)
            extent = float((hi - lo).max())
            bbox_lo = self.vertices.min(axis=0)
            bbox_hi = self.vertices.max(axis=0)
            span = np.maximum(bbox_hi - bbox_lo, 1e-30)
            nb = np.maximum((span / max(extent, 1e-30)).astype(int), 1)
            cell = span / nb
            ilo = np.clip(((lo - bbox_lo) / cell).astype(int), 0, nb - 1)
            ihi = np.clip(((hi - bbox_lo) / cell).astype(int), 0, nb - 1)
            # each triangle spans at most 2 bins per axis by construction
            entries = []
            for dx in (0, 1):
                for dy in (0, 1):
                    bx = np.minimum(ilo[:, 0] + dx, ihi[:, 0])
                    by = np.minimum(ilo[:, 1] + dy, ihi[:, 1])
                    entries.append(bx * nb[1] + by)
            bin_of = np.concatenate(entries)
            tri_of = np.tile(np.arange(self.num_triangles), 4)
            uniq = np.unique(np.column_stack([bin_of, tri_of]), axis=0)
            order = np.argsort(uniq[:, 0], kind="stable")
            sb, st = uniq[order, 0], uniq[order, 1]
            starts = np.searchsorted(sb, np.arange(nb[0] * nb[1] + 1))
            self._cache["locator"] = (bbox_lo, cell, nb, starts, st)
        return self._cache["locator"]

    def _barycentric(self, tris, points):
        """Barycentric coordinates of points (m,2) w.r.t. triangles tris (m,)."""
        p = self.vertices[self.triangles[tris]]
        v0 = p[:, 0]
        d1 = p[:, 1] - v0
        d2 = p[:, 2] - v0
        rhs = points - v0
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        l1 = (rhs[:, 0] * d2[:, 1] - rhs[:, 1] * d2[:, 0]) / det
        l2 = (d1[:, 0] * rhs[:, 1] - d1[:, 1] * rhs[:, 0]) / det
        return np.column_stack([1.0 - l1 - l2, l1, l2])

    def locate_points(self, points, tol=1e-8):
        """Containing triangle and barycentric coordinates for each point.

        Returns ``(tri_indices, bary)`` with ``bary`` clipped to [0,1] and
        renormalized.  Raises :class:`ValidationError` for points farther
        than ``tol`` outside the mesh.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        bbox_lo, cell, nb, starts, st = self._locator()
        tri_out = np.full(len(pts), -1, dtype=np.int64)
        bary_out = np.zeros((len(pts), 3))
        best_def = np.full(len(pts), -np.inf)

        ib = np.clip(((pts - bbox_lo) / cell).astype(int), 0, nb - 1)
        bins = ib[:, 0] * nb[1] + ib[:, 1]
        for ring in (0, 1, 2, 3):
            pending = np.where(best_def < -1e-12)[0]
            if pending.size == 0:
                break
            pbins = bins[pending]
            for b in np.unique(pbins):
                sel = pending[pbins == b]
                cand = self._ring_candidates(b, nb, starts, st, ring)
                if cand.size == 0:
                    continue
                tt = np.repeat(cand, len(sel))
                pp = np.tile(pts[sel], (len(cand), 1))
                lam = self._barycentric(tt, pp).reshape(len(cand), len(sel), 3)
                worst = lam.min(axis=2)
                kbest = worst.argmax(axis=0)
                vbest = worst[kbest, np.arange(len(sel))]
                improve = vbest > best_def[sel]
                idx = sel[improve]
                best_def[idx] = vbest[improve]
                tri_out[idx] = cand[kbest[improve]]
                bary_out[idx] = lam[kbest[improve], np.arange(len(sel))[improve]]
        misses = best_def < -tol
        if np.any(misses):
            i = int(np.where(misses)[0][0])
            raise ValidationError(f"point {pts[i]} lies outside the mesh "
                                  f"(barycentric deficit {best_def[i]:.2e})")
        bary_out = np.clip(bary_out, 0.0, 1.0)
        bary_out /= bary_out.sum(axis=1)[:, None]
        return tri_out, bary_out

    def _ring_candidates(self, b, nb, starts, st, ring):
        bx, by = divmod(int(b), int(nb[1]))
        cands = []
        for dx in range(-ring, ring + 1):
            for dy in range(-ring, ring + 1):
                if ring > 0 and max(abs(dx), abs(dy)) != ring:
                    continue
                x, y = bx + dx, by + dy
                if 0 <= x < nb[0] and 0 <= y < nb[1]:
                    k = x * nb[1] + y
                    cands.append(st[starts[k]:starts[k + 1]])
        return np.unique(np.concatenate(cands)) if cands else np.empty(0, dtype=np.int64)

    def locate_point(self, point, tol=1e-8):
        tris, bary = self.locate_points(np.asarray(point, dtype=float)[None, :], tol=tol)
        return int(tris[0]), bary[0]


def build_square_mesh(h_target, regularity_bound=DEFAULT_REGULARITY_BOUND):
    """Criss-cross triangulation of (-1,1)^2 with longest edge <= h_target.

    Each grid cell is split into four triangles around its center, which
    keeps element counts and areas exactly reproducible.
    """
    if not (0.0 < h_target < 2.0):
        raise ValidationError(f"h_target must lie in (0, 2), got {h_target}")
    n = int(np.ceil(2.0 / h_target))
    xs = np.linspace(-1.0, 1.0, n + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    cx, cy = np.meshgrid(0.5 * (xs[:-1] + xs[1:]), 0.5 * (xs[:-1] + xs[1:]), indexing="ij")
    centers = np.column_stack([cx.ravel(), cy.ravel()])
    vertices = np.vstack([grid, centers])

    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    a = ii * (n + 1) + jj
    b = (ii + 1) * (n + 1) + jj
    c = (ii + 1) * (n + 1) + (jj + 1)
    d = ii * (n + 1) + (jj + 1)
    m = (n + 1) ** 2 + ii * n + jj
    triangles = np.concatenate([
        np.column_stack([a, b, m]),
        np.column_stack([b, c, m]),
        np.column_stack([c, d, m]),
        np.column_stack([d, a, m]),
    ])
    return TriMesh(vertices, triangles, regularity_bound=regularity_bound)


def refine(mesh, marking):
    """Red-green refinement of the marked triangles.

    Marked triangles are split into four; conformity is restored by
    promoting triangles with two or three bisected edges to red and
    bisecting those with a single bisected edge (green closure).
    """
    refine_ids = np.asarray(marking.refine_set, dtype=np.int64)
    if refine_ids.size and (refine_ids.min() < 0 or refine_ids.max() >= mesh.num_triangles):
        raise ValidationError("refine_set contains an invalid triangle index")
    if refine_ids.size == 0:
        return mesh

    edges, tri_edges = mesh._edge_table()
    red = np.zeros(mesh.num_triangles, dtype=bool)
    red[refine_ids] = True
    while True:
        split = np.zeros(len(edges), dtype=bool)
        split[tri_edges[red].ravel()] = True
        n_split = split[tri_edges].sum(axis=1)
        promote = ~red & (n_split >= 2)
        if not promote.any():
            break
        red |= promote

    split_ids = np.where(split)[0]
    mid_index = np.full(len(edges), -1, dtype=np.int64)
    mid_index[split_ids] = mesh.num_vertices + np.arange(len(split_ids))
    midpoints = 0.5 * (mesh.vertices[edges[split_ids, 0]] + mesh.vertices[edges[split_ids, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])

    tris = []
    t = mesh.triangles
    # red children
    rt = t[red]
    m01 = mid_index[tri_edges[red, 0]]
    m12 = mid_index[tri_edges[red, 1]]
    m20 = mid_index[tri_edges[red, 2]]
    tris.append(np.column_stack([rt[:, 0], m01, m20]))
    tris.append(np.column_stack([m01, rt[:, 1], m12]))
    tris.append(np.column_stack([m20, m12, rt[:, 2]]))
    tris.append(np.column_stack([m01, m12, m20]))
    # green children: exactly one split edge, bisect towards the opposite vertex
    green = ~red & (n_split == 1)
    if green.any():
        gt = t[green]
        ge = tri_edges[green]
        which = split[ge].argmax(axis=1)
        for local in range(3):
            sel = which == local
            if not sel.any():
                continue
            v0 = gt[sel, local]
            v1 = gt[sel, (local + 1) % 3]
            v2 = gt[sel, (local + 2) % 3]
            mid = mid_index[ge[sel, local]]
            tris.append(np.column_stack([v0, mid, v2]))
            tris.append(np.column_stack([mid, v1, v2]))
    untouched = ~red & (n_split == 0)
    tris.append(t[untouched])
    return TriMesh(vertices, np.vstack(tris), regularity_bound=mesh.regularity_bound)


def uniform_refine(mesh, levels=1):
    for _ in range(levels):
        mesh = refine(mesh, AdaptationMarking(np.arange(mesh.num_triangles)))
    return mesh


def mark_by_gradient(mesh, u, refine_frac, coarsen_frac=0.0):
    """Select triangles by the magnitude of the elementwise gradient of u.

    Triangles in the top ``refine_frac`` quantile of |grad u| are marked for
    refinement; those below the ``coarsen_frac`` quantile (where the field is
    approximately constant) become coarsening candidates.  If all gradients
    coincide the marking is empty, so constant and uniform-ramp fields are
    no-ops.
    """
    values = u.values if hasattr(u, "values") else np.asarray(u, dtype=float)
    if len(values) != mesh.num_vertices:
        raise ValidationError("field length does not match vertex count")
    if not (0.0 <= refine_frac <= 1.0 and 0.0 <= coarsen_frac <= 1.0):
        raise ValidationError("fractions must lie in [0, 1]")
    g = np.linalg.norm(mesh.elementwise_gradient(values), axis=1)
    empty = np.empty(0, dtype=np.int64)
    if g.max() - g.min() <= 1e-14 * max(g.max(), 1.0):
        return AdaptationMarking(empty, empty)
    refine_set = empty
    if refine_frac > 0:
        thr = np.quantile(g, 1.0 - refine_frac)
        refine_set = np.where(g >= thr)[0]
    coarsen_set = empty
    if coarsen_frac > 0:
        thr = np.quantile(g, coarsen_frac)
        coarsen_set = np.setdiff1d(np.where(g <= thr)[0], refine_set)
    return AdaptationMarking(refine_set, coarsen_set)


def build_graded_square_mesh(sizing, h_coarse, max_rounds=20,
                             regularity_bound=DEFAULT_REGULARITY_BOUND):
    """Square mesh whose local edge length tracks a sizing field.

    ``sizing(points) -> target h`` is evaluated at triangle centroids; any
    triangle larger than its target is refined, repeatedly.  This is the
    "rebuild from indicator" coarsening path: instead of undoing previous
    refinements, a fresh mesh is generated from the sizing field.
    """
    m = build_square_mesh(h_coarse, regularity_bound=regularity_bound)
    for _ in range(max_rounds):
        h_elem = m._edge_lengths.max(axis=1)
        target = np.asarray(sizing(m.centroids()), dtype=float)
        marks = np.where(h_elem > target)[0]
        if marks.size == 0:
            break
        m = refine(m, AdaptationMarking(marks))
    return m
