"""P1 finite elements on a TriMesh: coefficient-weighted assembly, nodal
interpolation, cross-mesh transfer and a Jacobi-preconditioned CG solver.

Zeroth-order nonlinear terms use the three-point edge-midpoint rule (exact
through degree two); the quadrature helpers shared by the forward, adjoint
and derivative solves live here so every consumer integrates identically.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix

from . import backend
from .errors import SolverError, ValidationError

#: local index pairs of the edge midpoints (m01, m12, m20)
_MIDPOINT_PAIRS = ((0, 1), (1, 2), (2, 0))


@dataclass
class NodalField:
    """One real value per mesh vertex, bound to its mesh by id."""

    values: np.ndarray
    mesh_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("nodal field contains non-finite values")


def field_on(mesh, values) -> NodalField:
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (mesh.num_vertices,):
        raise ValidationError(f"field length {v.shape} does not match "
                              f"vertex count {mesh.num_vertices}")
    return NodalField(v, mesh.mesh_id)


def check_binding(mesh, field):
    if isinstance(field, NodalField):
        if field.mesh_id != mesh.mesh_id:
            raise ValidationError(f"field bound to {field.mesh_id}, "
                                  f"expected {mesh.mesh_id}")
        values = field.values
    else:
        values = np.asarray(field, dtype=np.float64)
    if values.shape != (mesh.num_vertices,):
        raise ValidationError("field length does not match vertex count")
    return values


@dataclass
class CoefficientPair:
    """Elementwise diffusion and reaction coefficients induced by a field
    in [0,1]: diffusion drops to the contrast inside the inclusion and the
    reaction switches off there."""

    a_of_u: np.ndarray
    b_of_u: np.ndarray
    k: float

    def __post_init__(self):
        if not (0.0 < self.k < 1.0):
            raise ValidationError(f"contrast must lie in (0,1), got {self.k}")
        eps = 1e-12
        if np.any(self.a_of_u < self.k - eps) or np.any(self.a_of_u > 1.0 + eps):
            raise ValidationError("diffusion coefficient out of [k, 1]")
        if np.any(self.b_of_u < -eps) or np.any(self.b_of_u > 1.0 + eps):
            raise ValidationError("reaction coefficient out of [0, 1]")


def coefficient_pair(mesh, u, k) -> CoefficientPair:
    """Evaluate a(u) = 1-(1-k)u and b(u) = 1-u at element centroids."""
    values = check_binding(mesh, u)
    u_elem = np.clip(mesh.centroid_values(values), 0.0, 1.0)
    return CoefficientPair(1.0 - (1.0 - k) * u_elem, 1.0 - u_elem, k)


class SparseOperator:
    """Assembled bilinear form in CSR storage."""

    def __init__(self, matrix, mesh_id, symmetric=True):
        matrix.eliminate_zeros()
        self.matrix = matrix
        self.mesh_id = mesh_id
        self.symmetric = symmetric

    @property
    def dim(self):
        return self.matrix.shape[0]

    def __matmul__(self, x):
        return self.matrix.dot(x)

    def __add__(self, other):
        m = other.matrix if isinstance(other, SparseOperator) else other
        return SparseOperator(self.matrix + m, self.mesh_id,
                              self.symmetric and getattr(other, "symmetric", True))

    def scaled(self, c):
        return SparseOperator(self.matrix * c, self.mesh_id, self.symmetric)

    def diagonal(self):
        return self.matrix.diagonal()

    def toarray(self):
        return self.matrix.toarray()


# -- assembly pattern caches ---------------------------------------------

def _volume_pattern(mesh):
    """Slot map sending the 9*nt local entries into CSR data positions."""
    if "volume_pattern" not in mesh._cache:
        t = mesh.triangles.astype(np.int64)
        rows = t[:, [0, 0, 0, 1, 1, 1, 2, 2, 2]].ravel()
        cols = t[:, [0, 1, 2, 0, 1, 2, 0, 1, 2]].ravel()
        mesh._cache["volume_pattern"] = _make_pattern(rows, cols, mesh.num_vertices)
    return mesh._cache["volume_pattern"]


def _boundary_pattern(mesh):
    if "boundary_pattern" not in mesh._cache:
        e = mesh.boundary_edges.astype(np.int64)
        rows = e[:, [0, 0, 1, 1]].ravel()
        cols = e[:, [0, 1, 0, 1]].ravel()
        mesh._cache["boundary_pattern"] = _make_pattern(rows, cols, mesh.num_vertices)
    return mesh._cache["boundary_pattern"]


def _make_pattern(rows, cols, n):
    order = np.lexsort((cols, rows))
    r, c = rows[order], cols[order]
    fresh = np.ones(len(r), dtype=bool)
    fresh[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
    slot_sorted = np.cumsum(fresh) - 1
    slots = np.empty(len(rows), dtype=np.int64)
    slots[order] = slot_sorted
    u_r = r[fresh]
    u_c = c[fresh]
    nnz = int(slot_sorted[-1]) + 1
    indptr = np.zeros(n + 1, dtype=np.int32)
    np.add.at(indptr, u_r + 1, 1)
    indptr = np.cumsum(indptr).astype(np.int32)
    return slots, indptr, u_c.astype(np.int32), nnz


def _assemble(mesh, pattern, local):
    slots, indptr, indices, nnz = pattern
    data = backend.scatter_assemble(slots, local.ravel(), nnz)
    # eliminate_zeros() compacts index arrays in place, so the cached
    # pattern must not be shared with the assembled matrix
    m = csr_matrix((data, indices.copy(), indptr.copy()),
                   shape=(mesh.num_vertices, mesh.num_vertices))
    return SparseOperator(m, mesh.mesh_id, symmetric=True)


def _elem_coeff(mesh, coeff):
    c = np.asarray(coeff, dtype=np.float64)
    if c.ndim == 0:
        return np.full(mesh.num_triangles, float(c))
    if c.shape != (mesh.num_triangles,):
        raise ValidationError("elementwise coefficient has wrong length")
    return c


# -- operators ------------------------------------------------------------

def assemble_stiffness(mesh, coeff=1.0) -> SparseOperator:
    """Coefficient-weighted stiffness: (i,j) -> sum_K c_K |K| grad(phi_i).grad(phi_j)."""
    c = _elem_coeff(mesh, coeff)
    if np.any(c < 0):
        raise ValidationError("stiffness coefficient must be nonnegative")
    g = mesh.basis_gradients()
    w = (c * mesh.areas())[:, None, None]
    local = w * np.einsum("tid,tjd->tij", g, g)
    return _assemble(mesh, _volume_pattern(mesh), local)


_MASS_LOCAL = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def assemble_mass(mesh, coeff=1.0, lumped=False) -> SparseOperator:
    """Coefficient-weighted mass matrix; lumped mode row-sums onto the diagonal."""
    c = _elem_coeff(mesh, coeff)
    if lumped:
        w = np.repeat(c * mesh.areas() / 3.0, 3)
        diag = np.bincount(mesh.triangles.ravel(), weights=w,
                           minlength=mesh.num_vertices)
        n = mesh.num_vertices
        m = csr_matrix((diag, np.arange(n, dtype=np.int32),
                        np.arange(n + 1, dtype=np.int32)), shape=(n, n))
        return SparseOperator(m, mesh.mesh_id, symmetric=True)
    local = (c * mesh.areas())[:, None, None] * _MASS_LOCAL[None, :, :]
    return _assemble(mesh, _volume_pattern(mesh), local)


def assemble_boundary_mass(mesh) -> SparseOperator:
    """L2 inner product on the domain boundary; rows vanish off the boundary."""
    if mesh.boundary_edges.size == 0:
        raise ValidationError("mesh has no boundary edges")
    p = mesh.vertices[mesh.boundary_edges]
    lengths = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    local = (lengths / 6.0)[:, None, None] * np.array([[2.0, 1.0], [1.0, 2.0]])
    return _assemble(mesh, _boundary_pattern(mesh), local)


def assemble_midpoint_mass(mesh, elem_coeff, midpoint_weights) -> SparseOperator:
    """Mass-like matrix from the edge-midpoint rule with pointwise weights.

    ``midpoint_weights`` holds the weight function evaluated at the three
    edge midpoints of each triangle.  With unit weights this reproduces the
    consistent mass matrix exactly.
    """
    c = _elem_coeff(mesh, elem_coeff)
    w = np.asarray(midpoint_weights, dtype=np.float64)
    scale = c * mesh.areas() / 12.0
    w01, w12, w20 = w[:, 0], w[:, 1], w[:, 2]
    local = np.empty((mesh.num_triangles, 3, 3))
    local[:, 0, 0] = w01 + w20
    local[:, 1, 1] = w01 + w12
    local[:, 2, 2] = w12 + w20
    local[:, 0, 1] = local[:, 1, 0] = w01
    local[:, 1, 2] = local[:, 2, 1] = w12
    local[:, 0, 2] = local[:, 2, 0] = w20
    local *= scale[:, None, None]
    return _assemble(mesh, _volume_pattern(mesh), local)


# -- midpoint-rule helpers -------------------------------------------------

def edge_midpoint_values(mesh, values):
    """P1 values at the three edge midpoints of each triangle, (nt, 3)."""
    v = np.asarray(values, dtype=float)[mesh.triangles]
    return np.column_stack([0.5 * (v[:, a] + v[:, b]) for a, b in _MIDPOINT_PAIRS])


def assemble_midpoint_load(mesh, elem_coeff, integrand_mid):
    """Load vector l_i = sum_K c_K (|K|/3) sum_m G(m) phi_i(m).

    ``integrand_mid`` is the integrand evaluated at edge midpoints, (nt, 3).
    """
    c = _elem_coeff(mesh, elem_coeff)
    g = np.asarray(integrand_mid, dtype=np.float64)
    s = c * mesh.areas() / 6.0
    per_vertex = np.column_stack([
        s * (g[:, 0] + g[:, 2]),
        s * (g[:, 0] + g[:, 1]),
        s * (g[:, 1] + g[:, 2]),
    ])
    return np.bincount(mesh.triangles.ravel(), weights=per_vertex.ravel(),
                       minlength=mesh.num_vertices)


def scatter_elementwise(mesh, per_element):
    """Distribute one third of an elementwise quantity to each vertex."""
    w = np.repeat(np.asarray(per_element, dtype=np.float64) / 3.0, 3)
    return np.bincount(mesh.triangles.ravel(), weights=w,
                       minlength=mesh.num_vertices)


# -- interpolation and transfer -------------------------------------------

def interpolate_nodal(mesh, f) -> NodalField:
    """Nodal interpolant: sample ``f(x, y)`` at every vertex."""
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    values = np.broadcast_to(np.asarray(f(x, y), dtype=np.float64),
                             (mesh.num_vertices,)).copy()
    if not np.all(np.isfinite(values)):
        raise ValidationError("interpolated field contains non-finite samples")
    return field_on(mesh, values)


def transfer_field(src_mesh, fld, dst_mesh) -> NodalField:
    """Evaluate a P1 field of src_mesh at the vertices of dst_mesh."""
    values = check_binding(src_mesh, fld)
    tris, bary = src_mesh.locate_points(dst_mesh.vertices)
    out = np.einsum("pi,pi->p", values[src_mesh.triangles[tris]], bary)
    return field_on(dst_mesh, out)


def eval_p1(mesh, values, points):
    """P1 evaluation of a nodal vector at arbitrary points inside the mesh."""
    tris, bary = mesh.locate_points(points)
    return np.einsum("pi,pi->p", np.asarray(values, dtype=float)[mesh.triangles[tris]], bary)


# -- linear algebra ---------------------------------------------------------

def solve_spd(op, rhs, tol=1e-10, x0=None, maxiter=None):
    """Diagonally preconditioned CG for SPD operators.

    Guarantees ||A x - rhs|| <= tol * ||rhs|| on return; raises
    :class:`SolverError` on breakdown or when the iteration cap (ten times
    the dimension by default) is reached.
    """
    a = op.matrix if isinstance(op, SparseOperator) else op
    rhs = np.asarray(rhs, dtype=np.float64)
    n = a.shape[0]
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return np.zeros(n)
    diag = a.diagonal()
    if np.any(diag <= 0.0):
        raise SolverError("operator has a non-positive diagonal entry; not SPD")
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    if maxiter is None:
        maxiter = 10 * n
    a = a.tocsr()
    iters, res = backend.pcg(
        a.indptr.astype(np.int32), a.indices.astype(np.int32),
        np.ascontiguousarray(a.data, dtype=np.float64), rhs, x,
        1.0 / diag, float(tol), 0.0, int(maxiter))
    if iters < 0:
        raise SolverError(f"CG breakdown at iteration {-iters}: "
                          "operator appears indefinite")
    if iters > maxiter:
        raise SolverError(f"CG failed to reach tol={tol:g} within {maxiter} "
                          f"iterations (residual {res / rhs_norm:.2e} relative)")
    return x


# -- norms -------------------------------------------------------------------

def _unit_ops(mesh):
    if "unit_ops" not in mesh._cache:
        mesh._cache["unit_ops"] = (assemble_stiffness(mesh), assemble_mass(mesh),
                                   assemble_boundary_mass(mesh))
    return mesh._cache["unit_ops"]


def l2_norm(mesh, values):
    _, m, _ = _unit_ops(mesh)
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(max(v @ (m @ v), 0.0)))


def h1_norm(mesh, values):
    k, m, _ = _unit_ops(mesh)
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(max(v @ (k @ v) + v @ (m @ v), 0.0)))


def boundary_l2_norm(mesh, values):
    _, _, mb = _unit_ops(mesh)
    v = np.asarray(values, dtype=float)
    return float(np.sqrt(max(v @ (mb @ v), 0.0)))
