"""Nonlinear forward problem: find y with

    a(u) (grad y, grad v) + b(u) (y^3, v) = (f, v)   for all P1 test v,

plus its linearization in the inclusion field and the solvability
diagnostic on the source term."""

from dataclasses import dataclass, field

import numpy as np

from . import fem
from .errors import SolverError, ValidationError
from .fem import NodalField
from .mesh import square_boundary_distance


@dataclass
class ForwardSolution:
    """Converged state of the nonlinear solve."""

    y: NodalField
    newton_iters: int
    final_residual: float
    residual_history: list = field(default_factory=list)


def _validate_inclusion_field(mesh, u):
    values = fem.check_binding(mesh, u)
    if values.min() < -1e-9 or values.max() > 1.0 + 1e-9:
        raise ValidationError(f"inclusion field out of [0,1]: "
                              f"range [{values.min():.3g}, {values.max():.3g}]")
    if values.min() > 1.0 - 1e-9:
        raise ValidationError("inclusion field is identically one; "
                              "the reaction term vanishes everywhere")
    return np.clip(values, 0.0, 1.0)


def direct_residual(mesh, u, f, k, y):
    """Residual vector of the discrete forward problem at state y."""
    uv = fem.check_binding(mesh, u)
    fv = fem.check_binding(mesh, f)
    yv = np.asarray(y, dtype=float)
    coeff = fem.coefficient_pair(mesh, uv, k)
    ka = fem.assemble_stiffness(mesh, coeff.a_of_u)
    load = fem.assemble_mass(mesh) @ fv
    ym = fem.edge_midpoint_values(mesh, yv)
    cubic = fem.assemble_midpoint_load(mesh, coeff.b_of_u, ym ** 3)
    return ka @ yv + cubic - load


def solve_direct(mesh, u, f, k, tol=1e-10, y0=None, max_iter=50,
                 max_halvings=30, cg_tol=None, coeff=None) -> ForwardSolution:
    """Newton solve of the forward problem with residual backtracking.

    The residual is driven below ``tol`` relative to the load norm.  The
    initial iterate solves the linear-reaction surrogate
    ``a(u) grad y + b(u) y = f`` (the exact Jacobian is singular at y = 0,
    so a zero start is not usable); pass ``y0`` to warm-start instead.
    ``coeff`` overrides the centroid-rule coefficients, which lets callers
    with an exactly elementwise (sharp) indicator bypass the nodal field.
    """
    uv = _validate_inclusion_field(mesh, u)
    fv = fem.check_binding(mesh, f)
    if coeff is None:
        coeff = fem.coefficient_pair(mesh, uv, k)
    ka = fem.assemble_stiffness(mesh, coeff.a_of_u)
    load = fem.assemble_mass(mesh) @ fv
    scale = max(np.linalg.norm(load), 1e-300)

    ones = np.ones((mesh.num_triangles, 3))
    if y0 is None:
        lin = ka + fem.assemble_midpoint_mass(mesh, coeff.b_of_u, ones)
        y = fem.solve_spd(lin, load, tol=min(1e-8, tol))
    else:
        y = np.array(fem.check_binding(mesh, y0), dtype=float)

    def residual(yv):
        ym = fem.edge_midpoint_values(mesh, yv)
        return ka @ yv + fem.assemble_midpoint_load(mesh, coeff.b_of_u, ym ** 3) - load

    res = residual(y)
    resnorm = np.linalg.norm(res)
    history = [resnorm / scale]
    for it in range(max_iter):
        if resnorm <= tol * scale:
            return ForwardSolution(fem.field_on(mesh, y), it, resnorm / scale, history)
        ym = fem.edge_midpoint_values(mesh, y)
        jac = ka + fem.assemble_midpoint_mass(mesh, coeff.b_of_u, 3.0 * ym ** 2)
        rtol_cg = cg_tol if cg_tol is not None else max(
            min(1e-2, 0.1 * resnorm / scale), 0.001 * tol)
        step = fem.solve_spd(jac, -res, tol=rtol_cg)
        s = 1.0
        for _ in range(max_halvings):
            trial = y + s * step
            res_trial = residual(trial)
            trial_norm = np.linalg.norm(res_trial)
            if trial_norm < resnorm:
                break
            s *= 0.5
        else:
            raise SolverError(f"Newton line search stalled at residual "
                              f"{resnorm / scale:.3e} (iteration {it})")
        y, res, resnorm = trial, res_trial, trial_norm
        history.append(resnorm / scale)
    if resnorm <= tol * scale:
        return ForwardSolution(fem.field_on(mesh, y), max_iter, resnorm / scale, history)
    raise SolverError(f"Newton did not converge in {max_iter} iterations "
                      f"(relative residual {resnorm / scale:.3e})")


def linearized_jacobian(mesh, u, y_values, k, coeff=None):
    """Exact Jacobian of the forward residual at y; SPD at a converged state."""
    if coeff is None:
        uv = fem.check_binding(mesh, u)
        coeff = fem.coefficient_pair(mesh, uv, k)
    ym = fem.edge_midpoint_values(mesh, y_values)
    return (fem.assemble_stiffness(mesh, coeff.a_of_u)
            + fem.assemble_midpoint_mass(mesh, coeff.b_of_u, 3.0 * ym ** 2))


def inclusion_direction_load(mesh, y_values, theta, k):
    """Derivative of the forward residual in an inclusion direction theta.

    Returns the load vector so that the linearized solution S* satisfies
    ``J(y) S* = load(theta)``; theta enters through its element averages,
    matching the centroid rule used for a(u), b(u).
    """
    theta_elem = mesh.centroid_values(np.asarray(theta, dtype=float))
    grads = mesh.elementwise_gradient(y_values)
    g = mesh.basis_gradients()
    # (1-k) * theta * grad y . grad phi_l, elementwise exact for P1
    per_vertex = (1.0 - k) * (theta_elem * mesh.areas())[:, None] * \
        np.einsum("td,tld->tl", grads, g)
    load = np.bincount(mesh.triangles.ravel(), weights=per_vertex.ravel(),
                       minlength=mesh.num_vertices)
    ym = fem.edge_midpoint_values(mesh, y_values)
    load += fem.assemble_midpoint_load(mesh, theta_elem, ym ** 3)
    return load


def solve_linearized(mesh, u, sol, theta, k, tol=1e-12) -> NodalField:
    """Sensitivity of the forward solution to an inclusion perturbation."""
    theta_v = fem.check_binding(mesh, theta)
    y = sol.y.values
    jac = linearized_jacobian(mesh, u, y, k)
    load = inclusion_direction_load(mesh, y, theta_v, k)
    return fem.field_on(mesh, fem.solve_spd(jac, load, tol=tol))


@dataclass
class SourceDiagnostic:
    """Which solvability hypothesis the source satisfies, if any."""

    route: str | None
    mean_value: float
    collar_zero_fraction: float
    collar_u_max: float
    message: str

    @property
    def ok(self):
        return self.route is not None


def check_source_assumption(mesh, f, u=None, d0=0.1) -> SourceDiagnostic:
    """Diagnose the source term of the forward problem.

    Passes on the nonzero-mean route when the integral of f does not
    vanish; otherwise on the boundary-collar route when f is nonzero
    a.e. within distance d0 of the boundary while the inclusion field
    vanishes there.  Diagnostic only: never raises.
    """
    fv = fem.check_binding(mesh, f)
    m = fem.assemble_mass(mesh)
    mean_value = float(np.ones(mesh.num_vertices) @ (m @ fv))
    f_scale = float(np.ones(mesh.num_vertices) @ (m @ np.abs(fv)))
    if abs(mean_value) > 1e-10 * max(f_scale, 1e-30):
        return SourceDiagnostic("nonzero_mean", mean_value, 0.0, 0.0,
                                "source has nonzero integral")

    collar = square_boundary_distance(mesh.centroids()) <= d0
    f_elem = np.abs(mesh.centroid_values(fv))
    zero_frac = float(np.mean(f_elem[collar] <= 1e-10 * max(f_elem.max(), 1e-30)))
    u_max = 0.0
    if u is not None:
        u_max = float(mesh.centroid_values(fem.check_binding(mesh, u))[collar].max())
    if zero_frac < 0.05 and u_max <= 1e-9:
        return SourceDiagnostic("boundary_collar", mean_value, zero_frac, u_max,
                                f"zero-mean source, nonzero a.e. on the "
                                f"width-{d0} boundary collar")
    return SourceDiagnostic(None, mean_value, zero_frac, u_max,
                            "warning: source satisfies neither solvability "
                            "hypothesis (zero mean and vanishing on the collar, "
                            "or inclusion touching the collar)")
