"""Adjoint problem: the linear solve that converts the boundary misfit into
volume sensitivities.  Its operator is the (symmetric) Newton Jacobian of the
forward problem at the converged state, so both solves share one assembly."""

from dataclasses import dataclass

import numpy as np

from . import fem
from .fem import NodalField
from .forward import linearized_jacobian


@dataclass
class AdjointSolution:
    p: NodalField
    residual: float


def misfit_boundary_load(mesh, y_values, y_meas):
    """Right-hand side (S(u) - y_meas, psi) over the domain boundary."""
    mb = fem.assemble_boundary_mass(mesh)
    d = np.zeros(mesh.num_vertices)
    bv = mesh.boundary_vertices()
    y_meas = np.asarray(y_meas, dtype=float)
    if y_meas.shape == (mesh.num_vertices,):
        d[bv] = y_meas[bv]
    elif y_meas.shape == (len(bv),):
        d[bv] = y_meas
    else:
        raise fem.ValidationError("measurement vector has wrong length")
    return mb @ (np.asarray(y_values, dtype=float) - d)


def solve_adjoint(mesh, u, sol, y_meas, k, tol=1e-12, coeff=None) -> AdjointSolution:
    """Solve the adjoint problem for the boundary misfit of ``sol``."""
    y = sol.y.values
    jac = linearized_jacobian(mesh, u, y, k, coeff=coeff)
    rhs = misfit_boundary_load(mesh, y, y_meas)
    p = fem.solve_spd(jac, rhs, tol=tol)
    res = np.linalg.norm(jac @ p - rhs) / max(np.linalg.norm(rhs), 1e-300)
    return AdjointSolution(fem.field_on(mesh, p), res)
