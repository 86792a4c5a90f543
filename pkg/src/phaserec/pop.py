"""Reconstruction driver: semi-implicit gradient flow of the relaxed cost
constrained to 0 <= u <= 1.

Each step treats the interface stiffness implicitly and everything nonlinear
explicitly, which reduces to a box-constrained quadratic program

    min  1/2 v' A v - b' v,   A = M_lump + 2 alpha eps tau K,
                              b = M_lump u^n - tau g^n,

solved by a primal-dual active set iteration.  An a-posteriori monitor
enforces the energy decrease  ||u^{n+1}-u^n||^2 + J(u^{n+1}) <= J(u^n)
by halving the step on violation (the a-priori step bound from the theory
involves unobservable constants, so acceptance is checked instead)."""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import fem, objective
from .adjoint import solve_adjoint
from .errors import SolverError, ValidationError
from .mesh import build_graded_square_mesh, square_boundary_distance
from .objective import CostBreakdown


@dataclass
class PdasProblem:
    """Box-constrained SPD quadratic program in nodal variables."""

    a: object          # SparseOperator or csr matrix
    b: np.ndarray
    lo: float = 0.0
    hi: float = 1.0

    @property
    def matrix(self):
        return self.a.matrix if isinstance(self.a, fem.SparseOperator) else self.a


def pdas_solve(problem, x0=None, active_lo=None, active_hi=None,
               max_iter=100, cg_tol=1e-12):
    """Primal-dual active set solve of a bound-constrained quadratic program.

    Returns ``(x, active_lo, active_hi, iterations)`` with the bounds
    attained exactly on the active sets.  Raises :class:`SolverError`
    when the active sets cycle or the iteration cap is hit.
    """
    a = problem.matrix.tocsr()
    b = np.asarray(problem.b, dtype=float)
    n = len(b)
    lo, hi = problem.lo, problem.hi
    x = np.clip(np.zeros(n) if x0 is None else np.array(x0, dtype=float), lo, hi)
    in_lo = (x <= lo) if active_lo is None else np.array(active_lo, dtype=bool)
    in_hi = (x >= hi) if active_hi is None else np.array(active_hi, dtype=bool)
    in_hi &= ~in_lo
    seen = set()
    for it in range(1, max_iter + 1):
        key = (in_lo.tobytes(), in_hi.tobytes())
        if key in seen:
            raise SolverError(f"active-set cycle detected after {it} iterations")
        seen.add(key)
        x = np.where(in_lo, lo, np.where(in_hi, hi, x))
        free = ~(in_lo | in_hi)
        if free.any():
            bound = np.where(in_hi, hi, np.where(in_lo, lo, 0.0))
            rhs = (b - a.dot(bound))[free]
            sub = a[free][:, free]
            x[free] = fem.solve_spd(sub, rhs, tol=cg_tol, x0=x[free])
        r = a.dot(x) - b
        v = x - r
        new_lo = v < lo
        new_hi = v > hi
        if np.array_equal(new_lo, in_lo) and np.array_equal(new_hi, in_hi):
            x = np.where(in_lo, lo, np.where(in_hi, hi, x))
            return x, in_lo, in_hi, it
        in_lo, in_hi = new_lo, new_hi & ~new_lo
    raise SolverError(f"active-set iteration did not settle in {max_iter} steps")


@dataclass
class PopState:
    """State of the obstacle-flow iteration on one mesh."""

    mesh: object
    u: np.ndarray
    iter: int = 0
    t: float = 0.0
    history: list = field(default_factory=list)
    active_low: np.ndarray = None
    active_high: np.ndarray = None
    solutions: list = None
    adjoints: list = None
    cost: CostBreakdown = None


@dataclass
class MonitorDecision:
    accept: bool
    tau_next: float


def energy_monitor(prev, next_, du_norm, tau, tau_max=None, streak=0,
                   slack=0.0, grow_after=10, grow_factor=1.2):
    """Accept/reject rule enforcing the energy-decrease inequality.

    Accepts when ``next.total + du_norm^2 <= prev.total + slack``; rejected
    steps halve tau, long acceptance streaks grow it by 20% up to tau_max.
    """
    if next_.total + du_norm ** 2 <= prev.total + slack:
        tau_next = tau
        if tau_max is not None and streak + 1 >= grow_after:
            tau_next = min(tau * grow_factor, tau_max)
        return MonitorDecision(True, tau_next)
    return MonitorDecision(False, 0.5 * tau)


def _refresh(mesh, u, measurements, k, forward_tol, solver_tol, warm=None):
    sols = objective.solve_states(mesh, u, measurements.items, k,
                                  forward_tol=forward_tol, warm=warm)
    adjs = [solve_adjoint(mesh, u, s, m.y_meas, k, tol=solver_tol)
            for s, m in zip(sols, measurements.items)]
    return sols, adjs


def init_state(mesh, u0, measurements, alpha, epsilon, k,
               forward_tol=1e-10, solver_tol=1e-11) -> PopState:
    u = np.clip(fem.check_binding(mesh, u0), 0.0, 1.0)
    sols, adjs = _refresh(mesh, u, measurements, k, forward_tol, solver_tol)
    cost = objective.eval_cost(mesh, fem.field_on(mesh, u), measurements.items,
                               alpha, epsilon, k, solutions=sols)
    return PopState(mesh=mesh, u=u, solutions=sols, adjoints=adjs, cost=cost,
                    active_low=u <= 0.0, active_high=u >= 1.0,
                    history=[cost])


def step_operator(mesh, alpha, epsilon, tau):
    """System matrix of one step: lumped mass plus the implicit stiffness."""
    key = ("pop_operator", alpha, epsilon, tau)
    if key not in mesh._cache:
        m_lump = fem.assemble_mass(mesh, lumped=True)
        k_op, _, _ = fem._unit_ops(mesh)
        mesh._cache[key] = (m_lump, m_lump + k_op.scaled(2.0 * alpha * epsilon * tau))
    return mesh._cache[key]


def explicit_gradient(state, measurements, alpha, epsilon, k):
    """Explicitly treated part of the cost gradient at the current state
    (misfit sensitivities plus the double-well slope; stiffness excluded)."""
    mesh = state.mesh
    g = np.zeros(mesh.num_vertices)
    for s, a in zip(state.solutions, state.adjoints):
        g += objective.misfit_gradient_part(mesh, s.y.values, a.p.values, k)
    g /= len(state.solutions)
    _, m_op, _ = fem._unit_ops(mesh)
    g += alpha / epsilon * (m_op @ (1.0 - 2.0 * state.u))
    return g


def pop_step(state, measurements, alpha, epsilon, tau, k,
             forward_tol=1e-10, solver_tol=1e-11, pdas_tol=1e-12) -> PopState:
    """One semi-implicit step of the constrained flow.

    Solves the step quadratic program by the active-set method, then
    refreshes forward and adjoint states at the new iterate."""
    if tau <= 0:
        raise ValidationError("step size must be positive")
    mesh = state.mesh
    m_lump, a_op = step_operator(mesh, alpha, epsilon, tau)
    g = explicit_gradient(state, measurements, alpha, epsilon, k)
    b = m_lump @ state.u - tau * g
    problem = PdasProblem(a_op, b)
    u1, act_lo, act_hi, _ = pdas_solve(problem, x0=state.u,
                                       active_lo=state.active_low,
                                       active_hi=state.active_high,
                                       cg_tol=pdas_tol)
    sols, adjs = _refresh(mesh, u1, measurements, k, forward_tol, solver_tol,
                          warm=state.solutions)
    cost = objective.eval_cost(mesh, fem.field_on(mesh, u1), measurements.items,
                               alpha, epsilon, k, solutions=sols)
    return PopState(mesh=mesh, u=u1, iter=state.iter + 1, t=state.t + tau,
                    history=state.history, active_low=act_lo, active_high=act_hi,
                    solutions=sols, adjoints=adjs, cost=cost)


def interface_sizing(mesh, u, epsilon, h_min, h_coarse, h_collar, collar_width):
    """Sizing field: fine inside a band around the diffuse interface,
    baseline near the measurement boundary, coarse elsewhere."""
    g = np.linalg.norm(mesh.elementwise_gradient(u), axis=1)
    band = 0.5 * np.pi * epsilon + 2.0 * h_min
    hot = mesh.centroids()[g > 0.25 * g.max()] if g.max() > 1e-8 else np.empty((0, 2))
    tree = cKDTree(hot) if len(hot) else None

    def sizing(points):
        target = np.full(len(points), h_coarse)
        near_bdry = square_boundary_distance(points) <= collar_width
        target[near_bdry] = np.minimum(target[near_bdry], h_collar)
        if tree is not None:
            d, _ = tree.query(points)
            target[d <= band] = h_min
        return target

    return sizing


def adapt_state(state, measurements, config):
    """Rebuild the mesh from the current interface indicator and transfer
    the iterate and the measurements onto it."""
    sizing = interface_sizing(state.mesh, state.u, config.epsilon,
                              h_min=config.h_adapt_min,
                              h_coarse=config.h_adapt_coarse,
                              h_collar=config.h_target,
                              collar_width=config.d0)
    new_mesh = build_graded_square_mesh(sizing, config.h_adapt_coarse)
    u_new = np.clip(fem.transfer_field(state.mesh, fem.field_on(state.mesh, state.u),
                                       new_mesh).values, 0.0, 1.0)
    new_meas = measurements.rebind(new_mesh)
    new_state = init_state(new_mesh, u_new, new_meas, config.alpha, config.epsilon,
                           config.contrast, forward_tol=config.forward_tol,
                           solver_tol=config.solver_tol)
    new_state = replace(new_state, iter=state.iter, t=state.t,
                        history=state.history + [new_state.cost])
    return new_state, new_meas


@dataclass
class PopResult:
    state: PopState
    trace: list
    converged: bool
    reason: str
    measurements: object = None


def _trace_row(state, tau):
    c = state.cost
    return {"iter": state.iter, "time": state.t, "j_pde": c.j_pde,
            "j_gl_gradient": c.j_gl_gradient, "j_gl_well": c.j_gl_well,
            "total": c.total, "step": tau,
            "active_low": int(np.count_nonzero(state.active_low)),
            "active_high": int(np.count_nonzero(state.active_high))}


def run_pop(config, u0, measurements, snapshot_cb=None) -> PopResult:
    """Iterate the constrained flow until the sup-norm update drops below
    ``config.tol_pop`` (checked across accepted steps on a fixed mesh).

    Runs the energy monitor on every trial step; when adaptation is on, the
    mesh is rebuilt every ``config.n_adapt`` accepted iterations and the
    iterate, data and monitor baseline move to the new mesh.
    """
    mesh = measurements.mesh
    tau = config.tau
    tau_floor = 1e-12 * tau
    state = init_state(mesh, u0, measurements, config.alpha, config.epsilon,
                       config.contrast, forward_tol=config.forward_tol,
                       solver_tol=config.solver_tol)
    trace = [_trace_row(state, tau)]
    streak = 0
    converged = False
    reason = "iteration cap reached"
    while state.iter < config.max_iter:
        trial = pop_step(state, measurements, config.alpha, config.epsilon, tau,
                         config.contrast, forward_tol=config.forward_tol,
                         solver_tol=config.solver_tol)
        m_lump, _ = step_operator(mesh, config.alpha, config.epsilon, tau)
        du = trial.u - state.u
        du_l2 = float(np.sqrt(max(du @ (m_lump @ du), 0.0)))
        decision = energy_monitor(state.cost, trial.cost, du_l2, tau,
                                  tau_max=config.tau_max, streak=streak)
        if not decision.accept:
            streak = 0
            tau = decision.tau_next
            if tau < tau_floor:
                reason = "step size underflow"
                break
            continue
        du_inf = float(np.abs(du).max())
        state = trial
        state.history.append(state.cost)
        trace.append(_trace_row(state, tau))
        streak += 1
        tau = decision.tau_next
        if snapshot_cb is not None and config.snapshot_every > 0 \
                and state.iter % config.snapshot_every == 0:
            snapshot_cb(state)
        if du_inf <= config.tol_pop:
            converged = True
            reason = "update below tolerance"
            break
        if config.adapt and config.n_adapt > 0 and state.iter % config.n_adapt == 0:
            state, measurements = adapt_state(state, measurements, config)
            mesh = state.mesh
            trace.append(_trace_row(state, tau))
    return PopResult(state=state, trace=trace, converged=converged,
                     reason=reason, measurements=measurements)
