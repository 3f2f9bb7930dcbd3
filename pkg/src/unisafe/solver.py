"""Minimizers of the safe-control objective.

Two independent routes to the same point: a damped Newton method with a
fraction-to-boundary step cap (the production path), and adaptive
integration of the gradient flow ``k' = -grad J(k)`` (the route used to
label training data).  For a single scalar constraint the minimizer has
a closed form, kept here as a cross-check.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import InfeasibleError
from .objective import _coerce, evaluate, grad_raw, hess_raw
from .params import ConstraintParams, ScaledParams, find_interior_point
from .qp import project_onto_polytope


class SolveStatus(Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class SolveResult:
    k_star: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    status: SolveStatus


@dataclass(frozen=True)
class SolverOptions:
    grad_tol: float = 1e-10
    max_iter: int = 100
    armijo: float = 1e-4
    boundary_fraction: float = 0.99
    step_tol: float = 1e-13

    def __post_init__(self):
        if not self.grad_tol > 0.0:
            raise ValueError("grad_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0.0 < self.armijo < 1.0:
            raise ValueError("armijo must lie in (0, 1)")
        if not 0.0 < self.boundary_fraction < 1.0:
            raise ValueError("boundary_fraction must lie in (0, 1)")
        if not self.step_tol > 0.0:
            raise ValueError("step_tol must be positive")


# Newton systems with condition estimates beyond this fall back to a
# plain gradient step for the iteration.
_CONDITION_LIMIT = 1e12


def closed_form_1d(A: float, B: float) -> float:
    """Minimizer for a single scalar constraint ``A + B k < 0``.

    This is the classic damping-style formula
    ``k* = -(A + sqrt(A^2 + B^4)) / B`` for B != 0 and 0 for B = 0
    (which requires A < 0 for the constraint to be satisfiable at all).
    """
    A = float(A)
    B = float(B)
    if B == 0.0:
        if A >= 0.0:
            raise InfeasibleError(f"A + B k < 0 unsatisfiable with B = 0, A = {A}", max_margin=A)
        return 0.0
    root = math.hypot(A, B * B)
    if A < 0.0:
        # Algebraically equal form that avoids cancellation for A < 0.
        return B**3 / (A - root)
    return -(A + root) / B


def _base_params(pq) -> ConstraintParams:
    return pq.base if isinstance(pq, ScaledParams) else pq


def _degenerate(m: int) -> SolveResult:
    return SolveResult(np.full(m, np.nan), np.nan, np.nan, 0, SolveStatus.DEGENERATE)


def _is_degenerate(pq) -> bool:
    a, b, r = _coerce(pq)
    return r == 0.0 and np.linalg.matrix_rank(b) < b.shape[1]


def _initial_point(pq, warmstart) -> np.ndarray:
    """Strictly interior starting point, honoring a warmstart when given.

    A warmstart that violates (or grazes) any margin is replaced by its
    Euclidean projection onto a tightened polytope.  The tightening is
    row-relative (1e-3 of each row's coefficient scale): a fixed absolute
    inset underflows on rows with large coefficients, leaving the
    projected point on the true boundary.  If the tightened system is
    infeasible, or the projection still is not strictly interior, the
    cold-start search takes over.
    """
    base = _base_params(pq)
    if warmstart is not None:
        k = np.asarray(warmstart, dtype=float)
        if k.shape == (base.input_dim,) and np.all(np.isfinite(k)):
            row_scale = np.maximum(
                1.0, np.maximum(np.abs(base.a), np.linalg.norm(base.b, axis=1))
            )
            rel = (base.a + base.b @ k) / row_scale
            if float(np.max(rel)) < -1e-12:
                return k
            try:
                tight = ConstraintParams(base.a + 1e-3 * row_scale, base.b)
                cand = project_onto_polytope(tight, k)
                if float(np.max(base.a + base.b @ cand)) < 0.0:
                    return cand
            except InfeasibleError:
                pass
    outcome = find_interior_point(base)
    if not outcome:
        raise InfeasibleError(
            f"constraint system has no certified interior point "
            f"(best worst-margin {outcome.best_margin:.3e}, {outcome.status.value})",
            max_margin=outcome.best_margin,
        )
    return outcome.certificate.interior_point


def _max_step(d: np.ndarray, slopes: np.ndarray, fraction: float) -> float:
    """Largest step keeping every margin strictly negative, capped at 1.

    Along direction s the margin moves as d_i + alpha * slopes_i; the cap
    allows at most ``fraction`` of the distance to the nearest blocking
    facet.
    """
    blocking = slopes > 0.0
    if not np.any(blocking):
        return 1.0
    return min(1.0, fraction * float(np.min(-d[blocking] / slopes[blocking])))


def _line_search(pq, k, ev, direction, b, opts: SolverOptions):
    """Armijo backtracking from the fraction-to-boundary cap.

    Near the minimizer the objective differences fall below floating
    point resolution while the gradient is still informative, so once
    the predicted decrease is under the noise floor a step is accepted
    on gradient-norm decrease instead.  Returns the accepted point and
    its evaluation, or None on stall.
    """
    slope = float(ev.grad @ direction)
    if slope >= 0.0:
        return None
    grad_norm = float(np.linalg.norm(ev.grad))
    noise = 64.0 * np.finfo(float).eps * max(1.0, abs(ev.value))
    alpha = _max_step(ev.margins, b @ direction, opts.boundary_fraction)
    floor = 1e-16
    while alpha > floor:
        trial = k + alpha * direction
        try:
            trial_ev = evaluate(pq, trial, order=2)
        except Exception:
            trial_ev = None
        if trial_ev is not None:
            if trial_ev.value <= ev.value + opts.armijo * alpha * slope:
                return trial, trial_ev
            if (
                abs(opts.armijo * alpha * slope) <= noise
                and float(np.linalg.norm(trial_ev.grad)) < grad_norm
            ):
                return trial, trial_ev
        alpha *= 0.5
    return None


def solve_exact(pq, opts: SolverOptions | None = None, warmstart=None) -> SolveResult:
    """Damped Newton minimization of the (scaled or unscaled) objective.

    Every iterate stays strictly inside the polytope thanks to the
    fraction-to-boundary cap, so all margins of a converged result are
    strictly negative by construction.  Ill-conditioned Newton systems
    degrade to gradient steps rather than failing.
    """
    opts = opts or SolverOptions()
    a, b, r = _coerce(pq)
    m = b.shape[1]
    if _is_degenerate(pq):
        return _degenerate(m)

    k = _initial_point(pq, warmstart)
    ev = evaluate(pq, k, order=2)
    iterations = 0

    if warmstart is None:
        # Short centering pass: a few gradient steps pull the raw interior
        # point away from whatever facet the feasibility search grazed.
        for _ in range(5):
            if float(np.linalg.norm(ev.grad)) <= opts.grad_tol:
                break
            accepted = _line_search(pq, k, ev, -ev.grad, b, opts)
            if accepted is None:
                break
            k, ev = accepted

    while iterations < opts.max_iter:
        grad_small = float(np.linalg.norm(ev.grad)) <= opts.grad_tol

        newton_dir = None
        cond = np.linalg.cond(ev.hess)
        if np.isfinite(cond) and cond <= _CONDITION_LIMIT:
            try:
                newton_dir = cho_solve(cho_factor(ev.hess), -ev.grad)
            except (LinAlgError, ValueError):
                newton_dir = None
        if newton_dir is not None and float(ev.grad @ newton_dir) >= 0.0:
            newton_dir = None

        if grad_small:
            # Polish phase: the gradient test is met, but when curvature is
            # small that alone can leave the iterate measurably off the
            # minimizer.  The Newton step length estimates the remaining
            # positional error directly, so keep stepping until it hits the
            # floating-point floor (quadratic convergence makes this one or
            # two extra iterations at most).
            if newton_dir is None:
                break
            if float(np.linalg.norm(newton_dir)) <= opts.step_tol * (
                1.0 + float(np.linalg.norm(k))
            ):
                break

        accepted = None
        if newton_dir is not None:
            accepted = _line_search(pq, k, ev, newton_dir, b, opts)
        if accepted is None and not grad_small:
            accepted = _line_search(pq, k, ev, -ev.grad, b, opts)
        iterations += 1
        if accepted is None:
            break
        k, ev = accepted

    grad_norm = float(np.linalg.norm(ev.grad))
    status = SolveStatus.CONVERGED if grad_norm <= opts.grad_tol else SolveStatus.MAX_ITER
    return SolveResult(k, ev.value, grad_norm, iterations, status)


def solve_gradient_flow(pq, tol: float = 1e-6, warmstart=None, method: str = "LSODA") -> SolveResult:
    """Integrate ``k' = -grad J(k)`` until the gradient norm reaches tol.

    Adaptive integration with a terminal event on the gradient norm.
    The default integrator is LSODA with the analytic Hessian as
    Jacobian: the flow becomes arbitrarily stiff for small curvature
    weights r (slow convergence mode under a fast contraction mode), and
    an explicit Runge-Kutta pair has no bounded-step answer there.  Pass
    method="RK45" for the plain explicit pair on mild instances.  The
    flow keeps the objective decreasing, hence stays inside the
    polytope; trial points that overshoot the boundary are rejected by
    the step-size control, never evaluated for real.
    """
    a, b, r = _coerce(pq)
    m = b.shape[1]
    if _is_degenerate(pq):
        return _degenerate(m)

    k0 = _initial_point(pq, warmstart)

    def rhs(_t, k):
        return -grad_raw(pq, k)

    # Stop once both the gradient norm and the Newton-step estimate of
    # the distance to the minimizer sit two decades inside the requested
    # tolerance.  A gradient-norm test alone localizes the minimizer to
    # (achieved norm) / (smallest Hessian eigenvalue), which degrades
    # badly on ill-conditioned instances, while the extra integration
    # time here is only logarithmic (the tail decay is exponential).
    def small_grad(_t, k):
        g = grad_raw(pq, k)
        gn = float(np.linalg.norm(g))
        try:
            step = float(np.linalg.norm(np.linalg.solve(hess_raw(pq, k), g)))
        except np.linalg.LinAlgError:
            step = gn
        return max(gn, step) - 0.01 * tol

    small_grad.terminal = True
    small_grad.direction = -1.0

    if small_grad(0.0, k0) <= 0.0:
        ev = evaluate(pq, k0, order=1)
        return SolveResult(k0, ev.value, float(np.linalg.norm(ev.grad)), 0, SolveStatus.CONVERGED)

    kwargs = {}
    if method == "LSODA":
        kwargs["jac"] = lambda _t, k: -hess_raw(pq, k)
    sol = solve_ivp(
        rhs,
        (0.0, 1e7),
        k0,
        method=method,
        events=small_grad,
        rtol=1e-9,
        atol=1e-12,
        dense_output=False,
        **kwargs,
    )
    if sol.t_events[0].size > 0:
        k = sol.y_events[0][-1]
    else:
        k = sol.y[:, -1]
    ev = evaluate(pq, k, order=1)
    grad_norm = float(np.linalg.norm(ev.grad))
    steps = max(len(sol.t) - 1, 1)
    status = SolveStatus.CONVERGED if grad_norm <= tol else SolveStatus.MAX_ITER
    return SolveResult(k, ev.value, grad_norm, steps, status)


def u_star(problem, x, opts: SolverOptions | None = None, warmstart=None) -> np.ndarray:
    """Evaluate the pointwise-optimal safe input at state x.

    Builds the constraint parameters through the problem's constraint
    map and minimizes the objective.  Infeasibility errors are annotated
    with the offending state.
    """
    p = problem.constraint_map(np.asarray(x, dtype=float))
    try:
        result = solve_exact(p, opts=opts, warmstart=warmstart)
    except InfeasibleError as err:
        err.state = np.asarray(x, dtype=float)
        raise
    return result.k_star
