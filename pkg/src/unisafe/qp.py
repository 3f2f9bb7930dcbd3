"""Minimum-norm safe inputs and Euclidean projection onto the polytope.

Both operations are instances of one strictly convex QP,

    min ||u - v||^2   s.t.   a_i + margin + b_i^T u <= 0,

solved with a primal active-set method.  Problem sizes here are tiny
(N, m <= 10 or so), so each working-set change refactorizes the small
Gram system instead of bothering with incremental updates.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import InfeasibleError, UnisafeError
from .params import ConstraintParams, FeasibilityStatus, find_interior_point


@dataclass(frozen=True)
class ActiveSetState:
    """Final working set (original constraint indices) and its multipliers."""

    working_set: list[int] = field(default_factory=list)
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _equality_solve(bw: np.ndarray, dw: np.ndarray, v: np.ndarray):
    """Minimizer of ||u - v|| subject to bw @ u = dw, with multipliers."""
    gram = bw @ bw.T
    rhs = bw @ v - dw
    try:
        lam = cho_solve(cho_factor(gram), rhs)
    except (LinAlgError, ValueError):
        lam = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    return v - bw.T @ lam, lam


def project_with_state(
    p: ConstraintParams, v, margin: float = 0.0
) -> tuple[np.ndarray, ActiveSetState]:
    """Project v onto the polytope tightened by ``margin``, exposing the KKT data."""
    v = np.asarray(v, dtype=float)
    if v.shape != (p.input_dim,):
        raise ValueError(f"v has shape {v.shape}, expected ({p.input_dim},)")
    margin = float(margin)
    if not np.isfinite(margin) or margin < 0.0:
        raise ValueError("margin must be a nonnegative number")

    # Constraints in "b_i^T u <= rhs_i" form; zero rows carry no direction,
    # they are either vacuous or unsatisfiable outright.
    zero_rows = np.all(p.b == 0.0, axis=1)
    if np.any(zero_rows & (p.a > -margin)):
        bad = int(np.argmax(zero_rows & (p.a > -margin)))
        raise InfeasibleError(
            f"constraint {bad} has no input direction and offset {p.a[bad]} > {-margin}",
            max_margin=float(p.a[bad] + margin),
        )
    keep = np.flatnonzero(~zero_rows)
    if keep.size == 0:
        return v.copy(), ActiveSetState()

    b = p.b[keep]
    rhs = -p.a[keep] - margin
    tight = float(np.max(b @ v - rhs))
    if tight <= 0.0:
        # Already inside the tightened set; projection is the identity.
        return v.copy(), ActiveSetState()

    outcome = find_interior_point(ConstraintParams(p.a[keep] + margin, b))
    if outcome:
        u = outcome.certificate.interior_point.copy()
        working: list[int] = []
    elif outcome.status is FeasibilityStatus.INDETERMINATE and outcome.best_margin <= 1e-9:
        # Boundary-thin set (e.g. opposing half-spaces); start on its face.
        u = outcome.best_point.copy()
        working = [i for i in range(keep.size) if b[i] @ u - rhs[i] >= -1e-9]
    else:
        raise InfeasibleError(
            f"tightened constraint system is infeasible "
            f"(best worst-margin {outcome.best_margin:.3e})",
            max_margin=outcome.best_margin,
        )

    lam = np.zeros(0)
    for _ in range(50 * (keep.size + 2)):
        if working:
            u_eq, lam = _equality_solve(b[working], rhs[working], v)
        else:
            u_eq, lam = v.copy(), np.zeros(0)
        step = u_eq - u

        if float(np.linalg.norm(step)) <= 1e-12 * (1.0 + float(np.linalg.norm(u_eq))):
            if lam.size == 0 or float(np.min(lam)) >= -1e-10:
                state = ActiveSetState(
                    [int(keep[i]) for i in working], np.maximum(lam, 0.0)
                )
                return u_eq, state
            working.pop(int(np.argmin(lam)))
            continue

        # Step toward the equality minimizer, stopping at the first
        # blocking facet; ties go to the lowest constraint index.
        alpha = 1.0
        blocker = None
        for i in range(keep.size):
            if i in working:
                continue
            slope = float(b[i] @ step)
            if slope <= 1e-14:
                continue
            hit = (rhs[i] - float(b[i] @ u)) / slope
            if hit < alpha - 1e-14:
                alpha, blocker = max(hit, 0.0), i
        u = u + alpha * step
        if blocker is not None:
            working.append(blocker)
            working.sort()
    raise UnisafeError("active-set iteration did not terminate")


def project_onto_polytope(p: ConstraintParams, v, margin: float = 0.0) -> np.ndarray:
    """Euclidean projection of v onto ``{u : a_i + margin + b_i^T u <= 0}``."""
    return project_with_state(p, v, margin)[0]


def solve_min_norm_qp(p: ConstraintParams) -> np.ndarray:
    """Smallest-norm input satisfying every constraint non-strictly."""
    return project_with_state(p, np.zeros(p.input_dim), 0.0)[0]
