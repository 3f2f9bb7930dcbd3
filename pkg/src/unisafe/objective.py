"""Strictly convex objective whose minimizer is the universal safe input.

For constraint parameters ``(a_i, b_i)`` the unscaled objective is

    J(k) = -sum_i (||b_i||^2 + ||k||^2) / (2 (a_i + b_i^T k)),

defined on the open polytope where every margin ``a_i + b_i^T k`` is
strictly negative.  Each term is nonnegative there and blows up as its
margin approaches zero, so J acts as its own barrier.  The scaled
variant replaces ``||k||^2`` by ``r ||k||^2`` and the weighted variant
multiplies term i by ``w_i > 0``; both keep strict convexity for r > 0.

Every derivative here is analytic, not autodiff: the gradient of term i
is ``-r k / d_i + (||b_i||^2 + r ||k||^2) b_i / (2 d_i^2)`` with
``d_i = a_i + b_i^T k``, and the Hessian of term i is ``-G_i(k) / d_i^3``
with

    G_i(k) = r d_i^2 I - r (k b_i^T + b_i k^T) d_i
             + (||b_i||^2 + r ||k||^2) b_i b_i^T,

which is positive definite on the polytope whenever r > 0.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError
from .params import ConstraintParams, ScaledParams

# Margins at or above this are treated as sitting on the boundary, where
# the objective is undefined; keeps 1/d^3 terms out of the rounding mud.
BOUNDARY_TOL = -1e-14


@dataclass(frozen=True)
class WeightVector:
    """Strictly positive per-constraint weights."""

    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if v.ndim != 1 or not np.all(np.isfinite(v)) or np.any(v <= 0.0):
            raise ValueError("weights must be a vector of finite positive numbers")
        object.__setattr__(self, "values", v)


class Evaluation(NamedTuple):
    value: float
    grad: np.ndarray | None
    hess: np.ndarray | None
    margins: np.ndarray


def _coerce(pq) -> tuple[np.ndarray, np.ndarray, float]:
    if isinstance(pq, ScaledParams):
        return pq.base.a, pq.base.b, pq.r
    if isinstance(pq, ConstraintParams):
        return pq.a, pq.b, 1.0
    raise TypeError(f"expected ConstraintParams or ScaledParams, got {type(pq).__name__}")


def _as_weights(w, n: int) -> np.ndarray:
    if w is None:
        return np.ones(n)
    if isinstance(w, WeightVector):
        v = w.values
    else:
        v = WeightVector(w).values
    if v.shape != (n,):
        raise ValueError(f"got {v.shape[0]} weights for {n} constraints")
    return v


def _check_input(k, m: int) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if k.shape != (m,):
        raise ValueError(f"k has shape {k.shape}, expected ({m},)")
    if not np.all(np.isfinite(k)):
        raise ValueError("k must be finite")
    return k


def evaluate(pq, k, w=None, order: int = 2) -> Evaluation:
    """Fused objective evaluation sharing one margin pass.

    order 0 returns just the value, 1 adds the gradient, 2 adds the
    Hessian.  Raises DomainError if any margin is at or above
    BOUNDARY_TOL.
    """
    a, b, r = _coerce(pq)
    k = _check_input(k, b.shape[1])
    wv = _as_weights(w, a.shape[0])

    d = a + b @ k
    worst = float(np.max(d))
    if worst >= BOUNDARY_TOL:
        raise DomainError(
            f"input is on or outside the admissible polytope (worst margin {worst:.3e})"
        )

    bsq = np.einsum("ij,ij->i", b, b)
    c = bsq + r * float(k @ k)
    value = float(-0.5 * np.sum(wv * c / d))

    grad = hess = None
    if order >= 1:
        inv_sum = float(np.sum(wv / d))
        grad = -r * inv_sum * k + b.T @ (wv * c / (2.0 * d * d))
    if order >= 2:
        s1 = b.T @ (wv / (d * d))
        hess = (
            -r * inv_sum * np.eye(b.shape[1])
            + r * (np.outer(k, s1) + np.outer(s1, k))
            + b.T @ (b * (-wv * c / d**3)[:, None])
        )
    return Evaluation(value, grad, hess, d)


def eval_J(p: ConstraintParams, k) -> float:
    """Unscaled objective value at k."""
    if not isinstance(p, ConstraintParams):
        raise TypeError("eval_J takes unscaled ConstraintParams; use eval_J_scaled for ScaledParams")
    return evaluate(p, k, order=0).value


def eval_J_scaled(q: ScaledParams, k) -> float:
    """Scaled objective value at k; at r = 1 this is eval_J on q.base."""
    if not isinstance(q, ScaledParams):
        raise TypeError("eval_J_scaled takes ScaledParams")
    return evaluate(q, k, order=0).value


def eval_J_weighted(p, w, k) -> float:
    """Weighted objective value at k; weights must be strictly positive."""
    return evaluate(p, k, w=w, order=0).value


def grad_J(pq, k, w=None) -> np.ndarray:
    """Analytic gradient at k for an unscaled or scaled instance."""
    return evaluate(pq, k, w=w, order=1).grad


def hess_J(pq, k, w=None) -> np.ndarray:
    """Analytic Hessian at k; exactly symmetric as computed."""
    return evaluate(pq, k, w=w, order=2).hess


def grad_raw(pq, k, w=None) -> np.ndarray:
    """Gradient formula without the domain check.

    Used inside adaptive integrators whose trial points may momentarily
    step outside the polytope; margins are clipped away from zero so the
    result stays finite and the step-size control can reject the trial.
    """
    a, b, r = _coerce(pq)
    k = np.asarray(k, dtype=float)
    wv = _as_weights(w, a.shape[0])
    d = a + b @ k
    d = np.where(np.abs(d) < 1e-300, -1e-300, d)
    bsq = np.einsum("ij,ij->i", b, b)
    c = bsq + r * float(k @ k)
    return -r * float(np.sum(wv / d)) * k + b.T @ (wv * c / (2.0 * d * d))


def hess_raw(pq, k, w=None) -> np.ndarray:
    """Hessian formula without the domain check; see grad_raw."""
    a, b, r = _coerce(pq)
    k = np.asarray(k, dtype=float)
    wv = _as_weights(w, a.shape[0])
    d = a + b @ k
    d = np.where(np.abs(d) < 1e-300, -1e-300, d)
    bsq = np.einsum("ij,ij->i", b, b)
    c = bsq + r * float(k @ k)
    s1 = b.T @ (wv / (d * d))
    return (
        -r * float(np.sum(wv / d)) * np.eye(b.shape[1])
        + r * (np.outer(k, s1) + np.outer(s1, k))
        + b.T @ (b * (-wv * c / d**3)[:, None])
    )
