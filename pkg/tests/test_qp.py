import itertools

import numpy as np
import pytest

from unisafe import (
    ConstraintParams,
    InfeasibleError,
    project_onto_polytope,
    project_with_state,
    solve_min_norm_qp,
)


def enumerate_projection(p, v, margin=0.0):
    """Brute-force oracle: try every candidate active set.

    Solves the equality-constrained projection for each subset of rows,
    then filters by primal feasibility and multiplier signs.  Exponential
    and only meant for tiny instances.
    """
    n, m = p.b.shape
    rhs_full = -p.a - margin
    best = None
    for size in range(n + 1):
        for subset in itertools.combinations(range(n), size):
            rows = list(subset)
            bw = p.b[rows]
            kkt = np.zeros((m + size, m + size))
            kkt[:m, :m] = np.eye(m)
            kkt[:m, m:] = bw.T
            kkt[m:, :m] = bw
            rhs = np.concatenate([v, rhs_full[rows]])
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            u, lam = sol[:m], sol[m:]
            if rows and np.max(np.abs(bw @ u - rhs_full[rows])) > 1e-9:
                continue  # equality system unsolvable for this subset
            if np.any(p.b @ u > rhs_full + 1e-9):
                continue
            if np.any(lam < -1e-9):
                continue
            cost = float(np.dot(u - v, u - v))
            if best is None or cost < best[0] - 1e-15:
                best = (cost, u)
    return None if best is None else best[1]


def random_feasible_instance(rng, n, m, allow_zero_rows=False):
    anchor = rng.normal(size=m)
    b = rng.uniform(-2, 2, (n, m))
    if allow_zero_rows and rng.random() < 0.3:
        b[rng.integers(0, n)] = 0.0
    slack = rng.uniform(0.0, 1.5, n)
    a = -slack - b @ anchor
    return ConstraintParams(a, b)


def test_min_norm_halfline():
    p = ConstraintParams(np.array([1.0]), np.array([[1.0]]))
    assert solve_min_norm_qp(p) == pytest.approx([-1.0])


def test_min_norm_interior_origin():
    p = ConstraintParams(np.array([-1.0, -1.0]), np.array([[1.0], [-1.0]]))
    assert solve_min_norm_qp(p) == pytest.approx([0.0])


def test_min_norm_halfspace_in_plane():
    p = ConstraintParams(np.array([1.0]), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(solve_min_norm_qp(p), [-1.0, 0.0], atol=1e-12)


def test_projection_identity_on_interior_points():
    p = ConstraintParams(np.array([-1.0, -1.0]), np.array([[1.0], [-1.0]]))
    v = np.array([0.25])
    out = project_onto_polytope(p, v)
    assert out is not v  # fresh array, same value
    np.testing.assert_array_equal(out, v)


def test_projection_onto_halfline():
    p = ConstraintParams(np.array([1.0]), np.array([[1.0]]))
    assert project_onto_polytope(p, np.zeros(1)) == pytest.approx([-1.0])


def test_projection_corner():
    p = ConstraintParams(np.array([0.0, 0.0]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(
        project_onto_polytope(p, np.array([1.0, 1.0])), [0.0, 0.0], atol=1e-12
    )


def test_projection_respects_margin():
    p = ConstraintParams(np.array([0.0]), np.array([[1.0]]))
    out = project_onto_polytope(p, np.array([5.0]), margin=0.5)
    assert out[0] == pytest.approx(-0.5)


def test_negative_margin_rejected():
    p = ConstraintParams(np.array([0.0]), np.array([[1.0]]))
    with pytest.raises(ValueError):
        project_onto_polytope(p, np.zeros(1), margin=-0.1)


def test_zero_row_dropped_when_vacuous():
    p = ConstraintParams(np.array([-1.0, 0.5]), np.array([[0.0], [1.0]]))
    out = project_onto_polytope(p, np.zeros(1))
    assert out[0] == pytest.approx(-0.5)


def test_zero_row_infeasible_when_impossible():
    p = ConstraintParams(np.array([1.0]), np.array([[0.0]]))
    with pytest.raises(InfeasibleError):
        project_onto_polytope(p, np.zeros(1))


def test_contradictory_system_raises():
    p = ConstraintParams(np.array([1.0, 1.0]), np.array([[1.0], [-1.0]]))
    with pytest.raises(InfeasibleError):
        solve_min_norm_qp(p)


def test_kkt_conditions_hold():
    rng = np.random.default_rng(21)
    for _ in range(150):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 4))
        p = random_feasible_instance(rng, n, m, allow_zero_rows=True)
        v = rng.normal(size=m) * 2
        u, state = project_with_state(p, v)
        resid = p.a + p.b @ u
        assert np.max(resid) <= 1e-9
        # stationarity and complementary slackness from the returned
        # multipliers
        grad = u - v
        for idx, lam in zip(state.working_set, state.multipliers):
            assert lam >= -1e-9
            assert abs(resid[idx]) <= 1e-8
            grad += lam * p.b[idx]
        assert np.linalg.norm(grad) <= 1e-8


def test_matches_enumeration_oracle():
    rng = np.random.default_rng(22)
    done = 0
    while done < 200:
        n = int(rng.integers(1, 4))
        m = int(rng.integers(1, 3))
        if rng.random() < 0.5:
            p = random_feasible_instance(rng, n, m)
        else:
            p = ConstraintParams(rng.uniform(-2, 2, n), rng.uniform(-2, 2, (n, m)))
        v = rng.normal(size=m) * 1.5
        expected = enumerate_projection(p, v)
        if expected is None:
            with pytest.raises(InfeasibleError):
                project_onto_polytope(p, v)
        else:
            got = project_onto_polytope(p, v)
            assert np.linalg.norm(got - expected) <= 1e-9
        done += 1


def test_min_norm_is_projection_of_origin():
    rng = np.random.default_rng(23)
    for _ in range(50):
        p = random_feasible_instance(rng, 3, 2)
        np.testing.assert_allclose(
            solve_min_norm_qp(p), project_onto_polytope(p, np.zeros(2)), atol=1e-12
        )


def test_projection_is_nonexpansive():
    rng = np.random.default_rng(24)
    for _ in range(100):
        p = random_feasible_instance(rng, 4, 3)
        v1 = rng.normal(size=3) * 3
        v2 = rng.normal(size=3) * 3
        p1 = project_onto_polytope(p, v1)
        p2 = project_onto_polytope(p, v2)
        assert np.linalg.norm(p1 - p2) <= np.linalg.norm(v1 - v2) + 1e-12


def test_projection_idempotent():
    rng = np.random.default_rng(25)
    for _ in range(50):
        p = random_feasible_instance(rng, 3, 2)
        v = rng.normal(size=2) * 3
        once = project_onto_polytope(p, v)
        twice = project_onto_polytope(p, once)
        assert np.linalg.norm(once - twice) <= 1e-9
