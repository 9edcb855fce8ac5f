"""LP layer checked against brute-force vertex enumeration.

In dimension <= 4 every bounded polytope can be enumerated exactly: try all
d-subsets of constraint rows, solve the square systems, keep the feasible
intersection points.  The maximum of c.x over that vertex list is an
independent oracle for the solvers.
"""

import itertools

import numpy as np
import pytest

from smident.errors import ConfigError
from smident.polytope_lp import (
    OMEGA_BOX,
    BatchResult,
    Polytope,
    intersect,
    is_empty,
    solve_lp,
    solve_lp_batch,
)


def _all_vertices(poly, tol=1e-8):
    """Every vertex of a bounded polytope by exhaustive basis enumeration."""
    d = poly.dim
    G = np.vstack([poly.a, np.eye(d), -np.eye(d)])
    h = np.concatenate([poly.b, poly.ub, -poly.lb])
    verts = []
    for idx in itertools.combinations(range(G.shape[0]), d):
        M = G[list(idx)]
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, h[list(idx)])
        if np.all(G @ x - h <= tol * (1.0 + np.abs(h))):
            verts.append(x)
    return verts


def _oracle_max(c, poly):
    verts = _all_vertices(poly)
    if not verts:
        return None
    return max(float(c @ v) for v in verts)


def _random_poly(rng, d=None, empty_chance=0.0):
    d = d if d is not None else int(rng.integers(1, 5))
    m = int(rng.integers(1, 3 * d + 2))
    a = rng.normal(size=(m, d))
    x0 = rng.uniform(-1.0, 1.0, size=d)
    b = a @ x0 + rng.uniform(0.05, 1.5, size=m)
    half = rng.uniform(1.5, 4.0, size=d)
    if rng.uniform() < empty_chance:
        # cut away the interior point with an opposing pair of rows
        g = rng.normal(size=d)
        a = np.vstack([a, g, -g])
        b = np.concatenate([b, [g @ x0 - 1.0, -(g @ x0) - 1.0]])
    return Polytope(a=a, b=b, lb=x0 - half, ub=x0 + half)


# -- construction and basic geometry --------------------------------------


def test_polytope_validation():
    with pytest.raises(ConfigError):
        Polytope(a=np.zeros(3), b=np.zeros(1), lb=np.zeros(3), ub=np.ones(3))
    with pytest.raises(ConfigError):
        Polytope(a=np.zeros((2, 3)), b=np.zeros(1), lb=np.zeros(3), ub=np.ones(3))
    with pytest.raises(ConfigError):
        Polytope(a=np.zeros((2, 3)), b=np.zeros(2), lb=np.zeros(2), ub=np.ones(3))
    box = Polytope.box([-1, -1], [1, 1])
    assert box.dim == 2 and box.n_rows == 0
    p = Polytope.from_rows([[1.0, 0.0]], [0.5])
    assert p.lb[0] == -OMEGA_BOX and p.ub[1] == OMEGA_BOX


def test_contains_and_violation():
    p = Polytope.from_rows([[1.0, 1.0]], [1.0], lb=[-2, -2], ub=[2, 2])
    assert p.contains([0.0, 0.0])
    assert p.contains([0.5, 0.5])
    assert not p.contains([1.0, 1.0])
    assert p.violation([0.0, 0.0]) < 0
    assert p.violation([1.0, 1.0]) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ConfigError):
        p.contains([0.0, 0.0, 0.0])


def test_intersect_stacks_rows_and_tightens_bounds():
    p = Polytope.from_rows([[1.0, 0.0]], [1.0], lb=[-5, -5], ub=[5, 5])
    q = Polytope.from_rows([[0.0, 1.0]], [2.0], lb=[-3, -8], ub=[8, 3])
    r = intersect(p, q)
    assert r.n_rows == 2
    np.testing.assert_allclose(r.lb, [-3, -5])
    np.testing.assert_allclose(r.ub, [5, 3])
    with pytest.raises(ConfigError):
        intersect(p, Polytope.box([-1], [1]))


def test_content_hash_tracks_every_field():
    p = _random_poly(np.random.default_rng(0), d=3)
    q = Polytope(a=p.a, b=p.b, lb=p.lb, ub=p.ub)
    assert p.content_hash() == q.content_hash()
    r = Polytope(a=p.a, b=p.b + 1e-9, lb=p.lb, ub=p.ub)
    assert p.content_hash() != r.content_hash()


# -- solve_lp against the enumeration oracle -------------------------------


def test_solve_lp_matches_vertex_enumeration(rng):
    solved = 0
    for _ in range(60):
        poly = _random_poly(rng)
        c = rng.normal(size=poly.dim)
        out = solve_lp(c, poly, sense="max")
        ref = _oracle_max(c, poly)
        assert ref is not None and out.status == "optimal"
        assert out.value == pytest.approx(ref, abs=1e-6, rel=1e-6)
        assert poly.contains(out.x, tol=1e-6)
        solved += 1
    assert solved == 60


def test_solve_lp_min_sense(rng):
    poly = _random_poly(rng, d=3)
    c = rng.normal(size=3)
    lo = solve_lp(c, poly, sense="min")
    hi = solve_lp(-c, poly, sense="max")
    assert lo.value == pytest.approx(-hi.value, abs=1e-8)
    with pytest.raises(ConfigError):
        solve_lp(c, poly, sense="argmax")


def test_solve_lp_infeasible_and_empty_bounds():
    p = Polytope.from_rows([[1.0], [-1.0]], [0.0, -1.0], lb=[-5], ub=[5])
    assert solve_lp([1.0], p).status == "infeasible"
    q = Polytope.box([1.0, 0.0], [0.0, 1.0])
    out = solve_lp([1.0, 1.0], q)
    assert out.status == "infeasible" and out.engine == "bounds"


def test_solve_lp_unbounded_direction():
    p = Polytope.from_rows([[1.0, 0.0]], [1.0],
                           lb=[-np.inf, -np.inf], ub=[np.inf, np.inf])
    assert solve_lp([0.0, 1.0], p).status == "unbounded"


def test_engine_hint_agrees_with_walker(rng):
    poly = _random_poly(rng, d=4)
    c = rng.normal(size=4)
    a = solve_lp(c, poly)
    b = solve_lp(c, poly, engine="highs")
    assert b.engine == "highs"
    assert a.value == pytest.approx(b.value, abs=1e-7)


def test_degenerate_vertex(rng):
    # many rows through one corner; walker has to cope with ties
    d = 3
    corner = np.ones(d)
    a = rng.normal(size=(12, d))
    a = np.abs(a)          # all normals point into the positive orthant
    b = a @ corner
    poly = Polytope(a=a, b=b, lb=-np.ones(d), ub=2 * np.ones(d))
    out = solve_lp(np.ones(d), poly)
    assert out.status == "optimal"
    assert out.value == pytest.approx(float(d), abs=1e-7)


# -- oversized boxes and the clamp route ----------------------------------


def test_clamp_certified_interior_optimum(rng):
    # rows pin the optimum far inside the clamp; engine result must agree
    # with a direct HiGHS solve on the original polytope
    d = 3
    a = np.vstack([np.eye(d), -np.eye(d)])
    b = np.concatenate([rng.uniform(1, 4, d), rng.uniform(1, 4, d)])
    poly = Polytope(a=a, b=b, lb=np.full(d, -OMEGA_BOX), ub=np.full(d, OMEGA_BOX))
    c = rng.normal(size=d)
    out = solve_lp(c, poly)
    ref = solve_lp(c, poly, engine="highs")
    assert out.status == "optimal"
    assert out.value == pytest.approx(ref.value, abs=1e-7, rel=1e-9)


def test_clamp_touching_optimum_reroutes():
    # nothing bounds x1 above except the huge box: the true optimum sits at
    # OMEGA_BOX, which the clamped walk cannot certify
    poly = Polytope.from_rows([[1.0, 1.0]], [1e12])
    out = solve_lp([0.0, 1.0], poly)
    assert out.status == "optimal" and out.engine == "highs"
    assert out.value == pytest.approx(OMEGA_BOX, rel=1e-9)


# -- batched support functions ---------------------------------------------


def test_batch_matches_sequential(rng):
    for _ in range(10):
        poly = _random_poly(rng)
        C = rng.normal(size=(25, poly.dim))
        batch = solve_lp_batch(C, poly)
        assert batch.status == "optimal"
        for i in range(C.shape[0]):
            single = solve_lp(C[i], poly)
            assert batch.values[i] == pytest.approx(single.value, abs=1e-6, rel=1e-8)
            assert poly.contains(batch.points[i], tol=1e-6)


def test_batch_min_sense(rng):
    poly = _random_poly(rng, d=2)
    C = rng.normal(size=(7, 2))
    mn = solve_lp_batch(C, poly, sense="min")
    mx = solve_lp_batch(-C, poly, sense="max")
    np.testing.assert_allclose(mn.values, -mx.values, atol=1e-8)


def test_batch_edge_cases():
    poly = Polytope.box([-1.0], [1.0])
    empty = solve_lp_batch(np.zeros((0, 1)), poly)
    assert empty.status == "optimal" and empty.values.size == 0
    bad = Polytope.from_rows([[1.0], [-1.0]], [0.0, -1.0], lb=[-5], ub=[5])
    assert solve_lp_batch(np.ones((3, 1)), bad).status == "infeasible"
    with pytest.raises(ConfigError):
        solve_lp_batch(np.ones((2, 3)), poly)


def test_batch_on_oversized_box(rng):
    # same clamp-and-certify path as solve_lp, exercised in bulk
    a = np.vstack([np.eye(2), -np.eye(2), rng.normal(size=(4, 2))])
    x0 = np.zeros(2)
    b = np.concatenate([np.full(4, 2.0), a[4:] @ x0 + rng.uniform(0.5, 2.0, 4)])
    poly = Polytope(a=a, b=b, lb=np.full(2, -OMEGA_BOX), ub=np.full(2, OMEGA_BOX))
    C = rng.normal(size=(40, 2))
    batch = solve_lp_batch(C, poly)
    assert batch.status == "optimal"
    for i in range(40):
        ref = solve_lp(C[i], poly, engine="highs")
        assert batch.values[i] == pytest.approx(ref.value, abs=1e-6, rel=1e-8)


# -- emptiness --------------------------------------------------------------


def test_is_empty(rng):
    assert is_empty(Polytope.box([2.0], [1.0]))
    assert not is_empty(Polytope.box([-1.0], [1.0]))
    for _ in range(20):
        poly = _random_poly(rng, empty_chance=1.0)
        assert is_empty(poly)
        assert _oracle_max(np.zeros(poly.dim), poly) is None
    for _ in range(20):
        poly = _random_poly(rng)
        assert not is_empty(poly)
